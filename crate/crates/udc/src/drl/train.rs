//! Stage-2 training: both branches are encoded into the shared code space,
//! calibrated, decoded, and scored under the combined objective while the
//! codebook follows by EMA; afterwards the trained state maps every disease
//! to a replacement embedding row.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{entries_to_params, load_checkpoint, params_to_entries, save_checkpoint};
use crate::drl::calibrate::ConditionCalibrator;
use crate::drl::distill::{codebook_ema_update, DistillState, EmaBatchItem, Normalizer};
use crate::drl::loss::{
    commitment_loss, contrastive_losses, synthetic_negative, target_representation, ContrastiveBatch,
    LossBreakdown,
};
use crate::drl::quantizer::{quantize_residual, Codebook, QuantizationResult};
use crate::drl::{DrlConfig, EmaZSource};
use crate::ehr::{cooccurrence_context, extract_targets, EntityClass, PatientRecord, RaritySplit, Task};
use crate::error::{Result, UdcError};
use crate::numerics::graph::{Graph, Val};
use crate::numerics::nn::{xavier, Activation, Mlp};
use crate::numerics::optim::AdamW;
use crate::numerics::{cosine, Parameter, Tensor};
use crate::rng::sub_rng;
use crate::textemb::TextEmbeddings;

/// All learned state of the alignment stage. Everything except the codebook
/// and its EMA accumulators trains by gradient; those two move only through
/// `codebook_ema_update`.
pub struct DrlModel {
    pub config: DrlConfig,
    pub phi_co: Mlp,
    pub phi_te: Mlp,
    pub psi_co: Mlp,
    pub psi_te: Mlp,
    pub calib_co: ConditionCalibrator,
    pub calib_te: ConditionCalibrator,
    /// Bilinear matrix of the contrastive head.
    pub w_con: Parameter,
    pub codebook: Codebook,
    pub distill: DistillState,
}

impl DrlModel {
    pub fn new(co_dim: usize, te_dim: usize, config: DrlConfig) -> Result<Self> {
        config.validate()?;
        for (label, width) in [("collaborative", co_dim), ("text", te_dim)] {
            if width == 0 || width % config.heads != 0 {
                return Err(UdcError::Config(format!(
                    "{} embedding width {} is not divisible by {} attention heads",
                    label, width, config.heads
                )));
            }
        }
        let dim = config.dim;
        let mut rng = sub_rng(config.seed, "drl/init");
        let phi_co = Mlp::new("drl/phi_co", &[co_dim, 2 * dim, dim], Activation::Gelu, &mut rng)?;
        let phi_te = Mlp::new("drl/phi_te", &[te_dim, 2 * dim, dim], Activation::Gelu, &mut rng)?;
        let psi_co = Mlp::new("drl/psi_co", &[dim, 2 * dim, co_dim], Activation::Gelu, &mut rng)?;
        let psi_te = Mlp::new("drl/psi_te", &[dim, 2 * dim, te_dim], Activation::Gelu, &mut rng)?;
        let calib_co = ConditionCalibrator::new("drl/calib_co", co_dim, dim, config.heads, &mut rng);
        let calib_te = ConditionCalibrator::new("drl/calib_te", te_dim, dim, config.heads, &mut rng);
        let w_con = Parameter::new("drl/w_con", xavier(&mut rng, dim, dim));
        let codebook = Codebook::new(config.levels, config.codes_per_level, dim);
        let distill = DistillState::new(config.levels, config.codes_per_level, dim, config.ema_normalizer);
        Ok(DrlModel {
            config,
            phi_co,
            phi_te,
            psi_co,
            psi_te,
            calib_co,
            calib_te,
            w_con,
            codebook,
            distill,
        })
    }

    /// Gradient-trained parameters; codebook state is deliberately absent.
    pub fn params(&self) -> Vec<Parameter> {
        let mut out = self.phi_co.params();
        out.extend(self.phi_te.params());
        out.extend(self.psi_co.params());
        out.extend(self.psi_te.params());
        out.extend(self.calib_co.params());
        out.extend(self.calib_te.params());
        out.push(self.w_con.clone());
        out
    }

    pub fn calibrations(&self) -> u64 {
        self.calib_co.calibrations() + self.calib_te.calibrations()
    }
}

/// Borrowed view of everything stage 2 reads: frozen stage-1 embeddings,
/// frozen text embeddings, the corpus, and the rarity partition.
pub struct DrlData<'a> {
    pub e_d: &'a Tensor,
    pub e_p: &'a Tensor,
    pub e_m: &'a Tensor,
    pub text: &'a TextEmbeddings,
    pub records: &'a [PatientRecord],
    pub split: &'a RaritySplit,
    pub task: Task,
}

/// One training example: a common disease at one visit occurrence, with the
/// visit's context sets and the next visit's targets.
#[derive(Debug, Clone)]
pub struct DrlSample {
    pub disease: usize,
    /// (procedure ids, medication ids) of the containing visit.
    pub ctx: (Vec<usize>, Vec<usize>),
    pub targets: Vec<usize>,
    pub synthetic: Vec<usize>,
}

/// Per-sample byproducts the EMA update and the epoch metrics consume.
struct SampleArtifact {
    disease: usize,
    q_co: QuantizationResult,
    q_te: QuantizationResult,
    z_co_ema: Vec<f64>,
    z_te_ema: Vec<f64>,
    enc_co: Vec<f64>,
    enc_te: Vec<f64>,
}

fn maybe_rows(g: &mut Graph, table: &Tensor, ids: &[usize]) -> Result<Option<Val>> {
    if ids.is_empty() {
        return Ok(None);
    }
    let cols = table.cols();
    let mut data = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        if id >= table.rows() {
            return Err(UdcError::Contract(format!(
                "context id {} outside the {}-row table",
                id,
                table.rows()
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Some(g.leaf(&Tensor::matrix(ids.len(), cols, data)?)))
}

fn target_tables<'a>(data: &'a DrlData) -> Result<(&'a Tensor, &'a Tensor)> {
    match data.task.target_class() {
        EntityClass::Diagnosis => Ok((data.e_d, data.text.table(EntityClass::Diagnosis))),
        EntityClass::Medication => Ok((data.e_m, data.text.table(EntityClass::Medication))),
        EntityClass::Procedure => Err(UdcError::Contract("procedures are never prediction targets".into())),
    }
}

fn mean_of(g: &mut Graph, parts: &[Val]) -> Val {
    let sum = g.add_many(parts);
    g.scale(sum, 1.0 / parts.len() as f64)
}

/// Forward pass over one batch. With `quantize` false the code lookup is
/// replaced by the identity map and the commitment term is dropped, leaving
/// exactly the loss surface on which finite-difference gradient checks are
/// meaningful.
fn batch_forward(
    model: &DrlModel,
    g: &mut Graph,
    data: &DrlData,
    samples: &[DrlSample],
    quantize: bool,
) -> Result<(Val, LossBreakdown, Vec<SampleArtifact>)> {
    if samples.is_empty() {
        return Err(UdcError::Contract("forward pass over an empty batch".into()));
    }
    let cfg = &model.config;
    let text_d = data.text.table(EntityClass::Diagnosis);
    let text_p = data.text.table(EntityClass::Procedure);
    let text_m = data.text.table(EntityClass::Medication);
    let (co_targets, te_targets) = target_tables(data)?;

    let mut recon_co_parts = Vec::with_capacity(samples.len());
    let mut recon_te_parts = Vec::with_capacity(samples.len());
    let mut com_parts = Vec::with_capacity(samples.len());
    let mut artifacts = Vec::new();
    let mut batch = ContrastiveBatch {
        z: Vec::new(),
        z_te: Vec::new(),
        s: Vec::new(),
        s_te: Vec::new(),
        s_syn: Vec::new(),
        s_te_syn: Vec::new(),
    };

    for sample in samples {
        let d = sample.disease;
        if d >= data.e_d.rows() || d >= text_d.rows() {
            return Err(UdcError::Contract(format!(
                "disease id {} outside the embedding tables ({} collaborative, {} text rows)",
                d,
                data.e_d.rows(),
                text_d.rows()
            )));
        }
        // Entity rows enter as leaves: stage 2 never trains the tables.
        let e_row = g.leaf_row(data.e_d.row(d));
        let t_row = g.leaf_row(text_d.row(d));
        let enc_co = model.phi_co.forward(g, e_row)?;
        let enc_te = model.phi_te.forward(g, t_row)?;

        let (z_co, z_te, q_pair) = if quantize {
            let q_co = quantize_residual(g.data(enc_co), &model.codebook)?;
            let q_te = quantize_residual(g.data(enc_te), &model.codebook)?;
            let zt_co = Tensor::vector(q_co.z.clone());
            let zt_te = Tensor::vector(q_te.z.clone());
            let z_co = g.straight_through(enc_co, &zt_co);
            let z_te = g.straight_through(enc_te, &zt_te);
            (z_co, z_te, Some((q_co, q_te)))
        } else {
            (enc_co, enc_te, None)
        };

        // Commitment compares encoder outputs against the pre-calibration
        // quantized vectors. With quantization off the term is dropped: its
        // targets are stop-gradient snapshots of the encoders themselves,
        // which finite differences cannot represent (the snapshots move with
        // the parameters while the analytic gradient treats them as fixed).
        // The commitment gradient has its own analytic check in the loss
        // tests.
        com_parts.push(match &q_pair {
            Some((qc, qt)) => {
                let commit_co = Tensor::vector(qc.z.clone());
                let commit_te = Tensor::vector(qt.z.clone());
                commitment_loss(g, enc_co, enc_te, &commit_co, &commit_te, cfg.alpha)
            }
            None => g.leaf(&Tensor::zeros(1, 1)),
        });

        let (z_co_cal, z_te_cal) = if cfg.flags.nco {
            (z_co, z_te)
        } else {
            let proc_co = maybe_rows(g, data.e_p, &sample.ctx.0)?;
            let med_co = maybe_rows(g, data.e_m, &sample.ctx.1)?;
            let f_co = model.calib_co.condition_vector(g, proc_co, med_co)?;
            let zc = model.calib_co.calibrate(g, z_co, f_co)?;
            let proc_te = maybe_rows(g, text_p, &sample.ctx.0)?;
            let med_te = maybe_rows(g, text_m, &sample.ctx.1)?;
            let f_te = model.calib_te.condition_vector(g, proc_te, med_te)?;
            let zt = model.calib_te.calibrate(g, z_te, f_te)?;
            (zc, zt)
        };

        let rec_co = model.psi_co.forward(g, z_co_cal)?;
        let rec_te = model.psi_te.forward(g, z_te_cal)?;
        recon_co_parts.push(g.sq_dist(rec_co, e_row));
        recon_te_parts.push(g.sq_dist(rec_te, t_row));

        if !cfg.flags.nt {
            batch.s.push(target_representation(g, &model.phi_co, co_targets, &sample.targets)?);
            batch.s_te.push(target_representation(g, &model.phi_te, te_targets, &sample.targets)?);
            batch.s_syn.push(target_representation(g, &model.phi_co, co_targets, &sample.synthetic)?);
            batch
                .s_te_syn
                .push(target_representation(g, &model.phi_te, te_targets, &sample.synthetic)?);
        }
        batch.z.push(z_co_cal);
        batch.z_te.push(z_te_cal);

        if let Some((q_co, q_te)) = q_pair {
            let (z_co_ema, z_te_ema) = match cfg.ema_z_source {
                EmaZSource::Pre => (q_co.z.clone(), q_te.z.clone()),
                EmaZSource::Post => (g.data(z_co_cal).to_vec(), g.data(z_te_cal).to_vec()),
            };
            artifacts.push(SampleArtifact {
                disease: d,
                enc_co: g.data(enc_co).to_vec(),
                enc_te: g.data(enc_te).to_vec(),
                q_co,
                q_te,
                z_co_ema,
                z_te_ema,
            });
        }
    }

    let recon_co = mean_of(g, &recon_co_parts);
    let recon_te = mean_of(g, &recon_te_parts);
    let com = mean_of(g, &com_parts);
    let con = contrastive_losses(g, &batch, &model.w_con, &cfg.flags, cfg.include_positive_in_denominator)?;
    let total = g.add_many(&[
        recon_co,
        recon_te,
        con.intra_co,
        con.inter_co,
        con.intra_te,
        con.inter_te,
        com,
    ]);
    let breakdown = LossBreakdown {
        recon_co: g.scalar(recon_co),
        recon_te: g.scalar(recon_te),
        con_intra_co: g.scalar(con.intra_co),
        con_inter_co: g.scalar(con.inter_co),
        con_intra_te: g.scalar(con.intra_te),
        con_inter_te: g.scalar(con.inter_te),
        com: g.scalar(com),
        total: g.scalar(total),
    };
    if !breakdown.total.is_finite() {
        return Err(UdcError::NonFinite(format!(
            "alignment loss is {} over a {}-sample batch",
            breakdown.total,
            samples.len()
        )));
    }
    Ok((total, breakdown, artifacts))
}

/// Full objective on one batch: reconstruction for both branches, the four
/// contrastive terms, and the commitment penalty.
pub fn total_loss(
    model: &DrlModel,
    g: &mut Graph,
    data: &DrlData,
    samples: &[DrlSample],
) -> Result<(Val, LossBreakdown)> {
    let (v, b, _) = batch_forward(model, g, data, samples, true)?;
    Ok((v, b))
}

/// Same objective with quantization treated as the identity map, for
/// gradient verification against finite differences.
pub fn total_loss_unquantized(
    model: &DrlModel,
    g: &mut Graph,
    data: &DrlData,
    samples: &[DrlSample],
) -> Result<(Val, LossBreakdown)> {
    let (v, b, _) = batch_forward(model, g, data, samples, false)?;
    Ok((v, b))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DrlEpochLog {
    pub epoch: usize,
    pub recon_co: f64,
    pub recon_te: f64,
    pub con_intra_co: f64,
    pub con_inter_co: f64,
    pub con_intra_te: f64,
    pub con_inter_te: f64,
    pub com: f64,
    pub total: f64,
    /// Per level: fraction of codes assigned at least once by either branch.
    pub utilization: Vec<f64>,
    /// Mean cosine between the two branches' quantized code sums.
    pub cosine_quantized: f64,
    /// Mean cosine between the raw encoder outputs.
    pub cosine_encoder: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DrlTrainLog {
    pub epochs: Vec<DrlEpochLog>,
    /// Common diseases with no usable occurrence, left out of training.
    pub skipped_diseases: Vec<usize>,
    pub trained_diseases: usize,
    pub calibrations: u64,
}

/// Index of usable occurrences per common disease: visit positions whose
/// successor visit carries at least one target of the task's class.
fn occurrence_index(
    data: &DrlData,
    class_size: usize,
) -> Result<(BTreeMap<usize, Vec<(usize, usize)>>, Vec<usize>)> {
    let mut occurrences = BTreeMap::new();
    let mut skipped = Vec::new();
    for &d in &data.split.common {
        let mut occ = Vec::new();
        for (ri, rec) in data.records.iter().enumerate() {
            for (vi, visit) in rec.visits.iter().enumerate() {
                if vi + 1 >= rec.visits.len() || visit.d.binary_search(&d).is_err() {
                    continue;
                }
                let targets = extract_targets(rec, vi + 1, data.task)?;
                if targets.is_empty() || targets.len() >= class_size {
                    continue;
                }
                occ.push((ri, vi));
            }
        }
        if occ.is_empty() {
            skipped.push(d);
        } else {
            occurrences.insert(d, occ);
        }
    }
    Ok((occurrences, skipped))
}

/// Seeds the codebook from the trainable diseases' encoder outputs, both
/// branches pooled. Each level takes a fresh permutation of the pool so
/// codes stay distinct as long as the pool is large enough; only the
/// overflow slots fall back to draws with replacement. Distinct seeds
/// matter: duplicated codes can never win a nearest-neighbor tie and would
/// cap utilization from the start.
fn init_codebook(model: &mut DrlModel, data: &DrlData, trainable: &[usize]) -> Result<()> {
    let text_d = data.text.table(EntityClass::Diagnosis);
    let mut g = Graph::new();
    let mut pool: Vec<Vec<f64>> = Vec::new();
    for &d in trainable {
        let e_row = g.leaf_row(data.e_d.row(d));
        let t_row = g.leaf_row(text_d.row(d));
        let enc_co = model.phi_co.forward(&mut g, e_row)?;
        let enc_te = model.phi_te.forward(&mut g, t_row)?;
        pool.push(g.data(enc_co).to_vec());
        pool.push(g.data(enc_te).to_vec());
    }
    let mut rng = sub_rng(model.config.seed, "drl/codebook-init");
    for l in 0..model.config.levels {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        for i in 0..model.config.codes_per_level {
            let pick = match order.get(i) {
                Some(&p) => &pool[p],
                None => &pool[rng.random_range(0..pool.len())],
            };
            model.codebook.set_code(l, i, pick);
        }
    }
    model.distill.sync_with(&model.codebook);
    for v in pool {
        model.distill.remember(v);
    }
    Ok(())
}

/// Trains the alignment stage on common diseases only. Entity tables stay
/// frozen by construction (they enter graphs as leaves); each epoch samples
/// one fresh visit occurrence per disease.
pub fn train_drl(model: &mut DrlModel, data: &DrlData) -> Result<DrlTrainLog> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if data.split.common.is_empty() {
        return Err(UdcError::Config("no common diseases to train on: the rarity split came up empty".into()));
    }
    let (co_targets, _) = target_tables(data)?;
    let class_size = co_targets.rows();
    let (occurrences, skipped) = occurrence_index(data, class_size)?;
    if occurrences.is_empty() {
        return Err(UdcError::Config(
            "no common disease has a usable occurrence (a visit followed by one carrying targets)".into(),
        ));
    }
    let trainable: Vec<usize> = occurrences.keys().copied().collect();

    if !model.distill.initialized {
        init_codebook(model, data, &trainable)?;
    }

    let mut opt = AdamW::new(model.params(), cfg.lr, 0.0);
    let mut ema_rng = sub_rng(cfg.seed, "drl/ema");
    let mut log = DrlTrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        skipped_diseases: skipped,
        trained_diseases: trainable.len(),
        calibrations: 0,
    };

    for epoch in 1..=cfg.epochs {
        let mut rng = sub_rng(cfg.seed, &format!("drl/epoch/{}", epoch));
        let mut order = trainable.clone();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 8];
        let mut n_samples = 0usize;
        let mut used: Vec<HashSet<usize>> = vec![HashSet::new(); cfg.levels];
        let mut cos_q = 0.0;
        let mut cos_e = 0.0;

        for chunk in order.chunks(cfg.batch) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &d in chunk {
                let occ = &occurrences[&d];
                let (ri, vi) = occ[rng.random_range(0..occ.len())];
                let rec = &data.records[ri];
                let visit = &rec.visits[vi];
                let targets = extract_targets(rec, vi + 1, data.task)?;
                let synthetic = synthetic_negative(&targets, class_size, &mut rng)?;
                samples.push(DrlSample {
                    disease: d,
                    ctx: (visit.p.clone(), visit.m.clone()),
                    targets,
                    synthetic,
                });
            }

            let mut g = Graph::new();
            let (loss, breakdown, artifacts) = batch_forward(model, &mut g, data, &samples, true)?;
            opt.zero_grad();
            g.backward(loss)?;
            opt.step()?;

            let items: Vec<EmaBatchItem> = artifacts
                .iter()
                .map(|a| EmaBatchItem {
                    disease: a.disease,
                    co_indices: a.q_co.indices.clone(),
                    co_inputs: a.q_co.residuals[..cfg.levels].to_vec(),
                    te_indices: a.q_te.indices.clone(),
                    te_inputs: a.q_te.residuals[..cfg.levels].to_vec(),
                    z_co: a.z_co_ema.clone(),
                    z_te: a.z_te_ema.clone(),
                })
                .collect();
            codebook_ema_update(&mut model.codebook, &mut model.distill, &items, &cfg, &mut ema_rng)?;

            let weight = samples.len() as f64;
            let parts = [
                breakdown.recon_co,
                breakdown.recon_te,
                breakdown.con_intra_co,
                breakdown.con_inter_co,
                breakdown.con_intra_te,
                breakdown.con_inter_te,
                breakdown.com,
                breakdown.total,
            ];
            for (acc, v) in sums.iter_mut().zip(parts) {
                *acc += v * weight;
            }
            n_samples += samples.len();
            for a in &artifacts {
                for l in 0..cfg.levels {
                    used[l].insert(a.q_co.indices[l]);
                    used[l].insert(a.q_te.indices[l]);
                }
                cos_q += cosine(&a.q_co.z, &a.q_te.z);
                cos_e += cosine(&a.enc_co, &a.enc_te);
            }
        }

        let n = n_samples as f64;
        log.epochs.push(DrlEpochLog {
            epoch,
            recon_co: sums[0] / n,
            recon_te: sums[1] / n,
            con_intra_co: sums[2] / n,
            con_inter_co: sums[3] / n,
            con_intra_te: sums[4] / n,
            con_inter_te: sums[5] / n,
            com: sums[6] / n,
            total: sums[7] / n,
            utilization: used.iter().map(|s| s.len() as f64 / cfg.codes_per_level as f64).collect(),
            cosine_quantized: cos_q / n,
            cosine_encoder: cos_e / n,
        });
    }
    log.calibrations = model.calibrations();
    Ok(log)
}

/// Shared inference path: encode the branch the rarity split dictates,
/// quantize, calibrate against the aggregated collaborative context, and
/// decode into the collaborative space.
fn substitute_with_ctx(
    model: &DrlModel,
    data: &DrlData,
    disease: usize,
    ctx: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<f64>> {
    let text_d = data.text.table(EntityClass::Diagnosis);
    if disease >= data.e_d.rows() || disease >= text_d.rows() {
        return Err(UdcError::Contract(format!(
            "disease id {} outside the embedding tables ({} collaborative, {} text rows)",
            disease,
            data.e_d.rows(),
            text_d.rows()
        )));
    }
    let mut g = Graph::new();
    let enc = if data.split.is_common(disease) {
        let row = g.leaf_row(data.e_d.row(disease));
        model.phi_co.forward(&mut g, row)?
    } else {
        let row = g.leaf_row(text_d.row(disease));
        model.phi_te.forward(&mut g, row)?
    };
    let q = quantize_residual(g.data(enc), &model.codebook)?;
    let z = g.leaf_row(&q.z);
    let z_cal = if model.config.flags.nco {
        z
    } else {
        // Inference condition: the mean condition vector over every visit
        // that contains the disease, or the learned defaults if none does.
        let f = if ctx.is_empty() {
            model.calib_co.condition_vector(&mut g, None, None)?
        } else {
            let mut acc = vec![0.0; model.config.dim];
            for (p_ids, m_ids) in ctx {
                let proc = maybe_rows(&mut g, data.e_p, p_ids)?;
                let med = maybe_rows(&mut g, data.e_m, m_ids)?;
                let fv = model.calib_co.condition_vector(&mut g, proc, med)?;
                for (a, v) in acc.iter_mut().zip(g.data(fv)) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= ctx.len() as f64;
            }
            g.leaf_row(&acc)
        };
        model.calib_co.calibrate(&mut g, z, f)?
    };
    let out = model.psi_co.forward(&mut g, z_cal)?;
    Ok(g.data(out).to_vec())
}

/// Replacement embedding for one disease: rare ids travel the text branch,
/// common ids the collaborative branch; both decode into collaborative space.
pub fn substitute_embedding(model: &DrlModel, data: &DrlData, disease: usize) -> Result<Vec<f64>> {
    let ctx = cooccurrence_context(data.records, disease);
    substitute_with_ctx(model, data, disease, &ctx)
}

/// Replacement rows for every disease id, context gathered in one corpus scan.
pub fn substituted_table(model: &DrlModel, data: &DrlData) -> Result<Tensor> {
    let n = data.e_d.rows();
    let mut ctx: Vec<Vec<(Vec<usize>, Vec<usize>)>> = vec![Vec::new(); n];
    for rec in data.records {
        for visit in &rec.visits {
            for &d in &visit.d {
                if d < n {
                    ctx[d].push((visit.p.clone(), visit.m.clone()));
                }
            }
        }
    }
    let mut out = Tensor::zeros(n, data.e_d.cols());
    for d in 0..n {
        let row = substitute_with_ctx(model, data, d, &ctx[d])?;
        out.set_row(d, &row);
    }
    Ok(out)
}

/// Persists gradient parameters, codebook levels, and EMA state in the
/// shared checkpoint container.
pub fn save_drl(path: &Path, model: &DrlModel) -> Result<()> {
    let mut entries = params_to_entries(&model.params());
    let book = &model.codebook;
    for l in 0..book.n_levels() {
        entries.insert(format!("drl/codebook/level{}", l), book.level(l).clone());
        entries.insert(format!("drl/distill/o{}", l), model.distill.o[l].clone());
        let n = match &model.distill.n {
            Normalizer::Count(ns) => Tensor::matrix(1, book.codes_per_level(), ns[l].clone())?,
            Normalizer::Literal(ns) => ns[l].clone(),
        };
        entries.insert(format!("drl/distill/n{}", l), n);
    }
    let init = if model.distill.initialized { 1.0 } else { 0.0 };
    entries.insert("drl/meta".into(), Tensor::matrix(1, 2, vec![init, model.calibrations() as f64])?);
    save_checkpoint(path, &entries)
}

fn checkpoint_entry<'a>(path: &Path, entries: &'a BTreeMap<String, Tensor>, key: &str) -> Result<&'a Tensor> {
    entries.get(key).ok_or_else(|| UdcError::Checkpoint {
        path: path.display().to_string(),
        msg: format!("missing entry '{}'", key),
    })
}

/// Restores a model saved by `save_drl` into `model`, which must have been
/// built with the same configuration.
pub fn load_drl(path: &Path, model: &mut DrlModel) -> Result<()> {
    let entries = load_checkpoint(path)?;
    entries_to_params(path, &entries, &model.params())?;
    let levels = model.codebook.n_levels();
    let codes = model.codebook.codes_per_level();
    let dim = model.codebook.dim();
    for l in 0..levels {
        let level = checkpoint_entry(path, &entries, &format!("drl/codebook/level{}", l))?;
        let o = checkpoint_entry(path, &entries, &format!("drl/distill/o{}", l))?;
        let n = checkpoint_entry(path, &entries, &format!("drl/distill/n{}", l))?;
        for (name, t, want_cols) in [("codebook", level, dim), ("numerator", o, dim)] {
            if t.rows() != codes || t.cols() != want_cols {
                return Err(UdcError::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!(
                        "{} level {} is {}x{}, expected {}x{}",
                        name,
                        l,
                        t.rows(),
                        t.cols(),
                        codes,
                        want_cols
                    ),
                });
            }
        }
        let n_ok = match &model.distill.n {
            Normalizer::Count(_) => n.rows() == 1 && n.cols() == codes,
            Normalizer::Literal(_) => n.rows() == codes && n.cols() == dim,
        };
        if !n_ok {
            return Err(UdcError::Checkpoint {
                path: path.display().to_string(),
                msg: format!("normalizer level {} is {}x{}, wrong for the configured mode", l, n.rows(), n.cols()),
            });
        }
        for i in 0..codes {
            model.codebook.set_code(l, i, level.row(i));
        }
        model.distill.o[l] = o.clone();
        match &mut model.distill.n {
            Normalizer::Count(ns) => ns[l] = n.data().to_vec(),
            Normalizer::Literal(ns) => ns[l] = n.clone(),
        }
    }
    let meta = checkpoint_entry(path, &entries, "drl/meta")?;
    model.distill.initialized = meta.data().first().copied().unwrap_or(0.0) != 0.0;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{split_rarity, split_rarity_mode, RarityMode, Visit};
    use crate::textemb::TextSource;

    const CO_DIM: usize = 4;
    const TE_DIM: usize = 4;

    struct Fixture {
        e_d: Tensor,
        e_p: Tensor,
        e_m: Tensor,
        text: TextEmbeddings,
        records: Vec<PatientRecord>,
        split: RaritySplit,
    }

    impl Fixture {
        fn data(&self) -> DrlData<'_> {
            DrlData {
                e_d: &self.e_d,
                e_p: &self.e_p,
                e_m: &self.e_m,
                text: &self.text,
                records: &self.records,
                split: &self.split,
                task: Task::DiagPred,
            }
        }
    }

    /// 8 diseases, 3 procedures, 3 medications; diseases 0..4 appear often
    /// enough to be common, 4..8 stay rare.
    fn fixture(seed: u64) -> Fixture {
        let mut rng = sub_rng(seed, "fixture");
        let e_d = xavier(&mut rng, 8, CO_DIM);
        let e_p = xavier(&mut rng, 3, CO_DIM);
        let e_m = xavier(&mut rng, 3, CO_DIM);
        let text = TextEmbeddings::from_tables(
            xavier(&mut rng, 8, TE_DIM),
            xavier(&mut rng, 3, TE_DIM),
            xavier(&mut rng, 3, TE_DIM),
            TextSource::Synthetic,
        )
        .unwrap();
        let mut records = Vec::new();
        for p in 0..6 {
            let a = p % 4;
            let b = (p + 1) % 4;
            records.push(PatientRecord {
                patient_id: format!("p{}", p),
                visits: vec![
                    Visit::new(vec![a, b], vec![p % 3], vec![(p + 1) % 3]),
                    Visit::new(vec![b, 4 + p % 4], vec![(p + 2) % 3], vec![p % 3]),
                    Visit::new(vec![a], vec![], vec![]),
                ],
            });
        }
        let split = split_rarity(&records, 8, 0.5).unwrap();
        Fixture { e_d, e_p, e_m, text, records, split }
    }

    fn small_config(seed: u64) -> DrlConfig {
        DrlConfig {
            levels: 2,
            codes_per_level: 6,
            dim: 4,
            epochs: 3,
            batch: 4,
            heads: 2,
            seed,
            ..DrlConfig::with_dim(4)
        }
    }

    fn make_identity_mlp(name: &str, dim: usize) -> Mlp {
        let mut rng = sub_rng(0, name);
        let mlp = Mlp::new(name, &[dim, dim], Activation::Identity, &mut rng).unwrap();
        let ps = mlp.params();
        ps[0].set_value(Tensor::eye(dim));
        ps[1].set_value(Tensor::zeros(1, dim));
        mlp
    }

    #[test]
    fn head_count_must_divide_both_widths() {
        let cfg = DrlConfig { heads: 3, ..small_config(0) };
        let err = match DrlModel::new(CO_DIM, TE_DIM, cfg) {
            Ok(_) => panic!("a head count that does not divide the width must be rejected"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("not divisible"), "{}", err);
    }

    #[test]
    fn identity_encoder_and_decoder_roundtrip() {
        let mut model = DrlModel::new(CO_DIM, TE_DIM, small_config(1)).unwrap();
        model.phi_co = make_identity_mlp("drl/phi_co", CO_DIM);
        model.psi_co = make_identity_mlp("drl/psi_co", CO_DIM);
        let x = vec![0.3, -0.8, 1.5, 0.0];
        let mut g = Graph::new();
        let row = g.leaf_row(&x);
        let enc = model.phi_co.forward(&mut g, row).unwrap();
        assert_eq!(g.data(enc), x.as_slice());
        let dec = model.psi_co.forward(&mut g, enc).unwrap();
        assert_eq!(g.data(dec), x.as_slice());

        // Zero vector through a zero-bias identity stack stays zero.
        let zero = g.leaf_row(&[0.0; CO_DIM]);
        let enc0 = model.phi_co.forward(&mut g, zero).unwrap();
        assert_eq!(g.data(enc0), [0.0; CO_DIM]);
    }

    #[test]
    fn random_encoder_matches_a_hand_matmul_oracle() {
        let model = DrlModel::new(CO_DIM, TE_DIM, small_config(2)).unwrap();
        let mlp = make_identity_mlp("probe", CO_DIM);
        let w = xavier(&mut sub_rng(9, "oracle"), CO_DIM, CO_DIM);
        let b = xavier(&mut sub_rng(10, "oracle"), 1, CO_DIM);
        let ps = mlp.params();
        ps[0].set_value(w.clone());
        ps[1].set_value(b.clone());
        let x = vec![0.2, -1.0, 0.5, 0.9];
        let mut g = Graph::new();
        let row = g.leaf_row(&x);
        let out = mlp.forward(&mut g, row).unwrap();
        for j in 0..CO_DIM {
            let want: f64 = (0..CO_DIM).map(|i| x[i] * w.at(i, j)).sum::<f64>() + b.at(0, j);
            assert!((g.data(out)[j] - want).abs() < 1e-12);
        }
        drop(model);
    }

    #[test]
    fn empty_common_split_is_a_config_error() {
        let mut fx = fixture(3);
        // Under the case-fraction rule a corpus where every disease touches
        // a single patient yields no common diseases at all.
        let sparse: Vec<PatientRecord> = (0..8)
            .map(|d| PatientRecord {
                patient_id: format!("s{}", d),
                visits: vec![Visit::new(vec![d], vec![], vec![]), Visit::new(vec![d], vec![], vec![])],
            })
            .collect();
        fx.split = split_rarity_mode(&sparse, 8, 0.9, RarityMode::CaseFraction).unwrap();
        assert!(fx.split.common.is_empty());
        let mut model = DrlModel::new(CO_DIM, TE_DIM, small_config(3)).unwrap();
        let err = train_drl(&mut model, &fx.data()).unwrap_err();
        assert!(matches!(err, UdcError::Config(_)), "{}", err);
    }

    #[test]
    fn training_leaves_the_entity_tables_bit_identical() {
        let fx = fixture(4);
        let e_d_before = fx.e_d.data().to_vec();
        let text_before = fx.text.table(EntityClass::Diagnosis).data().to_vec();
        let mut model = DrlModel::new(CO_DIM, TE_DIM, small_config(4)).unwrap();
        train_drl(&mut model, &fx.data()).unwrap();
        assert_eq!(fx.e_d.data(), e_d_before.as_slice());
        assert_eq!(fx.text.table(EntityClass::Diagnosis).data(), text_before.as_slice());
    }

    #[test]
    fn same_seed_reproduces_the_codebook_bitwise() {
        let run = || {
            let fx = fixture(5);
            let mut model = DrlModel::new(CO_DIM, TE_DIM, small_config(5)).unwrap();
            let log = train_drl(&mut model, &fx.data()).unwrap();
            let levels: Vec<Vec<f64>> =
                (0..model.codebook.n_levels()).map(|l| model.codebook.level(l).data().to_vec()).collect();
            (levels, log.epochs.last().unwrap().total)
        };
        let (a_books, a_total) = run();
        let (b_books, b_total) = run();
        assert_eq!(a_books, b_books);
        assert_eq!(a_total.to_bits(), b_total.to_bits());
    }

    #[test]
    fn loss_parts_sum_to_the_total_exactly() {
        let fx = fixture(6);
        let mut model = DrlModel::new(CO_DIM, TE_DIM, small_config(6)).unwrap();
        let data = fx.data();
        // Initialize the codebook through one short training run first.
        model.config.epochs = 1;
        train_drl(&mut model, &data).unwrap();
        let samples = vec![
            DrlSample { disease: 0, ctx: (vec![0], vec![1]), targets: vec![1, 2], synthetic: vec![1, 5] },
            DrlSample { disease: 1, ctx: (vec![], vec![]), targets: vec![3], synthetic: vec![6] },
        ];
        let mut g = Graph::new();
        let (_, b) = total_loss(&model, &mut g, &data, &samples).unwrap();
        let seq = b.recon_co + b.recon_te + b.con_intra_co + b.con_inter_co + b.con_intra_te + b.con_inter_te + b.com;
        assert_eq!(seq.to_bits(), b.total.to_bits());
    }

    #[test]
    fn perfect_reconstruction_with_ablated_extras_is_exactly_zero() {
        // Identity encoders/decoders, text row equal to the collaborative
        // row, codebook holding that exact vector: every term vanishes.
        let mut fx = fixture(7);
        let mut text_d = fx.e_d.clone();
        let text_p = fx.e_p.clone();
        let text_m = fx.e_m.clone();
        text_d.set_row(0, fx.e_d.row(0));
        fx.text = TextEmbeddings::from_tables(text_d, text_p, text_m, TextSource::Synthetic).unwrap();
        let cfg = DrlConfig {
            flags: crate::drl::AblationFlags { nt: true, nco: true, ..Default::default() },
            ..small_config(7)
        };
        let mut model = DrlModel::new(CO_DIM, CO_DIM, cfg).unwrap();
        model.phi_co = make_identity_mlp("drl/phi_co", CO_DIM);
        model.phi_te = make_identity_mlp("drl/phi_te", CO_DIM);
        model.psi_co = make_identity_mlp("drl/psi_co", CO_DIM);
        model.psi_te = make_identity_mlp("drl/psi_te", CO_DIM);
        model.codebook.set_code(0, 0, fx.e_d.row(0));
        // Remaining levels keep the zero vector, so the residual stays zero.
        let data = fx.data();
        let samples = vec![DrlSample { disease: 0, ctx: (vec![], vec![]), targets: vec![1], synthetic: vec![2] }];
        let mut g = Graph::new();
        let (_, b) = total_loss(&model, &mut g, &data, &samples).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.recon_co, 0.0);
        assert_eq!(b.com, 0.0);
    }

    #[test]
    fn sustained_training_halves_the_reconstruction_loss() {
        let fx = fixture(8);
        // Small batches for more optimizer steps and a faster codebook decay
        // so the codes can track the moving encoders on this tiny corpus.
        let cfg = DrlConfig { epochs: 60, batch: 2, kappa: 0.9, lr: 3e-3, ..small_config(8) };
        let mut model = DrlModel::new(CO_DIM, TE_DIM, cfg).unwrap();
        let log = train_drl(&mut model, &fx.data()).unwrap();
        let first = &log.epochs[0];
        let last = log.epochs.last().unwrap();
        let initial = first.recon_co + first.recon_te;
        let fin = last.recon_co + last.recon_te;
        assert!(
            fin <= 0.5 * initial,
            "reconstruction did not halve: {} -> {}",
            initial,
            fin
        );
    }

    #[test]
    fn nco_run_never_calibrates() {
        let fx = fixture(9);
        let cfg = DrlConfig {
            flags: crate::drl::AblationFlags { nco: true, ..Default::default() },
            ..small_config(9)
        };
        let mut model = DrlModel::new(CO_DIM, TE_DIM, cfg).unwrap();
        let log = train_drl(&mut model, &fx.data()).unwrap();
        assert_eq!(log.calibrations, 0);
        assert_eq!(model.calibrations(), 0);
    }

    #[test]
    fn substitution_outputs_have_collaborative_width_for_every_disease() {
        let fx = fixture(10);
        let mut model = DrlModel::new(CO_DIM, TE_DIM, small_config(10)).unwrap();
        let data = fx.data();
        train_drl(&mut model, &data).unwrap();
        let table = substituted_table(&model, &data).unwrap();
        assert_eq!(table.rows(), 8);
        assert_eq!(table.cols(), CO_DIM);
        for d in 0..8 {
            let row = substitute_embedding(&model, &data, d).unwrap();
            assert_eq!(row.len(), CO_DIM);
            assert_eq!(row.as_slice(), table.row(d));
        }
        assert!(substitute_embedding(&model, &data, 8).is_err());
    }

    #[test]
    fn nco_identity_substitution_returns_the_quantized_encoding() {
        let fx = fixture(11);
        let cfg = DrlConfig {
            flags: crate::drl::AblationFlags { nco: true, ..Default::default() },
            ..small_config(11)
        };
        let mut model = DrlModel::new(CO_DIM, CO_DIM, cfg).unwrap();
        model.phi_co = make_identity_mlp("drl/phi_co", CO_DIM);
        model.psi_co = make_identity_mlp("drl/psi_co", CO_DIM);
        let data = fx.data();
        let common = data.split.common[0];
        model.codebook.set_code(0, 1, fx.e_d.row(common));
        let row = substitute_embedding(&model, &data, common).unwrap();
        let q = quantize_residual(fx.e_d.row(common), &model.codebook).unwrap();
        assert_eq!(row, q.z);
        assert_eq!(row.as_slice(), fx.e_d.row(common));
    }

    #[test]
    fn rare_substitution_reads_text_and_ignores_the_collaborative_row() {
        let fx = fixture(12);
        let mut model = DrlModel::new(CO_DIM, TE_DIM, small_config(12)).unwrap();
        let data = fx.data();
        train_drl(&mut model, &data).unwrap();
        let rare = *fx.split.rare.first().expect("fixture has rare diseases");
        let base = substitute_embedding(&model, &data, rare).unwrap();

        // Zeroing the text row changes the output...
        let mut zeroed_text = fixture(12);
        let mut td = zeroed_text.text.table(EntityClass::Diagnosis).clone();
        td.set_row(rare, &vec![0.0; TE_DIM]);
        zeroed_text.text = TextEmbeddings::from_tables(
            td,
            zeroed_text.text.table(EntityClass::Procedure).clone(),
            zeroed_text.text.table(EntityClass::Medication).clone(),
            TextSource::Synthetic,
        )
        .unwrap();
        let via_text = substitute_embedding(&model, &zeroed_text.data(), rare).unwrap();
        assert_ne!(base, via_text);

        // ...while zeroing the collaborative row does not.
        let mut zeroed_co = fixture(12);
        zeroed_co.e_d.set_row(rare, &vec![0.0; CO_DIM]);
        let via_co = substitute_embedding(&model, &zeroed_co.data(), rare).unwrap();
        assert_eq!(base, via_co);
    }

    #[test]
    fn checkpoint_roundtrip_restores_the_model_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drl.udck");
        let fx = fixture(13);
        let mut model = DrlModel::new(CO_DIM, TE_DIM, small_config(13)).unwrap();
        let data = fx.data();
        train_drl(&mut model, &data).unwrap();
        save_drl(&path, &model).unwrap();

        let mut twin = DrlModel::new(CO_DIM, TE_DIM, small_config(99)).unwrap();
        load_drl(&path, &mut twin).unwrap();
        for l in 0..model.codebook.n_levels() {
            assert_eq!(model.codebook.level(l).data(), twin.codebook.level(l).data());
            assert_eq!(model.distill.o[l].data(), twin.distill.o[l].data());
        }
        assert!(twin.distill.initialized);
        let mine = substitute_embedding(&model, &data, 0).unwrap();
        let theirs = substitute_embedding(&twin, &data, 0).unwrap();
        assert_eq!(mine, theirs);
    }

    #[test]
    fn gradients_match_finite_differences_with_quantization_off() {
        let fx = fixture(14);
        let model = DrlModel::new(CO_DIM, TE_DIM, small_config(14)).unwrap();
        let data = fx.data();
        let samples = vec![
            DrlSample { disease: 0, ctx: (vec![0, 1], vec![2]), targets: vec![1, 2], synthetic: vec![1, 6] },
            DrlSample { disease: 2, ctx: (vec![], vec![0]), targets: vec![0], synthetic: vec![7] },
        ];
        let eval = |model: &DrlModel| -> f64 {
            let mut g = Graph::new();
            total_loss_unquantized(model, &mut g, &data, &samples).unwrap().1.total
        };

        let params = model.params();
        for p in &params {
            p.zero_grad();
        }
        let mut g = Graph::new();
        let (loss, _) = total_loss_unquantized(&model, &mut g, &data, &samples).unwrap();
        g.backward(loss).unwrap();

        let h = 1e-5;
        let mut checked = 0usize;
        for p in &params {
            let grad = p.borrow().grad.clone();
            let base = p.value();
            let n = base.data().len();
            // Probe a few spread-out entries of every tensor.
            for idx in [0, n / 2, n - 1] {
                let mut plus = base.clone();
                plus.data_mut()[idx] += h;
                p.set_value(plus);
                let up = eval(&model);
                let mut minus = base.clone();
                minus.data_mut()[idx] -= h;
                p.set_value(minus);
                let down = eval(&model);
                p.set_value(base.clone());
                let fd = (up - down) / (2.0 * h);
                let an = grad.data()[idx];
                if fd.abs() < 1e-10 && an.abs() < 1e-10 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel < 1e-4, "{}[{}]: fd {} vs analytic {} (rel {})", p.name(), idx, fd, an, rel);
                checked += 1;
            }
        }
        assert!(checked > 30, "too few informative gradient probes: {}", checked);
    }
}
