//! Collaborative sequence model: entity embedding tables, a transformer
//! encoder over visit history, tied-weight logit heads, and the training
//! loops for the first and third stages of the pipeline.
//!
//! Logits are dot products against the target entity table itself (plus a
//! learned per-entity bias), not a separate output matrix. Tying matters for
//! the tail: a rare disease's score then moves whenever its embedding does,
//! so substituting a better vector immediately changes how it ranks, instead
//! of leaving it at the mercy of an output row that almost never saw a
//! gradient.
//!
//! The third-stage loop swaps the learned disease table for a fixed
//! substituted table: disease vectors then come from outside, the table
//! itself is frozen, and only the encoder, the remaining embedding tables,
//! and the biases keep moving.


use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::params_to_entries;
use crate::ehr::{extract_targets, multi_hot, EntityClass, PatientRecord, Task, Visit, VocabSet};
use crate::error::{Result, UdcError};
use crate::numerics::graph::{sigmoid, Graph, Val};
use crate::numerics::nn::{xavier, TransformerBlock};
use crate::numerics::optim::AdamW;
use crate::numerics::{Parameter, Tensor};
use crate::rng::sub_rng;

/// The three entity embedding tables of the collaborative model.
pub struct CollabEmbeddings {
    pub e_d: Parameter,
    pub e_p: Parameter,
    pub e_m: Parameter,
    pub dim: usize,
}

impl CollabEmbeddings {
    pub fn new(vocab: &VocabSet, dim: usize, rng: &mut impl Rng) -> Self {
        CollabEmbeddings {
            e_d: Parameter::new("pcm/e_d", xavier(rng, vocab.size_of(EntityClass::Diagnosis), dim)),
            e_p: Parameter::new("pcm/e_p", xavier(rng, vocab.size_of(EntityClass::Procedure), dim)),
            e_m: Parameter::new("pcm/e_m", xavier(rng, vocab.size_of(EntityClass::Medication), dim)),
            dim,
        }
    }

    pub fn table(&self, class: EntityClass) -> &Parameter {
        match class {
            EntityClass::Diagnosis => &self.e_d,
            EntityClass::Procedure => &self.e_p,
            EntityClass::Medication => &self.e_m,
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.e_d.clone(), self.e_p.clone(), self.e_m.clone()]
    }
}

/// Logits for one prediction plus their logistic probabilities.
pub struct PredictorOutput {
    pub logits: Tensor,
    pub probabilities: Vec<f64>,
}

impl PredictorOutput {
    fn from_logits(logits: Tensor) -> Self {
        let probabilities = logits.data().iter().map(|&x| sigmoid(x)).collect();
        PredictorOutput { logits, probabilities }
    }
}

/// Where forward passes read disease vectors from.
#[derive(Clone, Copy)]
pub enum DiseaseSource<'a> {
    /// The model's own learned table.
    Learned,
    /// A fixed external table; gradients never reach it.
    Fixed(&'a Tensor),
}

pub struct PcmModel {
    pub emb: CollabEmbeddings,
    /// Learned positional table, zero-initialised so that at construction
    /// position adds nothing and zero embeddings propagate to zero logits.
    pub pos: Parameter,
    pub blocks: Vec<TransformerBlock>,
    /// Per-disease and per-medication score offsets. Zero-initialised; they
    /// absorb base rates so the dot products only have to explain the rest.
    pub bias_diag: Parameter,
    pub bias_med: Parameter,
    pub max_len: usize,
}

impl PcmModel {
    pub fn new(vocab: &VocabSet, dim: usize, heads: usize, n_blocks: usize, max_len: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || n_blocks == 0 || max_len == 0 {
            return Err(UdcError::Config("model dims, block count, and max_len must be positive".into()));
        }
        let emb = CollabEmbeddings::new(vocab, dim, rng);
        let pos = Parameter::new("pcm/pos", Tensor::zeros(max_len, dim));
        let mut blocks = Vec::new();
        for i in 0..n_blocks {
            blocks.push(TransformerBlock::new(&format!("pcm/block{}", i), dim, heads, 2 * dim, rng)?);
        }
        let bias_diag = Parameter::new("pcm/bias_diag", Tensor::zeros(1, vocab.size_of(EntityClass::Diagnosis)));
        let bias_med = Parameter::new("pcm/bias_med", Tensor::zeros(1, vocab.size_of(EntityClass::Medication)));
        Ok(PcmModel { emb, pos, blocks, bias_diag, bias_med, max_len })
    }

    pub fn dim(&self) -> usize {
        self.emb.dim
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut ps = self.emb.params();
        ps.push(self.pos.clone());
        for b in &self.blocks {
            ps.extend(b.params());
        }
        ps.push(self.bias_diag.clone());
        ps.push(self.bias_med.clone());
        ps
    }

    fn check_ids(&self, visit: &Visit) -> Result<()> {
        for (class, table) in [
            (EntityClass::Diagnosis, &self.emb.e_d),
            (EntityClass::Procedure, &self.emb.e_p),
            (EntityClass::Medication, &self.emb.e_m),
        ] {
            let n = table.value().rows();
            for &id in visit.ids(class) {
                if id >= n {
                    return Err(UdcError::Contract(format!("{} id {} out of range for vocab of {}", class.name(), id, n)));
                }
            }
        }
        Ok(())
    }

    /// Gather the embedding rows for one visit, one tensor per entity class.
    /// Classes absent from the visit come back with zero rows.
    pub fn embed_entities(&self, visit: &Visit) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_ids(visit)?;
        let gather = |table: &Parameter, ids: &[usize]| {
            let value = table.value();
            let mut out = Tensor::zeros(ids.len(), self.emb.dim);
            for (i, &id) in ids.iter().enumerate() {
                out.set_row(i, value.row(id));
            }
            out
        };
        Ok((
            gather(&self.emb.e_d, &visit.d),
            gather(&self.emb.e_p, &visit.p),
            gather(&self.emb.e_m, &visit.m),
        ))
    }

    /// One visit vector: mean-pooled embeddings per class, summed across the
    /// classes present. A visit with no entities at all pools to zero.
    fn visit_vector(&self, g: &mut Graph, visit: &Visit, disease: DiseaseSource<'_>) -> Val {
        let mut acc = g.leaf(&Tensor::zeros(1, self.emb.dim));
        if !visit.d.is_empty() {
            let table = match disease {
                DiseaseSource::Learned => g.param(&self.emb.e_d),
                DiseaseSource::Fixed(t) => g.leaf(t),
            };
            let rows = g.gather_rows(table, &visit.d);
            let pooled = g.mean_rows(rows);
            acc = g.add(acc, pooled);
        }
        if !visit.p.is_empty() {
            let table = g.param(&self.emb.e_p);
            let rows = g.gather_rows(table, &visit.p);
            let pooled = g.mean_rows(rows);
            acc = g.add(acc, pooled);
        }
        if !visit.m.is_empty() {
            let table = g.param(&self.emb.e_m);
            let rows = g.gather_rows(table, &visit.m);
            let pooled = g.mean_rows(rows);
            acc = g.add(acc, pooled);
        }
        acc
    }

    /// Logits for the next-visit prediction given `history`. Medication
    /// recommendation additionally conditions on the next visit's diagnoses
    /// and procedures, folded in as one extra pseudo-visit.
    pub fn forward_predict(
        &self,
        g: &mut Graph,
        history: &[Visit],
        task: Task,
        extra: Option<(&[usize], &[usize])>,
        disease: DiseaseSource<'_>,
    ) -> Result<Val> {
        if history.is_empty() {
            return Err(UdcError::Contract("cannot predict from an empty visit history".into()));
        }
        match (task, extra) {
            (Task::MedRec, None) => {
                return Err(UdcError::Contract("medication recommendation needs the next visit's diagnoses and procedures".into()))
            }
            (Task::DiagPred, Some(_)) => {
                return Err(UdcError::Contract("diagnosis prediction takes no extra visit".into()))
            }
            _ => {}
        }
        let mut rows = Vec::new();
        for visit in history {
            self.check_ids(visit)?;
            rows.push(self.visit_vector(g, visit, disease));
        }
        if let Some((d, p)) = extra {
            let pseudo = Visit::new(d.to_vec(), p.to_vec(), Vec::new());
            self.check_ids(&pseudo)?;
            rows.push(self.visit_vector(g, &pseudo, disease));
        }
        let t_rows = rows.len();
        if t_rows > self.max_len {
            return Err(UdcError::Contract(format!("history of {} visits exceeds the positional table ({})", t_rows, self.max_len)));
        }
        let mut x = g.concat_rows(&rows);
        let pos = g.param(&self.pos);
        let pos_slice = g.slice_rows(pos, 0, t_rows);
        x = g.add(x, pos_slice);
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        let last = g.slice_rows(x, t_rows - 1, 1);
        // Tied head: score against the target entity table, so a disease
        // ranks by how well its own embedding matches the patient state.
        let (table, bias) = match task {
            Task::DiagPred => {
                let table = match disease {
                    DiseaseSource::Learned => g.param(&self.emb.e_d),
                    DiseaseSource::Fixed(t) => g.leaf(t),
                };
                (table, g.param(&self.bias_diag))
            }
            Task::MedRec => (g.param(&self.emb.e_m), g.param(&self.bias_med)),
        };
        let table_t = g.transpose(table);
        let scores = g.matmul(last, table_t);
        Ok(g.add(scores, bias))
    }

    /// Evaluation-time forward pass: returns logits and probabilities.
    pub fn predict(
        &self,
        history: &[Visit],
        task: Task,
        extra: Option<(&[usize], &[usize])>,
        disease: DiseaseSource<'_>,
    ) -> Result<PredictorOutput> {
        let mut g = Graph::new();
        let logits = self.forward_predict(&mut g, history, task, extra, disease)?;
        Ok(PredictorOutput::from_logits(g.tensor(logits)))
    }
}

/// Mean logistic cross-entropy over the label vector, computed from logits.
pub fn bce_loss(g: &mut Graph, logits: Val, targets: &[f64]) -> Result<Val> {
    let (r, c) = g.shape(logits);
    if r * c != targets.len() {
        return Err(UdcError::Dimension {
            op: "bce_loss",
            detail: format!("logits {}x{} vs {} targets", r, c, targets.len()),
        });
    }
    if let Some(bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(UdcError::Contract(format!("bce target {} is not 0 or 1", bad)));
    }
    Ok(g.bce_with_logits(logits, targets))
}

/// Training hyperparameters shared by both training stages.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(epochs: usize, batch: usize, lr: f64, seed: u64) -> Self {
        TrainSettings { epochs, batch, lr, weight_decay: 0.0, seed }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss trajectory of one training run. Entry 0 is the untouched model;
/// `best_epoch` indexes the entry whose parameters were kept.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// One training sample: a record index and a 1-based prefix length.
type Sample = (usize, usize);

fn collect_samples(records: &[PatientRecord]) -> Vec<Sample> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for t in 1..r.visits.len() {
            out.push((i, t));
        }
    }
    out
}

fn sample_loss(
    model: &PcmModel,
    g: &mut Graph,
    records: &[PatientRecord],
    sample: Sample,
    task: Task,
    n_targets: usize,
    disease: DiseaseSource<'_>,
) -> Result<Val> {
    let (ri, t) = sample;
    let record = &records[ri];
    let history = &record.visits[..t];
    let extra_visit = &record.visits[t];
    let extra = match task {
        Task::DiagPred => None,
        Task::MedRec => Some((extra_visit.d.as_slice(), extra_visit.p.as_slice())),
    };
    let logits = model.forward_predict(g, history, task, extra, disease)?;
    let targets = multi_hot(&extract_targets(record, t, task)?, n_targets);
    bce_loss(g, logits, &targets)
}

fn mean_loss_over(
    model: &PcmModel,
    records: &[PatientRecord],
    samples: &[Sample],
    task: Task,
    n_targets: usize,
    disease: DiseaseSource<'_>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(UdcError::Contract("no evaluable samples: every record needs at least two visits".into()));
    }
    let mut total = 0.0;
    for &s in samples {
        let mut g = Graph::new();
        let loss = sample_loss(model, &mut g, records, s, task, n_targets, disease)?;
        total += g.scalar(loss);
    }
    Ok(total / samples.len() as f64)
}

/// Shared epoch loop: minimise mean BCE with AdamW, remember the best-val
/// snapshot (the untouched model counts as epoch 0), and restore it at the
/// end, so the returned model never validates worse than its starting point.
fn train_loop(
    model: &PcmModel,
    trainable: &[Parameter],
    train: &[PatientRecord],
    val: &[PatientRecord],
    task: Task,
    settings: &TrainSettings,
    disease: DiseaseSource<'_>,
    label: &str,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(UdcError::Contract("training set is empty".into()));
    }
    if settings.batch == 0 {
        return Err(UdcError::Config("batch size must be positive".into()));
    }
    let n_targets = match task {
        Task::DiagPred => model.emb.e_d.value().rows(),
        Task::MedRec => model.emb.e_m.value().rows(),
    };
    let train_samples = collect_samples(train);
    let val_samples = collect_samples(val);
    let mut opt = AdamW::new(trainable.to_vec(), settings.lr, settings.weight_decay);

    let eval_val = |model: &PcmModel| -> Result<f64> {
        if val_samples.is_empty() {
            // No validation data: fall back to training loss so best-model
            // selection still has a signal.
            mean_loss_over(model, train, &train_samples, task, n_targets, disease)
        } else {
            mean_loss_over(model, val, &val_samples, task, n_targets, disease)
        }
    };

    let initial_train = mean_loss_over(model, train, &train_samples, task, n_targets, disease)?;
    let initial_val = eval_val(model)?;
    let mut log = TrainLog {
        epochs: vec![EpochStats { epoch: 0, train_loss: initial_train, val_loss: initial_val }],
        best_epoch: 0,
        best_val: initial_val,
    };
    let all_params = model.params();
    let mut best = params_to_entries(&all_params);

    for epoch in 1..=settings.epochs {
        let mut order = train_samples.clone();
        let mut rng = sub_rng(settings.seed, &format!("pcm/{}/{}/epoch/{}", label, task.name(), epoch));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(settings.batch) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &s in chunk {
                losses.push(sample_loss(model, &mut g, train, s, task, n_targets, disease)?);
            }
            let batch_loss = g.mean_many(&losses);
            let value = g.scalar(batch_loss);
            if !value.is_finite() {
                return Err(UdcError::NonFinite(format!(
                    "training diverged: loss {} at epoch {} ({} samples into the epoch)",
                    value, epoch, chunk.len(),
                )));
            }
            total += value * chunk.len() as f64;
            opt.zero_grad();
            g.backward(batch_loss)?;
            opt.step()?;
        }
        let train_loss = total / train_samples.len() as f64;
        let val_loss = eval_val(model)?;
        if val_loss < log.best_val {
            log.best_val = val_loss;
            log.best_epoch = epoch;
            best = params_to_entries(&all_params);
        }
        log.epochs.push(EpochStats { epoch, train_loss, val_loss });
    }

    // Restore the best snapshot into the live parameters.
    for p in &all_params {
        let name = p.name();
        p.set_value(best[&name].clone());
    }
    Ok(log)
}

/// First training stage: fit embeddings, encoder, and the task head on the
/// training split, keeping the best-validation parameters.
pub fn pretrain(
    model: &PcmModel,
    train: &[PatientRecord],
    val: &[PatientRecord],
    task: Task,
    settings: &TrainSettings,
) -> Result<TrainLog> {
    train_loop(model, &model.params(), train, val, task, settings, DiseaseSource::Learned, "pretrain")
}

/// Third training stage: disease vectors come from the fixed `substituted`
/// table, the model's own disease table is frozen, and everything else is
/// tuned. With `epochs = 0` this is pure substitution (inference only).
pub fn finetune(
    model: &PcmModel,
    substituted: &Tensor,
    train: &[PatientRecord],
    val: &[PatientRecord],
    task: Task,
    settings: &TrainSettings,
) -> Result<TrainLog> {
    let e_d = model.emb.e_d.value();
    if substituted.rows() != e_d.rows() || substituted.cols() != e_d.cols() {
        return Err(UdcError::Contract(format!(
            "substituted table is {}x{}, expected {}x{}",
            substituted.rows(),
            substituted.cols(),
            e_d.rows(),
            e_d.cols(),
        )));
    }
    let trainable: Vec<Parameter> = model.params().into_iter().filter(|p| p.name() != "pcm/e_d").collect();
    let was = model.emb.e_d.requires_grad();
    model.emb.e_d.set_requires_grad(false);
    let outcome = train_loop(
        model,
        &trainable,
        train,
        val,
        task,
        settings,
        DiseaseSource::Fixed(substituted),
        "finetune",
    );
    model.emb.e_d.set_requires_grad(was);
    outcome
}
