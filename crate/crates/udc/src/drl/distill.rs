//! Co-teacher codebook maintenance: codes move by exponential moving
//! average over what both branches assigned to them, never by gradient.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::drl::quantizer::Codebook;
use crate::drl::{DrlConfig, EmaNormalizerMode, EmaTargetMode};
use crate::error::{Result, UdcError};
use crate::numerics::{dot, Tensor};

/// How many recent encoder outputs are kept around for dead-code resets.
const RECENT_CAP: usize = 256;

/// Per-code EMA normalizer, in one of the two supported modes.
#[derive(Debug, Clone)]
pub enum Normalizer {
    /// Scalar assignment-count EMA per code.
    Count(Vec<Vec<f64>>),
    /// Verbatim vector accumulation per code.
    Literal(Vec<Tensor>),
}

/// EMA accumulators plus the recent-output ring buffer.
#[derive(Debug, Clone)]
pub struct DistillState {
    /// Per level: codes × dim numerator vectors.
    pub o: Vec<Tensor>,
    pub n: Normalizer,
    pub recent: VecDeque<Vec<f64>>,
    pub initialized: bool,
}

impl DistillState {
    pub fn new(levels: usize, codes_per_level: usize, dim: usize, mode: EmaNormalizerMode) -> Self {
        let o = vec![Tensor::zeros(codes_per_level, dim); levels];
        let n = match mode {
            EmaNormalizerMode::Count => Normalizer::Count(vec![vec![0.0; codes_per_level]; levels]),
            EmaNormalizerMode::Literal => Normalizer::Literal(vec![Tensor::zeros(codes_per_level, dim); levels]),
        };
        DistillState { o, n, recent: VecDeque::new(), initialized: false }
    }

    /// Make the state consistent with a freshly initialised codebook:
    /// o_i = c_i with unit normalizers, so c_i = o_i / n_i holds from the start.
    pub fn sync_with(&mut self, book: &Codebook) {
        for (l, level) in self.o.iter_mut().enumerate() {
            *level = book.level(l).clone();
        }
        match &mut self.n {
            Normalizer::Count(levels) => {
                for level in levels {
                    level.iter_mut().for_each(|v| *v = 1.0);
                }
            }
            Normalizer::Literal(levels) => {
                for level in levels {
                    level.fill(1.0);
                }
            }
        }
        self.initialized = true;
    }

    pub fn remember(&mut self, output: Vec<f64>) {
        if self.recent.len() == RECENT_CAP {
            self.recent.pop_front();
        }
        self.recent.push_back(output);
    }

    pub fn is_finite(&self) -> bool {
        let n_ok = match &self.n {
            Normalizer::Count(levels) => levels.iter().flatten().all(|v| v.is_finite()),
            Normalizer::Literal(levels) => levels.iter().all(|t| t.is_finite()),
        };
        n_ok && self.o.iter().all(|t| t.is_finite())
    }
}

/// What one training sample contributes to the codebook update: the chosen
/// indices and per-level residual inputs of both branches, plus each
/// branch's code sum for the cross-view attention terms.
#[derive(Debug, Clone)]
pub struct EmaBatchItem {
    pub disease: usize,
    pub co_indices: Vec<usize>,
    /// Residual inputs r_0..r_{L-1} of the collaborative branch.
    pub co_inputs: Vec<Vec<f64>>,
    pub te_indices: Vec<usize>,
    pub te_inputs: Vec<Vec<f64>>,
    pub z_co: Vec<f64>,
    pub z_te: Vec<f64>,
}

/// Parameter-free scaled dot-product attention of one query over a key/value
/// set. The update runs outside the gradient graph, so learned projections
/// would be untrainable; each disease instead attends over the whole batch
/// of the other view (one key would make attention the identity map).
fn attend(query: &[f64], keys: &[&[f64]]) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| dot(query, k) * scale).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; query.len()];
    for (w, k) in weights.iter().zip(keys) {
        for (o, v) in out.iter_mut().zip(*k) {
            *o += w / total * v;
        }
    }
    out
}

fn check_finite(items: &[EmaBatchItem]) -> Result<()> {
    for item in items {
        let all = item
            .co_inputs
            .iter()
            .chain(item.te_inputs.iter())
            .chain([&item.z_co, &item.z_te]);
        for v in all {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(UdcError::NonFinite(format!(
                    "codebook update received a non-finite vector for disease {}",
                    item.disease
                )));
            }
        }
    }
    Ok(())
}

/// One EMA step over a batch of assignments from both branches.
///
/// Codes decay toward the co-teacher blend ½(x + cross-view b) of whatever
/// was assigned to them; under the NCD flag the cross-view terms vanish and
/// each branch contributes its own vectors directly. Codes whose normalizer
/// falls below the dead-code floor are re-seeded from recent encoder outputs.
pub fn codebook_ema_update(
    book: &mut Codebook,
    state: &mut DistillState,
    items: &[EmaBatchItem],
    cfg: &DrlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    check_finite(items)?;
    if !state.is_finite() || !book.is_finite() {
        return Err(UdcError::NonFinite("codebook or distillation state is non-finite before the update".into()));
    }
    let kappa = cfg.kappa;
    if kappa == 1.0 {
        // Degenerate fixed point: nothing decays, nothing accumulates.
        return Ok(());
    }
    let levels = book.n_levels();
    let dim = book.dim();

    // Deterministic merge: contributions are summed in disease-id order.
    let mut items: Vec<&EmaBatchItem> = items.iter().collect();
    items.sort_by_key(|i| i.disease);

    for item in &items {
        state.remember(item.co_inputs[0].clone());
        state.remember(item.te_inputs[0].clone());
    }

    // Cross-view blend vectors per item, per level where they vary.
    let cross = !cfg.flags.ncd;
    let per_level_targets = |l: usize| -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        // Returns (x per item, x̃ per item, b per item, b̃ per item) at level l.
        let (xs, xts): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match cfg.ema_target {
            EmaTargetMode::Residual => (
                items.iter().map(|i| i.co_inputs[l].clone()).collect(),
                items.iter().map(|i| i.te_inputs[l].clone()).collect(),
            ),
            EmaTargetMode::LiteralZ => (
                items.iter().map(|i| i.z_co.clone()).collect(),
                items.iter().map(|i| i.z_te.clone()).collect(),
            ),
        };
        if !cross {
            return (xs, xts, Vec::new(), Vec::new());
        }
        let key_refs_co: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let key_refs_te: Vec<&[f64]> = xts.iter().map(|v| v.as_slice()).collect();
        let bs: Vec<Vec<f64>> = xs.iter().map(|x| attend(x, &key_refs_te)).collect();
        let bts: Vec<Vec<f64>> = xts.iter().map(|xt| attend(xt, &key_refs_co)).collect();
        (xs, xts, bs, bts)
    };

    for l in 0..levels {
        let (xs, xts, bs, bts) = per_level_targets(l);
        let codes = book.codes_per_level();
        // Accumulate this batch's contribution per code.
        let mut delta = vec![vec![0.0; dim]; codes];
        let mut count = vec![0.0f64; codes];
        let mut vec_norm = vec![vec![0.0; dim]; codes];
        for (idx, item) in items.iter().enumerate() {
            let ci = item.co_indices[l];
            let ti = item.te_indices[l];
            if ci >= codes || ti >= codes {
                return Err(UdcError::Contract(format!(
                    "assignment index out of range for disease {} at level {}",
                    item.disease, l
                )));
            }
            if cross {
                for (a, (x, b)) in delta[ci].iter_mut().zip(xs[idx].iter().zip(&bts[idx])) {
                    *a += (x + b) / 2.0;
                }
                for (a, (x, b)) in delta[ti].iter_mut().zip(xts[idx].iter().zip(&bs[idx])) {
                    *a += (x + b) / 2.0;
                }
            } else {
                for (a, x) in delta[ci].iter_mut().zip(&xs[idx]) {
                    *a += x;
                }
                for (a, x) in delta[ti].iter_mut().zip(&xts[idx]) {
                    *a += x;
                }
            }
            count[ci] += 1.0;
            count[ti] += 1.0;
            for (a, x) in vec_norm[ci].iter_mut().zip(&xs[idx]) {
                *a += x;
            }
            for (a, x) in vec_norm[ti].iter_mut().zip(&xts[idx]) {
                *a += x;
            }
        }

        for i in 0..codes {
            let o_row: Vec<f64> = state.o[l]
                .row(i)
                .iter()
                .zip(&delta[i])
                .map(|(&o, &d)| kappa * o + (1.0 - kappa) * d)
                .collect();
            state.o[l].set_row(i, &o_row);
            match &mut state.n {
                Normalizer::Count(ns) => {
                    ns[l][i] = kappa * ns[l][i] + (1.0 - kappa) * count[i];
                    let n = ns[l][i];
                    if n < cfg.dead_code_floor {
                        if let Some(fresh) = pick_recent(&state.recent, rng) {
                            book.set_code(l, i, &fresh);
                            state.o[l].set_row(i, &fresh);
                            ns[l][i] = 1.0;
                        }
                        continue;
                    }
                    let code: Vec<f64> = o_row.iter().map(|&o| o / n).collect();
                    book.set_code(l, i, &code);
                }
                Normalizer::Literal(ns) => {
                    let n_row: Vec<f64> = ns[l]
                        .row(i)
                        .iter()
                        .zip(&vec_norm[i])
                        .map(|(&n, &v)| kappa * n + (1.0 - kappa) * v)
                        .collect();
                    ns[l].set_row(i, &n_row);
                    let scale: f64 = n_row.iter().map(|v| v.abs()).sum::<f64>() / dim as f64;
                    if scale < cfg.dead_code_floor {
                        if let Some(fresh) = pick_recent(&state.recent, rng) {
                            book.set_code(l, i, &fresh);
                            state.o[l].set_row(i, &fresh);
                            ns[l].set_row(i, &vec![1.0; dim]);
                        }
                        continue;
                    }
                    // Elementwise division with a guard against tiny entries.
                    let code: Vec<f64> = o_row
                        .iter()
                        .zip(&n_row)
                        .map(|(&o, &n)| {
                            let d = if n.abs() < 1e-8 { if n < 0.0 { -1e-8 } else { 1e-8 } } else { n };
                            o / d
                        })
                        .collect();
                    book.set_code(l, i, &code);
                }
            }
        }
    }

    if !state.is_finite() || !book.is_finite() {
        return Err(UdcError::NonFinite("codebook update produced non-finite values".into()));
    }
    Ok(())
}

fn pick_recent(recent: &VecDeque<Vec<f64>>, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    if recent.is_empty() {
        return None;
    }
    let idx = rng.random_range(0..recent.len());
    recent.get(idx).cloned()
}
