//! Training objectives for the alignment stage: task-aware contrastive
//! losses over next-visit targets, the commitment penalty that keeps both
//! encoders near the shared code space, and their bookkeeping.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::drl::AblationFlags;
use crate::error::{Result, UdcError};
use crate::numerics::graph::{Graph, Val};
use crate::numerics::nn::Mlp;
use crate::numerics::{Parameter, Tensor};

/// Encodes the next-visit target entities of one disease occurrence and
/// sums them into a single row: s = sum_t phi(row_t).
///
/// The sum runs in-graph as a ones-vector matmul so it is bitwise identical
/// to the left-fold the backward pass differentiates.
pub fn target_representation(g: &mut Graph, phi: &Mlp, table: &Tensor, ids: &[usize]) -> Result<Val> {
    if ids.is_empty() {
        return Err(UdcError::Contract("target representation of an empty target set".into()));
    }
    for &id in ids {
        if id >= table.rows() {
            return Err(UdcError::Contract(format!(
                "target id {} outside the {}-row entity table",
                id,
                table.rows()
            )));
        }
    }
    let rows = g.leaf(table);
    let gathered = g.gather_rows(rows, ids);
    let encoded = phi.forward(g, gathered)?;
    let ones = g.leaf(&Tensor::full(1, ids.len(), 1.0));
    Ok(g.matmul(ones, encoded))
}

/// Draws a synthetic negative target set: each member of `ids` is kept or
/// replaced with probability one half, the mask is redrawn until at least
/// one member is replaced, and replacements are sampled uniformly from the
/// ids of the class that never appear in the working set.
pub fn synthetic_negative(ids: &[usize], class_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(UdcError::Contract("cannot corrupt an empty target set".into()));
    }
    if class_size <= ids.len() {
        return Err(UdcError::Contract(format!(
            "no replacements available: {} targets fill a class of {}",
            ids.len(),
            class_size
        )));
    }
    let mut mask = vec![false; ids.len()];
    loop {
        for m in mask.iter_mut() {
            *m = rng.random_range(0..2) == 1;
        }
        if mask.iter().any(|&m| m) {
            break;
        }
    }
    let mut members: HashSet<usize> = ids.iter().copied().collect();
    let mut out = ids.to_vec();
    for (i, replaced) in mask.iter().enumerate() {
        if !replaced {
            continue;
        }
        // Sample while the original is still in the working set, so the
        // replacement can never silently redraw it.
        let fresh = loop {
            let cand = rng.random_range(0..class_size);
            if !members.contains(&cand) {
                break cand;
            }
        };
        members.remove(&ids[i]);
        members.insert(fresh);
        out[i] = fresh;
    }
    Ok(out)
}

/// Per-disease rows feeding the four contrastive terms. All vectors are
/// 1 x dim graph values indexed the same way: position d is disease d of
/// the batch.
pub struct ContrastiveBatch {
    /// Calibrated collaborative representations.
    pub z: Vec<Val>,
    /// Calibrated textual representations.
    pub z_te: Vec<Val>,
    /// Collaborative target sums.
    pub s: Vec<Val>,
    /// Textual target sums.
    pub s_te: Vec<Val>,
    /// Synthetic corruptions of `s`.
    pub s_syn: Vec<Val>,
    /// Synthetic corruptions of `s_te`.
    pub s_te_syn: Vec<Val>,
}

pub struct ContrastiveOut {
    pub intra_co: Val,
    pub inter_co: Val,
    pub intra_te: Val,
    pub inter_te: Val,
}

/// One noise-contrastive term: for each disease the positive score is
/// s_d W z_d and the denominator collects the synthetic negative plus every
/// other in-batch target (flags can remove either family).
fn nce(
    g: &mut Graph,
    u: &[Val],
    u_syn: &[Val],
    reps: &[Val],
    flags: &AblationFlags,
    include_positive: bool,
) -> Val {
    let b = reps.len();
    let mut per_d = Vec::with_capacity(b);
    for d in 0..b {
        let zt = g.transpose(reps[d]);
        let pos = g.matmul(u[d], zt);
        let mut terms: Vec<Val> = Vec::new();
        if !flags.ns {
            terms.push(g.matmul(u_syn[d], zt));
        }
        if !flags.nm {
            for (j, uj) in u.iter().enumerate() {
                if j != d {
                    terms.push(g.matmul(*uj, zt));
                }
            }
        }
        if include_positive {
            terms.push(pos);
        }
        if terms.is_empty() {
            // A batch of one with in-batch negatives removed has no
            // denominator left; that disease contributes nothing.
            continue;
        }
        let cat = g.concat_cols(&terms);
        let lse = g.logsumexp_all(cat);
        per_d.push(g.sub(lse, pos));
    }
    if per_d.is_empty() {
        return g.leaf(&Tensor::zeros(1, 1));
    }
    let sum = g.add_many(&per_d);
    g.scale(sum, 1.0 / b as f64)
}

/// The four contrastive losses of the alignment objective: each domain's
/// targets paired against the collaborative and the textual representation.
/// Under the no-task-signal ablation all four are structural zeros.
pub fn contrastive_losses(
    g: &mut Graph,
    batch: &ContrastiveBatch,
    w: &Parameter,
    flags: &AblationFlags,
    include_positive: bool,
) -> Result<ContrastiveOut> {
    let b = batch.z.len();
    if b == 0 {
        return Err(UdcError::Contract("contrastive batch is empty".into()));
    }
    if flags.nt {
        // Short-circuits before shape checks: callers skip building target
        // rows entirely when the task signal is ablated.
        let zero = g.leaf(&Tensor::zeros(1, 1));
        return Ok(ContrastiveOut { intra_co: zero, inter_co: zero, intra_te: zero, inter_te: zero });
    }
    for (name, v) in [
        ("z_te", batch.z_te.len()),
        ("s", batch.s.len()),
        ("s_te", batch.s_te.len()),
        ("s_syn", batch.s_syn.len()),
        ("s_te_syn", batch.s_te_syn.len()),
    ] {
        if v != b {
            return Err(UdcError::Contract(format!("contrastive batch field {} has {} rows, expected {}", name, v, b)));
        }
    }
    let wv = g.param(w);
    let proj = |g: &mut Graph, xs: &[Val]| -> Vec<Val> { xs.iter().map(|x| g.matmul(*x, wv)).collect() };
    let u_co = proj(g, &batch.s);
    let u_co_syn = proj(g, &batch.s_syn);
    let u_te = proj(g, &batch.s_te);
    let u_te_syn = proj(g, &batch.s_te_syn);

    Ok(ContrastiveOut {
        intra_co: nce(g, &u_co, &u_co_syn, &batch.z, flags, include_positive),
        inter_co: nce(g, &u_te, &u_te_syn, &batch.z, flags, include_positive),
        intra_te: nce(g, &u_te, &u_te_syn, &batch.z_te, flags, include_positive),
        inter_te: nce(g, &u_co, &u_co_syn, &batch.z_te, flags, include_positive),
    })
}

/// Commitment penalty for one disease: each encoder output is pulled toward
/// its own branch's quantized vector at full weight and toward the other
/// branch's at half weight. The quantized vectors enter as graph leaves, so
/// no gradient reaches the codebook through this term.
pub fn commitment_loss(
    g: &mut Graph,
    enc_co: Val,
    enc_te: Val,
    z_co: &Tensor,
    z_te: &Tensor,
    alpha: f64,
) -> Val {
    let zc = g.leaf(z_co);
    let zt = g.leaf(z_te);
    let own_co = g.sq_dist(enc_co, zc);
    let cross_co = g.sq_dist(enc_co, zt);
    let own_te = g.sq_dist(enc_te, zt);
    let cross_te = g.sq_dist(enc_te, zc);
    let own_co = g.scale(own_co, alpha);
    let cross_co = g.scale(cross_co, alpha / 2.0);
    let own_te = g.scale(own_te, alpha);
    let cross_te = g.scale(cross_te, alpha / 2.0);
    g.add_many(&[own_co, cross_co, own_te, cross_te])
}

/// Scalar epoch/batch record of every objective part.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub recon_co: f64,
    pub recon_te: f64,
    pub con_intra_co: f64,
    pub con_inter_co: f64,
    pub con_intra_te: f64,
    pub con_inter_te: f64,
    pub com: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::Activation;
    use crate::rng::sub_rng;

    fn leaf_row(g: &mut Graph, v: Vec<f64>) -> Val {
        g.leaf(&Tensor::vector(v))
    }

    #[test]
    fn target_representation_sums_encoded_rows() {
        // phi = identity (eye weights, zero bias), so the target sum is
        // just the sum of the gathered table rows.
        let mut rng = sub_rng(0, "loss");
        let phi = Mlp::new("phi", &[2, 2], Activation::Identity, &mut rng).unwrap();
        let ps = phi.params();
        ps[0].set_value(Tensor::eye(2));
        ps[1].set_value(Tensor::zeros(1, 2));
        let table = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let s = target_representation(&mut g, &phi, &table, &[0, 2]).unwrap();
        assert_eq!(g.data(s), [3.0, 2.0]);

        assert!(target_representation(&mut g, &phi, &table, &[]).is_err());
        assert!(target_representation(&mut g, &phi, &table, &[3]).is_err());
    }

    #[test]
    fn synthetic_negative_always_differs_and_stays_in_range() {
        let mut rng = sub_rng(1, "syn");
        for _ in 0..200 {
            let out = synthetic_negative(&[4], 10, &mut rng).unwrap();
            assert_eq!(out.len(), 1);
            assert_ne!(out[0], 4, "a single target must always be replaced");
            assert!(out[0] < 10);
        }
    }

    #[test]
    fn synthetic_negative_is_seed_deterministic() {
        let draw = || {
            let mut rng = sub_rng(7, "syn");
            synthetic_negative(&[1, 5, 9], 40, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn synthetic_negative_rejects_degenerate_requests() {
        let mut rng = sub_rng(2, "syn");
        assert!(synthetic_negative(&[], 10, &mut rng).is_err());
        assert!(synthetic_negative(&[0, 1, 2], 3, &mut rng).is_err());
    }

    #[test]
    fn replacement_frequency_matches_the_conditional_rate() {
        // With n targets, P(position i replaced | at least one replaced)
        // equals 0.5 / (1 - 0.5^n); for n = 3 that is 4/7.
        let n = 3;
        let trials = 10_000;
        let mut rng = sub_rng(3, "syn-freq");
        let ids = [10, 20, 30];
        let mut replaced = [0usize; 3];
        for _ in 0..trials {
            let out = synthetic_negative(&ids, 1000, &mut rng).unwrap();
            for i in 0..n {
                if out[i] != ids[i] {
                    replaced[i] += 1;
                }
            }
        }
        let expect = 0.5 / (1.0 - 0.5f64.powi(n as i32));
        for count in replaced {
            let freq = count as f64 / trials as f64;
            assert!((freq - expect).abs() < 0.02, "freq {} vs {}", freq, expect);
        }
    }

    fn one_disease_batch(g: &mut Graph, z: Vec<f64>, s: Vec<f64>, syn: Vec<f64>) -> ContrastiveBatch {
        ContrastiveBatch {
            z: vec![leaf_row(g, z.clone())],
            z_te: vec![leaf_row(g, z)],
            s: vec![leaf_row(g, s.clone())],
            s_te: vec![leaf_row(g, s)],
            s_syn: vec![leaf_row(g, syn.clone())],
            s_te_syn: vec![leaf_row(g, syn)],
        }
    }

    #[test]
    fn undamaged_synthetic_target_gives_zero_loss_for_a_single_disease() {
        // One disease, s_syn == s: the denominator holds exactly the
        // positive score, so logsumexp minus the positive is exactly zero.
        let mut g = Graph::new();
        let batch = one_disease_batch(&mut g, vec![0.3, -0.7], vec![1.1, 0.4], vec![1.1, 0.4]);
        let w = Parameter::new("w", Tensor::eye(2));
        let out = contrastive_losses(&mut g, &batch, &w, &AblationFlags::default(), false).unwrap();
        assert_eq!(g.data(out.intra_co), [0.0]);
        assert_eq!(g.data(out.inter_te), [0.0]);
    }

    #[test]
    fn nt_flag_zeroes_all_four_terms() {
        let mut g = Graph::new();
        let batch = one_disease_batch(&mut g, vec![0.5, 2.0], vec![-1.0, 1.0], vec![3.0, 0.0]);
        let w = Parameter::new("w", Tensor::eye(2));
        let flags = AblationFlags { nt: true, ..Default::default() };
        let out = contrastive_losses(&mut g, &batch, &w, &flags, false).unwrap();
        for v in [out.intra_co, out.inter_co, out.intra_te, out.inter_te] {
            assert_eq!(g.data(v), [0.0]);
        }
    }

    /// Hand-rolled scalar oracle for a two-disease batch with W = I.
    fn oracle(z: &[Vec<f64>], s: &[Vec<f64>], syn: &[Vec<f64>], use_syn: bool, use_batch: bool) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for d in 0..2 {
            let pos = dot(&s[d], &z[d]);
            let mut terms = Vec::new();
            if use_syn {
                terms.push(dot(&syn[d], &z[d]));
            }
            if use_batch {
                terms.push(dot(&s[1 - d], &z[d]));
            }
            if terms.is_empty() {
                continue;
            }
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            total += lse - pos;
        }
        total / 2.0
    }

    fn two_disease_fixture(g: &mut Graph) -> (ContrastiveBatch, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let z = vec![vec![0.4, -0.2], vec![-1.0, 0.6]];
        let z_te = vec![vec![0.1, 0.9], vec![0.5, -0.5]];
        let s = vec![vec![1.2, 0.3], vec![-0.4, 0.8]];
        let syn = vec![vec![0.0, 1.5], vec![2.0, -1.0]];
        let batch = ContrastiveBatch {
            z: z.iter().map(|v| leaf_row(g, v.clone())).collect(),
            z_te: z_te.iter().map(|v| leaf_row(g, v.clone())).collect(),
            s: s.iter().map(|v| leaf_row(g, v.clone())).collect(),
            s_te: s.iter().map(|v| leaf_row(g, v.clone())).collect(),
            s_syn: syn.iter().map(|v| leaf_row(g, v.clone())).collect(),
            s_te_syn: syn.iter().map(|v| leaf_row(g, v.clone())).collect(),
        };
        (batch, z, z_te, s, syn)
    }

    #[test]
    fn two_disease_batch_matches_the_scalar_oracle() {
        let mut g = Graph::new();
        let (batch, z, z_te, s, syn) = two_disease_fixture(&mut g);
        let w = Parameter::new("w", Tensor::eye(2));
        let out = contrastive_losses(&mut g, &batch, &w, &AblationFlags::default(), false).unwrap();
        let cases = [
            (out.intra_co, oracle(&z, &s, &syn, true, true)),
            (out.intra_te, oracle(&z_te, &s, &syn, true, true)),
            (out.inter_te, oracle(&z_te, &s, &syn, true, true)),
            (out.inter_co, oracle(&z, &s, &syn, true, true)),
        ];
        for (got, want) in cases {
            let v = g.data(got)[0];
            assert!((v - want).abs() < 1e-12, "{} vs {}", v, want);
        }
    }

    #[test]
    fn nm_and_ns_remove_exactly_their_denominator_terms() {
        let mut g = Graph::new();
        let (batch, z, _, s, syn) = two_disease_fixture(&mut g);
        let w = Parameter::new("w", Tensor::eye(2));

        let nm = AblationFlags { nm: true, ..Default::default() };
        let out = contrastive_losses(&mut g, &batch, &w, &nm, false).unwrap();
        let want = oracle(&z, &s, &syn, true, false);
        assert!((g.data(out.intra_co)[0] - want).abs() < 1e-12);

        let ns = AblationFlags { ns: true, ..Default::default() };
        let out = contrastive_losses(&mut g, &batch, &w, &ns, false).unwrap();
        let want = oracle(&z, &s, &syn, false, true);
        assert!((g.data(out.intra_co)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn positive_in_denominator_keeps_the_loss_positive() {
        // With the positive inside the denominator the loss is the negative
        // log of a proper probability, hence strictly positive even for a
        // perfectly matched synthetic target.
        let mut g = Graph::new();
        let batch = one_disease_batch(&mut g, vec![0.3, -0.7], vec![1.1, 0.4], vec![1.1, 0.4]);
        let w = Parameter::new("w", Tensor::eye(2));
        let out = contrastive_losses(&mut g, &batch, &w, &AblationFlags::default(), true).unwrap();
        // Two equal scores in the denominator: loss = ln 2.
        let v = g.data(out.intra_co)[0];
        assert!((v - 2.0f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn commitment_collapses_to_three_halves_alpha_when_te_is_committed() {
        // enc_te sits exactly on z (= z_co = z_te), enc_co is offset by
        // delta: total = alpha |delta|^2 + alpha/2 |delta|^2.
        let alpha = 0.25;
        let z = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let delta = [0.3, -0.1, 0.7];
        let e: Vec<f64> = z.data().iter().zip(delta).map(|(a, d)| a + d).collect();
        let mut g = Graph::new();
        let enc_co = leaf_row(&mut g, e);
        let enc_te = g.leaf(&z);
        let loss = commitment_loss(&mut g, enc_co, enc_te, &z, &z, alpha);
        let d2: f64 = delta.iter().map(|d| d * d).sum();
        let want = 1.5 * alpha * d2;
        assert!((g.data(loss)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn commitment_gradient_flows_to_the_encoder_only() {
        // d/de [a|e-z|^2 + (a/2)|e-zt|^2] = 2a(e-z) + a(e-zt); the quantized
        // tensors are leaves, so nothing else receives gradient.
        let alpha = 0.5;
        let e = Parameter::new("enc", Tensor::vector(vec![1.0, -2.0]));
        let z_co = Tensor::vector(vec![0.2, 0.4]);
        let z_te = Tensor::vector(vec![-0.6, 1.0]);
        let mut g = Graph::new();
        let ev = g.param(&e);
        let enc_te = g.leaf(&z_te);
        let loss = commitment_loss(&mut g, ev, enc_te, &z_co, &z_te, alpha);
        g.backward(loss).unwrap();
        let grad = e.borrow().grad.clone();
        let ev_v = e.value();
        for j in 0..2 {
            let want = 2.0 * alpha * (ev_v.data()[j] - z_co.data()[j]) + alpha * (ev_v.data()[j] - z_te.data()[j]);
            assert!((grad.data()[j] - want).abs() < 1e-12, "{} vs {}", grad.data()[j], want);
        }
    }
}
