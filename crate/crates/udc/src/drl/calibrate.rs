//! Condition-aware calibration: quantized disease vectors are modulated by
//! the procedures and medications that co-occur with the disease, via a
//! feature-wise affine transform whose coefficients depend on the vector
//! being calibrated.

use std::cell::Cell;

use rand::Rng;

use crate::error::Result;
use crate::numerics::graph::{Graph, Val};
use crate::numerics::nn::{multi_head_attention, Linear, MhaParams};
use crate::numerics::{Parameter, Tensor};

/// Self-attention pooling over same-visit context plus the affine modulator.
///
/// Procedure and medication rows each pass through their own self-attention
/// and are mean-pooled; the two pooled summaries are added into a single
/// condition vector `f`. Calibration standardizes `f` and applies
/// `phi_gamma(z) * f_norm + phi_beta(z)`, so the vector being calibrated
/// chooses how strongly each feature of the context is admitted.
pub struct ConditionCalibrator {
    pub mha_p: MhaParams,
    pub mha_m: MhaParams,
    pub heads: usize,
    /// Maps the pooled context down to the code width when the two differ.
    pub proj: Option<Linear>,
    /// Stand-ins for visits with no recorded procedures / medications.
    pub default_p: Parameter,
    pub default_m: Parameter,
    pub phi_gamma: Linear,
    pub phi_beta: Linear,
    pub eps: f64,
    calibrations: Cell<u64>,
}

impl ConditionCalibrator {
    pub fn new(name: &str, ctx_dim: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let proj = if ctx_dim != dim { Some(Linear::new(&format!("{name}/proj"), ctx_dim, dim, rng)) } else { None };
        ConditionCalibrator {
            mha_p: MhaParams::new(&format!("{name}/mha_p"), ctx_dim, rng),
            mha_m: MhaParams::new(&format!("{name}/mha_m"), ctx_dim, rng),
            heads,
            proj,
            default_p: Parameter::new(format!("{name}/default_p"), Tensor::zeros(1, dim)),
            default_m: Parameter::new(format!("{name}/default_m"), Tensor::zeros(1, dim)),
            phi_gamma: Linear::new(&format!("{name}/phi_gamma"), dim, dim, rng),
            phi_beta: Linear::new(&format!("{name}/phi_beta"), dim, dim, rng),
            eps: 1e-5,
            calibrations: Cell::new(0),
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut out = self.mha_p.params();
        out.extend(self.mha_m.params());
        if let Some(p) = &self.proj {
            out.extend(p.params());
        }
        out.push(self.default_p.clone());
        out.push(self.default_m.clone());
        out.extend(self.phi_gamma.params());
        out.extend(self.phi_beta.params());
        out
    }

    /// How many times `calibrate` has run; the no-calibration ablation
    /// asserts this stays at zero.
    pub fn calibrations(&self) -> u64 {
        self.calibrations.get()
    }

    fn pooled(&self, g: &mut Graph, rows: Val, mha: &MhaParams) -> Result<Val> {
        let att = multi_head_attention(g, rows, rows, rows, self.heads, Some(mha))?;
        let mean = g.mean_rows(att);
        Ok(match &self.proj {
            Some(p) => p.forward(g, mean),
            None => mean,
        })
    }

    /// Builds the condition vector from whatever context exists. A missing
    /// class falls back to its learned default row; a visit with no context
    /// at all yields `default_p + default_m` rather than an error.
    pub fn condition_vector(&self, g: &mut Graph, proc_rows: Option<Val>, med_rows: Option<Val>) -> Result<Val> {
        let term_p = match proc_rows {
            Some(rows) => self.pooled(g, rows, &self.mha_p)?,
            None => g.param(&self.default_p),
        };
        let term_m = match med_rows {
            Some(rows) => self.pooled(g, rows, &self.mha_m)?,
            None => g.param(&self.default_m),
        };
        Ok(g.add(term_p, term_m))
    }

    /// z = phi_gamma(z_old) * standardize(f) + phi_beta(z_old).
    pub fn calibrate(&self, g: &mut Graph, z_old: Val, f: Val) -> Result<Val> {
        let gamma = self.phi_gamma.forward(g, z_old);
        let beta = self.phi_beta.forward(g, z_old);
        let f_norm = g.standardize(f, self.eps);
        let scaled = g.mul(gamma, f_norm);
        self.calibrations.set(self.calibrations.get() + 1);
        Ok(g.add(scaled, beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use crate::rng::sub_rng;

    fn make_identity(mha: &MhaParams, dim: usize) {
        mha.wq.set_value(Tensor::eye(dim));
        mha.wk.set_value(Tensor::eye(dim));
        mha.wv.set_value(Tensor::eye(dim));
        mha.wo.set_value(Tensor::eye(dim));
    }

    fn zero_linear(l: &Linear) {
        let (r, c) = (l.w.value().rows(), l.w.value().cols());
        l.w.set_value(Tensor::zeros(r, c));
        l.b.set_value(Tensor::zeros(1, c));
    }

    fn identity_linear(l: &Linear) {
        let dim = l.w.value().rows();
        l.w.set_value(Tensor::eye(dim));
        l.b.set_value(Tensor::zeros(1, dim));
    }

    #[test]
    fn single_procedure_row_passes_through_identity_attention() {
        // One key means softmax weight 1, so with identity projections the
        // pooled term is the row itself; medications are absent and their
        // default is zero, so f equals the procedure row exactly.
        let dim = 4;
        let mut rng = sub_rng(1, "calib");
        let calib = ConditionCalibrator::new("c", dim, dim, 2, &mut rng);
        make_identity(&calib.mha_p, dim);

        let mut g = Graph::new();
        let row = Tensor::vector(vec![0.3, -1.2, 0.5, 2.0]);
        let rows = g.leaf(&row);
        let f = calib.condition_vector(&mut g, Some(rows), None).unwrap();
        let got = g.data(f).to_vec();
        for (a, b) in got.iter().zip(row.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_context_yields_the_learned_defaults_without_error() {
        let dim = 3;
        let mut rng = sub_rng(2, "calib");
        let calib = ConditionCalibrator::new("c", dim, dim, 1, &mut rng);
        calib.default_p.set_value(Tensor::vector(vec![1.0, 2.0, 3.0]));
        calib.default_m.set_value(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let mut g = Graph::new();
        let f = calib.condition_vector(&mut g, None, None).unwrap();
        assert_eq!(g.data(f), [1.5, 2.5, 3.5]);
    }

    #[test]
    fn identity_attention_matches_a_hand_rolled_softmax_pool() {
        // Two procedure rows, identity projections, one head: the attention
        // output row i is sum_j softmax(q_i . k_j / sqrt(d)) v_j; the pooled
        // term is the mean of the two output rows.
        let dim = 2;
        let mut rng = sub_rng(3, "calib");
        let calib = ConditionCalibrator::new("c", dim, dim, 1, &mut rng);
        make_identity(&calib.mha_p, dim);
        let r0 = vec![1.0, 0.0];
        let r1 = vec![0.0, 2.0];
        let mut g = Graph::new();
        let rows = g.leaf(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let f = calib.condition_vector(&mut g, Some(rows), None).unwrap();
        let got = g.data(f).to_vec();

        let scale = 1.0 / (dim as f64).sqrt();
        let attn_row = |q: &[f64]| {
            let l0 = (q[0] * r0[0] + q[1] * r0[1]) * scale;
            let l1 = (q[0] * r1[0] + q[1] * r1[1]) * scale;
            let m = l0.max(l1);
            let (w0, w1) = ((l0 - m).exp(), (l1 - m).exp());
            let s = w0 + w1;
            [
                (w0 * r0[0] + w1 * r1[0]) / s,
                (w0 * r0[1] + w1 * r1[1]) / s,
            ]
        };
        let a0 = attn_row(&r0);
        let a1 = attn_row(&r1);
        let expect = [(a0[0] + a1[0]) / 2.0, (a0[1] + a1[1]) / 2.0];
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gamma_and_identity_beta_reproduce_the_input() {
        // With phi_gamma == 0 the context is fully gated out and
        // phi_beta == identity returns z_old untouched.
        let dim = 3;
        let mut rng = sub_rng(4, "calib");
        let calib = ConditionCalibrator::new("c", dim, dim, 1, &mut rng);
        zero_linear(&calib.phi_gamma);
        identity_linear(&calib.phi_beta);
        let mut g = Graph::new();
        let z_old = g.leaf(&Tensor::vector(vec![0.4, -0.9, 1.7]));
        let f = g.leaf(&Tensor::vector(vec![5.0, 6.0, 7.0]));
        let z = calib.calibrate(&mut g, z_old, f).unwrap();
        assert_eq!(g.data(z), [0.4, -0.9, 1.7]);
        assert_eq!(calib.calibrations(), 1);
    }

    #[test]
    fn constant_context_standardizes_to_zero() {
        // A constant f has zero variance, so its standardized form is zero
        // and with gamma == 1, beta == 0 the calibrated vector vanishes.
        let dim = 4;
        let mut rng = sub_rng(5, "calib");
        let calib = ConditionCalibrator::new("c", dim, dim, 1, &mut rng);
        zero_linear(&calib.phi_gamma);
        calib.phi_gamma.b.set_value(Tensor::vector(vec![1.0; dim]));
        zero_linear(&calib.phi_beta);
        let mut g = Graph::new();
        let z_old = g.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let f = g.leaf(&Tensor::vector(vec![2.5; dim]));
        let z = calib.calibrate(&mut g, z_old, f).unwrap();
        for v in g.data(z) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn calibration_matches_a_straight_line_oracle() {
        // Independent scalar recomputation of the full affine transform for
        // random weights: gamma/beta as explicit matmuls, standardization as
        // (f - mean) / (sd + eps).
        let dim = 3;
        let mut rng = sub_rng(6, "calib");
        let calib = ConditionCalibrator::new("c", dim, dim, 1, &mut rng);
        let z_old_v = vec![0.2, -1.1, 0.8];
        let f_v = vec![3.0, -2.0, 0.5];

        let mut g = Graph::new();
        let z_old = g.leaf(&Tensor::vector(z_old_v.clone()));
        let f = g.leaf(&Tensor::vector(f_v.clone()));
        let z = calib.calibrate(&mut g, z_old, f).unwrap();
        let got = g.data(z).to_vec();

        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = l.w.value();
            let b = l.b.value();
            (0..dim)
                .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.at(i, j)).sum::<f64>() + b.at(0, j))
                .collect()
        };
        let gamma = lin(&calib.phi_gamma, &z_old_v);
        let beta = lin(&calib.phi_beta, &z_old_v);
        let mean = f_v.iter().sum::<f64>() / dim as f64;
        let var = f_v.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let sd = var.sqrt();
        for j in 0..dim {
            let expect = gamma[j] * (f_v[j] - mean) / (sd + 1e-5) + beta[j];
            assert!((got[j] - expect).abs() < 1e-10, "{} vs {}", got[j], expect);
        }
    }
}

