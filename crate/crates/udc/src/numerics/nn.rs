//! Neural building blocks on the autodiff graph: linear layers, MLPs,
//! multi-head attention, layer normalization, and sinusoidal positions.

use rand::Rng;

use super::graph::{Graph, Val};
use super::{Parameter, Tensor};
use crate::error::{Result, UdcError};

/// Nonlinearity between MLP layers. The default everywhere is GELU; identity
/// exists so tests can configure exactly invertible layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, g: &mut Graph, x: Val) -> Val {
        match self {
            Activation::Identity => x,
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Activation::Identity),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(UdcError::Config(format!("unknown activation '{}'", other))),
        }
    }
}

/// Xavier-uniform init tensor.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect())
        .expect("sized data")
}

/// Affine layer `x W + b` with `W: in x out`, `b: 1 x out`.
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

impl Linear {
    pub fn new(name: &str, in_w: usize, out_w: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Parameter::new(format!("{}/w", name), xavier(rng, in_w, out_w)),
            b: Parameter::new(format!("{}/b", name), Tensor::zeros(1, out_w)),
        }
    }

    pub fn in_width(&self) -> usize {
        self.w.borrow().value.rows()
    }

    pub fn out_width(&self) -> usize {
        self.w.borrow().value.cols()
    }

    pub fn forward(&self, g: &mut Graph, x: Val) -> Val {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// Affine-nonlinearity stack; the activation sits between layers, never
/// after the last one, so outputs live in an unconstrained range.
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    /// `widths` lists input, hidden..., output widths (at least in/out).
    pub fn new(name: &str, widths: &[usize], act: Activation, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(UdcError::Config(format!("mlp '{}' needs >= 2 nonzero widths, got {:?}", name, widths)));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, ws)| Linear::new(&format!("{}/l{}", name, i), ws[0], ws[1], rng))
            .collect();
        Ok(Mlp { layers, act })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    pub fn forward(&self, g: &mut Graph, x: Val) -> Result<Val> {
        let (_, cols) = g.shape(x);
        if cols != self.in_width() {
            return Err(UdcError::Dimension {
                op: "mlp_forward",
                detail: format!("input width {} vs first layer {}", cols, self.in_width()),
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i + 1 < self.layers.len() {
                h = self.act.apply(g, h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Projection parameters for learned multi-head attention (no biases).
pub struct MhaParams {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
}

impl MhaParams {
    pub fn new(name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        MhaParams {
            wq: Parameter::new(format!("{}/wq", name), xavier(rng, dim, dim)),
            wk: Parameter::new(format!("{}/wk", name), xavier(rng, dim, dim)),
            wv: Parameter::new(format!("{}/wv", name), xavier(rng, dim, dim)),
            wo: Parameter::new(format!("{}/wo", name), xavier(rng, dim, dim)),
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.wq.clone(), self.wk.clone(), self.wv.clone(), self.wo.clone()]
    }
}

/// Multi-head scaled dot-product attention.
///
/// With `params` present the usual learned projections and output map are
/// applied; with `None` the raw inputs are split into head chunks directly
/// (parameter-free attention, used where the result lives outside the
/// gradient graph and learned projections could never train).
pub fn multi_head_attention(
    g: &mut Graph,
    query: Val,
    key: Val,
    value: Val,
    heads: usize,
    params: Option<&MhaParams>,
) -> Result<Val> {
    let (qr, dim) = g.shape(query);
    let (kr, kc) = g.shape(key);
    let (vr, vc) = g.shape(value);
    if kr == 0 || vr == 0 || qr == 0 {
        return Err(UdcError::Contract("attention over an empty key/value set".into()));
    }
    if kr != vr {
        return Err(UdcError::Dimension {
            op: "multi_head_attention",
            detail: format!("key rows {} vs value rows {}", kr, vr),
        });
    }
    if kc != dim || vc != dim {
        return Err(UdcError::Dimension {
            op: "multi_head_attention",
            detail: format!("widths q={} k={} v={} differ", dim, kc, vc),
        });
    }
    if heads == 0 || dim % heads != 0 {
        return Err(UdcError::Config(format!("head count {} must divide width {}", heads, dim)));
    }
    let (q, k, v) = match params {
        Some(p) => {
            let wq = g.param(&p.wq);
            let wk = g.param(&p.wk);
            let wv = g.param(&p.wv);
            (g.matmul(query, wq), g.matmul(key, wk), g.matmul(value, wv))
        }
        None => (query, key, value),
    };
    let d_head = dim / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d_head, d_head);
        let kh = g.slice_cols(k, h * d_head, d_head);
        let vh = g.slice_cols(v, h * d_head, d_head);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        head_outs.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&head_outs);
    Ok(match params {
        Some(p) => {
            let wo = g.param(&p.wo);
            g.matmul(cat, wo)
        }
        None => cat,
    })
}

/// Layer normalization: row-wise standardize, then learned scale and shift.
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: Parameter::new(format!("{}/gamma", name), Tensor::full(1, dim, 1.0)),
            beta: Parameter::new(format!("{}/beta", name), Tensor::zeros(1, dim)),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Val) -> Val {
        let s = g.standardize(x, self.eps);
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        let scaled = g.mul_row(s, gm);
        g.add_row(scaled, bt)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Post-norm transformer encoder block: attention then feed-forward, each
/// wrapped in residual + layer norm.
pub struct TransformerBlock {
    pub attn: MhaParams,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ff_hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(UdcError::Config(format!("head count {} must divide width {}", heads, dim)));
        }
        Ok(TransformerBlock {
            attn: MhaParams::new(&format!("{}/attn", name), dim, rng),
            heads,
            ln1: LayerNorm::new(&format!("{}/ln1", name), dim, 1e-5),
            ff1: Linear::new(&format!("{}/ff1", name), dim, ff_hidden, rng),
            ff2: Linear::new(&format!("{}/ff2", name), ff_hidden, dim, rng),
            ln2: LayerNorm::new(&format!("{}/ln2", name), dim, 1e-5),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Val) -> Result<Val> {
        let a = multi_head_attention(g, x, x, x, self.heads, Some(&self.attn))?;
        let x = g.add(x, a);
        let x = self.ln1.forward(g, x);
        let h = self.ff1.forward(g, x);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h);
        let x = g.add(x, h);
        Ok(self.ln2.forward(g, x))
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut ps = self.attn.params();
        ps.extend(self.ln1.params());
        ps.extend(self.ff1.params());
        ps.extend(self.ff2.params());
        ps.extend(self.ln2.params());
        ps
    }
}

/// Sinusoidal position encodings, one row per position.
pub fn sinusoidal_pe(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim.div_ceil(2) {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe.data_mut()[pos * dim + 2 * i] = angle.sin();
            if 2 * i + 1 < dim {
                pe.data_mut()[pos * dim + 2 * i + 1] = angle.cos();
            }
        }
    }
    pe
}
