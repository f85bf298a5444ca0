//! Reverse-mode autodiff on an eager tape.
//!
//! A [`Graph`] records every operation of one training step in creation
//! order, which is already a topological order, so `backward` is a single
//! reverse sweep. Values are handles into the tape; parameters enter through
//! [`Graph::param`] and receive their gradients when the sweep finishes.
//! Stop-gradient nodes are exact identities forward and absolute barriers
//! backward.
//!
//! Shape agreement between operands is a programming invariant of the model
//! code, not user input, so graph ops assert it; user-facing widths are
//! validated by the model constructors before any graph is built.

use std::collections::HashMap;

use super::{mean_std, Parameter, Tensor};
use crate::error::{Result, UdcError};

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

enum Op {
    Leaf,
    Param(Parameter),
    MatMul(Val, Val),
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Scale(Val, f64),
    /// Matrix plus a single-row bias broadcast down the rows.
    AddRow(Val, Val),
    /// Matrix times a single-row scale broadcast down the rows.
    MulRow(Val, Val),
    Transpose(Val),
    Gelu(Val),
    Tanh(Val),
    SoftmaxRows(Val),
    /// Row-wise `(x - mean) / (std + eps)`.
    Standardize(Val, f64),
    MeanRows(Val),
    SumAll(Val),
    ConcatRows(Vec<Val>),
    ConcatCols(Vec<Val>),
    SliceRows(Val, usize, usize),
    SliceCols(Val, usize, usize),
    SelectCols(Val, Vec<usize>),
    /// Gather rows of a table by index; gradients scatter-add back.
    GatherRows(Val, Vec<usize>),
    /// Gradient barrier; the operand is kept only so the node graph stays
    /// uniform, backward never visits it.
    StopGrad(#[allow(dead_code)] Val),
    LogSumExpAll(Val),
    /// Mean logistic cross-entropy of logits against constant 0/1 targets.
    BceWithLogits(Val, Vec<f64>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Eager autodiff tape. One training step owns one graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<usize, Val>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Val) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, v: Val) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.data.clone()).expect("node shape consistent")
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Val) -> f64 {
        let n = &self.nodes[v.0];
        assert!(n.rows == 1 && n.cols == 1, "scalar() on {}x{} node", n.rows, n.cols);
        n.data[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>) -> Val {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node { op, rows, cols, data });
        Val(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push(Op::Leaf, t.rows(), t.cols(), t.data().to_vec())
    }

    /// Constant single-row leaf.
    pub fn leaf_row(&mut self, row: &[f64]) -> Val {
        self.push(Op::Leaf, 1, row.len(), row.to_vec())
    }

    /// Leaf bound to a parameter. Repeated calls for the same parameter
    /// return the same node, so its gradient accumulates in one place.
    pub fn param(&mut self, p: &Parameter) -> Val {
        if let Some(&v) = self.param_cache.get(&p.ptr_id()) {
            return v;
        }
        let t = p.value();
        let v = self.push(Op::Param(p.clone()), t.rows(), t.cols(), t.into_data());
        self.param_cache.insert(p.ptr_id(), v);
        v
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Val {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul inner dims {}x{} vs {}x{}", ar, ac, br, bc);
        let mut out = vec![0.0; ar * bc];
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        for i in 0..ar {
            for k in 0..ac {
                let aik = ad[i * ac + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bd[k * bc..(k + 1) * bc];
                let orow = &mut out[i * bc..(i + 1) * bc];
                for j in 0..bc {
                    orow[j] += aik * brow[j];
                }
            }
        }
        self.push(Op::MatMul(a, b), ar, bc, out)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        let (r, c) = self.same_shape("add", a, b);
        let data = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), r, c, data)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        let (r, c) = self.same_shape("sub", a, b);
        let data = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), r, c, data)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        let (r, c) = self.same_shape("mul", a, b);
        let data = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), r, c, data)
    }

    pub fn scale(&mut self, a: Val, k: f64) -> Val {
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), r, c, data)
    }

    /// `a + row` with `row` broadcast to every row of `a`.
    pub fn add_row(&mut self, a: Val, row: Val) -> Val {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert!(rr == 1 && rc == c, "add_row: {}x{} + {}x{}", r, c, rr, rc);
        let mut data = self.nodes[a.0].data.clone();
        let rd = &self.nodes[row.0].data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rd[j];
            }
        }
        self.push(Op::AddRow(a, row), r, c, data)
    }

    /// `a * row` elementwise with `row` broadcast to every row of `a`.
    pub fn mul_row(&mut self, a: Val, row: Val) -> Val {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert!(rr == 1 && rc == c, "mul_row: {}x{} * {}x{}", r, c, rr, rc);
        let mut data = self.nodes[a.0].data.clone();
        let rd = &self.nodes[row.0].data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= rd[j];
            }
        }
        self.push(Op::MulRow(a, row), r, c, data)
    }

    pub fn transpose(&mut self, a: Val) -> Val {
        let (r, c) = self.shape(a);
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ad[i * c + j];
            }
        }
        self.push(Op::Transpose(a), c, r, data)
    }

    pub fn gelu(&mut self, a: Val) -> Val {
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        self.push(Op::Gelu(a), r, c, data)
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), r, c, data)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: Val) -> Val {
        let (r, c) = self.shape(a);
        assert!(c > 0, "softmax of empty rows");
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), r, c, data)
    }

    /// Row-wise `(x - mean) / (std + eps)` with population std.
    pub fn standardize(&mut self, a: Val, eps: f64) -> Val {
        let (r, c) = self.shape(a);
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let (mu, sigma) = mean_std(row).expect("non-empty row");
            for j in 0..c {
                data[i * c + j] = (row[j] - mu) / (sigma + eps);
            }
        }
        self.push(Op::Standardize(a, eps), r, c, data)
    }

    /// Column-wise mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Val) -> Val {
        let (r, c) = self.shape(a);
        assert!(r > 0, "mean_rows of empty matrix");
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += ad[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        self.push(Op::MeanRows(a), 1, c, data)
    }

    pub fn sum_all(&mut self, a: Val) -> Val {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(Op::SumAll(a), 1, 1, vec![s])
    }

    /// Stack inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += pr;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), rows, c, data)
    }

    /// Place inputs side by side; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.shape(parts[0]).0;
        let total_c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = vec![0.0; r * total_c];
        let mut col0 = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r, "concat_cols row mismatch");
            let pd = &self.nodes[p.0].data;
            for i in 0..r {
                data[i * total_c + col0..i * total_c + col0 + pc]
                    .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
            }
            col0 += pc;
        }
        self.push(Op::ConcatCols(parts.to_vec()), r, total_c, data)
    }

    pub fn slice_rows(&mut self, a: Val, start: usize, len: usize) -> Val {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "slice_rows {}+{} > {}", start, len, r);
        let data = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows(a, start, len), len, c, data)
    }

    pub fn slice_cols(&mut self, a: Val, start: usize, len: usize) -> Val {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols {}+{} > {}", start, len, c);
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&ad[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols(a, start, len), r, len, data)
    }

    /// Pick columns by index (used to drop the positive column from a score
    /// row); gradients scatter-add back, so repeated indices are safe.
    pub fn select_cols(&mut self, a: Val, idx: &[usize]) -> Val {
        let (r, c) = self.shape(a);
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * idx.len()];
        for i in 0..r {
            for (jj, &j) in idx.iter().enumerate() {
                assert!(j < c, "select_cols index {} out of {}", j, c);
                data[i * idx.len() + jj] = ad[i * c + j];
            }
        }
        self.push(Op::SelectCols(a, idx.to_vec()), r, idx.len(), data)
    }

    /// Gather rows of a table by id; the table is typically an embedding
    /// parameter and gradients scatter-add into the touched rows only.
    pub fn gather_rows(&mut self, table: Val, ids: &[usize]) -> Val {
        let (r, c) = self.shape(table);
        let td = &self.nodes[table.0].data;
        let mut data = vec![0.0; ids.len() * c];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < r, "gather_rows id {} out of {}", id, r);
            data[i * c..(i + 1) * c].copy_from_slice(&td[id * c..(id + 1) * c]);
        }
        self.push(Op::GatherRows(table, ids.to_vec()), ids.len(), c, data)
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: Val) -> Val {
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0].data.clone();
        self.push(Op::StopGrad(a), r, c, data)
    }

    /// `log(sum(exp(x)))` over every element, max-subtracted.
    pub fn logsumexp_all(&mut self, a: Val) -> Val {
        let ad = &self.nodes[a.0].data;
        assert!(!ad.is_empty(), "logsumexp of empty input");
        let max = ad.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = ad.iter().map(|x| (x - max).exp()).sum();
        let v = max + sum.ln();
        self.push(Op::LogSumExpAll(a), 1, 1, vec![v])
    }

    /// Mean logistic cross-entropy of logits against constant 0/1 targets,
    /// computed in log-space so saturated logits stay finite.
    pub fn bce_with_logits(&mut self, logits: Val, targets: &[f64]) -> Val {
        let (r, c) = self.shape(logits);
        assert_eq!(r * c, targets.len(), "bce target length mismatch");
        debug_assert!(targets.iter().all(|&y| y == 0.0 || y == 1.0));
        let xs = &self.nodes[logits.0].data;
        let n = targets.len() as f64;
        let mut total = 0.0;
        for (x, y) in xs.iter().zip(targets) {
            // max(x,0) - x*y + ln(1 + exp(-|x|))
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        self.push(Op::BceWithLogits(logits, targets.to_vec()), 1, 1, vec![total / n])
    }

    /// Straight-through passthrough: forward takes the value of `target`,
    /// backward routes the gradient to `source` unchanged. Used to carry
    /// decoder gradients across the non-differentiable quantization step.
    pub fn straight_through(&mut self, source: Val, target: &Tensor) -> Val {
        let (r, c) = self.shape(source);
        assert!(r == target.rows() && c == target.cols(), "straight_through shape mismatch");
        let diff: Vec<f64> = target
            .data()
            .iter()
            .zip(&self.nodes[source.0].data)
            .map(|(t, s)| t - s)
            .collect();
        let d = self.push(Op::Leaf, r, c, diff);
        self.add(source, d)
    }

    /// Sum a list of same-shape values.
    pub fn add_many(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "add_many of nothing");
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Mean of a list of same-shape values.
    pub fn mean_many(&mut self, parts: &[Val]) -> Val {
        let s = self.add_many(parts);
        self.scale(s, 1.0 / parts.len() as f64)
    }

    /// Squared L2 distance between two same-shape values, as a scalar node.
    pub fn sq_dist(&mut self, a: Val, b: Val) -> Val {
        let d = self.sub(a, b);
        let d2 = self.mul(d, d);
        self.sum_all(d2)
    }

    fn same_shape(&self, op: &'static str, a: Val, b: Val) -> (usize, usize) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "{}: shape {:?} vs {:?}", op, sa, sb);
        sa
    }

    fn zip(&self, a: Val, b: Val, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    /// Reverse sweep from a scalar loss. Gradients of every reachable
    /// parameter node are accumulated into the parameters (frozen ones are
    /// skipped). Each node is visited exactly once.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        {
            let n = &self.nodes[loss.0];
            if n.rows != 1 || n.cols != 1 {
                return Err(UdcError::Contract(format!(
                    "backward requires a scalar loss, got {}x{}",
                    n.rows, n.cols
                )));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: the node being visited vs the grad table.
            let node = &self.nodes[idx];
            let (rows, cols) = (node.rows, node.cols);
            let mut addg = |slot: usize, contrib: Vec<f64>| {
                match &mut grads[slot] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    None => grads[slot] = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    if p.requires_grad() {
                        let mut inner = p.borrow_mut();
                        for (dst, src) in inner.grad.data_mut().iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let bc = cols;
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    // dA = G * B^T
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..ar {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += g[i * bc + j] * bd[k * bc + j];
                            }
                            da[i * ac + k] = s;
                        }
                    }
                    // dB = A^T * G
                    let mut db = vec![0.0; ac * bc];
                    for k in 0..ac {
                        for i in 0..ar {
                            let aik = ad[i * ac + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..bc {
                                db[k * bc + j] += aik * g[i * bc + j];
                            }
                        }
                    }
                    let (a, b) = (*a, *b);
                    addg(a.0, da);
                    addg(b.0, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    addg(a.0, g.clone());
                    addg(b.0, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    addg(a.0, g.clone());
                    addg(b.0, g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).collect();
                    let (a, b) = (*a, *b);
                    addg(a.0, da);
                    addg(b.0, db);
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    addg(a.0, g.iter().map(|x| x * k).collect());
                }
                Op::AddRow(a, row) => {
                    let mut drow = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            drow[j] += g[i * cols + j];
                        }
                    }
                    let (a, row) = (*a, *row);
                    addg(a.0, g);
                    addg(row.0, drow);
                }
                Op::MulRow(a, row) => {
                    let ad = &self.nodes[a.0].data;
                    let rd = &self.nodes[row.0].data;
                    let mut da = vec![0.0; rows * cols];
                    let mut drow = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] = g[i * cols + j] * rd[j];
                            drow[j] += g[i * cols + j] * ad[i * cols + j];
                        }
                    }
                    let (a, row) = (*a, *row);
                    addg(a.0, da);
                    addg(row.0, drow);
                }
                Op::Transpose(a) => {
                    // This node is c x r of the input; transpose g back.
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[j * rows + i] = g[i * cols + j];
                        }
                    }
                    let a = *a;
                    addg(a.0, da);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    let a = *a;
                    addg(a.0, da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    let a = *a;
                    addg(a.0, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.data;
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let yrow = &y[i * cols..(i + 1) * cols];
                        let grow = &g[i * cols..(i + 1) * cols];
                        let gy: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            da[i * cols + j] = yrow[j] * (grow[j] - gy);
                        }
                    }
                    let a = *a;
                    addg(a.0, da);
                }
                Op::Standardize(a, eps) => {
                    let eps = *eps;
                    let y = &node.data;
                    let xd = &self.nodes[a.0].data;
                    let mut da = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for i in 0..rows {
                        let xrow = &xd[i * cols..(i + 1) * cols];
                        let yrow = &y[i * cols..(i + 1) * cols];
                        let grow = &g[i * cols..(i + 1) * cols];
                        let (_, sigma) = mean_std(xrow).expect("non-empty row");
                        let gmean: f64 = grow.iter().sum::<f64>() / n;
                        let gy_mean: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n;
                        for j in 0..cols {
                            let mut v = (grow[j] - gmean) / (sigma + eps);
                            // The sigma path is undefined at sigma == 0 (a
                            // constant row sits on the kink); treat sigma as
                            // locally constant there.
                            if sigma > 1e-12 {
                                v -= yrow[j] * gy_mean / sigma;
                            }
                            da[i * cols + j] = v;
                        }
                    }
                    let a = *a;
                    addg(a.0, da);
                }
                Op::MeanRows(a) => {
                    let in_rows = self.nodes[a.0].rows;
                    let scale = 1.0 / in_rows as f64;
                    let mut da = vec![0.0; in_rows * cols];
                    for i in 0..in_rows {
                        for j in 0..cols {
                            da[i * cols + j] = g[j] * scale;
                        }
                    }
                    let a = *a;
                    addg(a.0, da);
                }
                Op::SumAll(a) => {
                    let (ir, ic) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let a = *a;
                    addg(a.0, vec![g[0]; ir * ic]);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut row0 = 0;
                    for p in parts {
                        let (pr, pc) = (self.nodes[p.0].rows, self.nodes[p.0].cols);
                        let dp = g[row0 * pc..(row0 + pr) * pc].to_vec();
                        addg(p.0, dp);
                        row0 += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut col0 = 0;
                    for p in parts {
                        let (pr, pc) = (self.nodes[p.0].rows, self.nodes[p.0].cols);
                        let mut dp = vec![0.0; pr * pc];
                        for i in 0..pr {
                            dp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g[i * cols + col0..i * cols + col0 + pc]);
                        }
                        addg(p.0, dp);
                        col0 += pc;
                    }
                }
                Op::SliceRows(a, start, _len) => {
                    let (ir, ic) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let mut da = vec![0.0; ir * ic];
                    da[start * ic..start * ic + g.len()].copy_from_slice(&g);
                    let a = *a;
                    addg(a.0, da);
                }
                Op::SliceCols(a, start, len) => {
                    let (ir, ic) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let (start, len) = (*start, *len);
                    let mut da = vec![0.0; ir * ic];
                    for i in 0..ir {
                        for j in 0..len {
                            da[i * ic + start + j] = g[i * len + j];
                        }
                    }
                    let a = *a;
                    addg(a.0, da);
                }
                Op::SelectCols(a, idx) => {
                    let (ir, ic) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let idx = idx.clone();
                    let mut da = vec![0.0; ir * ic];
                    for i in 0..ir {
                        for (jj, &j) in idx.iter().enumerate() {
                            da[i * ic + j] += g[i * idx.len() + jj];
                        }
                    }
                    let a = *a;
                    addg(a.0, da);
                }
                Op::GatherRows(table, ids) => {
                    let (tr, tc) = (self.nodes[table.0].rows, self.nodes[table.0].cols);
                    let ids = ids.clone();
                    let mut dt = vec![0.0; tr * tc];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..tc {
                            dt[id * tc + j] += g[i * tc + j];
                        }
                    }
                    let table = *table;
                    addg(table.0, dt);
                }
                Op::StopGrad(_) => {}
                Op::LogSumExpAll(a) => {
                    let ad = &self.nodes[a.0].data;
                    let max = ad.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = ad.iter().map(|x| (x - max).exp()).sum();
                    let da: Vec<f64> = ad.iter().map(|x| g[0] * (x - max).exp() / sum).collect();
                    let a = *a;
                    addg(a.0, da);
                }
                Op::BceWithLogits(logits, targets) => {
                    let xs = &self.nodes[logits.0].data;
                    let n = targets.len() as f64;
                    let da: Vec<f64> = xs
                        .iter()
                        .zip(targets)
                        .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / n)
                        .collect();
                    let logits = *logits;
                    addg(logits.0, da);
                }
            }
        }
        Ok(())
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Plain (non-recorded) matrix product used by oracles and model code that
/// operates outside any training step.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(UdcError::Dimension {
            op: "matmul",
            detail: format!("{}x{} times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    let mut g = Graph::new();
    let av = g.leaf(a);
    let bv = g.leaf(b);
    let out = g.matmul(av, bv);
    Ok(g.tensor(out))
}
