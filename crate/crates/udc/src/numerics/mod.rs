//! Dense f64 tensors, trainable parameters, and small numeric helpers.
//!
//! Everything in the crate computes on 64-bit floats: at desk scale the
//! speed cost is irrelevant, while determinism and finite-difference
//! gradient checks benefit from the extra precision.

pub mod check;
pub mod graph;
pub mod nn;
pub mod optim;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, UdcError};

/// Row-major dense tensor. The crate uses at most two axes; a vector is
/// stored as a single-row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(UdcError::Dimension {
                op: "Tensor::matrix",
                detail: format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            });
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    /// Single-row vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    /// Matrix filled with one value.
    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![value; rows * cols] }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Tensor with an explicit (possibly non-2d) shape, used by checkpoints.
    pub fn with_shape(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(UdcError::Dimension {
                op: "Tensor::with_shape",
                detail: format!("shape {:?} incompatible with {} values", shape, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Rows of a 2-d tensor (a vector counts as one row).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        assert!(self.shape.len() == 2, "tensor is not 2-d: {:?}", self.shape);
        self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element at `(r, c)`.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// One row as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn set_row(&mut self, r: usize, values: &[f64]) {
        let c = self.cols();
        assert_eq!(values.len(), c, "row width mismatch");
        self.data[r * c..(r + 1) * c].copy_from_slice(values);
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// Population mean and standard deviation of a slice, two-pass.
///
/// The standard deviation divides by `n` (not `n - 1`): the normalization in
/// the calibration step treats the vector as the whole population, the same
/// convention layer normalization uses.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(UdcError::Contract("mean_std of empty input".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distance between two equal-length slices.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity; 0 when either vector is all-zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// A named, trainable tensor shared between the model that owns it and the
/// compute graphs that read it. Gradients accumulate here across `backward`
/// calls until the optimizer consumes them.
#[derive(Clone)]
pub struct Parameter(Rc<RefCell<ParamInner>>);

pub struct ParamInner {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
    /// AdamW first/second moment state; lives with the parameter so one
    /// optimizer instance can be rebuilt without losing momentum.
    pub m: Tensor,
    pub v: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let (r, c) = (value.rows(), value.cols());
        Parameter(Rc::new(RefCell::new(ParamInner {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            requires_grad: true,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        })))
    }

    pub fn borrow(&self) -> std::cell::Ref<'_, ParamInner> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> std::cell::RefMut<'_, ParamInner> {
        self.0.borrow_mut()
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn value(&self) -> Tensor {
        self.0.borrow().value.clone()
    }

    pub fn set_value(&self, t: Tensor) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(
            (inner.value.rows(), inner.value.cols()),
            (t.rows(), t.cols()),
            "parameter {} shape change",
            inner.name
        );
        inner.value = t;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Freeze or unfreeze: frozen parameters receive no gradient and are
    /// skipped by the optimizer.
    pub fn set_requires_grad(&self, yes: bool) {
        self.0.borrow_mut().requires_grad = yes;
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad.fill(0.0);
    }

    /// Identity for deduplication when collecting parameter lists.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rejects_bad_length() {
        assert!(Tensor::matrix(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::matrix(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn mean_std_constant_vector() {
        let (m, s) = mean_std(&[4.5; 8]).unwrap();
        assert_eq!(m, 4.5);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn mean_std_two_point() {
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn mean_std_matches_two_pass_oracle() {
        // Independent two-pass evaluation over a fixed 16-vector.
        let xs: Vec<f64> = (0..16).map(|i| ((i * 37 + 11) % 17) as f64 * 0.31 - 2.0).collect();
        let mean_o = xs.iter().sum::<f64>() / 16.0;
        let var_o = xs.iter().map(|x| (x - mean_o).powi(2)).sum::<f64>() / 16.0;
        let (m, s) = mean_std(&xs).unwrap();
        assert!((m - mean_o).abs() < 1e-12);
        assert!((s - var_o.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mean_std_empty_is_error() {
        assert!(mean_std(&[]).is_err());
    }

    #[test]
    fn parameter_freeze_roundtrip() {
        let p = Parameter::new("w", Tensor::zeros(2, 2));
        assert!(p.requires_grad());
        p.set_requires_grad(false);
        assert!(!p.requires_grad());
    }
}
