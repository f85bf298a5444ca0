//! Residual quantization against a stack of shared per-level codebooks.

use crate::error::{Result, UdcError};
use crate::numerics::{sq_dist, Tensor};

/// A stack of code tables, one per residual level, shared by both branches:
/// collaborative and textual quantization read and update the same object.
#[derive(Debug, Clone)]
pub struct Codebook {
    levels: Vec<Tensor>,
}

impl Codebook {
    pub fn new(levels: usize, codes_per_level: usize, dim: usize) -> Self {
        Codebook { levels: vec![Tensor::zeros(codes_per_level, dim); levels] }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn codes_per_level(&self) -> usize {
        self.levels.first().map_or(0, |t| t.rows())
    }

    pub fn dim(&self) -> usize {
        self.levels.first().map_or(0, |t| t.cols())
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn code(&self, l: usize, i: usize) -> &[f64] {
        self.levels[l].row(i)
    }

    pub fn set_code(&mut self, l: usize, i: usize, values: &[f64]) {
        self.levels[l].set_row(i, values);
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|t| t.is_finite())
    }
}

/// Outcome of one residual quantization pass.
#[derive(Debug, Clone)]
pub struct QuantizationResult {
    /// Chosen code index per level.
    pub indices: Vec<usize>,
    /// Residuals r_0..r_L; entry l is the input to level l, the last entry
    /// is what remains after all levels.
    pub residuals: Vec<Vec<f64>>,
    /// Sum of the chosen code vectors.
    pub z: Vec<f64>,
}

/// Greedy per-level nearest-code assignment with residual subtraction.
/// Distance ties resolve to the lowest code index.
pub fn quantize_residual(r0: &[f64], book: &Codebook) -> Result<QuantizationResult> {
    if book.n_levels() == 0 || book.codes_per_level() == 0 {
        return Err(UdcError::Contract("codebook has no codes to quantize against".into()));
    }
    if r0.len() != book.dim() {
        return Err(UdcError::Dimension {
            op: "quantize_residual",
            detail: format!("input width {} vs codebook width {}", r0.len(), book.dim()),
        });
    }
    let mut residual = r0.to_vec();
    let mut residuals = vec![residual.clone()];
    let mut indices = Vec::with_capacity(book.n_levels());
    let mut z = vec![0.0; r0.len()];
    for l in 0..book.n_levels() {
        let table = book.level(l);
        let mut best = 0usize;
        let mut best_dist = sq_dist(&residual, table.row(0));
        for i in 1..table.rows() {
            let d = sq_dist(&residual, table.row(i));
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        let code = table.row(best);
        for (r, c) in residual.iter_mut().zip(code) {
            *r -= c;
        }
        for (zv, c) in z.iter_mut().zip(code) {
            *zv += c;
        }
        indices.push(best);
        residuals.push(residual.clone());
    }
    Ok(QuantizationResult { indices, residuals, z })
}
