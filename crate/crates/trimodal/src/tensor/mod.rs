//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the plain value type (row-major `f64` storage). All
//! differentiable computation goes through a [`Graph`] tape: ops append nodes,
//! [`Graph::backward`] walks the tape once in reverse. Inference paths build a
//! graph with `requires_grad` off and just read values.
//!
//! Values are held as `f64` regardless of precision mode; in [`Precision::F32`]
//! every public op rounds its output through `f32`, and checkpoints store
//! 4-byte values. Tests run in `F64`, where finite-difference checks are
//! reliable.

mod fdcheck;
mod graph;
mod store;

pub use fdcheck::{check_gradients, check_param_gradients};
pub use graph::{Graph, Var};
pub use store::{load_tensors, save_tensors, seed_for, ParamBinding, ParamStore};

use std::sync::atomic::{AtomicU8, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Value precision for tensor computation and checkpoint storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

static DEFAULT_PRECISION: AtomicU8 = AtomicU8::new(1); // 0 = F32, 1 = F64

/// Set the process-wide default precision picked up by `Graph::new`.
pub fn set_default_precision(p: Precision) {
    DEFAULT_PRECISION.store(matches!(p, Precision::F64) as u8, Ordering::Relaxed);
}

pub fn default_precision() -> Precision {
    if DEFAULT_PRECISION.load(Ordering::Relaxed) == 0 {
        Precision::F32
    } else {
        Precision::F64
    }
}

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::from_rows",
                    lhs: vec![n_rows, n_cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n_rows, n_cols], data)
    }

    /// Scaled-normal initialization (std 0.02), seeded per call.
    pub fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(&mut rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as 2-D (leading axis; 1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Trailing-axis length (columns when 2-D, length when 1-D).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Round every value through `f32` storage (no-op in `F64`).
    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(vec![4, 4], 0.02, 7);
        let b = Tensor::randn(vec![4, 4], 0.02, 7);
        assert_eq!(a, b);
        let c = Tensor::randn(vec![4, 4], 0.02, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn f32_rounding_quantizes() {
        let mut t = Tensor::new(vec![1], vec![0.1]).unwrap();
        t.round_to(Precision::F32);
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }
}
