//! Dense double-precision numerics with reverse-mode gradients.
//!
//! Everything here is RNG-free and deterministic: identical inputs produce
//! bit-identical outputs. Randomness (initialisation, sampling) is owned by
//! callers and passed in explicitly.

mod adam;
mod gradcheck;
mod matrix;
pub mod ops;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, NamedTensors, ParamSet};
pub use gradcheck::{grad_check, grad_check_coords, numeric_partial, relative_error, FD_STEP};
pub use matrix::{affine_rows, matmul, matmul_nt, Matrix};
pub use ops::{affine, log_softmax, relu, sigmoid, softmax};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: index {index} out of bounds (< {bound})")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("non-finite values in {name}")]
    NonFinite { name: String },
}

/// Glorot-style uniform initialisation in `±sqrt(6 / (fan_in + fan_out))`
/// for an `out × in` weight matrix.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}
