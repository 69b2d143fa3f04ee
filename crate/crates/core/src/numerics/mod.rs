//! Dense linear algebra and differentiable building blocks.
//!
//! Everything learnable in the crate lives in one flat `f64` parameter
//! vector. A [`Tape`] borrows that vector, records a forward computation and
//! replays it backward into a gradient vector of the same layout.

mod gradcheck;
mod mat;
mod nn;
mod optim;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, REL_ERR_FLOOR};
pub use mat::Mat;
pub use nn::{
    attention, log_softmax, mlp_forward, softmax, tape_attention, Activation, Linear, Mlp, ParamBuilder,
    ParamRef, Section,
};
pub use optim::{Momentum, OptimConfig};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite value {value} at probe {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("finite-difference step {0} outside [1e-7, 1e-4]")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Element-wise mean of equally sized vectors. Empty input yields `None`.
pub fn mean_of<'a, I>(vectors: I) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next()?;
    let mut acc = first.to_vec();
    let mut n = 1usize;
    for v in iter {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Some(acc)
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
