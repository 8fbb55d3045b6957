//! Parameter initialization and named-parameter traversal.
//!
//! Every component exposes its arrays through [`ParamVisit`] in a fixed
//! canonical order. The optimizer, the checkpoint writer, and the parameter
//! counters all walk the same order, which keeps them trivially consistent.

use crate::tensor::Arr;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Whether an array is trained by the optimizer or carried along as state
/// (batch-norm running statistics).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    Learnable,
    Buffer,
}

/// Visitor over named arrays. Implementations must visit in a deterministic
/// order that depends only on the model architecture.
pub trait ParamVisit {
    fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Arr, ParamKind));
}

/// Collect `(name, kind, shape)` rows without holding borrows.
pub fn param_index<T: ParamVisit>(component: &mut T) -> Vec<(String, ParamKind, (usize, usize))> {
    let mut rows = Vec::new();
    component.visit("", &mut |name, arr, kind| {
        rows.push((name, kind, arr.dim()));
    });
    rows
}

/// Number of learnable scalars under a name prefix.
pub fn count_learnable<T: ParamVisit>(component: &mut T, prefix: &str) -> usize {
    let mut total = 0;
    component.visit("", &mut |name, arr, kind| {
        if kind == ParamKind::Learnable && name.starts_with(prefix) {
            total += arr.len();
        }
    });
    total
}

/// Standard normal sample via Box-Muller; keeps initialization independent
/// of distribution-crate implementation details.
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Matrix with entries drawn from N(0, std^2).
pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Arr {
    Arr::from_shape_fn((rows, cols), |_| normal_sample(rng) * std)
}

/// Identity matrix perturbed by N(0, std^2) noise; used for maps that
/// should start close to a pass-through.
pub fn identity_plus_noise(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Arr {
    let mut m = normal_init(rng, n, n, std);
    for i in 0..n {
        m[[i, i]] += 1.0;
    }
    m
}

pub fn zeros(rows: usize, cols: usize) -> Arr {
    Arr::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Arr {
    Arr::from_elem((rows, cols), 1.0)
}
