//! Hand-rolled differentiable building blocks on `ndarray`.
//!
//! Every block exposes an explicit `forward` and `backward` pair; gradients
//! are derived by hand and verified against central finite differences in the
//! test suite. Blocks are generic over the element type so training can run
//! in f32 while gradient checks run in f64.

mod conv;
mod linear;
mod norm;
pub mod ops;

pub use conv::Conv3d;
pub use linear::Linear;
pub use norm::{InstanceNorm3d, InstanceNormCache};

use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::Rng;

/// Scalar element type for all tensors (f32 for training, f64 for checks).
pub trait Real: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Negative slope shared by every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Uniform access to a module's parameters, used by the optimizer, the
/// checkpoint writer, and the finite-difference harness. Visitation order is
/// the construction order and therefore stable for a given config.
pub trait Params<T: Real> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'s, T>));
    fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'s, T>));
}

pub fn collect_params<'s, T: Real, M: Params<T> + ?Sized>(
    m: &'s M,
) -> Vec<(String, ArrayViewD<'s, T>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, view| out.push((name, view)));
    out
}

pub fn collect_params_mut<'s, T: Real, M: Params<T> + ?Sized>(
    m: &'s mut M,
) -> Vec<(String, ArrayViewMutD<'s, T>)> {
    let mut out = Vec::new();
    m.visit_mut("", &mut |name, view| out.push((name, view)));
    out
}

pub fn num_params<T: Real, M: Params<T> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, view| n += view.len());
    n
}

/// Set every parameter to zero (used to turn a cloned model into a gradient
/// accumulator).
pub fn zero_params<T: Real, M: Params<T> + ?Sized>(m: &mut M) {
    m.visit_mut("", &mut |_, mut view| view.fill(T::zero()));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform<T: Real, R: Rng>(fan_in: usize, n: usize, rng: &mut R) -> Vec<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}
