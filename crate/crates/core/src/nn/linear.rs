use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{he_uniform, join, Params, Real};
use crate::error::{Error, Result};

/// Fully connected layer: `y = x W^T + b` on row-major batches.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>, // (out, in)
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = he_uniform(d_in, d_out * d_in, rng);
        Linear {
            weight: Array2::from_shape_vec((d_out, d_in), w).unwrap(),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.dim().1 != self.weight.dim().1 {
            return Err(Error::shape(format!(
                "linear expects {} inputs, got {}",
                self.weight.dim().1,
                x.dim().1
            )));
        }
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        Ok(y)
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        f(join(prefix, "w"), self.weight.view().into_dyn());
        f(join(prefix, "b"), self.bias.view().into_dyn());
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        f(join(prefix, "w"), self.weight.view_mut().into_dyn());
        f(join(prefix, "b"), self.bias.view_mut().into_dyn());
    }
}
