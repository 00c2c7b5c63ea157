use ndarray::{Array1, Array2, Array5};

use super::{join, Params, Real};
use crate::error::{Error, Result};

/// Instance normalization over the spatial dims of each (batch, channel)
/// slice, with a learnable per-channel affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm3d<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: f64,
}

/// Per-slice statistics cached by the forward pass for reuse in backward.
#[derive(Debug, Clone)]
pub struct InstanceNormCache<T> {
    pub mean: Array2<T>,
    pub inv_std: Array2<T>,
}

impl<T: Real> InstanceNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm3d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array5<T>) -> Result<(Array5<T>, InstanceNormCache<T>)> {
        let (bn, c, d, h, w) = x.dim();
        if c != self.gamma.len() {
            return Err(Error::shape(format!(
                "instance norm expects {} channels, got {c}",
                self.gamma.len()
            )));
        }
        let n = d * h * w;
        let inv_n = T::from_f64(1.0 / n as f64);
        let eps = T::from_f64(self.eps);
        let mut y = Array5::zeros((bn, c, d, h, w));
        let mut mean = Array2::zeros((bn, c));
        let mut inv_std = Array2::zeros((bn, c));

        let xs = x.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().unwrap();
        for b in 0..bn {
            for ci in 0..c {
                let base = (b * c + ci) * n;
                let row = &xs[base..base + n];
                let mut s = T::zero();
                for v in row {
                    s = s + *v;
                }
                let mu = s * inv_n;
                let mut var = T::zero();
                for v in row {
                    let dv = *v - mu;
                    var = var + dv * dv;
                }
                var = var * inv_n;
                let inv = T::one() / (var + eps).sqrt();
                mean[[b, ci]] = mu;
                inv_std[[b, ci]] = inv;
                let (g, be) = (self.gamma[ci], self.beta[ci]);
                let out = &mut ys[base..base + n];
                for i in 0..n {
                    out[i] = g * (row[i] - mu) * inv + be;
                }
            }
        }
        Ok((y, InstanceNormCache { mean, inv_std }))
    }

    /// dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
    pub fn backward(
        &self,
        x: &Array5<T>,
        cache: &InstanceNormCache<T>,
        dy: &Array5<T>,
        grad: &mut InstanceNorm3d<T>,
    ) -> Array5<T> {
        let (bn, c, d, h, w) = x.dim();
        let n = d * h * w;
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut dx = Array5::zeros((bn, c, d, h, w));

        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().expect("standard layout");
        let dxs = dx.as_slice_mut().unwrap();
        for b in 0..bn {
            for ci in 0..c {
                let base = (b * c + ci) * n;
                let xr = &xs[base..base + n];
                let dyr = &dys[base..base + n];
                let mu = cache.mean[[b, ci]];
                let inv = cache.inv_std[[b, ci]];
                let g = self.gamma[ci];

                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for i in 0..n {
                    let xhat = (xr[i] - mu) * inv;
                    sum_dy = sum_dy + dyr[i];
                    sum_dy_xhat = sum_dy_xhat + dyr[i] * xhat;
                }
                grad.beta[ci] = grad.beta[ci] + sum_dy;
                grad.gamma[ci] = grad.gamma[ci] + sum_dy_xhat;

                let m_dy = sum_dy * inv_n;
                let m_dy_xhat = sum_dy_xhat * inv_n;
                let gi = g * inv;
                let out = &mut dxs[base..base + n];
                for i in 0..n {
                    let xhat = (xr[i] - mu) * inv;
                    out[i] = gi * (dyr[i] - m_dy - xhat * m_dy_xhat);
                }
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for InstanceNorm3d<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        f(join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(join(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        f(join(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(join(prefix, "beta"), self.beta.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn normalizes_each_instance_to_zero_mean_unit_std() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let x = Array5::from_shape_fn((2, 3, 4, 4, 4), |_| rng.gen_range(-4.0..4.0f64));
        let norm = InstanceNorm3d::new(3);
        let (y, _) = norm.forward(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let slice = y.slice(ndarray::s![b, c, .., .., ..]);
                let n = slice.len() as f64;
                let mean: f64 = slice.iter().sum::<f64>() / n;
                let var: f64 = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly
            }
        }
    }

    #[test]
    fn single_voxel_slice_is_well_defined() {
        let x = Array5::from_elem((1, 2, 1, 1, 1), 3.5f64);
        let norm = InstanceNorm3d::new(2);
        let (y, _) = norm.forward(&x).unwrap();
        // zero variance: xhat = 0, output = beta = 0
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
