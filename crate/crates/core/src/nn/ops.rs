//! Parameter-free tensor operations with explicit backward passes.

use ndarray::{Array2, Array5, Axis};

use super::{Real, LEAKY_SLOPE};

pub fn leaky_relu<T: Real>(x: &Array5<T>) -> Array5<T> {
    let a = T::from_f64(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { a * v })
}

pub fn leaky_relu_backward<T: Real>(x: &Array5<T>, dy: &Array5<T>) -> Array5<T> {
    let a = T::from_f64(LEAKY_SLOPE);
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= T::zero() {
            *d = *d * a;
        }
    });
    dx
}

pub fn relu2<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu2_backward<T: Real>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub fn leaky_relu2<T: Real>(x: &Array2<T>) -> Array2<T> {
    let a = T::from_f64(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { a * v })
}

pub fn leaky_relu2_backward<T: Real>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let a = T::from_f64(LEAKY_SLOPE);
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= T::zero() {
            *d = *d * a;
        }
    });
    dx
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Nearest-neighbor upsampling by a factor of two on every spatial axis.
pub fn upsample_nearest2<T: Real>(x: &Array5<T>) -> Array5<T> {
    let (bn, c, d, h, w) = x.dim();
    let mut y = Array5::zeros((bn, c, 2 * d, 2 * h, 2 * w));
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().unwrap();
    let (oh, ow) = (2 * h, 2 * w);
    for bc in 0..bn * c {
        let xbase = bc * d * h * w;
        let ybase = bc * 8 * d * h * w;
        for z in 0..d {
            for yy in 0..h {
                let xrow = xbase + (z * h + yy) * w;
                for dz in 0..2 {
                    for dyy in 0..2 {
                        let yrow = ybase + ((2 * z + dz) * oh + 2 * yy + dyy) * ow;
                        for xx in 0..w {
                            let v = xs[xrow + xx];
                            ys[yrow + 2 * xx] = v;
                            ys[yrow + 2 * xx + 1] = v;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of `upsample_nearest2`: each input voxel receives the sum of its
/// eight replicas.
pub fn upsample_nearest2_backward<T: Real>(dy: &Array5<T>) -> Array5<T> {
    let (bn, c, od, oh, ow) = dy.dim();
    let (d, h, w) = (od / 2, oh / 2, ow / 2);
    let mut dx = Array5::zeros((bn, c, d, h, w));
    let dys = dy.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().unwrap();
    for bc in 0..bn * c {
        let ybase = bc * od * oh * ow;
        let xbase = bc * d * h * w;
        for z in 0..d {
            for yy in 0..h {
                let xrow = xbase + (z * h + yy) * w;
                for dz in 0..2 {
                    for dyy in 0..2 {
                        let yrow = ybase + ((2 * z + dz) * oh + 2 * yy + dyy) * ow;
                        for xx in 0..w {
                            dxs[xrow + xx] =
                                dxs[xrow + xx] + dys[yrow + 2 * xx] + dys[yrow + 2 * xx + 1];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mean over the spatial dims: (B, C, D, H, W) -> (B, C).
pub fn global_avg_pool<T: Real>(x: &Array5<T>) -> Array2<T> {
    let (bn, c, d, h, w) = x.dim();
    let inv = T::from_f64(1.0 / (d * h * w) as f64);
    let mut out = Array2::zeros((bn, c));
    for b in 0..bn {
        for ci in 0..c {
            let mut s = T::zero();
            for v in x.index_axis(Axis(0), b).index_axis(Axis(0), ci).iter() {
                s = s + *v;
            }
            out[[b, ci]] = s * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(
    dpooled: &Array2<T>,
    spatial: (usize, usize, usize),
) -> Array5<T> {
    let (bn, c) = dpooled.dim();
    let (d, h, w) = spatial;
    let inv = T::from_f64(1.0 / (d * h * w) as f64);
    let mut dx = Array5::zeros((bn, c, d, h, w));
    for b in 0..bn {
        for ci in 0..c {
            let g = dpooled[[b, ci]] * inv;
            dx.slice_mut(ndarray::s![b, ci, .., .., ..]).fill(g);
        }
    }
    dx
}

/// Per-voxel softmax over the class (channel) axis, max-subtracted.
pub fn softmax_classes<T: Real>(logits: &Array5<T>) -> Array5<T> {
    let (bn, c, d, h, w) = logits.dim();
    let n = d * h * w;
    let mut y = logits.clone();
    {
        let ys = y.as_slice_mut().unwrap();
        for b in 0..bn {
            let base = b * c * n;
            for vox in 0..n {
                let mut m = ys[base + vox];
                for ci in 1..c {
                    let v = ys[base + ci * n + vox];
                    if v > m {
                        m = v;
                    }
                }
                let mut s = T::zero();
                for ci in 0..c {
                    let idx = base + ci * n + vox;
                    let e = (ys[idx] - m).exp();
                    ys[idx] = e;
                    s = s + e;
                }
                let inv = T::one() / s;
                for ci in 0..c {
                    let idx = base + ci * n + vox;
                    ys[idx] = ys[idx] * inv;
                }
            }
        }
    }
    y
}

/// Backward of `softmax_classes`: dlogit_c = p_c (dp_c - sum_k p_k dp_k).
pub fn softmax_classes_backward<T: Real>(probs: &Array5<T>, dprobs: &Array5<T>) -> Array5<T> {
    let (bn, c, d, h, w) = probs.dim();
    let n = d * h * w;
    let mut dl = Array5::zeros((bn, c, d, h, w));
    let ps = probs.as_slice().unwrap();
    let dps = dprobs.as_slice().expect("standard layout");
    let dls = dl.as_slice_mut().unwrap();
    for b in 0..bn {
        let base = b * c * n;
        for vox in 0..n {
            let mut dot = T::zero();
            for ci in 0..c {
                let idx = base + ci * n + vox;
                dot = dot + ps[idx] * dps[idx];
            }
            for ci in 0..c {
                let idx = base + ci * n + vox;
                dls[idx] = ps[idx] * (dps[idx] - dot);
            }
        }
    }
    dl
}

/// Log-softmax over the flattened (channel x spatial) extent of each sample:
/// (B, C, D, H, W) -> (B, M).
pub fn flat_log_softmax<T: Real>(x: &Array5<T>) -> Array2<T> {
    let bn = x.dim().0;
    let m = x.len() / bn;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::zeros((bn, m));
    for b in 0..bn {
        let row = &xs[b * m..(b + 1) * m];
        let mut mx = row[0];
        for v in row {
            if *v > mx {
                mx = *v;
            }
        }
        let mut s = T::zero();
        for v in row {
            s = s + (*v - mx).exp();
        }
        let lse = mx + s.ln();
        for (i, v) in row.iter().enumerate() {
            out[[b, i]] = *v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn upsample_round_trip_adjoint() {
        // <upsample(x), y> == <x, upsample_backward(y)> characterizes the adjoint.
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let x = Array5::from_shape_fn((1, 2, 2, 3, 2), |_| rng.gen_range(-1.0..1.0f64));
        let y = Array5::from_shape_fn((1, 2, 4, 6, 4), |_| rng.gen_range(-1.0..1.0f64));
        let up = upsample_nearest2(&x);
        let down = upsample_nearest2_backward(&y);
        let lhs: f64 = up.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(down.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_per_voxel() {
        let mut rng = ChaCha20Rng::seed_from_u64(34);
        let x = Array5::from_shape_fn((2, 4, 3, 3, 3), |_| rng.gen_range(-5.0..5.0f64));
        let p = softmax_classes(&x);
        for b in 0..2 {
            for z in 0..3 {
                for y in 0..3 {
                    for xx in 0..3 {
                        let s: f64 = (0..4).map(|c| p[[b, c, z, y, xx]]).sum();
                        assert!((s - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn flat_log_softmax_shift_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let x = Array5::from_shape_fn((1, 2, 2, 2, 2), |_| rng.gen_range(-1.0..1.0f64));
        let shifted = x.mapv(|v| v + 7.25);
        let a = flat_log_softmax(&x);
        let b = flat_log_softmax(&shifted);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
