//! Dual attention fusion: per-unit (modality) recalibration from globally
//! pooled statistics plus per-voxel spatial recalibration from a 1x1x1
//! channel squeeze, fused by addition.

use ndarray::{s, Array1, Array2, Array5};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{relu2, relu2_backward, sigmoid_scalar};
use crate::nn::{he_uniform, join, Params, Real};

/// Sigmoid clamped into the open unit interval: IEEE rounding saturates the
/// plain sigmoid to exactly 0 or 1 for large logits, which would violate the
/// strict-(0,1) contract of the attention weights.
fn gate<T: Real>(v: T) -> T {
    sigmoid_scalar(v)
        .max(T::min_positive_value())
        .min(T::one() - T::epsilon())
}

/// Parameters for one fusion block: two bias-free fully connected layers for
/// the modality path and a 1x1x1 squeeze convolution (with bias) for the
/// spatial path.
#[derive(Debug, Clone)]
pub struct DualFusion<T> {
    /// (K, r) second fully connected layer.
    pub w1: Array2<T>,
    /// (r, K) first fully connected layer.
    pub w2: Array2<T>,
    /// (c_total) spatial squeeze weights.
    pub ws: Array1<T>,
    /// Single-element bias of the spatial squeeze.
    pub ws_bias: Array1<T>,
    /// Channel count of each input unit.
    pub unit_channels: Vec<usize>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct FusionCache<T> {
    pub z: Array5<T>,    // concatenated input
    pub g: Array2<T>,    // (B, K) per-unit means
    pub t: Array2<T>,    // (B, r) hidden pre-activation
    pub s: Array2<T>,    // (B, K) modality weights, sigmoid(ghat)
    pub m: Array5<T>,    // (B, 1, D, H, W) spatial map, sigmoid(q)
}

/// Reduction width of the modality-attention bottleneck.
pub fn reduction_dim(k: usize) -> usize {
    (k / 2).max(1)
}

impl<T: Real> DualFusion<T> {
    pub fn new<R: Rng>(unit_channels: &[usize], rng: &mut R) -> Self {
        let k = unit_channels.len();
        let r = reduction_dim(k);
        let c_total: usize = unit_channels.iter().sum();
        DualFusion {
            w1: Array2::from_shape_vec((k, r), he_uniform(r, k * r, rng)).unwrap(),
            w2: Array2::from_shape_vec((r, k), he_uniform(k, r * k, rng)).unwrap(),
            ws: Array1::from_vec(he_uniform(c_total, c_total, rng)),
            ws_bias: Array1::zeros(1),
            unit_channels: unit_channels.to_vec(),
        }
    }

    pub fn c_total(&self) -> usize {
        self.unit_channels.iter().sum()
    }

    fn check_units(&self, units: &[&Array5<T>]) -> Result<(usize, usize, usize, usize)> {
        if units.len() != self.unit_channels.len() {
            return Err(Error::shape(format!(
                "fusion expects {} units, got {}",
                self.unit_channels.len(),
                units.len()
            )));
        }
        let (bn, _, d, h, w) = units[0].dim();
        for (u, &c) in units.iter().zip(&self.unit_channels) {
            let (ub, uc, ud, uh, uw) = u.dim();
            if (ub, ud, uh, uw) != (bn, d, h, w) || uc != c {
                return Err(Error::shape(format!(
                    "fusion unit has shape {:?}, expected ({bn}, {c}, {d}, {h}, {w})",
                    u.dim()
                )));
            }
        }
        Ok((bn, d, h, w))
    }

    /// Per-unit scalar means over channels and space: (B, K).
    fn pool_units(&self, units: &[&Array5<T>]) -> Array2<T> {
        let bn = units[0].dim().0;
        let mut g = Array2::zeros((bn, units.len()));
        for (k, u) in units.iter().enumerate() {
            let n = u.len() / bn;
            let inv = T::from_f64(1.0 / n as f64);
            let us = u.as_slice().expect("standard layout");
            for b in 0..bn {
                let mut acc = T::zero();
                for v in &us[b * n..(b + 1) * n] {
                    acc = acc + *v;
                }
                g[[b, k]] = acc * inv;
            }
        }
        g
    }

    /// Modality weights sigma(W1 relu(W2 g)) for pooled vector `g`.
    fn modality_weights(&self, g: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let t = g.dot(&self.w2.t());
        let h = relu2(&t);
        let ghat = h.dot(&self.w1.t());
        let s = ghat.mapv(gate);
        (t, s)
    }

    /// Spatial logits q = ws . z + bias, one scalar per voxel.
    fn spatial_logits(&self, z: &Array5<T>) -> Array5<T> {
        let (bn, c, d, h, w) = z.dim();
        let n = d * h * w;
        let mut q = Array5::from_elem((bn, 1, d, h, w), self.ws_bias[0]);
        let zs = z.as_slice().expect("standard layout");
        let qs = q.as_slice_mut().unwrap();
        for b in 0..bn {
            for ci in 0..c {
                let wv = self.ws[ci];
                if wv == T::zero() {
                    continue;
                }
                let zrow = &zs[(b * c + ci) * n..(b * c + ci + 1) * n];
                let qrow = &mut qs[b * n..(b + 1) * n];
                for i in 0..n {
                    qrow[i] = qrow[i] + wv * zrow[i];
                }
            }
        }
        q
    }

    /// Recalibrate each unit by its modality weight. Returns the scaled units
    /// and the (B, K) weight matrix.
    pub fn modality_attention(
        &self,
        units: &[&Array5<T>],
    ) -> Result<(Vec<Array5<T>>, Array2<T>)> {
        self.check_units(units)?;
        let g = self.pool_units(units);
        let (_, s) = self.modality_weights(&g);
        let bn = units[0].dim().0;
        let mut out = Vec::with_capacity(units.len());
        for (k, u) in units.iter().enumerate() {
            let mut scaled = (*u).clone();
            for b in 0..bn {
                let w = s[[b, k]];
                scaled
                    .slice_mut(s![b, .., .., .., ..])
                    .mapv_inplace(|v| v * w);
            }
            out.push(scaled);
        }
        Ok((out, s))
    }

    /// Recalibrate a concatenated map voxel-wise by the squeeze map. Returns
    /// the scaled map and the (B, 1, D, H, W) attention map.
    pub fn spatial_attention(&self, z: &Array5<T>) -> Result<(Array5<T>, Array5<T>)> {
        if z.dim().1 != self.c_total() {
            return Err(Error::shape(format!(
                "spatial attention expects {} channels, got {}",
                self.c_total(),
                z.dim().1
            )));
        }
        let q = self.spatial_logits(z);
        let m = q.mapv(gate);
        let (bn, c, d, h, w) = z.dim();
        let n = d * h * w;
        let mut out = z.clone();
        {
            let os = out.as_slice_mut().unwrap();
            let ms = m.as_slice().unwrap();
            for b in 0..bn {
                let mrow = &ms[b * n..(b + 1) * n];
                for ci in 0..c {
                    let row = &mut os[(b * c + ci) * n..(b * c + ci + 1) * n];
                    for i in 0..n {
                        row[i] = row[i] * mrow[i];
                    }
                }
            }
        }
        Ok((out, m))
    }

    /// Full dual fusion: Z_f = Z_m + Z_s computed as (s_k + m) * Z per unit.
    pub fn forward(&self, units: &[&Array5<T>]) -> Result<(Array5<T>, FusionCache<T>)> {
        let (bn, d, h, w) = self.check_units(units)?;
        let c_total = self.c_total();
        let n = d * h * w;

        let mut z = Array5::zeros((bn, c_total, d, h, w));
        let mut c0 = 0;
        for (u, &c) in units.iter().zip(&self.unit_channels) {
            z.slice_mut(s![.., c0..c0 + c, .., .., ..]).assign(u);
            c0 += c;
        }

        let g = self.pool_units(units);
        let (t, s_w) = self.modality_weights(&g);
        let q = self.spatial_logits(&z);
        let m = q.mapv(gate);

        let mut zf = z.clone();
        {
            let zfs = zf.as_slice_mut().unwrap();
            let ms = m.as_slice().unwrap();
            for b in 0..bn {
                let mrow = &ms[b * n..(b + 1) * n];
                let mut c0 = 0;
                for (k, &c) in self.unit_channels.iter().enumerate() {
                    let sw = s_w[[b, k]];
                    for ci in c0..c0 + c {
                        let row = &mut zfs[(b * c_total + ci) * n..(b * c_total + ci + 1) * n];
                        for i in 0..n {
                            row[i] = (sw + mrow[i]) * row[i];
                        }
                    }
                    c0 += c;
                }
            }
        }
        Ok((
            zf,
            FusionCache {
                z,
                g,
                t,
                s: s_w,
                m,
            },
        ))
    }

    /// Backward through the fused form; returns per-unit input gradients and
    /// accumulates parameter gradients into `grad`.
    pub fn backward(
        &self,
        cache: &FusionCache<T>,
        dzf: &Array5<T>,
        grad: &mut DualFusion<T>,
    ) -> Vec<Array5<T>> {
        let (bn, c_total, d, h, w) = cache.z.dim();
        let n = d * h * w;
        let kk = self.unit_channels.len();

        let zs = cache.z.as_slice().unwrap();
        let dzfs = dzf.as_slice().expect("standard layout");
        let ms = cache.m.as_slice().unwrap();

        // dL/ds_k and dL/dm plus the direct (s_k + m) term of dz.
        let mut dz = Array5::<T>::zeros((bn, c_total, d, h, w));
        let mut ds = Array2::<T>::zeros((bn, kk));
        let mut dm = vec![T::zero(); bn * n];
        {
            let dzs = dz.as_slice_mut().unwrap();
            for b in 0..bn {
                let mrow = &ms[b * n..(b + 1) * n];
                let dmrow = &mut dm[b * n..(b + 1) * n];
                let mut c0 = 0;
                for (k, &c) in self.unit_channels.iter().enumerate() {
                    let sw = cache.s[[b, k]];
                    let mut sacc = T::zero();
                    for ci in c0..c0 + c {
                        let base = (b * c_total + ci) * n;
                        let zrow = &zs[base..base + n];
                        let drow = &dzfs[base..base + n];
                        let out = &mut dzs[base..base + n];
                        for i in 0..n {
                            let zd = drow[i] * zrow[i];
                            sacc = sacc + zd;
                            dmrow[i] = dmrow[i] + zd;
                            out[i] = (sw + mrow[i]) * drow[i];
                        }
                    }
                    ds[[b, k]] = sacc;
                    c0 += c;
                }
            }
        }

        // Modality path: s = sigmoid(h W1^T), h = relu(g W2^T).
        let one = T::one();
        let dghat = {
            let mut dg = ds;
            dg.zip_mut_with(&cache.s, |d, &sv| *d = *d * sv * (one - sv));
            dg
        };
        let hmat = relu2(&cache.t);
        grad.w1 += &dghat.t().dot(&hmat);
        let dh = dghat.dot(&self.w1);
        let dt = relu2_backward(&cache.t, &dh);
        grad.w2 += &dt.t().dot(&cache.g);
        let dg = dt.dot(&self.w2); // (B, K)

        // Spatial path: m = sigmoid(ws . z + b).
        let mut dq = dm;
        for b in 0..bn {
            for i in 0..n {
                let mv = ms[b * n + i];
                dq[b * n + i] = dq[b * n + i] * mv * (one - mv);
            }
        }
        {
            let dzs = dz.as_slice_mut().unwrap();
            let mut dbias = T::zero();
            for v in &dq {
                dbias = dbias + *v;
            }
            grad.ws_bias[0] = grad.ws_bias[0] + dbias;
            for b in 0..bn {
                let dqrow = &dq[b * n..(b + 1) * n];
                for ci in 0..c_total {
                    let base = (b * c_total + ci) * n;
                    let zrow = &zs[base..base + n];
                    let out = &mut dzs[base..base + n];
                    let wv = self.ws[ci];
                    let mut wacc = T::zero();
                    for i in 0..n {
                        wacc = wacc + dqrow[i] * zrow[i];
                        out[i] = out[i] + wv * dqrow[i];
                    }
                    grad.ws[ci] = grad.ws[ci] + wacc;
                }
            }
        }

        // Pooled-mean path: dz_k += dg_k / (C_k * N), then split into units.
        let mut dunits = Vec::with_capacity(kk);
        let mut c0 = 0;
        for (k, &c) in self.unit_channels.iter().enumerate() {
            let mut du = dz.slice(s![.., c0..c0 + c, .., .., ..]).to_owned();
            let inv = T::from_f64(1.0 / (c * n) as f64);
            for b in 0..bn {
                let add = dg[[b, k]] * inv;
                du.slice_mut(s![b, .., .., .., ..]).mapv_inplace(|v| v + add);
            }
            dunits.push(du);
            c0 += c;
        }
        dunits
    }
}

impl<T: Real> Params<T> for DualFusion<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        f(join(prefix, "w1"), self.w1.view().into_dyn());
        f(join(prefix, "w2"), self.w2.view().into_dyn());
        f(join(prefix, "ws"), self.ws.view().into_dyn());
        f(join(prefix, "ws_bias"), self.ws_bias.view().into_dyn());
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        f(join(prefix, "w1"), self.w1.view_mut().into_dyn());
        f(join(prefix, "w2"), self.w2.view_mut().into_dyn());
        f(join(prefix, "ws"), self.ws.view_mut().into_dyn());
        f(join(prefix, "ws_bias"), self.ws_bias.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_unit(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn zeroed(fusion: &mut DualFusion<f64>) {
        fusion.w1.fill(0.0);
        fusion.w2.fill(0.0);
        fusion.ws.fill(0.0);
        fusion.ws_bias.fill(0.0);
    }

    #[test]
    fn zero_weights_give_half_scaling() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut fusion = DualFusion::<f64>::new(&[2, 2, 2, 2], &mut rng);
        zeroed(&mut fusion);
        let units: Vec<Array5<f64>> = (0..4).map(|i| rand_unit((1, 2, 3, 3, 3), i)).collect();
        let refs: Vec<&Array5<f64>> = units.iter().collect();

        let (scaled, weights) = fusion.modality_attention(&refs).unwrap();
        assert!(weights.iter().all(|&w| w == 0.5));
        for (s, u) in scaled.iter().zip(units.iter()) {
            for (a, b) in s.iter().zip(u.iter()) {
                assert_eq!(*a, 0.5 * b);
            }
        }
    }

    #[test]
    fn constant_unit_pools_to_its_value() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let fusion = DualFusion::<f64>::new(&[3], &mut rng);
        let unit = Array5::from_elem((2, 3, 2, 2, 2), 2.5f64);
        let g = fusion.pool_units(&[&unit]);
        assert!(g.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn hand_computed_modality_weights() {
        // g = (1,0,0,0); W2 (2x4), W1 (4x2) small integers; compare against
        // explicit arithmetic done here with plain loops.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut fusion = DualFusion::<f64>::new(&[1, 1, 1, 1], &mut rng);
        let w2 = [[0.5, -1.0, 0.25, 2.0], [-0.5, 1.5, 1.0, -2.0]];
        let w1 = [[1.0, 0.5], [-1.0, 0.25], [2.0, -0.5], [0.0, 1.0]];
        for r in 0..2 {
            for k in 0..4 {
                fusion.w2[[r, k]] = w2[r][k];
            }
        }
        for k in 0..4 {
            for r in 0..2 {
                fusion.w1[[k, r]] = w1[k][r];
            }
        }
        let g = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0]]);
        let (_, s) = fusion.modality_weights(&g);

        // explicit: t_r = W2[r][0]; h = relu(t); ghat_k = sum_r W1[k][r] h_r
        let t = [0.5f64, -0.5];
        let h = [t[0].max(0.0), t[1].max(0.0)];
        for k in 0..4 {
            let ghat = w1[k][0] * h[0] + w1[k][1] * h[1];
            let sig = 1.0 / (1.0 + (-ghat).exp());
            assert!((s[[0, k]] - sig).abs() < 1e-12, "unit {k}");
        }
    }

    #[test]
    fn spatial_attention_single_voxel_example() {
        // channels (1, 2), ws = (1, 1), bias 0: q = 3, sigma(3) = 0.95257
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut fusion = DualFusion::<f64>::new(&[2], &mut rng);
        fusion.ws.fill(1.0);
        fusion.ws_bias.fill(0.0);
        let mut z = Array5::zeros((1, 2, 1, 1, 1));
        z[[0, 0, 0, 0, 0]] = 1.0;
        z[[0, 1, 0, 0, 0]] = 2.0;
        let (zs, map) = fusion.spatial_attention(&z).unwrap();
        let sig3 = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((map[[0, 0, 0, 0, 0]] - 0.95257).abs() < 1e-5);
        assert!((zs[[0, 0, 0, 0, 0]] - sig3).abs() < 1e-12);
        assert!((zs[[0, 1, 0, 0, 0]] - 2.0 * sig3).abs() < 1e-12);
        assert!((zs[[0, 1, 0, 0, 0]] - 1.90515).abs() < 1e-5);
    }

    #[test]
    fn zero_spatial_weights_give_half_map() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut fusion = DualFusion::<f64>::new(&[3], &mut rng);
        fusion.ws.fill(0.0);
        fusion.ws_bias.fill(0.0);
        let z = rand_unit((2, 3, 2, 2, 2), 120);
        let (zs, map) = fusion.spatial_attention(&z).unwrap();
        assert!(map.iter().all(|&m| m == 0.5));
        for (a, b) in zs.iter().zip(z.iter()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn spatial_map_strictly_in_unit_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let fusion = DualFusion::<f64>::new(&[3, 3], &mut rng);
        let z = rand_unit((2, 6, 3, 3, 3), 50);
        let (_, map) = fusion.spatial_attention(&z).unwrap();
        assert!(map.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_fusion_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut fusion = DualFusion::<f64>::new(&[2, 3], &mut rng);
        zeroed(&mut fusion);
        let u0 = rand_unit((1, 2, 2, 2, 2), 60);
        let u1 = rand_unit((1, 3, 2, 2, 2), 61);
        let (zf, cache) = fusion.forward(&[&u0, &u1]).unwrap();
        assert_eq!(zf, cache.z); // (0.5 + 0.5) * z == z exactly
    }

    #[test]
    fn fusion_output_channels_are_summed() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let fusion = DualFusion::<f64>::new(&[4, 4, 4, 4, 8], &mut rng);
        let units: Vec<Array5<f64>> = [4, 4, 4, 4, 8]
            .iter()
            .enumerate()
            .map(|(i, &c)| rand_unit((1, c, 2, 2, 2), 70 + i as u64))
            .collect();
        let refs: Vec<&Array5<f64>> = units.iter().collect();
        let (zf, _) = fusion.forward(&refs).unwrap();
        assert_eq!(zf.dim(), (1, 24, 2, 2, 2));
        assert_eq!(reduction_dim(5), 2);
        assert_eq!(reduction_dim(4), 2);
        assert_eq!(fusion.w1.dim(), (5, 2));
        assert_eq!(fusion.w2.dim(), (2, 5));
    }

    #[test]
    fn identical_units_and_symmetric_params_weight_equally() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut fusion = DualFusion::<f64>::new(&[2, 2, 2], &mut rng);
        // identical columns of W2 and identical rows of W1
        for r in 0..fusion.w2.dim().0 {
            for k in 0..3 {
                fusion.w2[[r, k]] = 0.3 + 0.1 * r as f64;
            }
        }
        for k in 0..3 {
            for r in 0..fusion.w1.dim().1 {
                fusion.w1[[k, r]] = 0.7 - 0.2 * r as f64;
            }
        }
        let u = rand_unit((1, 2, 2, 2, 2), 80);
        let (_, weights) = fusion.modality_attention(&[&u, &u, &u]).unwrap();
        let w0 = weights[[0, 0]];
        assert!(weights.iter().all(|&v| (v - w0).abs() < 1e-12));
        assert!(w0 > 0.0 && w0 < 1.0);
    }

    #[test]
    fn permuting_units_and_params_permutes_outputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let fusion = DualFusion::<f64>::new(&[2, 2, 2], &mut rng);
        let units: Vec<Array5<f64>> = (0..3).map(|i| rand_unit((1, 2, 2, 2, 2), 90 + i)).collect();
        let refs: Vec<&Array5<f64>> = units.iter().collect();
        let (_, w_orig) = fusion.modality_attention(&refs).unwrap();

        let perm = [2usize, 0, 1];
        let mut permuted = fusion.clone();
        for (new_k, &old_k) in perm.iter().enumerate() {
            for r in 0..fusion.w2.dim().0 {
                permuted.w2[[r, new_k]] = fusion.w2[[r, old_k]];
            }
            for r in 0..fusion.w1.dim().1 {
                permuted.w1[[new_k, r]] = fusion.w1[[old_k, r]];
            }
        }
        let perm_units: Vec<&Array5<f64>> = perm.iter().map(|&k| &units[k]).collect();
        let (_, w_perm) = permuted.modality_attention(&perm_units).unwrap();
        for (new_k, &old_k) in perm.iter().enumerate() {
            assert!((w_perm[[0, new_k]] - w_orig[[0, old_k]]).abs() < 1e-12);
        }
    }
}
