use ndarray::{Array1, Array5};
use rand::Rng;

use super::{he_uniform, join, Params, Real};
use crate::error::{Error, Result};

/// 3D convolution (cross-correlation) with zero padding, stride and dilation.
///
/// Weight layout is `(c_out, c_in, k, k, k)`; feature maps are
/// `(batch, channel, depth, height, width)`.
#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub weight: Array5<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

/// Valid output range `[lo, hi)` such that `0 <= o*stride + k_off < in_len`.
#[inline]
fn out_range(out_len: usize, in_len: usize, k_off: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if k_off >= 0 { 0 } else { (-k_off + s - 1) / s };
    let lim = in_len as isize - k_off;
    let hi = if lim <= 0 { 0 } else { (lim + s - 1) / s };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

#[inline]
fn out_len(in_len: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> usize {
    let span = dilation * (k - 1) + 1;
    let padded = in_len + 2 * padding;
    if padded < span {
        0
    } else {
        (padded - span) / stride + 1
    }
}

impl<T: Real> Conv3d<T> {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k * k;
        let w = he_uniform(fan_in, c_out * fan_in, rng);
        Conv3d {
            weight: Array5::from_shape_vec((c_out, c_in, k, k, k), w).unwrap(),
            bias: Array1::zeros(c_out),
            stride,
            dilation,
            padding,
        }
    }

    /// 3x3x3 convolution whose padding preserves spatial dims at stride 1.
    pub fn same<R: Rng>(c_in: usize, c_out: usize, dilation: usize, rng: &mut R) -> Self {
        Self::new(c_in, c_out, 3, 1, dilation, dilation, rng)
    }

    /// 1x1x1 channel-mixing convolution.
    pub fn pointwise<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::new(c_in, c_out, 1, 1, 1, 0, rng)
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        let k = self.weight.dim().2;
        [
            out_len(input[0], k, self.stride, self.dilation, self.padding),
            out_len(input[1], k, self.stride, self.dilation, self.padding),
            out_len(input[2], k, self.stride, self.dilation, self.padding),
        ]
    }

    pub fn forward(&self, x: &Array5<T>) -> Result<Array5<T>> {
        let (bn, c_in, d_in, h_in, w_in) = x.dim();
        let (c_out, wc_in, _, _, _) = self.weight.dim();
        if c_in != wc_in {
            return Err(Error::shape(format!(
                "conv expects {wc_in} input channels, got {c_in}"
            )));
        }
        let [od, oh, ow] = self.output_shape([d_in, h_in, w_in]);
        if od == 0 || oh == 0 || ow == 0 {
            return Err(Error::shape(format!(
                "conv output collapses to zero for input {d_in}x{h_in}x{w_in}"
            )));
        }
        let mut y = Array5::zeros((bn, c_out, od, oh, ow));
        {
            let ys = y.as_slice_mut().unwrap();
            let out_plane = od * oh * ow;
            for b in 0..bn {
                for co in 0..c_out {
                    let base = (b * c_out + co) * out_plane;
                    let bias = self.bias[co];
                    ys[base..base + out_plane].fill(bias);
                }
            }
        }
        self.accumulate_forward(x, &mut y);
        Ok(y)
    }

    fn accumulate_forward(&self, x: &Array5<T>, y: &mut Array5<T>) {
        let (bn, c_in, d_in, h_in, w_in) = x.dim();
        let (c_out, _, k, _, _) = self.weight.dim();
        let (_, _, od, oh, ow) = y.dim();
        let (s, dil, pad) = (self.stride, self.dilation, self.padding as isize);

        let xs = x.as_slice().expect("conv input must be standard layout");
        let ws = self.weight.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();

        for b in 0..bn {
            for co in 0..c_out {
                let ybase = (b * c_out + co) * od * oh * ow;
                for ci in 0..c_in {
                    let xbase = (b * c_in + ci) * d_in * h_in * w_in;
                    let wbase = (co * c_in + ci) * k * k * k;
                    for kd in 0..k {
                        let zoff = (kd * dil) as isize - pad;
                        let (ozlo, ozhi) = out_range(od, d_in, zoff, s);
                        for kh in 0..k {
                            let yoff = (kh * dil) as isize - pad;
                            let (oylo, oyhi) = out_range(oh, h_in, yoff, s);
                            for kw in 0..k {
                                let xoff = (kw * dil) as isize - pad;
                                let (oxlo, oxhi) = out_range(ow, w_in, xoff, s);
                                if oxlo >= oxhi || oylo >= oyhi || ozlo >= ozhi {
                                    continue;
                                }
                                let wv = ws[wbase + (kd * k + kh) * k + kw];
                                if wv == T::zero() {
                                    continue;
                                }
                                let n = oxhi - oxlo;
                                let ix0 = (oxlo * s) as isize + xoff;
                                for oz in ozlo..ozhi {
                                    let iz = ((oz * s) as isize + zoff) as usize;
                                    for oy in oylo..oyhi {
                                        let iy = ((oy * s) as isize + yoff) as usize;
                                        let yrow = ybase + (oz * oh + oy) * ow + oxlo;
                                        let xrow = xbase + (iz * h_in + iy) * w_in;
                                        if s == 1 {
                                            let xr = &xs[(xrow as isize + ix0) as usize..][..n];
                                            let yr = &mut ys[yrow..yrow + n];
                                            for i in 0..n {
                                                yr[i] = yr[i] + wv * xr[i];
                                            }
                                        } else {
                                            for i in 0..n {
                                                let ix = (xrow as isize + ix0) as usize + i * s;
                                                ys[yrow + i] = ys[yrow + i] + wv * xs[ix];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Backward pass: returns `d loss / d input` and accumulates weight and
    /// bias gradients into `grad`.
    pub fn backward(&self, x: &Array5<T>, dy: &Array5<T>, grad: &mut Conv3d<T>) -> Array5<T> {
        let (bn, c_in, d_in, h_in, w_in) = x.dim();
        let (c_out, _, k, _, _) = self.weight.dim();
        let (_, _, od, oh, ow) = dy.dim();
        let (s, dil, pad) = (self.stride, self.dilation, self.padding as isize);

        let xs = x.as_slice().expect("conv input must be standard layout");
        let dys = dy.as_slice().expect("conv grad must be standard layout");
        let ws = self.weight.as_slice().unwrap();

        // Bias gradient: plain sum over each output channel plane.
        for b in 0..bn {
            for co in 0..c_out {
                let base = (b * c_out + co) * od * oh * ow;
                let mut acc = T::zero();
                for v in &dys[base..base + od * oh * ow] {
                    acc = acc + *v;
                }
                grad.bias[co] = grad.bias[co] + acc;
            }
        }

        let mut dx = Array5::zeros((bn, c_in, d_in, h_in, w_in));
        {
            let dxs = dx.as_slice_mut().unwrap();
            let dws = grad.weight.as_slice_mut().unwrap();
            for b in 0..bn {
                for co in 0..c_out {
                    let ybase = (b * c_out + co) * od * oh * ow;
                    for ci in 0..c_in {
                        let xbase = (b * c_in + ci) * d_in * h_in * w_in;
                        let wbase = (co * c_in + ci) * k * k * k;
                        for kd in 0..k {
                            let zoff = (kd * dil) as isize - pad;
                            let (ozlo, ozhi) = out_range(od, d_in, zoff, s);
                            for kh in 0..k {
                                let yoff = (kh * dil) as isize - pad;
                                let (oylo, oyhi) = out_range(oh, h_in, yoff, s);
                                for kw in 0..k {
                                    let xoff = (kw * dil) as isize - pad;
                                    let (oxlo, oxhi) = out_range(ow, w_in, xoff, s);
                                    if oxlo >= oxhi || oylo >= oyhi || ozlo >= ozhi {
                                        continue;
                                    }
                                    let wv = ws[wbase + (kd * k + kh) * k + kw];
                                    let n = oxhi - oxlo;
                                    let ix0 = (oxlo * s) as isize + xoff;
                                    let mut wacc = T::zero();
                                    for oz in ozlo..ozhi {
                                        let iz = ((oz * s) as isize + zoff) as usize;
                                        for oy in oylo..oyhi {
                                            let iy = ((oy * s) as isize + yoff) as usize;
                                            let yrow = ybase + (oz * oh + oy) * ow + oxlo;
                                            let xrow = xbase + (iz * h_in + iy) * w_in;
                                            let dyr = &dys[yrow..yrow + n];
                                            if s == 1 {
                                                let x0 = (xrow as isize + ix0) as usize;
                                                let xr = &xs[x0..x0 + n];
                                                let dxr = &mut dxs[x0..x0 + n];
                                                for i in 0..n {
                                                    wacc = wacc + xr[i] * dyr[i];
                                                    dxr[i] = dxr[i] + wv * dyr[i];
                                                }
                                            } else {
                                                for i in 0..n {
                                                    let ix =
                                                        (xrow as isize + ix0) as usize + i * s;
                                                    wacc = wacc + xs[ix] * dyr[i];
                                                    dxs[ix] = dxs[ix] + wv * dyr[i];
                                                }
                                            }
                                        }
                                    }
                                    let wi = wbase + (kd * k + kh) * k + kw;
                                    dws[wi] = dws[wi] + wacc;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for Conv3d<T> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Naive seven-loop reference convolution used as the arithmetic oracle.
    fn conv_reference(
        x: &Array5<f64>,
        w: &Array5<f64>,
        bias: &Array1<f64>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Array5<f64> {
        let (bn, c_in, d_in, h_in, w_in) = x.dim();
        let (c_out, _, k, _, _) = w.dim();
        let ol = |n: usize| out_len(n, k, stride, dilation, padding);
        let (od, oh, ow) = (ol(d_in), ol(h_in), ol(w_in));
        let mut y = Array5::zeros((bn, c_out, od, oh, ow));
        for b in 0..bn {
            for co in 0..c_out {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[co];
                            for ci in 0..c_in {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let iz = (oz * stride + kd * dilation) as isize
                                                - padding as isize;
                                            let iy = (oy * stride + kh * dilation) as isize
                                                - padding as isize;
                                            let ix = (ox * stride + kw * dilation) as isize
                                                - padding as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d_in as isize
                                                || iy >= h_in as isize
                                                || ix >= w_in as isize
                                            {
                                                continue;
                                            }
                                            acc += w[[co, ci, kd, kh, kw]]
                                                * x[[b, ci, iz as usize, iy as usize, ix as usize]];
                                        }
                                    }
                                }
                            }
                            y[[b, co, oz, oy, ox]] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_map(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_reference_on_same_padding() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for &(dil, shape) in &[(1usize, (2, 3, 5, 4, 6)), (2, (1, 2, 6, 6, 6)), (4, (1, 2, 5, 5, 5))]
        {
            let conv = Conv3d::<f64>::same(shape.1, 4, dil, &mut rng);
            let x = random_map(shape, 7 + dil as u64);
            let got = conv.forward(&x).unwrap();
            let want = conv_reference(&x, &conv.weight, &conv.bias, 1, dil, dil);
            // Same padding preserves spatial dims.
            let (gd, xd) = (got.dim(), x.dim());
            assert_eq!((gd.2, gd.3, gd.4), (xd.2, xd.3, xd.4));
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "dil={dil}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn impulse_response_recovers_kernel() {
        // A centered unit impulse makes out[o] = w[k_center - (o - center)],
        // i.e. the kernel mirrored around the impulse. Checked voxel by voxel
        // against the naive reference.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let conv = Conv3d::<f64>::same(1, 1, 1, &mut rng);
        let mut x = Array5::zeros((1, 1, 5, 5, 5));
        x[[0, 0, 2, 2, 2]] = 1.0;
        let y = conv.forward(&x).unwrap();
        for oz in 0..5usize {
            for oy in 0..5usize {
                for ox in 0..5usize {
                    let expect = |o: usize| 2 + 1 - o as isize; // k index = center-offset+1
                    let (kz, ky, kx) = (expect(oz), expect(oy), expect(ox));
                    let want = if (0..3).contains(&kz) && (0..3).contains(&ky) && (0..3).contains(&kx)
                    {
                        conv.weight[[0, 0, kz as usize, ky as usize, kx as usize]]
                    } else {
                        0.0
                    };
                    assert!((y[[0, 0, oz, oy, ox]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stride_two_matches_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let conv = Conv3d::<f64>::new(3, 5, 3, 2, 1, 1, &mut rng);
        let x = random_map((2, 3, 8, 8, 8), 11);
        let got = conv.forward(&x).unwrap();
        let want = conv_reference(&x, &conv.weight, &conv.bias, 2, 1, 1);
        assert_eq!(got.dim(), (2, 5, 4, 4, 4));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_and_bias_give_zero_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut conv = Conv3d::<f64>::same(2, 3, 1, &mut rng);
        conv.weight.fill(0.0);
        conv.bias.fill(0.0);
        let x = random_map((1, 2, 4, 4, 4), 13);
        let y = conv.forward(&x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let conv = Conv3d::<f64>::same(3, 4, 1, &mut rng);
        let x = random_map((1, 2, 4, 4, 4), 17);
        assert!(conv.forward(&x).is_err());
    }
}
