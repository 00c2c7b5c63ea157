//! The multi-encoder encoder-decoder backbone: one encoder per modality built
//! from conv blocks and dilated residual blocks, a correlation block at the
//! bottleneck, dual-attention fusion at every level, and a shared decoder
//! with deep supervision.

use ndarray::{concatenate, s, Array2, Array5, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DualFusion, FusionCache};
use crate::correlation::{default_pairing, validate_pairing, CorrelationBlock, CorrelationBlockCache};
use crate::error::{Error, Result};
use crate::nn::ops::{leaky_relu, leaky_relu_backward, upsample_nearest2, upsample_nearest2_backward};
use crate::nn::{join, Conv3d, InstanceNorm3d, InstanceNormCache, Params, Real};

/// Architecture hyperparameters. The parameter set is a pure function of
/// this config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    pub n_modalities: usize,
    pub n_classes: usize,
    pub base_filters: usize,
    pub n_levels: usize,
    pub dilation_rates: (usize, usize),
    pub lambda_corr: f64,
    pub input_shape: [usize; 3],
    /// Ordered (source, target) correlation pairs.
    pub pairing: Vec<(usize, usize)>,
    /// Dual-attention fusion on; off means plain concatenation (baseline).
    pub use_fusion: bool,
    /// Correlation block and loss on.
    pub use_correlation: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_modalities: 4,
            n_classes: 4,
            base_filters: 8,
            n_levels: 4,
            dilation_rates: (2, 4),
            lambda_corr: 0.1,
            input_shape: [128, 128, 128],
            pairing: default_pairing(4),
            use_fusion: true,
            use_correlation: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modalities < 1 {
            return Err(Error::config("need at least one modality"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.base_filters < 1 {
            return Err(Error::config("base_filters must be >= 1"));
        }
        if self.n_levels < 2 {
            return Err(Error::config("n_levels must be >= 2"));
        }
        let div = 1usize << (self.n_levels - 1);
        for (axis, &dim) in self.input_shape.iter().enumerate() {
            if dim == 0 || dim % div != 0 {
                return Err(Error::config(format!(
                    "input axis {axis} = {dim} not divisible by 2^(n_levels-1) = {div}"
                )));
            }
        }
        validate_pairing(&self.pairing, self.n_modalities)?;
        Ok(())
    }

    /// Encoder channel count at a level.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Channels entering the fusion block at a level: one unit per modality
    /// plus, below the bottleneck, the halved upsampled decoder unit.
    pub fn fusion_unit_channels(&self, level: usize) -> Vec<usize> {
        let bottom = self.n_levels - 1;
        let c = self.level_channels(level);
        let mut units = vec![c; self.n_modalities];
        if level < bottom {
            units.push(self.decoder_up_channels(level));
        }
        units
    }

    /// Decoder state width at a level (bottleneck state is the fused concat).
    pub fn decoder_state_channels(&self, level: usize) -> usize {
        if level == self.n_levels - 1 {
            self.n_modalities * self.level_channels(level)
        } else {
            self.level_channels(level)
        }
    }

    /// Channels after the halving convolution that follows upsampling into
    /// `level`.
    pub fn decoder_up_channels(&self, level: usize) -> usize {
        self.decoder_state_channels(level + 1) / 2
    }

    fn check_input(&self, dim: (usize, usize, usize, usize, usize)) -> Result<()> {
        let (_, c, d, h, w) = dim;
        if c != self.n_modalities {
            return Err(Error::shape(format!(
                "expected {} modality channels, got {c}",
                self.n_modalities
            )));
        }
        let div = 1usize << (self.n_levels - 1);
        for dim in [d, h, w] {
            if dim == 0 || dim % div != 0 {
                return Err(Error::shape(format!(
                    "spatial dim {dim} not divisible by {div}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Conv block: 3x3x3 conv -> instance norm -> LeakyReLU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv3d<T>,
    pub norm: InstanceNorm3d<T>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache<T> {
    x: Array5<T>,
    conv_out: Array5<T>,
    norm_cache: InstanceNormCache<T>,
    norm_out: Array5<T>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha20Rng) -> Self {
        ConvBlock {
            conv: Conv3d::same(c_in, c_out, 1, rng),
            norm: InstanceNorm3d::new(c_out),
        }
    }

    pub fn forward(&self, x: &Array5<T>) -> Result<(Array5<T>, ConvBlockCache<T>)> {
        let conv_out = self.conv.forward(x)?;
        let (norm_out, norm_cache) = self.norm.forward(&conv_out)?;
        let y = leaky_relu(&norm_out);
        Ok((
            y,
            ConvBlockCache {
                x: x.clone(),
                conv_out,
                norm_cache,
                norm_out,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ConvBlockCache<T>,
        dy: &Array5<T>,
        grad: &mut ConvBlock<T>,
    ) -> Array5<T> {
        let dnorm_out = leaky_relu_backward(&cache.norm_out, dy);
        let dconv_out = self
            .norm
            .backward(&cache.conv_out, &cache.norm_cache, &dnorm_out, &mut grad.norm);
        self.conv.backward(&cache.x, &dconv_out, &mut grad.conv)
    }
}

impl<T: Real> Params<T> for ConvBlock<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

// ---------------------------------------------------------------------------
// Residual block with dilated branch
// ---------------------------------------------------------------------------

/// Residual block: conv(dilation r1) -> norm -> LeakyReLU -> conv(dilation
/// r2) -> norm, added to an identity (or 1x1x1-projected) shortcut, then
/// LeakyReLU. Spatial dims are preserved by zero padding.
#[derive(Debug, Clone)]
pub struct ResDilBlock<T> {
    pub conv1: Conv3d<T>,
    pub norm1: InstanceNorm3d<T>,
    pub conv2: Conv3d<T>,
    pub norm2: InstanceNorm3d<T>,
    pub proj: Option<Conv3d<T>>,
}

#[derive(Debug, Clone)]
pub struct ResDilCache<T> {
    x: Array5<T>,
    c1: Array5<T>,
    n1_cache: InstanceNormCache<T>,
    n1_out: Array5<T>,
    a1: Array5<T>,
    c2: Array5<T>,
    n2_cache: InstanceNormCache<T>,
    pre: Array5<T>,
}

impl<T: Real> ResDilBlock<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        dilations: (usize, usize),
        rng: &mut ChaCha20Rng,
    ) -> Self {
        ResDilBlock {
            conv1: Conv3d::same(c_in, c_out, dilations.0, rng),
            norm1: InstanceNorm3d::new(c_out),
            conv2: Conv3d::same(c_out, c_out, dilations.1, rng),
            norm2: InstanceNorm3d::new(c_out),
            proj: if c_in == c_out {
                None
            } else {
                Some(Conv3d::pointwise(c_in, c_out, rng))
            },
        }
    }

    pub fn forward(&self, x: &Array5<T>) -> Result<(Array5<T>, ResDilCache<T>)> {
        let c1 = self.conv1.forward(x)?;
        let (n1_out, n1_cache) = self.norm1.forward(&c1)?;
        let a1 = leaky_relu(&n1_out);
        let c2 = self.conv2.forward(&a1)?;
        let (branch, n2_cache) = self.norm2.forward(&c2)?;
        let pre = match &self.proj {
            Some(p) => branch + p.forward(x)?,
            None => branch + x,
        };
        let y = leaky_relu(&pre);
        Ok((
            y,
            ResDilCache {
                x: x.clone(),
                c1,
                n1_cache,
                n1_out,
                a1,
                c2,
                n2_cache,
                pre,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ResDilCache<T>,
        dy: &Array5<T>,
        grad: &mut ResDilBlock<T>,
    ) -> Array5<T> {
        let dpre = leaky_relu_backward(&cache.pre, dy);
        let dbranch = self
            .norm2
            .backward(&cache.c2, &cache.n2_cache, &dpre, &mut grad.norm2);
        let da1 = self.conv2.backward(&cache.a1, &dbranch, &mut grad.conv2);
        let dn1 = leaky_relu_backward(&cache.n1_out, &da1);
        let dc1 = self
            .norm1
            .backward(&cache.c1, &cache.n1_cache, &dn1, &mut grad.norm1);
        let mut dx = self.conv1.backward(&cache.x, &dc1, &mut grad.conv1);
        match (&self.proj, grad.proj.as_mut()) {
            (Some(p), Some(gp)) => dx += &p.backward(&cache.x, &dpre, gp),
            _ => dx += &dpre,
        }
        dx
    }
}

impl<T: Real> Params<T> for ResDilBlock<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        if let Some(p) = &self.proj {
            p.visit(&join(prefix, "proj"), f);
        }
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        if let Some(p) = &mut self.proj {
            p.visit_mut(&join(prefix, "proj"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Per-modality encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderLevel<T> {
    pub conv: ConvBlock<T>,
    pub res: ResDilBlock<T>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub levels: Vec<EncoderLevel<T>>,
    /// Stride-2 convs between levels, doubling channels.
    pub downs: Vec<Conv3d<T>>,
}

pub struct EncoderCache<T> {
    conv_caches: Vec<ConvBlockCache<T>>,
    res_caches: Vec<ResDilCache<T>>,
    outputs: Vec<Array5<T>>,
}

impl<T: Real> Encoder<T> {
    fn new(config: &NetworkConfig, rng: &mut ChaCha20Rng) -> Self {
        let mut levels = Vec::with_capacity(config.n_levels);
        let mut downs = Vec::with_capacity(config.n_levels - 1);
        for l in 0..config.n_levels {
            let c = config.level_channels(l);
            let c_in = if l == 0 { 1 } else { c };
            levels.push(EncoderLevel {
                conv: ConvBlock::new(c_in, c, rng),
                res: ResDilBlock::new(c, c, config.dilation_rates, rng),
            });
            if l + 1 < config.n_levels {
                downs.push(Conv3d::new(c, 2 * c, 3, 2, 1, 1, rng));
            }
        }
        Encoder { levels, downs }
    }

    /// Returns one feature map per level, shallow to deep.
    pub fn forward(&self, x: &Array5<T>) -> Result<(Vec<Array5<T>>, EncoderCache<T>)> {
        let mut cache = EncoderCache {
            conv_caches: Vec::with_capacity(self.levels.len()),
            res_caches: Vec::with_capacity(self.levels.len()),
            outputs: Vec::with_capacity(self.levels.len()),
        };
        let mut cur = x.clone();
        for (l, level) in self.levels.iter().enumerate() {
            let (c_out, c_cache) = level.conv.forward(&cur)?;
            let (r_out, r_cache) = level.res.forward(&c_out)?;
            cache.conv_caches.push(c_cache);
            cache.res_caches.push(r_cache);
            cache.outputs.push(r_out.clone());
            if l + 1 < self.levels.len() {
                cur = self.downs[l].forward(&r_out)?;
            } else {
                cur = r_out;
            }
        }
        Ok((cache.outputs.clone(), cache))
    }

    /// `dout[l]` is the gradient flowing into the level-l output. Gradients
    /// for the encoder input are returned (and discarded by the caller).
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        mut dout: Vec<Array5<T>>,
        grad: &mut Encoder<T>,
    ) -> Array5<T> {
        let last = self.levels.len() - 1;
        for l in (0..=last).rev() {
            let d_level = dout[l].clone();
            let dres = self.levels[l]
                .res
                .backward(&cache.res_caches[l], &d_level, &mut grad.levels[l].res);
            let dconv =
                self.levels[l]
                    .conv
                    .backward(&cache.conv_caches[l], &dres, &mut grad.levels[l].conv);
            if l > 0 {
                // dconv is the gradient of downs[l-1]'s output
                let ddown =
                    self.downs[l - 1].backward(&cache.outputs[l - 1], &dconv, &mut grad.downs[l - 1]);
                dout[l - 1] += &ddown;
            } else {
                return dconv;
            }
        }
        unreachable!()
    }
}

impl<T: Real> Params<T> for Encoder<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        for (l, level) in self.levels.iter().enumerate() {
            level.conv.visit(&join(prefix, &format!("l{l}.conv")), f);
            level.res.visit(&join(prefix, &format!("l{l}.res")), f);
        }
        for (l, down) in self.downs.iter().enumerate() {
            down.visit(&join(prefix, &format!("down{l}")), f);
        }
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        for (l, level) in self.levels.iter_mut().enumerate() {
            level.conv.visit_mut(&join(prefix, &format!("l{l}.conv")), f);
            level.res.visit_mut(&join(prefix, &format!("l{l}.res")), f);
        }
        for (l, down) in self.downs.iter_mut().enumerate() {
            down.visit_mut(&join(prefix, &format!("down{l}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Decoder level
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DecoderLevel<T> {
    /// 1x1x1 conv halving the channels of the upsampled deeper state.
    pub up_conv: Conv3d<T>,
    /// Residual block reducing the fused concat to the level width.
    pub res: ResDilBlock<T>,
    /// Deep-supervision head: 1x1x1 conv to class logits.
    pub head: Conv3d<T>,
}

impl<T: Real> Params<T> for DecoderLevel<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        self.up_conv.visit(&join(prefix, "up"), f);
        self.res.visit(&join(prefix, "res"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        self.up_conv.visit_mut(&join(prefix, "up"), f);
        self.res.visit_mut(&join(prefix, "res"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub encoders: Vec<Encoder<T>>,
    /// One fusion block per level; index n_levels-1 is the bottleneck.
    pub fusions: Vec<DualFusion<T>>,
    pub correlation: CorrelationBlock<T>,
    /// Decoder levels 0..n_levels-1, shallow to deep.
    pub decoder: Vec<DecoderLevel<T>>,
}

/// Forward products exposed to the losses: class logits, the per-modality
/// bottleneck representations Z, and the estimated representations F (one per
/// correlation pair; empty when the correlation block is disabled).
pub struct ModelOutput<T> {
    pub logits: Array5<T>,
    pub z: Vec<Array5<T>>,
    pub f: Vec<Array5<T>>,
    /// Per-level modality-attention weights (level, (B, K)), fusion only.
    pub attention_weights: Vec<(usize, Array2<T>)>,
}

pub struct ModelCache<T> {
    enc_caches: Vec<EncoderCache<T>>,
    z_list: Vec<Array5<T>>,
    corr_cache: Option<CorrelationBlockCache<T>>,
    fusion_caches: Vec<Option<FusionCache<T>>>,
    /// Input to up_conv at each decoder level (the upsampled deeper state).
    up_inputs: Vec<Array5<T>>,
    dec_res_caches: Vec<Option<ResDilCache<T>>>,
    dec_states: Vec<Array5<T>>,
}

fn concat_units<T: Real>(units: &[&Array5<T>]) -> Array5<T> {
    let views: Vec<_> = units.iter().map(|u| u.view()).collect();
    concatenate(Axis(1), &views).expect("consistent unit shapes")
}

fn split_units<T: Real>(z: &Array5<T>, channels: &[usize]) -> Vec<Array5<T>> {
    let mut out = Vec::with_capacity(channels.len());
    let mut c0 = 0;
    for &c in channels {
        out.push(z.slice(s![.., c0..c0 + c, .., .., ..]).to_owned());
        c0 += c;
    }
    out
}

impl<T: Real> Model<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let encoders = (0..config.n_modalities)
            .map(|_| Encoder::new(config, &mut rng))
            .collect();
        let mut fusions = Vec::with_capacity(config.n_levels);
        for l in 0..config.n_levels {
            fusions.push(DualFusion::new(&config.fusion_unit_channels(l), &mut rng));
        }
        let bottleneck_c = config.level_channels(config.n_levels - 1);
        let correlation = CorrelationBlock::new(
            bottleneck_c,
            config.pairing.clone(),
            config.n_modalities,
            &mut rng,
        )?;
        let mut decoder = Vec::with_capacity(config.n_levels - 1);
        for l in 0..config.n_levels - 1 {
            let state_above = config.decoder_state_channels(l + 1);
            let fused_c: usize = config.fusion_unit_channels(l).iter().sum();
            decoder.push(DecoderLevel {
                up_conv: Conv3d::pointwise(state_above, state_above / 2, &mut rng),
                res: ResDilBlock::new(
                    fused_c,
                    config.level_channels(l),
                    config.dilation_rates,
                    &mut rng,
                ),
                head: Conv3d::pointwise(config.level_channels(l), config.n_classes, &mut rng),
            });
        }
        Ok(Model {
            config: config.clone(),
            encoders,
            fusions,
            correlation,
            decoder,
        })
    }

    /// A zeroed copy used as a gradient accumulator.
    pub fn zero_grads(&self) -> Model<T> {
        let mut g = self.clone();
        crate::nn::zero_params(&mut g);
        g
    }

    pub fn num_params(&self) -> usize {
        crate::nn::num_params(self)
    }

    /// Full forward pass over a (B, N, D, H, W) batch.
    pub fn forward(&self, x: &Array5<T>) -> Result<(ModelOutput<T>, ModelCache<T>)> {
        self.config.check_input(x.dim())?;
        let levels = self.config.n_levels;
        let bottom = levels - 1;

        // Per-modality encoders.
        let mut enc_caches = Vec::with_capacity(self.encoders.len());
        let mut enc_feats: Vec<Vec<Array5<T>>> = Vec::with_capacity(self.encoders.len());
        for (i, enc) in self.encoders.iter().enumerate() {
            let xi = x.slice(s![.., i..i + 1, .., .., ..]).to_owned();
            let (feats, cache) = enc.forward(&xi)?;
            enc_feats.push(feats);
            enc_caches.push(cache);
        }
        let z_list: Vec<Array5<T>> = enc_feats.iter().map(|f| f[bottom].clone()).collect();

        // Correlation block at the bottleneck.
        let (f_list, corr_cache) = if self.config.use_correlation {
            let (f, c) = self.correlation.forward(&z_list)?;
            (f, Some(c))
        } else {
            (Vec::new(), None)
        };

        let mut fusion_caches: Vec<Option<FusionCache<T>>> = (0..levels).map(|_| None).collect();
        let mut attention_weights = Vec::new();

        // Bottleneck fusion (or plain concatenation for the baseline).
        let z_refs: Vec<&Array5<T>> = z_list.iter().collect();
        let mut state = if self.config.use_fusion {
            let (zf, cache) = self.fusions[bottom].forward(&z_refs)?;
            attention_weights.push((bottom, cache.s.clone()));
            fusion_caches[bottom] = Some(cache);
            zf
        } else {
            concat_units(&z_refs)
        };

        // Decoder, deep to shallow, with deep supervision.
        let mut up_inputs: Vec<Array5<T>> = (0..levels - 1).map(|_| Array5::zeros((0, 0, 0, 0, 0))).collect();
        let mut dec_res_caches: Vec<Option<ResDilCache<T>>> =
            (0..levels - 1).map(|_| None).collect();
        let mut dec_states: Vec<Array5<T>> =
            (0..levels - 1).map(|_| Array5::zeros((0, 0, 0, 0, 0))).collect();
        let mut logits_sum: Option<Array5<T>> = None;

        for l in (0..levels - 1).rev() {
            let up = upsample_nearest2(&state);
            let halved = self.decoder[l].up_conv.forward(&up)?;
            up_inputs[l] = up;

            let mut units: Vec<&Array5<T>> = Vec::with_capacity(self.encoders.len() + 1);
            for feats in &enc_feats {
                units.push(&feats[l]);
            }
            units.push(&halved);

            let fused = if self.config.use_fusion {
                let (zf, cache) = self.fusions[l].forward(&units)?;
                attention_weights.push((l, cache.s.clone()));
                fusion_caches[l] = Some(cache);
                zf
            } else {
                concat_units(&units)
            };

            let (d_state, res_cache) = self.decoder[l].res.forward(&fused)?;
            dec_res_caches[l] = Some(res_cache);

            // Deep supervision: level logits upsampled to full resolution.
            let mut level_logits = self.decoder[l].head.forward(&d_state)?;
            dec_states[l] = d_state.clone();
            state = d_state;
            for _ in 0..l {
                level_logits = upsample_nearest2(&level_logits);
            }
            logits_sum = Some(match logits_sum {
                Some(acc) => acc + &level_logits,
                None => level_logits,
            });
        }

        let logits = logits_sum.expect("at least one decoder level");
        attention_weights.sort_by_key(|(l, _)| *l);
        Ok((
            ModelOutput {
                logits,
                z: z_list.clone(),
                f: f_list,
                attention_weights,
            },
            ModelCache {
                enc_caches,
                z_list,
                corr_cache,
                fusion_caches,
                up_inputs,
                dec_res_caches,
                dec_states,
            },
        ))
    }

    /// Backward pass. `dlogits` is the gradient of the loss with respect to
    /// the summed class logits; `dz_extra[i]` (optional) is an extra gradient
    /// on bottleneck representation Z_i (the target side of the correlation
    /// loss); `df[p]` the gradient on estimate F_p. Parameter gradients are
    /// accumulated into `grads`.
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        dlogits: &Array5<T>,
        dz_extra: Option<&[Array5<T>]>,
        df: Option<&[Array5<T>]>,
        grads: &mut Model<T>,
    ) -> Result<()> {
        let levels = self.config.n_levels;
        let bottom = levels - 1;
        let n_mod = self.config.n_modalities;

        // Gradients flowing into each encoder's per-level outputs.
        let mut denc: Vec<Vec<Array5<T>>> = cache
            .enc_caches
            .iter()
            .map(|c| c.outputs.iter().map(|o| Array5::zeros(o.dim())).collect())
            .collect();

        // Walk the decoder shallow to deep, accumulating the gradient of the
        // deeper state as we go.
        let mut dstate: Option<Array5<T>> = None;
        for l in 0..levels - 1 {
            // Head contribution: downsample-adjoint of the summed logits.
            let mut dhead = dlogits.clone();
            for _ in 0..l {
                dhead = upsample_nearest2_backward(&dhead);
            }
            let mut d_state_l =
                self.decoder[l]
                    .head
                    .backward(&cache.dec_states[l], &dhead, &mut grads.decoder[l].head);
            if let Some(ds) = dstate.take() {
                d_state_l += &ds;
            }

            let res_cache = cache.dec_res_caches[l].as_ref().expect("decoder cache");
            let dfused =
                self.decoder[l]
                    .res
                    .backward(res_cache, &d_state_l, &mut grads.decoder[l].res);

            let dunits = if self.config.use_fusion {
                let fcache = cache.fusion_caches[l].as_ref().expect("fusion cache");
                self.fusions[l].backward(fcache, &dfused, &mut grads.fusions[l])
            } else {
                split_units(&dfused, &self.config.fusion_unit_channels(l))
            };

            for (i, du) in dunits.iter().take(n_mod).enumerate() {
                denc[i][l] += du;
            }
            let dhalved = &dunits[n_mod];
            let dup =
                self.decoder[l]
                    .up_conv
                    .backward(&cache.up_inputs[l], dhalved, &mut grads.decoder[l].up_conv);
            dstate = Some(upsample_nearest2_backward(&dup));
        }

        // Bottleneck: decoder gradient + correlation-loss gradients.
        let dbottom = dstate.expect("decoder produced a bottleneck gradient");
        let mut dz: Vec<Array5<T>> = if self.config.use_fusion {
            let fcache = cache.fusion_caches[bottom].as_ref().expect("fusion cache");
            self.fusions[bottom].backward(fcache, &dbottom, &mut grads.fusions[bottom])
        } else {
            split_units(&dbottom, &self.config.fusion_unit_channels(bottom))
        };
        if let Some(extra) = dz_extra {
            if extra.len() != n_mod {
                return Err(Error::shape(format!(
                    "dz_extra has {} entries for {n_mod} modalities",
                    extra.len()
                )));
            }
            for (acc, e) in dz.iter_mut().zip(extra.iter()) {
                *acc += e;
            }
        }
        if let Some(df_list) = df {
            if self.config.use_correlation && !df_list.is_empty() {
                let corr_cache = cache.corr_cache.as_ref().expect("correlation cache");
                let dz_corr = self.correlation.backward(
                    &cache.z_list,
                    corr_cache,
                    df_list,
                    &mut grads.correlation,
                );
                for (acc, e) in dz.iter_mut().zip(dz_corr.iter()) {
                    *acc += e;
                }
            }
        }

        // Encoders.
        for i in 0..n_mod {
            denc[i][bottom] += &dz[i];
            let douts = std::mem::take(&mut denc[i]);
            self.encoders[i].backward(&cache.enc_caches[i], douts, &mut grads.encoders[i]);
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for Model<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        for (i, enc) in self.encoders.iter().enumerate() {
            enc.visit(&join(prefix, &format!("enc{i}")), f);
        }
        for (l, fusion) in self.fusions.iter().enumerate() {
            fusion.visit(&join(prefix, &format!("fusion{l}")), f);
        }
        self.correlation.visit(&join(prefix, "corr"), f);
        for (l, dec) in self.decoder.iter().enumerate() {
            dec.visit(&join(prefix, &format!("dec{l}")), f);
        }
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_mut(&join(prefix, &format!("enc{i}")), f);
        }
        for (l, fusion) in self.fusions.iter_mut().enumerate() {
            fusion.visit_mut(&join(prefix, &format!("fusion{l}")), f);
        }
        self.correlation.visit_mut(&join(prefix, "corr"), f);
        for (l, dec) in self.decoder.iter_mut().enumerate() {
            dec.visit_mut(&join(prefix, &format!("dec{l}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Save as a self-describing container: magic, version, serialized config,
/// then (name, shape, f32 payload) per parameter. Written atomically via a
/// temp file rename.
pub fn save_checkpoint(path: &std::path::Path, model: &Model<f32>) -> Result<()> {
    use std::io::Write;
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let config_json = serde_json::to_vec(&model.config)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        w.write_all(&(config_json.len() as u32).to_le_bytes())?;
        w.write_all(&config_json)?;
        let params = crate::nn::collect_params(model);
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, view) in params {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[view.ndim() as u8])?;
            for &d in view.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in view.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct CheckpointReader {
    raw: Vec<u8>,
    pos: usize,
    path: String,
}

impl CheckpointReader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.raw.len() {
            return Err(Error::format(self.path.clone(), "truncated checkpoint"));
        }
        let s = &self.raw[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn open_checkpoint(path: &std::path::Path) -> Result<(CheckpointReader, NetworkConfig, u32)> {
    let raw = std::fs::read(path)?;
    let mut r = CheckpointReader {
        raw,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(r.path.clone(), "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::CheckpointMismatch(format!("bad config json: {e}")))?;
    Ok((r, config, version))
}

/// Parameter names and shapes plus the stored config, for inspection.
pub fn checkpoint_summary(
    path: &std::path::Path,
) -> Result<(NetworkConfig, u32, Vec<(String, Vec<usize>)>)> {
    let (mut r, config, version) = open_checkpoint(path)?;
    let n_params = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(r.path.clone(), "bad parameter name"))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        r.take(4 * len)?;
        entries.push((name, shape));
    }
    Ok((config, version, entries))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Model<f32>> {
    let (mut r, config, _) = open_checkpoint(path)?;
    let mut model = Model::<f32>::new(&config, 0)?;
    let n_params = r.u32()? as usize;

    let mut stored: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(r.path.clone(), "bad parameter name"))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = r.take(4 * len)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        stored.insert(name, (shape, values));
    }

    let mut missing = Vec::new();
    {
        let mut views = crate::nn::collect_params_mut(&mut model);
        for (name, view) in views.iter_mut() {
            match stored.remove(name.as_str()) {
                Some((shape, values)) => {
                    if view.shape() != shape.as_slice() {
                        return Err(Error::CheckpointMismatch(format!(
                            "parameter {name}: stored shape {:?}, model expects {:?}",
                            shape,
                            view.shape()
                        )));
                    }
                    for (dst, src) in view.iter_mut().zip(values.iter()) {
                        *dst = *src;
                    }
                }
                None => missing.push(name.clone()),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint lacks parameters: {}",
            missing.join(", ")
        )));
    }
    if !stored.is_empty() {
        let extra: Vec<String> = stored.keys().cloned().collect();
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has unknown parameters: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}
