//! Correlation constrain block: estimate per-channel affine parameters from
//! one modality's bottleneck representation, synthesize the paired modality's
//! representation, and penalize distributional divergence with KL.

use ndarray::{concatenate, s, Array2, Array5, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{
    flat_log_softmax, global_avg_pool, global_avg_pool_backward, leaky_relu2,
    leaky_relu2_backward,
};
use crate::nn::{join, Linear, Params, Real};

/// Clamp floor applied to the estimated distribution inside the log.
const KL_CLAMP: f64 = 1e-12;

/// Ordered (source, target) modality pairs. Four modalities use the chain
/// FLAIR -> T1 -> T1c -> T2 by default.
pub fn default_pairing(n_modalities: usize) -> Vec<(usize, usize)> {
    (0..n_modalities.saturating_sub(1))
        .map(|i| (i, i + 1))
        .collect()
}

/// Validate a pairing against the modality count: one pair fewer than
/// modalities, distinct endpoints, indices in range.
pub fn validate_pairing(pairing: &[(usize, usize)], n_modalities: usize) -> Result<()> {
    if n_modalities >= 2 && pairing.len() != n_modalities - 1 {
        return Err(Error::config(format!(
            "{} modalities require {} correlation pairs, got {}",
            n_modalities,
            n_modalities - 1,
            pairing.len()
        )));
    }
    for &(i, j) in pairing {
        if i == j {
            return Err(Error::config(format!("pair {i}>{j} maps a modality to itself")));
        }
        if i >= n_modalities || j >= n_modalities {
            return Err(Error::config(format!(
                "pair {i}>{j} out of range for {n_modalities} modalities"
            )));
        }
    }
    Ok(())
}

/// Per-channel affine parameters predicted from a source representation.
#[derive(Debug, Clone)]
pub struct CorrelationParams<T> {
    pub alpha: Array2<T>, // (B, C)
    pub beta: Array2<T>,  // (B, C)
}

/// Two fully connected layers (C -> C, LeakyReLU, C -> 2C) mapping a pooled
/// bottleneck vector to alpha and beta.
#[derive(Debug, Clone)]
pub struct CorrMlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct CorrMlpCache<T> {
    pub pooled: Array2<T>,
    pub pre_act: Array2<T>,
    pub hidden: Array2<T>,
}

impl<T: Real> CorrMlp<T> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        CorrMlp {
            fc1: Linear::new(channels, channels, rng),
            fc2: Linear::new(channels, 2 * channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.weight.dim().1
    }

    /// Pool the source representation and predict (alpha, beta).
    pub fn estimate_params(
        &self,
        z: &Array5<T>,
    ) -> Result<(CorrelationParams<T>, CorrMlpCache<T>)> {
        let c = z.dim().1;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "correlation mlp expects {} channels, got {c}",
                self.channels()
            )));
        }
        let pooled = global_avg_pool(z);
        let pre_act = self.fc1.forward(&pooled)?;
        let hidden = leaky_relu2(&pre_act);
        let out = self.fc2.forward(&hidden)?;
        let alpha = out.slice(s![.., ..c]).to_owned();
        let beta = out.slice(s![.., c..]).to_owned();
        Ok((
            CorrelationParams { alpha, beta },
            CorrMlpCache {
                pooled,
                pre_act,
                hidden,
            },
        ))
    }

    /// Backward from (dalpha, dbeta) to the pooled input gradient, then
    /// broadcast back over the source map's spatial extent.
    pub fn backward(
        &self,
        cache: &CorrMlpCache<T>,
        dalpha: &Array2<T>,
        dbeta: &Array2<T>,
        spatial: (usize, usize, usize),
        grad: &mut CorrMlp<T>,
    ) -> Array5<T> {
        let dout = concatenate(Axis(1), &[dalpha.view(), dbeta.view()]).unwrap();
        let dhidden = self.fc2.backward(&cache.hidden, &dout, &mut grad.fc2);
        let dpre = leaky_relu2_backward(&cache.pre_act, &dhidden);
        let dpooled = self.fc1.backward(&cache.pooled, &dpre, &mut grad.fc1);
        global_avg_pool_backward(&dpooled, spatial)
    }
}

impl<T: Real> Params<T> for CorrMlp<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Per-channel affine map broadcast over space: F[c, x] = alpha[c] Z[c, x] + beta[c].
pub fn linear_correlate<T: Real>(
    z: &Array5<T>,
    params: &CorrelationParams<T>,
) -> Result<Array5<T>> {
    let (bn, c, _, _, _) = z.dim();
    if params.alpha.dim() != (bn, c) || params.beta.dim() != (bn, c) {
        return Err(Error::shape(format!(
            "alpha/beta of shape {:?} do not match map with {c} channels",
            params.alpha.dim()
        )));
    }
    let mut f = z.clone();
    for b in 0..bn {
        for ci in 0..c {
            let (a, be) = (params.alpha[[b, ci]], params.beta[[b, ci]]);
            f.slice_mut(s![b, ci, .., .., ..])
                .mapv_inplace(|v| a * v + be);
        }
    }
    Ok(f)
}

/// Flattened-softmax distribution of a feature map, one row per sample.
/// Strictly positive, sums to one.
pub fn to_distribution<T: Real>(fm: &Array5<T>) -> Array2<T> {
    flat_log_softmax(fm).mapv(|v| v.exp())
}

fn kl_terms<T: Real>(z_target: &Array5<T>, f_est: &Array5<T>) -> Result<(T, Array2<T>, Array2<T>)> {
    if z_target.dim() != f_est.dim() {
        return Err(Error::shape(format!(
            "correlation pair shapes differ: {:?} vs {:?}",
            z_target.dim(),
            f_est.dim()
        )));
    }
    let log_p = flat_log_softmax(z_target);
    let log_q = flat_log_softmax(f_est);
    let clamp = T::from_f64(KL_CLAMP.ln());
    let bn = log_p.dim().0;
    let mut total = T::zero();
    for b in 0..bn {
        let mut acc = T::zero();
        for (lp, lq) in log_p.row(b).iter().zip(log_q.row(b).iter()) {
            let p = lp.exp();
            let lq = if *lq < clamp { clamp } else { *lq };
            acc = acc + p * (*lp - lq);
        }
        total = total + acc;
    }
    Ok((total, log_p, log_q))
}

/// KL(P || Q) per pair, P from the true target representation and Q from the
/// estimate, averaged over pairs and batch.
pub fn correlation_loss<T: Real>(
    z_list: &[Array5<T>],
    f_list: &[Array5<T>],
    pairing: &[(usize, usize)],
) -> Result<T> {
    if f_list.len() != pairing.len() {
        return Err(Error::shape(format!(
            "{} estimates for {} pairs",
            f_list.len(),
            pairing.len()
        )));
    }
    if pairing.is_empty() {
        return Ok(T::zero());
    }
    let bn = z_list[0].dim().0;
    let mut total = T::zero();
    for (p, &(_, dst)) in pairing.iter().enumerate() {
        let (kl, _, _) = kl_terms(&z_list[dst], &f_list[p])?;
        total = total + kl;
    }
    Ok(total * T::from_f64(1.0 / (pairing.len() * bn) as f64))
}

/// Loss plus gradients with respect to each Z (target role) and each F.
pub fn correlation_loss_grad<T: Real>(
    z_list: &[Array5<T>],
    f_list: &[Array5<T>],
    pairing: &[(usize, usize)],
) -> Result<(T, Vec<Array5<T>>, Vec<Array5<T>>)> {
    if f_list.len() != pairing.len() {
        return Err(Error::shape(format!(
            "{} estimates for {} pairs",
            f_list.len(),
            pairing.len()
        )));
    }
    let mut dz: Vec<Array5<T>> = z_list.iter().map(|z| Array5::zeros(z.dim())).collect();
    let mut df: Vec<Array5<T>> = Vec::with_capacity(f_list.len());
    if pairing.is_empty() {
        return Ok((T::zero(), dz, df));
    }
    let bn = z_list[0].dim().0;
    let scale = T::from_f64(1.0 / (pairing.len() * bn) as f64);
    let mut total = T::zero();
    for (p, &(_, dst)) in pairing.iter().enumerate() {
        let (_, log_p, log_q) = kl_terms(&z_list[dst], &f_list[p])?;
        let clamp = T::from_f64(KL_CLAMP.ln());
        let m = log_p.dim().1;
        let mut df_p = Array5::zeros(f_list[p].dim());
        {
            let dzs = dz[dst].as_slice_mut().unwrap();
            let dfs = df_p.as_slice_mut().unwrap();
            for b in 0..bn {
                // kl_b = sum_x P (logP - logQ~)
                let mut kl_b = T::zero();
                for i in 0..m {
                    let lp = log_p[[b, i]];
                    let lq = log_q[[b, i]].max(clamp);
                    kl_b = kl_b + lp.exp() * (lp - lq);
                }
                total = total + kl_b;
                for i in 0..m {
                    let lp = log_p[[b, i]];
                    let p_v = lp.exp();
                    let lq = log_q[[b, i]].max(clamp);
                    let q_v = log_q[[b, i]].exp();
                    // d/d z-logit_k: P_k ((logP_k - logQ_k) - KL)
                    dzs[b * m + i] = dzs[b * m + i] + scale * p_v * ((lp - lq) - kl_b);
                    // d/d f-logit_k: Q_k - P_k
                    dfs[b * m + i] = scale * (q_v - p_v);
                }
            }
        }
        df.push(df_p);
    }
    Ok((total * scale, dz, df))
}

/// One correlation MLP per pair, applied at the network bottleneck.
#[derive(Debug, Clone)]
pub struct CorrelationBlock<T> {
    pub mlps: Vec<CorrMlp<T>>,
    pub pairing: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct CorrelationBlockCache<T> {
    pub mlp_caches: Vec<CorrMlpCache<T>>,
    pub params: Vec<CorrelationParams<T>>,
}

impl<T: Real> CorrelationBlock<T> {
    pub fn new<R: Rng>(
        channels: usize,
        pairing: Vec<(usize, usize)>,
        n_modalities: usize,
        rng: &mut R,
    ) -> Result<Self> {
        validate_pairing(&pairing, n_modalities)?;
        let mlps = pairing.iter().map(|_| CorrMlp::new(channels, rng)).collect();
        Ok(CorrelationBlock { mlps, pairing })
    }

    /// Estimate every paired representation from its source.
    pub fn forward(
        &self,
        z_list: &[Array5<T>],
    ) -> Result<(Vec<Array5<T>>, CorrelationBlockCache<T>)> {
        let mut f_list = Vec::with_capacity(self.pairing.len());
        let mut mlp_caches = Vec::with_capacity(self.pairing.len());
        let mut params_list = Vec::with_capacity(self.pairing.len());
        for (p, &(src, _)) in self.pairing.iter().enumerate() {
            let (params, cache) = self.mlps[p].estimate_params(&z_list[src])?;
            f_list.push(linear_correlate(&z_list[src], &params)?);
            mlp_caches.push(cache);
            params_list.push(params);
        }
        Ok((
            f_list,
            CorrelationBlockCache {
                mlp_caches,
                params: params_list,
            },
        ))
    }

    /// Route estimate gradients back to the source representations and the
    /// MLP parameters. Returns per-modality dZ contributions.
    pub fn backward(
        &self,
        z_list: &[Array5<T>],
        cache: &CorrelationBlockCache<T>,
        df_list: &[Array5<T>],
        grad: &mut CorrelationBlock<T>,
    ) -> Vec<Array5<T>> {
        let mut dz: Vec<Array5<T>> = z_list.iter().map(|z| Array5::zeros(z.dim())).collect();
        for (p, &(src, _)) in self.pairing.iter().enumerate() {
            let z_src = &z_list[src];
            let (bn, c, d, h, w) = z_src.dim();
            let params = &cache.params[p];
            let df = &df_list[p];

            // F = alpha (x) Z + beta
            let mut dalpha = Array2::zeros((bn, c));
            let mut dbeta = Array2::zeros((bn, c));
            {
                let n = d * h * w;
                let zs = z_src.as_slice().unwrap();
                let dfs = df.as_slice().expect("standard layout");
                let dzs = dz[src].as_slice_mut().unwrap();
                for b in 0..bn {
                    for ci in 0..c {
                        let base = (b * c + ci) * n;
                        let a = params.alpha[[b, ci]];
                        let mut da = T::zero();
                        let mut db = T::zero();
                        for i in 0..n {
                            let g = dfs[base + i];
                            da = da + g * zs[base + i];
                            db = db + g;
                            dzs[base + i] = dzs[base + i] + a * g;
                        }
                        dalpha[[b, ci]] = da;
                        dbeta[[b, ci]] = db;
                    }
                }
            }
            let dz_mlp = self.mlps[p].backward(
                &cache.mlp_caches[p],
                &dalpha,
                &dbeta,
                (d, h, w),
                &mut grad.mlps[p],
            );
            dz[src] += &dz_mlp;
        }
        dz
    }
}

impl<T: Real> Params<T> for CorrelationBlock<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, ndarray::ArrayViewD<'s, T>)) {
        for (i, mlp) in self.mlps.iter().enumerate() {
            mlp.visit(&join(prefix, &format!("pair{i}")), f);
        }
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ndarray::ArrayViewMutD<'s, T>),
    ) {
        for (i, mlp) in self.mlps.iter_mut().enumerate() {
            mlp.visit_mut(&join(prefix, &format!("pair{i}")), f);
        }
    }
}

/// Parse a pairing spec such as "FLAIR>T1,T1>T1c,T1c>T2" against the
/// canonical four-modality names (or SYNTH<i> tags).
pub fn parse_pairing(spec: &str, n_modalities: usize) -> Result<Vec<(usize, usize)>> {
    use crate::volume::Modality;
    let index_of = |name: &str| -> Result<usize> {
        let m = Modality::parse(name)
            .ok_or_else(|| Error::config(format!("unknown modality '{name}'")))?;
        let idx = match m {
            Modality::Synth(i) => i as usize,
            other => crate::volume::CANONICAL_MODALITIES
                .iter()
                .position(|c| *c == other)
                .unwrap(),
        };
        if idx >= n_modalities {
            return Err(Error::config(format!(
                "modality '{name}' out of range for {n_modalities} modalities"
            )));
        }
        Ok(idx)
    };
    let mut pairing = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (src, dst) = part
            .split_once('>')
            .ok_or_else(|| Error::config(format!("bad pair '{part}', expected SRC>DST")))?;
        pairing.push((index_of(src.trim())?, index_of(dst.trim())?));
    }
    validate_pairing(&pairing, n_modalities)?;
    Ok(pairing)
}
