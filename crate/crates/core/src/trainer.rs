//! Optimization loop with plateau LR decay and early stopping, plus the
//! evaluation and prediction drivers.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, Array5, ArrayD};

use crate::correlation::correlation_loss_grad;
use crate::error::{Error, Result};
use crate::metrics::{
    dice_loss_grad, dice_score, hausdorff, one_hot, region_masks, MetricsReport, MetricsRow,
    DICE_EPS,
};
use crate::network::{save_checkpoint, Model, NetworkConfig};
use crate::nn::ops::{softmax_classes, softmax_classes_backward};
use crate::nn::{collect_params, collect_params_mut, Real};
use crate::volume::{
    class_to_label, crop_resize, label_to_class, split_dataset, znormalize, LabelVolume,
    ManifestEntry, MultiModalCase,
};

/// Optimizer and schedule settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    pub use_fusion: bool,
    pub use_correlation: bool,
    pub split_ratio: f64,
    /// Absolute val-loss decrease below which an epoch counts as stagnant.
    pub improve_eps: f64,
    /// Optional capacity-test stop: end training once the running mean
    /// whole-tumor dice over the training epoch reaches this value.
    pub target_train_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_factor: 0.5,
            lr_patience: 10,
            early_stop_patience: 50,
            max_epochs: 300,
            batch_size: 1,
            seed: 0,
            lambda: 0.1,
            use_fusion: true,
            use_correlation: true,
            split_ratio: 0.8,
            improve_eps: 1e-4,
            target_train_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.lr_patience < 1 || self.early_stop_patience < 1 {
            return Err(Error::config("patience values must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam over the flat parameter visitation order of a model.
pub struct Adam<T> {
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new<M: crate::nn::Params<T>>(model: &M, cfg: &TrainConfig) -> Self {
        let shapes: Vec<ArrayD<T>> = collect_params(model)
            .into_iter()
            .map(|(_, view)| ArrayD::zeros(view.raw_dim()))
            .collect();
        Adam {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step<M: crate::nn::Params<T>>(&mut self, model: &mut M, grads: &M, lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);

        let grad_views = collect_params(grads);
        let mut param_views = collect_params_mut(model);
        assert_eq!(grad_views.len(), param_views.len());
        assert_eq!(param_views.len(), self.m.len());
        for (i, (name, pview)) in param_views.iter_mut().enumerate() {
            debug_assert_eq!(*name, grad_views[i].0);
            let g = &grad_views[i].1;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(pview)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr_t * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Schedule state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    TargetReached,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScheduleDecision {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Mutable training bookkeeping; `current_lr` is always
/// `initial_lr * factor^n_decays`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub initial_lr: f64,
    pub current_lr: f64,
    pub n_decays: usize,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dice_component: f64,
    pub corr_component: f64,
    pub val_loss: f64,
    pub lr: f64,
}

impl TrainState {
    pub fn new(initial_lr: f64) -> Self {
        TrainState {
            epoch: 0,
            initial_lr,
            current_lr: initial_lr,
            n_decays: 0,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            history: Vec::new(),
        }
    }

    /// Plateau schedule: decay on every `lr_patience`-th consecutive
    /// stagnant epoch, stop after `early_stop_patience` of them.
    pub fn observe_val_loss(&mut self, val_loss: f64, cfg: &TrainConfig) -> ScheduleDecision {
        let mut decision = ScheduleDecision::default();
        if val_loss < self.best_val_loss - cfg.improve_eps {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
            decision.improved = true;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement % cfg.lr_patience == 0 {
                self.n_decays += 1;
                self.current_lr =
                    self.initial_lr * cfg.lr_decay_factor.powi(self.n_decays as i32);
                decision.decayed = true;
            }
            if self.epochs_since_improvement >= cfg.early_stop_patience {
                decision.stop = true;
            }
        }
        decision
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,dice_component,corr_component,val_loss,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.dice_component, r.corr_component, r.val_loss, r.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

/// A case after z-normalization and crop/resize, ready to batch.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub case_id: String,
    /// (n_modalities, D, H, W), normalized intensities.
    pub input: Array4<f32>,
    /// Contiguous class indices {0..3}.
    pub label_classes: Option<Array3<u8>>,
    /// Raw label values {0, 1, 2, 4} on the network grid.
    pub label_raw: Option<Array3<u8>>,
    pub spacing: [f64; 3],
}

pub fn prepare_case(case: &MultiModalCase, net: &NetworkConfig) -> Result<PreparedCase> {
    case.validate()?;
    if case.modalities.len() != net.n_modalities {
        return Err(Error::shape(format!(
            "case {} has {} modalities, network expects {}",
            case.case_id,
            case.modalities.len(),
            net.n_modalities
        )));
    }
    let normalized = MultiModalCase {
        case_id: case.case_id.clone(),
        modalities: case.modalities.iter().map(znormalize).collect(),
        labels: case.labels.clone(),
    };
    let resized = crop_resize(&normalized, net.input_shape)?;
    let [d, h, w] = net.input_shape;
    let mut input = Array4::zeros((net.n_modalities, d, h, w));
    for (i, m) in resized.modalities.iter().enumerate() {
        input.slice_mut(s![i, .., .., ..]).assign(&m.data);
    }
    let label_raw = resized.labels.as_ref().map(|l| l.data.clone());
    let label_classes = label_raw.as_ref().map(|raw| {
        raw.mapv(|v| label_to_class(v).expect("validated label") as u8)
    });
    Ok(PreparedCase {
        case_id: case.case_id.clone(),
        input,
        label_classes,
        label_raw,
        spacing: resized.modalities[0].spacing,
    })
}

pub fn prepare_dataset(entries: &[ManifestEntry], net: &NetworkConfig) -> Result<Vec<PreparedCase>> {
    entries
        .iter()
        .map(|e| prepare_case(&e.load()?, net))
        .collect()
}

fn stack_batch(cases: &[&PreparedCase]) -> Result<(Array5<f32>, Array4<u8>)> {
    let (n, d, h, w) = cases[0].input.dim();
    let mut x = Array5::zeros((cases.len(), n, d, h, w));
    let mut labels = Array4::zeros((cases.len(), d, h, w));
    for (b, case) in cases.iter().enumerate() {
        x.slice_mut(s![b, .., .., .., ..]).assign(&case.input);
        let classes = case
            .label_classes
            .as_ref()
            .ok_or_else(|| Error::config(format!("case {} lacks labels", case.case_id)))?;
        labels.slice_mut(s![b, .., .., ..]).assign(classes);
    }
    Ok((x, labels))
}

/// Per-voxel argmax over class logits; exact ties go to the lower class.
pub fn argmax_classes(logits: &Array5<f32>) -> Array4<u8> {
    let (bn, c, d, h, w) = logits.dim();
    let mut out = Array4::zeros((bn, d, h, w));
    for b in 0..bn {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut best = logits[[b, 0, z, y, x]];
                    let mut best_c = 0u8;
                    for ci in 1..c {
                        let v = logits[[b, ci, z, y, x]];
                        if v > best {
                            best = v;
                            best_c = ci as u8;
                        }
                    }
                    out[[b, z, y, x]] = best_c;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    /// Best-validation checkpoint (atomic writes).
    pub checkpoint_path: PathBuf,
    pub state: TrainState,
    pub stop_reason: StopReason,
    /// Model parameters at the final epoch.
    pub model: Model<f32>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

struct BatchResult {
    total: f64,
    dice: f64,
    corr: f64,
}

fn forward_loss(
    model: &Model<f32>,
    x: &Array5<f32>,
    labels: &Array4<u8>,
    lambda: f64,
    want_pred: bool,
    grads: Option<&mut Model<f32>>,
) -> Result<(BatchResult, Option<Array4<u8>>)> {
    let (out, cache) = model.forward(x)?;
    let probs = softmax_classes(&out.logits);
    let target = one_hot::<f32>(labels, model.config.n_classes);
    let (dice, dprobs) = dice_loss_grad(&probs, &target, DICE_EPS)?;

    let use_corr = model.config.use_correlation && !out.f.is_empty();
    let (corr, dz, df) = if use_corr {
        let (c, dz, df) = correlation_loss_grad(&out.z, &out.f, &model.config.pairing)?;
        (c, dz, df)
    } else {
        (0.0f32, Vec::new(), Vec::new())
    };
    let total = dice as f64 + lambda * corr as f64;

    let pred = want_pred.then(|| argmax_classes(&out.logits));
    if let Some(grads) = grads {
        let dlogits = softmax_classes_backward(&probs, &dprobs);
        let lam = lambda as f32;
        let (dz_scaled, df_scaled) = if use_corr {
            (
                dz.iter().map(|a| a.mapv(|v| v * lam)).collect::<Vec<_>>(),
                df.iter().map(|a| a.mapv(|v| v * lam)).collect::<Vec<_>>(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        model.backward(
            &cache,
            &dlogits,
            use_corr.then_some(dz_scaled.as_slice()),
            use_corr.then_some(df_scaled.as_slice()),
            grads,
        )?;
    }
    Ok((
        BatchResult {
            total,
            dice: dice as f64,
            corr: corr as f64,
        },
        pred,
    ))
}

/// Mean whole-tumor dice of predictions against class labels (both on the
/// internal class-index scale).
fn batch_wt_dice(pred: &Array4<u8>, labels: &Array4<u8>) -> f64 {
    let bn = pred.dim().0;
    let mut acc = 0.0;
    for b in 0..bn {
        let p = pred.slice(s![b, .., .., ..]).mapv(|c| c > 0);
        let g = labels.slice(s![b, .., .., ..]).mapv(|c| c > 0);
        acc += dice_score(&p, &g).unwrap_or(0.0);
    }
    acc / bn as f64
}

/// Full training run: Adam, plateau LR decay, early stopping, best-val
/// checkpointing, deterministic under the seed with fixed data order.
pub fn train(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    dataset: &[PreparedCase],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut net = net_cfg.clone();
    net.use_fusion = cfg.use_fusion;
    net.use_correlation = cfg.use_correlation;
    net.validate()?;

    let ids: Vec<String> = dataset.iter().map(|c| c.case_id.clone()).collect();
    let (train_ids, val_ids) = split_dataset(&ids, cfg.split_ratio, cfg.seed)?;
    let by_id = |id: &String| dataset.iter().find(|c| &c.case_id == id).unwrap();
    let train_cases: Vec<&PreparedCase> = train_ids.iter().map(by_id).collect();
    let val_cases: Vec<&PreparedCase> = val_ids.iter().map(by_id).collect();
    if train_cases.is_empty() || val_cases.is_empty() {
        return Err(Error::config(
            "split produced an empty train or validation set",
        ));
    }

    let mut model = Model::<f32>::new(&net, cfg.seed)?;
    let mut adam = Adam::new(&model, cfg);
    let mut grads = model.zero_grads();
    let mut state = TrainState::new(cfg.lr);
    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        state.epoch = epoch;
        let lr_this_epoch = state.current_lr;
        let mut train_total = 0.0;
        let mut train_dice = 0.0;
        let mut train_corr = 0.0;
        let mut train_wt_dice = 0.0;
        let mut n_batches = 0usize;

        let want_pred = cfg.target_train_dice.is_some();
        for chunk in train_cases.chunks(cfg.batch_size) {
            let (x, labels) = stack_batch(chunk)?;
            crate::nn::zero_params(&mut grads);
            let (result, pred) =
                forward_loss(&model, &x, &labels, cfg.lambda, want_pred, Some(&mut grads))?;
            if !result.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: result.total,
                });
            }
            adam.step(&mut model, &grads, lr_this_epoch);
            train_total += result.total;
            train_dice += result.dice;
            train_corr += result.corr;
            n_batches += 1;
            if let Some(pred) = pred {
                // running metric from the pre-update forward; the caller
                // verifies with a proper evaluate() afterwards
                train_wt_dice += batch_wt_dice(&pred, &labels);
            }
        }
        let nb = n_batches as f64;
        let mut val_total = 0.0;
        let mut n_val = 0usize;
        for chunk in val_cases.chunks(cfg.batch_size) {
            let (x, labels) = stack_batch(chunk)?;
            let (result, _) = forward_loss(&model, &x, &labels, cfg.lambda, false, None)?;
            val_total += result.total;
            n_val += 1;
        }
        let val_loss = val_total / n_val as f64;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: val_loss,
            });
        }

        state.history.push(EpochRecord {
            epoch,
            train_loss: train_total / nb,
            dice_component: train_dice / nb,
            corr_component: train_corr / nb,
            val_loss,
            lr: lr_this_epoch,
        });

        let decision = state.observe_val_loss(val_loss, cfg);
        if decision.improved || !checkpoint_path.exists() {
            save_checkpoint(&checkpoint_path, &model)?;
        }
        if let Some(target) = cfg.target_train_dice {
            if train_wt_dice / nb >= target {
                stop_reason = StopReason::TargetReached;
                break;
            }
        }
        if decision.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    write_history_csv(&out_dir.join("history.csv"), &state.history)?;
    save_checkpoint(&out_dir.join("final.ckpt"), &model)?;
    Ok(TrainOutcome {
        checkpoint_path,
        state,
        stop_reason,
        model,
        train_ids,
        val_ids,
    })
}

// ---------------------------------------------------------------------------
// Evaluation and prediction
// ---------------------------------------------------------------------------

/// Per-region dice and Hausdorff of argmax predictions against ground truth.
/// Cases without labels are skipped.
pub fn evaluate(model: &Model<f32>, dataset: &[PreparedCase]) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for case in dataset {
        let Some(raw_gt) = &case.label_raw else {
            continue;
        };
        let pred = predict_prepared(model, case)?;
        let pred_masks = region_masks(&pred.data);
        let gt_masks = region_masks(raw_gt);
        for (idx, region) in [
            crate::metrics::Region::WholeTumor,
            crate::metrics::Region::TumorCore,
            crate::metrics::Region::Enhancing,
        ]
        .into_iter()
        .enumerate()
        {
            rows.push(MetricsRow {
                case_id: case.case_id.clone(),
                region,
                dice: dice_score(&pred_masks[idx], &gt_masks[idx])?,
                hausdorff_mm: hausdorff(&pred_masks[idx], &gt_masks[idx], case.spacing)?,
            });
        }
    }
    Ok(MetricsReport { rows })
}

/// Segment one prepared case: argmax over logits, remapped to raw label
/// values {0, 1, 2, 4}.
pub fn predict_prepared(model: &Model<f32>, case: &PreparedCase) -> Result<LabelVolume> {
    let (n, d, h, w) = case.input.dim();
    let mut x = Array5::zeros((1, n, d, h, w));
    x.slice_mut(s![0, .., .., .., ..]).assign(&case.input);
    let (out, _) = model.forward(&x)?;
    let classes = argmax_classes(&out.logits);
    let raw = classes
        .slice(s![0, .., .., ..])
        .mapv(|c| class_to_label(c as usize));
    Ok(LabelVolume { data: raw })
}

/// Preprocess and segment a raw case.
pub fn predict(model: &Model<f32>, case: &MultiModalCase) -> Result<(PreparedCase, LabelVolume)> {
    let prepared = prepare_case(case, &model.config)?;
    let labels = predict_prepared(model, &prepared)?;
    Ok((prepared, labels))
}

// ---------------------------------------------------------------------------
// Run config (flat key=value file)
// ---------------------------------------------------------------------------

/// Combined run configuration parsed from a flat key=value text file.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub net: NetworkConfig,
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::config(format!("bad boolean '{other}'"))),
    }
}

fn parse_shape(v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::config(format!("bad dimension '{s}'")))
    };
    match parts.len() {
        1 => {
            let d = parse(parts[0])?;
            Ok([d, d, d])
        }
        3 => Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?]),
        _ => Err(Error::config(format!("bad shape '{v}', use D or D,H,W"))),
    }
}

/// Parse `key = value` lines (# comments allowed). Unknown keys error.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let bad_num = |k: &str, v: &str| Error::config(format!("bad value '{v}' for {k}"));
        match key {
            "seed" => rc.train.seed = value.parse().map_err(|_| bad_num(key, value))?,
            "lr" => rc.train.lr = value.parse().map_err(|_| bad_num(key, value))?,
            "lr_decay_factor" => {
                rc.train.lr_decay_factor = value.parse().map_err(|_| bad_num(key, value))?
            }
            "lr_patience" => {
                rc.train.lr_patience = value.parse().map_err(|_| bad_num(key, value))?
            }
            "early_stop_patience" => {
                rc.train.early_stop_patience = value.parse().map_err(|_| bad_num(key, value))?
            }
            "max_epochs" => rc.train.max_epochs = value.parse().map_err(|_| bad_num(key, value))?,
            "batch_size" => rc.train.batch_size = value.parse().map_err(|_| bad_num(key, value))?,
            "lambda" => rc.train.lambda = value.parse().map_err(|_| bad_num(key, value))?,
            "split_ratio" => {
                rc.train.split_ratio = value.parse().map_err(|_| bad_num(key, value))?
            }
            "improve_eps" => {
                rc.train.improve_eps = value.parse().map_err(|_| bad_num(key, value))?
            }
            "target_train_dice" => {
                rc.train.target_train_dice =
                    Some(value.parse().map_err(|_| bad_num(key, value))?)
            }
            "use_fusion" => rc.train.use_fusion = parse_bool(value)?,
            "use_correlation" => rc.train.use_correlation = parse_bool(value)?,
            "pairs" => {
                rc.net.pairing = crate::correlation::parse_pairing(value, rc.net.n_modalities)?
            }
            "n_modalities" => {
                rc.net.n_modalities = value.parse().map_err(|_| bad_num(key, value))?;
                rc.net.pairing = crate::correlation::default_pairing(rc.net.n_modalities);
            }
            "n_classes" => rc.net.n_classes = value.parse().map_err(|_| bad_num(key, value))?,
            "base_filters" => {
                rc.net.base_filters = value.parse().map_err(|_| bad_num(key, value))?
            }
            "n_levels" => rc.net.n_levels = value.parse().map_err(|_| bad_num(key, value))?,
            "input_shape" => rc.net.input_shape = parse_shape(value)?,
            "lambda_corr" => {
                rc.net.lambda_corr = value.parse().map_err(|_| bad_num(key, value))?;
                rc.train.lambda = rc.net.lambda_corr;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown config key '{other}' on line {}",
                    lineno + 1
                )))
            }
        }
    }
    rc.net.lambda_corr = rc.train.lambda;
    rc.net.use_fusion = rc.train.use_fusion;
    rc.net.use_correlation = rc.train.use_correlation;
    Ok(rc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn micro_net() -> NetworkConfig {
        NetworkConfig {
            base_filters: 2,
            n_levels: 2,
            input_shape: [16, 16, 16],
            ..Default::default()
        }
    }

    fn micro_dataset(n_cases: usize, seed: u64) -> Vec<PreparedCase> {
        let phantom = PhantomConfig {
            seed,
            shape: [16, 16, 16],
            n_cases,
            ..Default::default()
        };
        let cases = generate_phantom(&phantom).unwrap();
        let net = micro_net();
        cases
            .iter()
            .map(|c| prepare_case(c, &net).unwrap())
            .collect()
    }

    #[test]
    fn schedule_decays_after_exactly_ten_and_stops_after_fifty() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(cfg.lr);
        let first = state.observe_val_loss(1.0, &cfg);
        assert!(first.improved && !first.decayed && !first.stop);

        for stagnant in 1..=50usize {
            let d = state.observe_val_loss(1.0, &cfg);
            match stagnant {
                9 => assert!(!d.decayed, "no decay before the tenth stagnant epoch"),
                10 => {
                    assert!(d.decayed, "decay on the tenth stagnant epoch");
                    assert!((state.current_lr - 2.5e-4).abs() < 1e-12);
                }
                20 => assert!((state.current_lr - 1.25e-4).abs() < 1e-12),
                _ => {}
            }
            if stagnant < 50 {
                assert!(!d.stop, "no stop before fifty stagnant epochs");
            } else {
                assert!(d.stop, "stop on the fiftieth stagnant epoch");
            }
        }
        // lr invariant: initial * factor^n_decays
        assert_eq!(state.n_decays, 5);
        assert!((state.current_lr - 5e-4 * 0.5f64.powi(5)).abs() < 1e-15);
    }

    #[test]
    fn schedule_improvement_threshold_is_absolute() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(cfg.lr);
        state.observe_val_loss(1.0, &cfg);
        // a drop smaller than 1e-4 is stagnation
        let d = state.observe_val_loss(1.0 - 5e-5, &cfg);
        assert!(!d.improved);
        let d2 = state.observe_val_loss(1.0 - 2e-4, &cfg);
        assert!(d2.improved);
        assert_eq!(state.epochs_since_improvement, 0);
    }

    #[test]
    fn adam_single_step_decreases_loss_over_seeds() {
        let net = micro_net();
        let dataset = micro_dataset(2, 7);
        let case_refs: Vec<&PreparedCase> = dataset.iter().collect();
        let (x, labels) = stack_batch(&case_refs).unwrap();
        let cfg = TrainConfig {
            lr: 1e-5,
            ..Default::default()
        };
        for seed in 0..5u64 {
            let mut model = Model::<f32>::new(&net, seed).unwrap();
            let mut grads = model.zero_grads();
            let (before, _) =
                forward_loss(&model, &x, &labels, cfg.lambda, false, Some(&mut grads)).unwrap();
            let mut adam = Adam::new(&model, &cfg);
            adam.step(&mut model, &grads, cfg.lr);
            let (after, _) = forward_loss(&model, &x, &labels, cfg.lambda, false, None).unwrap();
            assert!(
                after.total < before.total,
                "seed {seed}: {} !< {}",
                after.total,
                before.total
            );
        }
    }

    #[test]
    fn stagnant_harness_decays_lr_and_early_stops() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(2, 11);
        let cfg = TrainConfig {
            lr: 1e-30, // updates round to nothing: every epoch is stagnant
            max_epochs: 60,
            split_ratio: 0.5,
            seed: 3,
            ..Default::default()
        };
        let outcome = train(&cfg, &micro_net(), &dataset, dir.path()).unwrap();
        assert_eq!(outcome.stop_reason, StopReason::EarlyStop);
        // epoch 1 improves (from +inf); epochs 2..51 stagnate; stop at 51
        assert_eq!(outcome.state.history.len(), 51);
        let h = &outcome.state.history;
        for rec in &h[0..11] {
            assert_eq!(rec.lr, 1e-30, "epoch {} before first decay", rec.epoch);
        }
        assert_eq!(h[11].lr, 0.5e-30, "decay visible from epoch 12 on");
        assert_eq!(outcome.state.epochs_since_improvement, 50);
        assert!(dir.path().join("history.csv").exists());
        assert!(outcome.checkpoint_path.exists());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let dataset = micro_dataset(2, 13);
        let cfg = TrainConfig {
            max_epochs: 4,
            split_ratio: 0.5,
            seed: 21,
            ..Default::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = train(&cfg, &micro_net(), &dataset, dir_a.path()).unwrap();
        let b = train(&cfg, &micro_net(), &dataset, dir_b.path()).unwrap();
        assert_eq!(a.state.history.len(), b.state.history.len());
        for (ra, rb) in a.state.history.iter().zip(b.state.history.iter()) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
            assert_eq!(ra.corr_component.to_bits(), rb.corr_component.to_bits());
        }
        let ckpt_a = std::fs::read(dir_a.path().join("final.ckpt")).unwrap();
        let ckpt_b = std::fs::read(dir_b.path().join("final.ckpt")).unwrap();
        assert_eq!(ckpt_a, ckpt_b);
        let hist_a = std::fs::read(dir_a.path().join("history.csv")).unwrap();
        let hist_b = std::fs::read(dir_b.path().join("history.csv")).unwrap();
        assert_eq!(hist_a, hist_b);
    }

    #[test]
    fn correlation_mlp_alone_fits_an_affine_pair() {
        use crate::correlation::{correlation_loss, CorrelationBlock};
        use ndarray::Array5;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha20Rng;

        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let z_src = Array5::from_shape_fn((1, 2, 2, 2, 2), |_| rng.gen_range(-1.0..1.0f64));
        // target bottleneck related to the source by a per-channel affine map
        let mut z_dst = z_src.clone();
        for c in 0..2 {
            let (a, b) = if c == 0 { (1.5, 0.3) } else { (0.7, -0.2) };
            z_dst
                .slice_mut(s![.., c, .., .., ..])
                .mapv_inplace(|v| a * v + b);
        }
        let z_list = vec![z_src, z_dst];
        let mut block = CorrelationBlock::<f64>::new(2, vec![(0, 1)], 2, &mut rng).unwrap();
        let tc = TrainConfig {
            lr: 1e-2,
            ..Default::default()
        };
        let mut adam = Adam::new(&block, &tc);
        let mut final_loss = f64::INFINITY;
        for _ in 0..400 {
            let (f_list, cache) = block.forward(&z_list).unwrap();
            let (loss, _dz, df) =
                crate::correlation::correlation_loss_grad(&z_list, &f_list, &block.pairing)
                    .unwrap();
            final_loss = loss;
            if loss < 1e-4 {
                break;
            }
            let mut grads = block.clone();
            crate::nn::zero_params(&mut grads);
            block.backward(&z_list, &cache, &df, &mut grads);
            adam.step(&mut block, &grads, tc.lr);
        }
        assert!(final_loss < 1e-3, "correlation loss stuck at {final_loss}");
        let (f_list, _) = block.forward(&z_list).unwrap();
        let check = correlation_loss(&z_list, &f_list, &block.pairing).unwrap();
        assert!(check < 1e-3);
    }

    #[test]
    fn predict_argmax_and_tie_breaking() {
        let mut logits = Array5::<f32>::zeros((1, 4, 2, 2, 2));
        logits.slice_mut(s![0, 2, .., .., ..]).fill(5.0);
        let classes = argmax_classes(&logits);
        assert!(classes.iter().all(|&c| c == 2));

        // exact two-way tie between classes 1 and 3: lower index wins
        let mut tied = Array5::<f32>::zeros((1, 4, 1, 1, 1));
        tied[[0, 1, 0, 0, 0]] = 2.0;
        tied[[0, 3, 0, 0, 0]] = 2.0;
        assert_eq!(argmax_classes(&tied)[[0, 0, 0, 0]], 1);
    }

    #[test]
    fn untrained_model_evaluates_without_crashing() {
        let net = micro_net();
        let dataset = micro_dataset(2, 17);
        let model = Model::<f32>::new(&net, 0).unwrap();
        let report = evaluate(&model, &dataset).unwrap();
        assert_eq!(report.rows.len(), 2 * 3);
        for row in &report.rows {
            assert!(row.dice.is_finite() && (0.0..=1.0).contains(&row.dice));
            if let Some(hd) = row.hausdorff_mm {
                assert!(hd.is_finite() && hd >= 0.0);
            }
        }
        let csv = report.to_csv();
        assert!(csv.lines().count() >= 7);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let net = micro_net();
        let dataset = micro_dataset(1, 19);
        let model = Model::<f32>::new(&net, 1).unwrap();
        let a = evaluate(&model, &dataset).unwrap().to_csv();
        let b = evaluate(&model, &dataset).unwrap().to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn defaults_match_the_training_protocol() {
        let t = TrainConfig::default();
        assert_eq!(t.lr, 5e-4);
        assert_eq!(t.lr_decay_factor, 0.5);
        assert_eq!(t.lr_patience, 10);
        assert_eq!(t.early_stop_patience, 50);
        assert_eq!((t.beta1, t.beta2, t.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!(t.lambda, 0.1);
        assert_eq!(t.split_ratio, 0.8);
        assert_eq!(t.batch_size, 1);
        assert_eq!(t.max_epochs, 300);

        let n = NetworkConfig::default();
        assert_eq!(n.n_modalities, 4);
        assert_eq!(n.n_classes, 4);
        assert_eq!(n.base_filters, 8);
        assert_eq!(n.n_levels, 4);
        assert_eq!(n.dilation_rates, (2, 4));
        assert_eq!(n.lambda_corr, 0.1);
        assert_eq!(n.input_shape, [128, 128, 128]);
        assert_eq!(n.pairing, vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn run_config_parsing() {
        let text = "\
# training setup
seed = 9
lr = 1e-3
lambda = 0.05
use_fusion = false
input_shape = 32
base_filters = 4
pairs = FLAIR>T1, T1>T1c, T1c>T2
";
        let rc = parse_run_config(text).unwrap();
        assert_eq!(rc.train.seed, 9);
        assert!((rc.train.lr - 1e-3).abs() < 1e-15);
        assert!((rc.train.lambda - 0.05).abs() < 1e-15);
        assert!(!rc.train.use_fusion);
        assert!(!rc.net.use_fusion);
        assert_eq!(rc.net.input_shape, [32, 32, 32]);
        assert_eq!(rc.net.base_filters, 4);
        assert_eq!(rc.net.pairing, vec![(0, 1), (1, 2), (2, 3)]);
        assert!((rc.net.lambda_corr - 0.05).abs() < 1e-15);

        assert!(parse_run_config("no_such_key = 1").is_err());
        assert!(parse_run_config("lr").is_err());
    }

    #[test]
    fn divergent_loss_is_reported_with_epoch() {
        let dataset = micro_dataset(2, 23);
        let cfg = TrainConfig {
            lr: 1e10, // guaranteed blow-up
            max_epochs: 30,
            split_ratio: 0.5,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        match train(&cfg, &micro_net(), &dataset, dir.path()) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
