//! Training losses (soft dice + weighted correlation) and evaluation metrics
//! (per-region Dice score and boundary Hausdorff distance).

use ndarray::{Array3, Array4, Array5};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Epsilon guard in the soft dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Soft dice loss over all classes and voxels as one global ratio:
/// `1 - (2 sum(p*g) + eps) / (sum(p + g) + eps)`.
pub fn dice_loss<T: Real>(probs: &Array5<T>, target: &Array5<T>, eps: f64) -> Result<T> {
    if probs.dim() != target.dim() {
        return Err(Error::shape(format!(
            "dice loss shapes differ: {:?} vs {:?}",
            probs.dim(),
            target.dim()
        )));
    }
    let mut inter = T::zero();
    let mut sums = T::zero();
    for (&p, &g) in probs.iter().zip(target.iter()) {
        inter = inter + p * g;
        sums = sums + p + g;
    }
    let e = T::from_f64(eps);
    let two = T::from_f64(2.0);
    Ok(T::one() - (two * inter + e) / (sums + e))
}

/// Gradient of [`dice_loss`] with respect to `probs`.
pub fn dice_loss_grad<T: Real>(
    probs: &Array5<T>,
    target: &Array5<T>,
    eps: f64,
) -> Result<(T, Array5<T>)> {
    if probs.dim() != target.dim() {
        return Err(Error::shape("dice loss shapes differ".to_string()));
    }
    let mut inter = T::zero();
    let mut sums = T::zero();
    for (&p, &g) in probs.iter().zip(target.iter()) {
        inter = inter + p * g;
        sums = sums + p + g;
    }
    let e = T::from_f64(eps);
    let two = T::from_f64(2.0);
    let num = two * inter + e;
    let den = sums + e;
    let loss = T::one() - num / den;
    let inv_den2 = T::one() / (den * den);
    // dL/dp = (num - 2 g den) / den^2
    let mut grad = target.clone();
    grad.mapv_inplace(|g| (num - two * g * den) * inv_den2);
    Ok((loss, grad))
}

/// Total training objective: dice + lambda * correlation.
pub fn total_loss<T: Real>(dice: T, corr: T, lambda: f64) -> T {
    dice + T::from_f64(lambda) * corr
}

/// One-hot encode a batch of class-index labels to (B, C, D, H, W).
pub fn one_hot<T: Real>(labels: &Array4<u8>, n_classes: usize) -> Array5<T> {
    let (bn, d, h, w) = labels.dim();
    let mut out = Array5::zeros((bn, n_classes, d, h, w));
    for ((b, z, y, x), &c) in labels.indexed_iter() {
        out[[b, c as usize, z, y, x]] = T::one();
    }
    out
}

/// The three mutually inclusive evaluation regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    WholeTumor,
    TumorCore,
    Enhancing,
}

pub const REGIONS: [Region; 3] = [Region::Enhancing, Region::WholeTumor, Region::TumorCore];

impl Region {
    pub fn short_name(self) -> &'static str {
        match self {
            Region::WholeTumor => "WT",
            Region::TumorCore => "TC",
            Region::Enhancing => "ET",
        }
    }

    fn contains(self, label: u8) -> bool {
        match self {
            Region::WholeTumor => matches!(label, 1 | 2 | 4),
            Region::TumorCore => matches!(label, 1 | 4),
            Region::Enhancing => label == 4,
        }
    }
}

/// Binary mask of one region from a raw-valued label volume.
pub fn region_mask(labels: &Array3<u8>, region: Region) -> Array3<bool> {
    labels.mapv(|v| region.contains(v))
}

/// WT, TC, ET masks in that order.
pub fn region_masks(labels: &Array3<u8>) -> [Array3<bool>; 3] {
    [
        region_mask(labels, Region::WholeTumor),
        region_mask(labels, Region::TumorCore),
        region_mask(labels, Region::Enhancing),
    ]
}

/// Dice = 2TP / (2TP + FP + FN); defined as 1 when both masks are empty.
pub fn dice_score(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape("dice_score mask shapes differ".to_string()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64))
}

/// Mask voxels with at least one of their six face neighbors outside the
/// mask, counting the volume edge as outside.
pub fn boundary_voxels(mask: &Array3<bool>) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for ((z, y, x), &inside) in mask.indexed_iter() {
        if !inside {
            continue;
        }
        let on_edge = z == 0 || y == 0 || x == 0 || z == d - 1 || y == h - 1 || x == w - 1;
        let exposed = on_edge
            || !mask[[z - 1, y, x]]
            || !mask[[z + 1, y, x]]
            || !mask[[z, y - 1, x]]
            || !mask[[z, y + 1, x]]
            || !mask[[z, y, x - 1]]
            || !mask[[z, y, x + 1]];
        if exposed {
            out.push([z, y, x]);
        }
    }
    out
}

fn directed_hausdorff_sq(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut sup = 0.0f64;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let mut d2 = 0.0;
            for axis in 0..3 {
                let dv = (a[axis] as f64 - b[axis] as f64) * spacing[axis];
                d2 += dv * dv;
            }
            if d2 < best {
                best = d2;
                if best <= sup {
                    break; // cannot raise the supremum any further
                }
            }
        }
        if best > sup {
            sup = best;
        }
    }
    sup
}

/// Symmetric boundary Hausdorff distance in millimeters; `None` when either
/// mask is empty (reported as a sentinel and excluded from means).
pub fn hausdorff(pred: &Array3<bool>, gt: &Array3<bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape("hausdorff mask shapes differ".to_string()));
    }
    let pb = boundary_voxels(pred);
    let gb = boundary_voxels(gt);
    if pb.is_empty() || gb.is_empty() {
        return Ok(None);
    }
    let fwd = directed_hausdorff_sq(&pb, &gb, spacing);
    let bwd = directed_hausdorff_sq(&gb, &pb, spacing);
    Ok(Some(fwd.max(bwd).sqrt()))
}

/// Per-case, per-region metric rows plus per-region aggregates.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub case_id: String,
    pub region: Region,
    pub dice: f64,
    pub hausdorff_mm: Option<f64>,
}

impl MetricsReport {
    pub fn mean_dice(&self, region: Region) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.region == region)
            .map(|r| r.dice)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn mean_hausdorff(&self, region: Region) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.region == region)
            .filter_map(|r| r.hausdorff_mm)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// CSV with one row per case and region plus MEAN aggregate rows.
    pub fn to_csv(&self) -> String {
        let fmt_hd = |hd: Option<f64>| match hd {
            Some(v) => format!("{v:.6}"),
            None => "NA".to_string(),
        };
        let mut out = String::from("case_id,region,dice,hausdorff_mm\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                row.case_id,
                row.region.short_name(),
                row.dice,
                fmt_hd(row.hausdorff_mm)
            ));
        }
        for region in REGIONS {
            if let Some(dice) = self.mean_dice(region) {
                out.push_str(&format!(
                    "MEAN,{},{:.6},{}\n",
                    region.short_name(),
                    dice,
                    fmt_hd(self.mean_hausdorff(region))
                ));
            }
        }
        out
    }
}
