//! Synthetic correlated multi-modal phantoms and joint-intensity analysis.
//!
//! Every phantom case is built from one shared latent volume; each modality
//! is an affine transform of that latent plus optional Gaussian noise, so the
//! inter-modality linear-correlation premise holds by construction and can be
//! verified with [`joint_histogram`] and [`crate::volume::pearson_foreground`].

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio::write_pgm;
use crate::volume::{
    write_raw_label, write_raw_volume, LabelVolume, Modality, ModalityVolume, MultiModalCase,
};

/// Configuration for the phantom generator.
#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub seed: u64,
    pub shape: [usize; 3],
    pub n_cases: usize,
    pub noise_std: f64,
    /// Per-modality affine coefficients (a, b): modality = a * latent + b.
    pub modality_coeffs: Vec<(f64, f64)>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            shape: [32, 32, 32],
            n_cases: 1,
            noise_std: 0.05,
            modality_coeffs: vec![(1.0, 0.10), (0.85, 0.30), (1.15, 0.20), (0.90, 0.40)],
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases < 1 {
            return Err(Error::config("phantom needs n_cases >= 1"));
        }
        if self.modality_coeffs.is_empty() {
            return Err(Error::config("phantom needs at least one modality"));
        }
        if self.modality_coeffs.iter().any(|&(a, _)| a == 0.0) {
            return Err(Error::config("phantom scale coefficients must be nonzero"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be >= 0"));
        }
        if self.shape.iter().any(|&d| d < 8) {
            return Err(Error::config("phantom shape must be at least 8 per axis"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            acc += d * d;
        }
        acc <= 1.0
    }

    fn scaled(&self, f: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            radii: [self.radii[0] * f, self.radii[1] * f, self.radii[2] * f],
        }
    }
}

/// Smooth random field in [0,1]: five random-frequency cosine products,
/// min-max rescaled.
fn latent_field(shape: [usize; 3], rng: &mut ChaCha20Rng) -> Array3<f64> {
    const TERMS: usize = 5;
    let mut freqs = [[0.0f64; 3]; TERMS];
    let mut phases = [[0.0f64; 3]; TERMS];
    let mut amps = [0.0f64; TERMS];
    for t in 0..TERMS {
        for a in 0..3 {
            freqs[t][a] = rng.gen_range(0.5..2.5);
            phases[t][a] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        amps[t] = rng.gen_range(0.5..1.0);
    }
    let [d, h, w] = shape;
    let mut field = Array3::zeros((d, h, w));
    for ((z, y, x), v) in field.indexed_iter_mut() {
        let u = [z as f64 / d as f64, y as f64 / h as f64, x as f64 / w as f64];
        let mut acc = 0.0;
        for t in 0..TERMS {
            let mut term = amps[t];
            for a in 0..3 {
                term *= (std::f64::consts::TAU * freqs[t][a] * u[a] + phases[t][a]).cos();
            }
            acc += term;
        }
        *v = acc;
    }
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    field.mapv_inplace(|v| (v - min) / span);
    field
}

fn generate_case(config: &PhantomConfig, index: usize) -> MultiModalCase {
    // Independent derived seed per case keeps cases order-independent.
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
    let [d, h, w] = config.shape;
    let dims = [d as f64, h as f64, w as f64];

    let mut latent = latent_field(config.shape, &mut rng);

    let brain = Ellipsoid {
        center: [dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0],
        radii: [dims[0] * 0.42, dims[1] * 0.42, dims[2] * 0.42],
    };
    // Nested tumor ellipsoids share a center; out-of-bounds extents are
    // simply clipped by the voxel iteration.
    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    for a in 0..3 {
        center[a] = dims[a] / 2.0 + rng.gen_range(-0.15..0.15) * dims[a];
        radii[a] = rng.gen_range(0.20..0.30) * dims[a];
    }
    let whole = Ellipsoid { center, radii };
    let core = whole.scaled(0.68);
    let enhancing = whole.scaled(0.44);

    // Distinct latent intensity per tumor sub-region, with a little texture.
    let mut labels = Array3::<u8>::zeros((d, h, w));
    for ((z, y, x), l) in latent.indexed_iter_mut() {
        if !brain.contains(z, y, x) {
            *l = f64::NAN; // marks background; modalities become exactly 0
            continue;
        }
        if enhancing.contains(z, y, x) {
            labels[[z, y, x]] = 4;
            *l = 4.4 + 0.3 * *l;
        } else if core.contains(z, y, x) {
            labels[[z, y, x]] = 1;
            *l = 3.6 + 0.3 * *l;
        } else if whole.contains(z, y, x) {
            labels[[z, y, x]] = 2;
            *l = 2.8 + 0.3 * *l;
        } else {
            // healthy tissue spans a wide band so the modality dynamic
            // range dwarfs the additive noise, as in real MR intensities
            *l = 2.0 * *l;
        }
    }

    let noise = if config.noise_std > 0.0 {
        Some(Normal::new(0.0, config.noise_std).expect("valid std"))
    } else {
        None
    };
    let n_mod = config.modality_coeffs.len();
    let mut modalities = Vec::with_capacity(n_mod);
    for (mi, &(a, b)) in config.modality_coeffs.iter().enumerate() {
        let (a32, b32) = (a as f32, b as f32);
        let mut data = Array3::<f32>::zeros((d, h, w));
        for (out, &l) in data.iter_mut().zip(latent.iter()) {
            if l.is_nan() {
                continue;
            }
            // f32 arithmetic on the f32 latent keeps the noiseless affine
            // relation between modalities exact.
            let mut v = a32 * (l as f32) + b32;
            if let Some(dist) = &noise {
                v += dist.sample(&mut rng) as f32;
            }
            *out = v;
        }
        modalities.push(ModalityVolume {
            data,
            spacing: [1.0; 3],
            modality: Modality::canonical(mi, n_mod),
        });
    }

    MultiModalCase {
        case_id: format!("phantom_{index:03}"),
        modalities,
        labels: Some(LabelVolume { data: labels }),
    }
}

/// Generate `n_cases` synthetic cases, deterministic under the config seed.
pub fn generate_phantom(config: &PhantomConfig) -> Result<Vec<MultiModalCase>> {
    config.validate()?;
    Ok((0..config.n_cases)
        .map(|i| generate_case(config, i))
        .collect())
}

/// Write a phantom dataset (raw volumes + labels + manifest) into `dir`.
/// Returns the manifest path.
pub fn write_phantom_dataset(dir: &Path, cases: &[MultiModalCase]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for case in cases {
        // the manifest format is fixed at four modality paths per line
        if case.modalities.len() != 4 {
            return Err(Error::config(format!(
                "manifest emission needs 4 modalities per case, got {}",
                case.modalities.len()
            )));
        }
        let mut fields = vec![case.case_id.clone()];
        for m in &case.modalities {
            let name = format!("{}_{}.mmsv", case.case_id, m.modality.to_string().to_lowercase());
            write_raw_volume(&dir.join(&name), &m.data)?;
            fields.push(name);
        }
        if let Some(l) = &case.labels {
            let name = format!("{}_seg.mmsv", case.case_id);
            write_raw_label(&dir.join(&name), &l.data)?;
            fields.push(name);
        }
        manifest.push_str(&fields.join(","));
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// 2D joint intensity histogram over foreground voxel pairs.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    pub counts: Array2<u64>,
    pub edges_a: Vec<f64>,
    pub edges_b: Vec<f64>,
    pub total: u64,
}

impl JointHistogram {
    pub fn bins(&self) -> usize {
        self.counts.dim().0
    }

    /// Fraction of mass strictly outside the band |i - j| <= `band`.
    pub fn off_diagonal_fraction(&self, band: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let mut off = 0u64;
        for ((i, j), &c) in self.counts.indexed_iter() {
            if i.abs_diff(j) > band {
                off += c;
            }
        }
        off as f64 / self.total as f64
    }
}

fn edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
    let span = (max - min).max(1e-12);
    (0..=bins).map(|i| min + span * i as f64 / bins as f64).collect()
}

fn bin_index(v: f64, min: f64, max: f64, bins: usize) -> usize {
    let span = (max - min).max(1e-12);
    let idx = ((v - min) / span * bins as f64).floor();
    (idx.max(0.0) as usize).min(bins - 1)
}

/// Robust axis range: 0.5th to 99.5th percentile. A handful of extreme noise
/// draws would otherwise tilt the two axis normalizations against each other
/// and smear an exactly linear relation off the histogram diagonal.
fn robust_range(values: &mut Vec<f64>) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let lo = values[((n - 1) as f64 * 0.005).floor() as usize];
    let hi = values[((n - 1) as f64 * 0.995).ceil() as usize];
    if hi > lo {
        (lo, hi)
    } else {
        (values[0], values[n - 1])
    }
}

/// Histogram a list of (a, b) intensity pairs; axis ranges are each
/// variable's own min/max.
pub fn joint_histogram_from_pairs(pairs: &[(f64, f64)], bins: usize) -> Result<JointHistogram> {
    if bins < 2 {
        return Err(Error::config("joint_histogram needs bins >= 2"));
    }
    let (min_a, max_a, min_b, max_b) = if pairs.is_empty() {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let mut xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (min_a, max_a) = robust_range(&mut xs);
        let (min_b, max_b) = robust_range(&mut ys);
        (min_a, max_a, min_b, max_b)
    };
    let mut counts = Array2::<u64>::zeros((bins, bins));
    for &(x, y) in pairs {
        let i = bin_index(x, min_a, max_a, bins);
        let j = bin_index(y, min_b, max_b, bins);
        counts[[i, j]] += 1;
    }
    Ok(JointHistogram {
        counts,
        edges_a: edges(min_a, max_a, bins),
        edges_b: edges(min_b, max_b, bins),
        total: pairs.len() as u64,
    })
}

/// Foreground (both nonzero) intensity pairs of two aligned volumes.
pub fn foreground_pairs(a: &ModalityVolume, b: &ModalityVolume) -> Result<Vec<(f64, f64)>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("joint_histogram: volume shapes differ"));
    }
    let mut pairs = Vec::new();
    for (&av, &bv) in a.data.iter().zip(b.data.iter()) {
        if av != 0.0 && bv != 0.0 {
            pairs.push((av as f64, bv as f64));
        }
    }
    Ok(pairs)
}

/// Histogram the (a, b) intensity pairs over voxels where both volumes are
/// nonzero. Axis ranges are robust percentiles of each variable; outliers
/// clamp into the edge bins, so counts stay conserved.
pub fn joint_histogram(
    a: &ModalityVolume,
    b: &ModalityVolume,
    bins: usize,
) -> Result<JointHistogram> {
    joint_histogram_from_pairs(&foreground_pairs(a, b)?, bins)
}

/// Emit the histogram as a log-scaled 8-bit PGM (first modality on the
/// abscissa, second on the ordinate, origin bottom-left).
pub fn write_histogram_pgm(path: &Path, hist: &JointHistogram) -> Result<()> {
    let bins = hist.bins();
    let cmax = hist.counts.iter().copied().max().unwrap_or(0);
    let scale = if cmax > 0 {
        255.0 / (1.0 + cmax as f64).ln()
    } else {
        0.0
    };
    let mut pixels = vec![0u8; bins * bins];
    for ((i, j), &c) in hist.counts.indexed_iter() {
        let row = bins - 1 - j; // ordinate grows upward
        let v = ((1.0 + c as f64).ln() * scale).round().clamp(0.0, 255.0) as u8;
        pixels[row * bins + i] = v;
    }
    write_pgm(path, bins, bins, &pixels)
}

/// Emit the raw count matrix as text (rows = first modality bins).
pub fn write_histogram_text(path: &Path, hist: &JointHistogram) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# joint histogram: {} bins, total {}\n",
        hist.bins(),
        hist.total
    ));
    for row in hist.counts.rows() {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
