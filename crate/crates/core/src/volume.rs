//! Volume loading, validation, normalization, spatial standardization, and
//! deterministic dataset splitting.
//!
//! Two on-disk formats are accepted: NIfTI-1 (`.nii` / `.nii.gz`) and a raw
//! fixture format (`MMSV` magic, little-endian u32 dims, then f32 voxels for
//! modalities or u8 voxels for labels, depth-major order).

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Legal label values on disk, in class-index order.
pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

/// Map a disk label value {0,1,2,4} to its contiguous class index {0,1,2,3}.
pub fn label_to_class(v: u8) -> Option<usize> {
    LABEL_VALUES.iter().position(|&lv| lv == v)
}

/// Inverse of [`label_to_class`].
pub fn class_to_label(class: usize) -> u8 {
    LABEL_VALUES[class]
}

/// One MR acquisition sequence (or a synthetic stand-in).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Flair,
    T1,
    T1c,
    T2,
    Synth(u8),
}

/// Canonical modality order for four-modality cases.
pub const CANONICAL_MODALITIES: [Modality; 4] =
    [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

impl Modality {
    pub fn canonical(index: usize, n: usize) -> Modality {
        if n == 4 {
            CANONICAL_MODALITIES[index]
        } else {
            Modality::Synth(index as u8)
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s.to_ascii_uppercase().as_str() {
            "FLAIR" => Some(Modality::Flair),
            "T1" => Some(Modality::T1),
            "T1C" => Some(Modality::T1c),
            "T2" => Some(Modality::T2),
            other => other
                .strip_prefix("SYNTH")
                .and_then(|i| i.parse().ok())
                .map(Modality::Synth),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Flair => write!(f, "FLAIR"),
            Modality::T1 => write!(f, "T1"),
            Modality::T1c => write!(f, "T1c"),
            Modality::T2 => write!(f, "T2"),
            Modality::Synth(i) => write!(f, "SYNTH{i}"),
        }
    }
}

/// A single modality volume: (D, H, W) grid plus voxel spacing in mm.
#[derive(Debug, Clone)]
pub struct ModalityVolume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub modality: Modality,
}

impl ModalityVolume {
    pub fn new(data: Array3<f32>, modality: Modality) -> Result<Self> {
        let vol = ModalityVolume {
            data,
            spacing: [1.0; 3],
            modality,
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::shape("volume has a zero-length axis"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("volume contains non-finite values"));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Integer label volume with values in {0, 1, 2, 4}.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub data: Array3<u8>,
}

impl LabelVolume {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|v| label_to_class(**v).is_none()) {
            return Err(Error::BadLabel(bad));
        }
        Ok(LabelVolume { data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Aligned multi-modality volumes (fixed order) plus optional labels.
#[derive(Debug, Clone)]
pub struct MultiModalCase {
    pub case_id: String,
    pub modalities: Vec<ModalityVolume>,
    pub labels: Option<LabelVolume>,
}

impl MultiModalCase {
    pub fn new(
        case_id: impl Into<String>,
        modalities: Vec<ModalityVolume>,
        labels: Option<LabelVolume>,
    ) -> Result<Self> {
        let case = MultiModalCase {
            case_id: case_id.into(),
            modalities,
            labels,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .modalities
            .first()
            .ok_or_else(|| Error::shape("case has no modalities"))?;
        let shape = first.shape();
        for m in &self.modalities {
            m.validate()?;
            if m.shape() != shape {
                return Err(Error::shape(format!(
                    "case {}: modality {} has shape {:?}, expected {:?}",
                    self.case_id,
                    m.modality,
                    m.shape(),
                    shape
                )));
            }
            if m.spacing != first.spacing {
                return Err(Error::shape(format!(
                    "case {}: inconsistent voxel spacing",
                    self.case_id
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.shape() != shape {
                return Err(Error::shape(format!(
                    "case {}: label shape {:?} does not match modality shape {:?}",
                    self.case_id,
                    l.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.modalities[0].shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.modalities[0].spacing
    }
}

// ---------------------------------------------------------------------------
// Raw fixture format
// ---------------------------------------------------------------------------

const RAW_MAGIC: &[u8; 4] = b"MMSV";

fn read_raw_header(path: &Path, reader: &mut impl Read) -> Result<(usize, usize, usize)> {
    let mut header = [0u8; 16];
    reader.read_exact(&mut header)?;
    if &header[0..4] != RAW_MAGIC {
        return Err(Error::format(path.display().to_string(), "bad magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (d, h, w) = (dim(4), dim(8), dim(12));
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::format(
            path.display().to_string(),
            "zero-length axis in header",
        ));
    }
    Ok((d, h, w))
}

pub fn read_raw_volume(path: &Path) -> Result<Array3<f32>> {
    let mut reader = BufReader::new(File::open(path)?);
    let (d, h, w) = read_raw_header(path, &mut reader)?;
    let n = d * h * w;
    let mut bytes = vec![0u8; n * 4];
    reader.read_exact(&mut bytes)?;
    let mut data = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array3::from_shape_vec((d, h, w), data)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn write_raw_volume(path: &Path, data: &Array3<f32>) -> Result<()> {
    let (d, h, w) = data.dim();
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(RAW_MAGIC)?;
    for dim in [d, h, w] {
        writer.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in data.iter() {
        writer.write_all(&v.to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_raw_label(path: &Path) -> Result<Array3<u8>> {
    let mut reader = BufReader::new(File::open(path)?);
    let (d, h, w) = read_raw_header(path, &mut reader)?;
    let mut data = vec![0u8; d * h * w];
    reader.read_exact(&mut data)?;
    Array3::from_shape_vec((d, h, w), data)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn write_raw_label(path: &Path, data: &Array3<u8>) -> Result<()> {
    let (d, h, w) = data.dim();
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(RAW_MAGIC)?;
    for dim in [d, h, w] {
        writer.write_all(&(dim as u32).to_le_bytes())?;
    }
    let slice = data.as_slice().expect("standard layout");
    writer.write_all(slice)?;
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Minimal NIfTI-1 reader (little-endian, no extensions)
// ---------------------------------------------------------------------------

struct NiftiVolume {
    data: Array3<f32>,
    spacing: [f64; 3],
}

fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let mut raw = Vec::new();
    let mut file = File::open(path)?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        flate2::read::MultiGzDecoder::new(BufReader::new(file)).read_to_end(&mut raw)?;
    } else {
        file.read_to_end(&mut raw)?;
    }
    let p = path.display().to_string();
    if raw.len() < 352 {
        return Err(Error::format(p, "file shorter than a NIfTI-1 header"));
    }
    let i16_at = |off: usize| i16::from_le_bytes(raw[off..off + 2].try_into().unwrap());
    let i32_at = |off: usize| i32::from_le_bytes(raw[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(raw[off..off + 4].try_into().unwrap());

    if i32_at(0) != 348 {
        return Err(Error::format(
            p,
            "unsupported NIfTI header (expected little-endian NIfTI-1)",
        ));
    }
    if &raw[344..347] != b"n+1" && &raw[344..347] != b"ni1" {
        return Err(Error::format(p, "missing NIfTI magic"));
    }
    let ndim = i16_at(40);
    if ndim < 3 {
        return Err(Error::format(p, format!("expected >= 3 dims, got {ndim}")));
    }
    let nx = i16_at(42) as usize;
    let ny = i16_at(44) as usize;
    let nz = i16_at(46) as usize;
    // trailing dims must be singleton
    for d in 4..=ndim as usize {
        if i16_at(40 + 2 * d) > 1 {
            return Err(Error::format(p, "4D+ volumes are not supported"));
        }
    }
    let datatype = i16_at(70);
    let vox_offset = f32_at(108) as usize;
    let scl_slope = f32_at(112);
    let scl_inter = f32_at(116);
    let spacing = [f32_at(88) as f64, f32_at(84) as f64, f32_at(80) as f64];

    let n = nx * ny * nz;
    let elem = match datatype {
        2 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => {
            return Err(Error::format(p, format!("unsupported datatype {other}")));
        }
    };
    if raw.len() < vox_offset + n * elem {
        return Err(Error::format(p, "truncated voxel payload"));
    }
    let payload = &raw[vox_offset..vox_offset + n * elem];
    let mut values: Vec<f32> = Vec::with_capacity(n);
    match datatype {
        2 => values.extend(payload.iter().map(|&b| b as f32)),
        4 => values.extend(
            payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        512 => values.extend(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        8 => values.extend(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        16 => values.extend(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        ),
        64 => values.extend(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        _ => unreachable!(),
    }
    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        for v in &mut values {
            *v = *v * scl_slope + scl_inter;
        }
    }
    // NIfTI stores x fastest; (nz, ny, nx) keeps the memory order intact.
    let data = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|e| Error::format(p, e.to_string()))?;
    Ok(NiftiVolume { data, spacing })
}

fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn load_modality_file(path: &Path, modality: Modality) -> Result<ModalityVolume> {
    if is_nifti(path) {
        let nifti = read_nifti(path)?;
        let mut vol = ModalityVolume::new(nifti.data, modality)?;
        vol.spacing = nifti.spacing;
        Ok(vol)
    } else {
        ModalityVolume::new(read_raw_volume(path)?, modality)
    }
}

fn load_label_file(path: &Path) -> Result<LabelVolume> {
    if is_nifti(path) {
        let nifti = read_nifti(path)?;
        let mut data = Array3::zeros(nifti.data.dim());
        for (out, &v) in data.iter_mut().zip(nifti.data.iter()) {
            let rounded = v.round();
            if !v.is_finite() || (v - rounded).abs() > 1e-3 || !(0.0..=255.0).contains(&rounded) {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("non-integer label value {v}"),
                ));
            }
            *out = rounded as u8;
        }
        LabelVolume::new(data)
    } else {
        LabelVolume::new(read_raw_label(path)?)
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Load and validate one case from per-modality files plus an optional label
/// file. Modalities keep the given order; with four paths the canonical
/// FLAIR, T1, T1c, T2 tags are assigned positionally.
pub fn load_case(
    case_id: &str,
    modality_paths: &[PathBuf],
    label_path: Option<&Path>,
) -> Result<MultiModalCase> {
    let n = modality_paths.len();
    let mut modalities = Vec::with_capacity(n);
    for (i, path) in modality_paths.iter().enumerate() {
        modalities.push(load_modality_file(path, Modality::canonical(i, n))?);
    }
    let labels = label_path.map(load_label_file).transpose()?;
    MultiModalCase::new(case_id, modalities, labels)
}

/// Z-score normalization over the nonzero foreground; background voxels stay
/// zero. A constant foreground (population std below 1e-8) is zeroed.
pub fn znormalize(vol: &ModalityVolume) -> ModalityVolume {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for &v in vol.data.iter() {
        if v != 0.0 {
            sum += v as f64;
            count += 1;
        }
    }
    let mut out = vol.clone();
    if count == 0 {
        return out;
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for &v in vol.data.iter() {
        if v != 0.0 {
            let d = v as f64 - mean;
            sq += d * d;
        }
    }
    let std = (sq / count as f64).sqrt();
    if std < 1e-8 {
        out.data.mapv_inplace(|v| if v != 0.0 { 0.0 } else { v });
    } else {
        out.data
            .mapv_inplace(|v| if v != 0.0 { ((v as f64 - mean) / std) as f32 } else { v });
    }
    out
}

/// Joint nonzero bounding box across all modalities, inclusive.
fn joint_bounding_box(case: &MultiModalCase) -> Option<([usize; 3], [usize; 3])> {
    let (d, h, w) = case.shape();
    let mut lo = [d, h, w];
    let mut hi = [0usize; 3];
    let mut any = false;
    for m in &case.modalities {
        for ((z, y, x), &v) in m.data.indexed_iter() {
            if v != 0.0 {
                any = true;
                let idx = [z, y, x];
                for a in 0..3 {
                    if idx[a] < lo[a] {
                        lo[a] = idx[a];
                    }
                    if idx[a] > hi[a] {
                        hi[a] = idx[a];
                    }
                }
            }
        }
    }
    if any {
        Some((lo, hi))
    } else {
        None
    }
}

fn resize_trilinear(src: ArrayView3<'_, f32>, target: [usize; 3]) -> Array3<f32> {
    let (sd, sh, sw) = src.dim();
    let [td, th, tw] = target;
    let scale = [
        sd as f64 / td as f64,
        sh as f64 / th as f64,
        sw as f64 / tw as f64,
    ];
    let coord = |o: usize, axis: usize, len: usize| -> (usize, usize, f64) {
        // half-pixel-center mapping; exact identity when scales are 1
        let c = (o as f64 + 0.5) * scale[axis] - 0.5;
        let c = c.clamp(0.0, (len - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, c - i0 as f64)
    };
    Array3::from_shape_fn((td, th, tw), |(z, y, x)| {
        let (z0, z1, fz) = coord(z, 0, sd);
        let (y0, y1, fy) = coord(y, 1, sh);
        let (x0, x1, fx) = coord(x, 2, sw);
        let mut acc = 0.0f64;
        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wz * wy * wx;
                    if w != 0.0 {
                        acc += w * src[[zi, yi, xi]] as f64;
                    }
                }
            }
        }
        acc as f32
    })
}

fn resize_nearest(src: ArrayView3<'_, u8>, target: [usize; 3]) -> Array3<u8> {
    let (sd, sh, sw) = src.dim();
    let [td, th, tw] = target;
    let scale = [
        sd as f64 / td as f64,
        sh as f64 / th as f64,
        sw as f64 / tw as f64,
    ];
    let pick = |o: usize, axis: usize, len: usize| -> usize {
        let c = (o as f64 + 0.5) * scale[axis] - 0.5;
        (c + 0.5).floor().clamp(0.0, (len - 1) as f64) as usize
    };
    Array3::from_shape_fn((td, th, tw), |(z, y, x)| {
        src[[pick(z, 0, sd), pick(y, 1, sh), pick(x, 2, sw)]]
    })
}

/// Crop to the joint nonzero bounding box, then resample to `target`
/// (trilinear for modalities, nearest-neighbor for labels).
pub fn crop_resize(case: &MultiModalCase, target: [usize; 3]) -> Result<MultiModalCase> {
    let (lo, hi) = joint_bounding_box(case).ok_or(Error::EmptyCase)?;
    let crop_len = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let region = ndarray::s![lo[0]..=hi[0], lo[1]..=hi[1], lo[2]..=hi[2]];

    let mut modalities = Vec::with_capacity(case.modalities.len());
    for m in &case.modalities {
        let resized = resize_trilinear(m.data.slice(region), target);
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            spacing[a] = m.spacing[a] * crop_len[a] as f64 / target[a] as f64;
        }
        modalities.push(ModalityVolume {
            data: resized,
            spacing,
            modality: m.modality,
        });
    }
    let labels = case.labels.as_ref().map(|l| LabelVolume {
        data: resize_nearest(l.data.slice(region), target),
    });
    MultiModalCase::new(case.case_id.clone(), modalities, labels)
}

/// Deterministic shuffled split into floor(ratio * n) train ids and the rest.
pub fn split_dataset(
    case_ids: &[String],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::config(format!("split ratio {ratio} not in (0,1)")));
    }
    let mut seen = std::collections::HashSet::new();
    for id in case_ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let mut ids: Vec<String> = case_ids.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (ratio * ids.len() as f64).floor() as usize;
    let test = ids.split_off(n_train);
    Ok((ids, test))
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// One line of a dataset manifest: case id, modality paths in canonical
/// order, optional label path. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub case_id: String,
    pub modality_paths: Vec<PathBuf>,
    pub label_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<MultiModalCase> {
        load_case(
            &self.case_id,
            &self.modality_paths,
            self.label_path.as_deref(),
        )
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |s: &str| -> PathBuf {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 && fields.len() != 6 {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "line {}: expected case_id, 4 modality paths, optional label path",
                    lineno + 1
                ),
            ));
        }
        let case_id = fields[0].to_string();
        if !seen.insert(case_id.clone()) {
            return Err(Error::DuplicateId(case_id));
        }
        let (modality_fields, label_field) = if fields.len() == 6 {
            (&fields[1..5], Some(fields[5]))
        } else {
            (&fields[1..5], None)
        };
        entries.push(ManifestEntry {
            case_id,
            modality_paths: modality_fields.iter().map(|s| resolve(s)).collect(),
            label_path: label_field.map(resolve),
        });
    }
    Ok(entries)
}

/// Per-modality Pearson correlation over voxels where both volumes are
/// nonzero. Returns NaN when fewer than two foreground voxels overlap.
pub fn pearson_foreground(a: &ModalityVolume, b: &ModalityVolume) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("pearson: volume shapes differ"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    Zip::from(&a.data).and(&b.data).for_each(|&av, &bv| {
        if av != 0.0 && bv != 0.0 {
            xs.push(av as f64);
            ys.push(bv as f64);
        }
    });
    let n = xs.len();
    if n < 2 {
        return Ok(f64::NAN);
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(f64::NAN);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn vol(shape: (usize, usize, usize), fill: f32) -> Array3<f32> {
        Array3::from_elem(shape, fill)
    }

    #[test]
    fn load_case_minimal_four_volumes() {
        let dir = tempdir().unwrap();
        let mut paths = Vec::new();
        for i in 0..4 {
            let p = dir.path().join(format!("m{i}.mmsv"));
            write_raw_volume(&p, &vol((8, 8, 8), 1.0 + i as f32)).unwrap();
            paths.push(p);
        }
        let case = load_case("c0", &paths, None).unwrap();
        assert_eq!(case.modalities.len(), 4);
        assert!(case.labels.is_none());
        assert_eq!(case.modalities[0].modality, Modality::Flair);
        assert_eq!(case.modalities[3].modality, Modality::T2);
        assert_eq!(case.shape(), (8, 8, 8));
    }

    #[test]
    fn load_case_rejects_mixed_shapes() {
        let dir = tempdir().unwrap();
        let mut paths = Vec::new();
        for (i, s) in [(0, 8), (1, 8), (2, 9), (3, 8)] {
            let p = dir.path().join(format!("m{i}.mmsv"));
            write_raw_volume(&p, &vol((s, s, s), 1.0)).unwrap();
            paths.push(p);
        }
        match load_case("c0", &paths, None) {
            Err(Error::ShapeMismatch(_)) => {}
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_case_rejects_label_value_three() {
        let dir = tempdir().unwrap();
        let mut paths = Vec::new();
        for i in 0..4 {
            let p = dir.path().join(format!("m{i}.mmsv"));
            write_raw_volume(&p, &vol((4, 4, 4), 1.0)).unwrap();
            paths.push(p);
        }
        let lp = dir.path().join("seg.mmsv");
        let mut labels = Array3::<u8>::zeros((4, 4, 4));
        labels[[1, 1, 1]] = 3;
        write_raw_label(&lp, &labels).unwrap();
        match load_case("c0", &paths, Some(&lp)) {
            Err(Error::BadLabel(3)) => {}
            other => panic!("expected BadLabel(3), got {other:?}"),
        }
    }

    #[test]
    fn label_class_round_trip() {
        for (class, value) in LABEL_VALUES.iter().enumerate() {
            assert_eq!(label_to_class(*value), Some(class));
            assert_eq!(class_to_label(class), *value);
        }
        assert_eq!(label_to_class(3), None);
    }

    #[test]
    fn znormalize_small_foreground() {
        // foreground {1,2,3}: mean 2, population std sqrt(2/3)
        let mut data = Array3::zeros((1, 1, 4));
        data[[0, 0, 0]] = 1.0;
        data[[0, 0, 1]] = 2.0;
        data[[0, 0, 2]] = 3.0;
        let v = ModalityVolume::new(data, Modality::Flair).unwrap();
        let out = znormalize(&v);
        assert!((out.data[[0, 0, 0]] + 1.224745).abs() < 1e-5);
        assert!(out.data[[0, 0, 1]].abs() < 1e-6);
        assert!((out.data[[0, 0, 2]] - 1.224745).abs() < 1e-5);
        assert_eq!(out.data[[0, 0, 3]], 0.0);
    }

    #[test]
    fn znormalize_degenerate_cases() {
        let zero = ModalityVolume::new(vol((3, 3, 3), 0.0), Modality::T1).unwrap();
        assert!(znormalize(&zero).data.iter().all(|&v| v == 0.0));
        let constant = ModalityVolume::new(vol((3, 3, 3), 5.0), Modality::T1).unwrap();
        assert!(znormalize(&constant).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_resize_shrinks_brats_shape() {
        let data = vol((155, 240, 240), 1.0);
        let case = MultiModalCase::new(
            "big",
            vec![ModalityVolume::new(data, Modality::Flair).unwrap()],
            None,
        )
        .unwrap();
        let out = crop_resize(&case, [128, 128, 128]).unwrap();
        assert_eq!(out.shape(), (128, 128, 128));
        // spacing scales with crop extent over target extent
        assert!((out.modalities[0].spacing[0] - 155.0 / 128.0).abs() < 1e-12);
    }

    #[test]
    fn crop_resize_identity_when_full_extent() {
        let mut data = vol((16, 16, 16), 0.0);
        for ((z, y, x), v) in data.indexed_iter_mut() {
            *v = 1.0 + (z * 256 + y * 16 + x) as f32;
        }
        let case = MultiModalCase::new(
            "id",
            vec![ModalityVolume::new(data.clone(), Modality::Flair).unwrap()],
            None,
        )
        .unwrap();
        let out = crop_resize(&case, [16, 16, 16]).unwrap();
        assert_eq!(out.modalities[0].data, data);
    }

    #[test]
    fn crop_resize_preserves_label_value_set() {
        let mut data = vol((12, 12, 12), 1.0);
        data[[0, 0, 0]] = 2.0;
        let mut labels = Array3::<u8>::zeros((12, 12, 12));
        for ((z, _, _), v) in labels.indexed_iter_mut() {
            *v = if z < 4 { 0 } else if z < 8 { 2 } else { 4 };
        }
        let case = MultiModalCase::new(
            "lbl",
            vec![ModalityVolume::new(data, Modality::Flair).unwrap()],
            Some(LabelVolume::new(labels).unwrap()),
        )
        .unwrap();
        let out = crop_resize(&case, [7, 7, 7]).unwrap();
        let set: std::collections::HashSet<u8> =
            out.labels.unwrap().data.iter().copied().collect();
        assert!(set.is_subset(&[0u8, 2, 4].into_iter().collect()));
    }

    #[test]
    fn crop_resize_rejects_all_zero() {
        let case = MultiModalCase::new(
            "empty",
            vec![ModalityVolume::new(vol((5, 5, 5), 0.0), Modality::Flair).unwrap()],
            None,
        )
        .unwrap();
        match crop_resize(&case, [4, 4, 4]) {
            Err(Error::EmptyCase) => {}
            other => panic!("expected EmptyCase, got {other:?}"),
        }
    }

    #[test]
    fn split_has_paper_arithmetic() {
        let ids: Vec<String> = (0..285).map(|i| format!("case{i:03}")).collect();
        let (train, test) = split_dataset(&ids, 0.8, 42).unwrap();
        assert_eq!(train.len(), 228);
        assert_eq!(test.len(), 57);

        let ids10: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let (tr, te) = split_dataset(&ids10, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ids: Vec<String> = (0..23).map(|i| format!("c{i}")).collect();
        let (tr1, te1) = split_dataset(&ids, 0.7, 9).unwrap();
        let (tr2, te2) = split_dataset(&ids, 0.7, 9).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        let mut all: Vec<String> = tr1.iter().chain(te1.iter()).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
    }

    #[test]
    fn split_rejects_duplicates() {
        let ids = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        match split_dataset(&ids, 0.5, 0) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.mmsv");
        let mut data = vol((3, 4, 5), 0.0);
        for ((z, y, x), v) in data.indexed_iter_mut() {
            *v = (z as f32) * 100.0 + (y as f32) * 10.0 + x as f32 - 30.0;
        }
        write_raw_volume(&p, &data).unwrap();
        assert_eq!(read_raw_volume(&p).unwrap(), data);
    }

    #[test]
    fn nifti_round_trip_via_handcrafted_header() {
        // Build a minimal float32 .nii in memory: 348-byte header + 4 pad.
        let (nz, ny, nx) = (2usize, 3usize, 4usize);
        let mut header = vec![0u8; 352];
        header[0..4].copy_from_slice(&348i32.to_le_bytes());
        header[40..42].copy_from_slice(&3i16.to_le_bytes());
        header[42..44].copy_from_slice(&(nx as i16).to_le_bytes());
        header[44..46].copy_from_slice(&(ny as i16).to_le_bytes());
        header[46..48].copy_from_slice(&(nz as i16).to_le_bytes());
        header[70..72].copy_from_slice(&16i16.to_le_bytes()); // float32
        header[72..74].copy_from_slice(&32i16.to_le_bytes());
        for (i, sp) in [1.0f32, 2.0, 3.0].iter().enumerate() {
            header[80 + 4 * i..84 + 4 * i].copy_from_slice(&sp.to_le_bytes());
        }
        header[108..112].copy_from_slice(&352.0f32.to_le_bytes()); // vox_offset
        header[344..348].copy_from_slice(b"n+1\0");

        let mut payload = Vec::new();
        for i in 0..(nx * ny * nz) {
            payload.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, [header, payload].concat()).unwrap();
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.data.dim(), (nz, ny, nx));
        // x-fastest order maps straight into (z, y, x)
        assert_eq!(v.data[[0, 0, 1]], 1.0);
        assert_eq!(v.data[[0, 1, 0]], nx as f32);
        assert_eq!(v.data[[1, 0, 0]], (nx * ny) as f32);
        assert_eq!(v.spacing, [3.0, 2.0, 1.0]);

        // gzipped variant reads identically
        let pgz = dir.path().join("t.nii.gz");
        let f = File::create(&pgz).unwrap();
        let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        enc.write_all(&std::fs::read(&p).unwrap()).unwrap();
        enc.finish().unwrap();
        let vgz = read_nifti(&pgz).unwrap();
        assert_eq!(vgz.data, v.data);
    }

    #[test]
    fn manifest_parses_and_resolves() {
        let dir = tempdir().unwrap();
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(
            &manifest,
            "# comment\nc1, a.mmsv, b.mmsv, c.mmsv, d.mmsv, seg.mmsv\nc2, a.mmsv, b.mmsv, c.mmsv, d.mmsv\n",
        )
        .unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].case_id, "c1");
        assert_eq!(entries[0].modality_paths.len(), 4);
        assert!(entries[0].label_path.is_some());
        assert!(entries[1].label_path.is_none());
        assert_eq!(entries[0].modality_paths[0], dir.path().join("a.mmsv"));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "c1, only_two.mmsv, paths.mmsv\n").unwrap();
        assert!(matches!(read_manifest(&bad), Err(Error::Format { .. })));
    }
}
