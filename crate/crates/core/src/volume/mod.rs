//! Volumetric data types: multi-modal image grids and label grids.
//!
//! Storage order is modality-major with `x` varying fastest, i.e. voxel
//! `(m, x, y, z)` lives at `((m * nz + z) * ny + y) * nx + x`.

pub(crate) mod io;

pub use io::{load_image, load_label, load_volume, save_image, save_label, LoadedVolume};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Spatial extents `[nx, ny, nz]`.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

/// Inverse of [`linear_index`].
#[inline]
pub fn coords_of(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[0];
    let y = (idx / dims[0]) % dims[1];
    let z = idx / (dims[0] * dims[1]);
    [x, y, z]
}

/// A stack of co-registered modalities over a common 3D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    dims: Dims,
    modality_names: Vec<String>,
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl MultiModalVolume {
    pub fn new(
        dims: Dims,
        modality_names: Vec<String>,
        spacing_mm: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invariant(format!("zero extent in dims {dims:?}")));
        }
        if modality_names.is_empty() {
            return Err(Error::Invariant("volume needs at least one modality".into()));
        }
        for name in &modality_names {
            if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == ',') {
                return Err(Error::Invariant(format!("invalid modality name {name:?}")));
            }
        }
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Invariant(format!("spacing must be positive, got {spacing_mm:?}")));
        }
        let expected = modality_names.len() * voxel_count(dims);
        if data.len() != expected {
            return Err(Error::SizeMismatch(format!(
                "expected {expected} values for {} modalities of {dims:?}, got {}",
                modality_names.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            dims,
            modality_names,
            spacing_mm,
            data,
        })
    }

    /// Zero-filled volume with 1 mm isotropic spacing.
    pub fn zeros(dims: Dims, modality_names: Vec<String>) -> Result<Self> {
        let n = modality_names.len() * voxel_count(dims);
        Self::new(dims, modality_names, [1.0; 3], vec![0.0; n])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn modality(&self, m: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn get(&self, m: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[m * self.voxels() + linear_index(self.dims, x, y, z)]
    }

    pub fn extract_patch(&self, spec: &PatchSpec, pad: PadPolicy) -> Result<Self> {
        let n_in = self.voxels();
        let n_out = voxel_count(spec.size);
        let mut out = vec![0.0f32; n_out * self.num_modalities()];
        for m in 0..self.num_modalities() {
            copy_patch(
                &self.data[m * n_in..(m + 1) * n_in],
                self.dims,
                &mut out[m * n_out..(m + 1) * n_out],
                spec,
                pad,
            )?;
        }
        Self::new(spec.size, self.modality_names.clone(), self.spacing_mm, out)
    }
}

/// Integer label grid over `{0, .., num_classes - 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invariant(format!("zero extent in dims {dims:?}")));
        }
        if num_classes == 0 {
            return Err(Error::Invariant("num_classes must be positive".into()));
        }
        if labels.len() != voxel_count(dims) {
            return Err(Error::SizeMismatch(format!(
                "expected {} labels for {dims:?}, got {}",
                voxel_count(dims),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invariant(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            dims,
            num_classes,
            labels,
        })
    }

    pub fn background(dims: Dims, num_classes: u8) -> Result<Self> {
        Self::new(dims, num_classes, vec![0; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[linear_index(self.dims, x, y, z)]
    }

    pub fn extract_patch(&self, spec: &PatchSpec, pad: PadPolicy) -> Result<Self> {
        let mut out = vec![0u8; voxel_count(spec.size)];
        copy_patch(&self.labels, self.dims, &mut out, spec, pad)?;
        Self::new(spec.size, self.num_classes, out)
    }
}

/// Normalization mask selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Voxels where any modality is non-zero (skull-stripped brain).
    #[default]
    Nonzero,
    /// Every voxel.
    All,
}

/// What to do with patch voxels that fall outside the source grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadPolicy {
    Error,
    Zero,
}

/// Axis-aligned box: corner voxel plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: [i64; 3],
    pub size: Dims,
}

impl PatchSpec {
    pub fn new(origin: [i64; 3], size: Dims) -> Self {
        Self { origin, size }
    }

    /// Cubic patch of edge `edge` whose center (origin + edge/2) is `center`.
    pub fn centered(center: [usize; 3], size: Dims) -> Self {
        let origin = [0, 1, 2].map(|a| center[a] as i64 - (size[a] / 2) as i64);
        Self { origin, size }
    }

    fn in_bounds(&self, dims: Dims) -> bool {
        (0..3).all(|a| self.origin[a] >= 0 && self.origin[a] as usize + self.size[a] <= dims[a])
    }
}

fn copy_patch<T: Copy + Default>(
    src: &[T],
    dims: Dims,
    dst: &mut [T],
    spec: &PatchSpec,
    pad: PadPolicy,
) -> Result<()> {
    if spec.size.contains(&0) {
        return Err(Error::Invariant(format!("patch size must be positive, got {:?}", spec.size)));
    }
    if pad == PadPolicy::Error && !spec.in_bounds(dims) {
        return Err(Error::Bounds(format!(
            "patch at {:?} of size {:?} exceeds volume {dims:?}",
            spec.origin, spec.size
        )));
    }
    // Overlap of the patch with the volume along x, reused for every row.
    let x0 = spec.origin[0];
    let xs = (0i64.max(-x0)) as usize;
    let xe = (spec.size[0] as i64).min(dims[0] as i64 - x0).max(xs as i64) as usize;
    for pz in 0..spec.size[2] {
        let z = spec.origin[2] + pz as i64;
        for py in 0..spec.size[1] {
            let y = spec.origin[1] + py as i64;
            let drow = (pz * spec.size[1] + py) * spec.size[0];
            let row = &mut dst[drow..drow + spec.size[0]];
            if z < 0 || y < 0 || z >= dims[2] as i64 || y >= dims[1] as i64 || xs >= xe {
                row.fill(T::default());
                continue;
            }
            row[..xs].fill(T::default());
            row[xe..].fill(T::default());
            let srow = linear_index(dims, 0, y as usize, z as usize);
            let sx = (x0 + xs as i64) as usize;
            row[xs..xe].copy_from_slice(&src[srow + sx..srow + sx + (xe - xs)]);
        }
    }
    Ok(())
}

/// Standardizes every modality independently to zero mean, unit variance.
///
/// With [`MaskMode::Nonzero`] statistics come from voxels where any modality
/// is non-zero, and voxels outside that mask stay exactly zero.
pub fn normalize_modalities(vol: &MultiModalVolume, mask_mode: MaskMode) -> Result<MultiModalVolume> {
    let n = vol.voxels();
    let mask: Vec<bool> = match mask_mode {
        MaskMode::All => vec![true; n],
        MaskMode::Nonzero => (0..n)
            .map(|i| (0..vol.num_modalities()).any(|m| vol.data[m * n + i] != 0.0))
            .collect(),
    };
    let count = mask.iter().filter(|&&b| b).count();
    let mut out = vec![0.0f32; vol.data.len()];
    for m in 0..vol.num_modalities() {
        let src = vol.modality(m);
        let (mut sum, mut first, mut distinct) = (0.0f64, None, false);
        for (v, _) in src.iter().zip(&mask).filter(|(_, &k)| k) {
            sum += *v as f64;
            match first {
                None => first = Some(*v),
                Some(f) if f != *v => distinct = true,
                _ => {}
            }
        }
        if count < 2 || !distinct {
            return Err(Error::Degenerate(format!(
                "modality {} is constant under the {mask_mode:?} mask (zero variance)",
                vol.modality_names[m]
            )));
        }
        let mean = sum / count as f64;
        let var = src
            .iter()
            .zip(&mask)
            .filter(|(_, &k)| k)
            .map(|(v, _)| (*v as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        let inv_std = 1.0 / var.sqrt();
        let dst = &mut out[m * n..(m + 1) * n];
        for ((d, s), &k) in dst.iter_mut().zip(src).zip(&mask) {
            if k {
                *d = ((*s as f64 - mean) * inv_std) as f32;
            }
        }
    }
    MultiModalVolume::new(vol.dims, vol.modality_names.clone(), vol.spacing_mm, out)
}

/// Per-class voxel counts of a label grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassHistogram {
    pub counts: Vec<u64>,
}

impl ClassHistogram {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction per class; all zeros if the histogram is empty.
    pub fn fractions(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// Fraction of voxels carrying any label above 0.
    pub fn foreground_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.counts[1..].iter().sum::<u64>() as f64 / total as f64
    }

    pub(crate) fn accumulate(&mut self, labels: &[u8]) {
        for &l in labels {
            self.counts[l as usize] += 1;
        }
    }
}

pub fn class_histogram(labels: &LabelVolume) -> ClassHistogram {
    let mut h = ClassHistogram::from_counts(vec![0; labels.num_classes as usize]);
    h.accumulate(&labels.labels);
    h
}

/// A co-registered image and ground-truth pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub image: MultiModalVolume,
    pub labels: LabelVolume,
}

impl Subject {
    pub fn new(id: impl Into<String>, image: MultiModalVolume, labels: LabelVolume) -> Result<Self> {
        if image.dims() != labels.dims() {
            return Err(Error::SizeMismatch(format!(
                "image {:?} and labels {:?} differ in extent",
                image.dims(),
                labels.dims()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            labels,
        })
    }
}
