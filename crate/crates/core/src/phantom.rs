//! Synthetic multi-modal "brain with tumor" volumes with exact labels.
//!
//! A phantom is an ellipsoidal brain inside a zero background, with a
//! tumor made of nested, sinusoidally warped ellipsoids:
//!
//! | normalized tumor distance | label |
//! |---------------------------|-------|
//! | `< 0.3`                   | 1 necrotic core |
//! | `< 0.5`                   | 4 enhancing core |
//! | `< 0.7`                   | 3 non-enhancing core |
//! | `< 1.0`                   | 2 edema |
//!
//! Each tissue has a fixed mean per modality ([`TISSUE_MEANS`]) chosen so
//! that no single modality separates all tumor classes. Noise is added
//! inside the brain only, so the background stays exactly zero.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::sampling::stream_rng;
use crate::volume::{
    load_image, load_label, save_image, save_label, voxel_count, Dims, LabelVolume, MultiModalVolume, Subject,
};
use crate::{Error, Result};

pub const MODALITY_NAMES: [&str; 4] = ["t1", "t1c", "t2", "flair"];

/// Mean intensity per tissue (rows: outside, brain, labels 1-4) and
/// modality (columns: t1, t1c, t2, flair).
pub const TISSUE_MEANS: [[f32; 4]; 6] = [
    [0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0, 1.0],
    [0.5, 1.0, 2.0, 1.0],
    [1.0, 1.0, 2.0, 2.0],
    [0.5, 1.0, 2.0, 2.0],
    [0.5, 2.0, 2.0, 1.0],
];

/// Row of [`TISSUE_MEANS`] for a voxel: 0 outside the brain, 1 healthy
/// brain, `label + 1` inside the tumor.
pub fn tissue_row(inside_brain: bool, label: u8) -> usize {
    match (inside_brain, label) {
        (false, _) => 0,
        (true, 0) => 1,
        (true, l) => l as usize + 1,
    }
}

/// Smallest L∞ distance between two tissue mean vectors.
pub fn min_mean_gap() -> f32 {
    let mut gap = f32::INFINITY;
    for a in 0..TISSUE_MEANS.len() {
        for b in a + 1..TISSUE_MEANS.len() {
            let d = (0..4)
                .map(|m| (TISSUE_MEANS[a][m] - TISSUE_MEANS[b][m]).abs())
                .fold(0.0f32, f32::max);
            gap = gap.min(d);
        }
    }
    gap
}

const SHELLS: [(f64, u8); 4] = [(0.3, 1), (0.5, 4), (0.7, 3), (1.0, 2)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub size: Dims,
    /// Target fraction of all voxels carrying a tumor label.
    pub tumor_fraction: f64,
    /// Scale of the per-modality noise, which is Gaussian truncated to
    /// `[-noise_sigma, noise_sigma]`.
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: [64; 3],
            tumor_fraction: 0.05,
            noise_sigma: 0.1,
        }
    }
}

struct Warp {
    dirs: [[f64; 3]; 3],
    freq: [f64; 3],
    amp: [f64; 3],
    phase: [f64; 3],
}

impl Warp {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut unit = || {
            let v = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.map(|x| x / n)
        };
        let dirs = [unit(), unit(), unit()];
        Self {
            dirs,
            freq: [0; 3].map(|_| rng.random_range(1..=2) as f64),
            amp: [0; 3].map(|_| rng.random_range(0.03..0.08)),
            phase: [0; 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }

    /// Radial scale factor in direction `u` (unit vector), within [0.76, 1.24].
    fn at(&self, u: [f64; 3]) -> f64 {
        1.0 + (0..3)
            .map(|k| {
                let proj: f64 = (0..3).map(|a| self.dirs[k][a] * u[a]).sum();
                self.amp[k] * (std::f64::consts::PI * self.freq[k] * proj + self.phase[k]).sin()
            })
            .sum::<f64>()
    }
}

/// Generates one phantom. Deterministic per `seed`.
pub fn generate_phantom(
    seed: u64,
    size: Dims,
    tumor_fraction_target: f64,
    noise_sigma: f64,
) -> Result<(MultiModalVolume, LabelVolume)> {
    if size.iter().any(|&d| d < 32) {
        return Err(Error::Config(format!("phantom extent must be at least 32 per axis, got {size:?}")));
    }
    if !(tumor_fraction_target > 0.0 && tumor_fraction_target <= 0.2) {
        return Err(Error::Config(format!(
            "tumor fraction {tumor_fraction_target} outside (0, 0.2]"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = size.map(|v| v as f64);
    let brain_center = [0, 1, 2].map(|a| d[a] / 2.0 + rng.random_range(-1.0..1.0));
    let brain_axes = [0, 1, 2].map(|a| d[a] * rng.random_range(0.40..0.46));
    let tumor_center = {
        let r = rng.random_range(0.0..0.35);
        let v = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        [0, 1, 2].map(|a| brain_center[a] + brain_axes[a] * r * v[a] / n)
    };
    let tumor_shape = [0; 3].map(|_| rng.random_range(0.8..1.2));
    let warp = Warp::random(&mut rng);

    // Unscaled warped tumor distance per brain voxel; the tumor of scale s
    // is the set q < s, so the target fraction fixes s by rank.
    let n = voxel_count(size);
    let mut inside = vec![false; n];
    let mut q = vec![f64::INFINITY; n];
    let mut i = 0;
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let b: f64 = (0..3).map(|a| ((p[a] - brain_center[a]) / brain_axes[a]).powi(2)).sum();
                if b < 1.0 {
                    inside[i] = true;
                    let v = [0, 1, 2].map(|a| (p[a] - tumor_center[a]) / tumor_shape[a]);
                    let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let u = if r > 0.0 { v.map(|x| x / r) } else { [1.0, 0.0, 0.0] };
                    q[i] = r / warp.at(u);
                }
                i += 1;
            }
        }
    }
    let mut sorted: Vec<f64> = q.iter().copied().filter(|v| v.is_finite()).collect();
    let k = (tumor_fraction_target * n as f64).round() as usize;
    if k == 0 || k >= sorted.len() {
        return Err(Error::Config(format!(
            "tumor fraction {tumor_fraction_target} is unachievable: brain holds {} of {n} voxels",
            sorted.len()
        )));
    }
    sorted.sort_by(f64::total_cmp);
    let scale = 0.5 * (sorted[k - 1] + sorted[k]);

    let mut labels = vec![0u8; n];
    for (l, &qi) in labels.iter_mut().zip(&q) {
        let t = qi / scale;
        if let Some(&(_, label)) = SHELLS.iter().find(|(r, _)| t < *r) {
            *l = label;
        }
    }
    let realized = labels.iter().filter(|&&l| l > 0).count() as f64 / n as f64;
    if (realized / tumor_fraction_target - 1.0).abs() > 0.3 {
        return Err(Error::Config(format!(
            "tumor fraction {tumor_fraction_target} is unachievable (realized {realized:.4})"
        )));
    }

    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut sample_noise = || -> f32 {
        if noise_sigma == 0.0 {
            return 0.0;
        }
        loop {
            let v = noise.sample(&mut rng);
            if v.abs() <= noise_sigma {
                return v as f32;
            }
        }
    };
    let mut data = vec![0.0f32; 4 * n];
    for m in 0..4 {
        for v in 0..n {
            if inside[v] {
                data[m * n + v] = TISSUE_MEANS[tissue_row(true, labels[v])][m] + sample_noise();
            }
        }
    }
    let names = MODALITY_NAMES.iter().map(|s| s.to_string()).collect();
    Ok((
        MultiModalVolume::new(size, names, [1.0; 3], data)?,
        LabelVolume::new(size, crate::NUM_CLASSES as u8, labels)?,
    ))
}

/// `manifest.json` of a phantom dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: PhantomConfig,
    pub subjects: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    pub label: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Seed of subject `index` in a dataset generated from `seed`.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    stream_rng(seed, index as u64 + 1).next_u64()
}

/// Writes `n_subjects` phantoms and a manifest into `dir`.
pub fn make_phantom_dataset(
    dir: impl AsRef<Path>,
    n_subjects: usize,
    seed: u64,
    config: &PhantomConfig,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    if n_subjects < 2 {
        return Err(Error::Config(format!("a dataset needs at least 2 subjects, got {n_subjects}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let indices: Vec<usize> = (0..n_subjects).collect();
    let entries = crate::par::map_collect(&indices, |&i| -> Result<ManifestEntry> {
        let id = format!("subject_{i:03}");
        let s = subject_seed(seed, i);
        let (img, lab) = generate_phantom(s, config.size, config.tumor_fraction, config.noise_sigma)?;
        let entry = ManifestEntry {
            image: PathBuf::from(format!("{id}_image.vseg")),
            label: PathBuf::from(format!("{id}_label.vseg")),
            id,
            seed: s,
        };
        save_image(dir.join(&entry.image), &img)?;
        save_label(dir.join(&entry.label), &lab)?;
        Ok(entry)
    });
    let manifest = Manifest {
        seed,
        config: config.clone(),
        subjects: entries.into_iter().collect::<Result<_>>()?,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads every subject listed in `dir`'s manifest, in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    load_manifest(dir)?
        .subjects
        .iter()
        .map(|e| Subject::new(e.id.clone(), load_image(dir.join(&e.image))?, load_label(dir.join(&e.label))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::class_histogram;

    #[test]
    fn noise_free_phantom_is_piecewise_constant() {
        let (img, lab) = generate_phantom(3, [32, 32, 32], 0.08, 0.0).unwrap();
        let n = lab.voxels();
        for v in 0..n {
            let vals: Vec<f32> = (0..4).map(|m| img.data()[m * n + v]).collect();
            let row = TISSUE_MEANS
                .iter()
                .position(|r| r[..] == vals[..])
                .expect("voxel matches a tissue mean");
            if lab.labels()[v] > 0 {
                assert_eq!(row, lab.labels()[v] as usize + 1);
            }
        }
    }

    #[test]
    fn deterministic_and_imbalanced() {
        let a = generate_phantom(11, [32, 40, 36], 0.05, 0.1).unwrap();
        let b = generate_phantom(11, [32, 40, 36], 0.05, 0.1).unwrap();
        assert_eq!(a, b);
        let h = class_histogram(&a.1);
        assert!(h.fractions()[0] > 0.9);
        assert!(h.counts[1..].iter().all(|&c| c > 0), "{:?}", h.counts);
        let f = h.foreground_fraction();
        assert!((f / 0.05 - 1.0).abs() <= 0.3, "{f}");
    }

    #[test]
    fn truncated_noise_keeps_tissues_separable() {
        assert_eq!(min_mean_gap(), 0.5);
        let (img, lab) = generate_phantom(5, [32; 3], 0.1, 0.24).unwrap();
        let n = lab.voxels();
        for v in 0..n {
            let x: Vec<f32> = (0..4).map(|m| img.data()[m * n + v]).collect();
            let nearest = (0..TISSUE_MEANS.len())
                .min_by(|&a, &b| {
                    let d = |r: usize| (0..4).map(|m| (x[m] - TISSUE_MEANS[r][m]).abs()).fold(0.0f32, f32::max);
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            let l = lab.labels()[v];
            if l > 0 {
                assert_eq!(nearest, l as usize + 1);
            }
        }
    }

    #[test]
    fn invalid_requests_rejected() {
        assert!(generate_phantom(0, [16, 32, 32], 0.05, 0.1).is_err());
        assert!(generate_phantom(0, [32; 3], 0.0, 0.1).is_err());
        assert!(generate_phantom(0, [32; 3], 0.25, 0.1).is_err());
        assert!(generate_phantom(0, [32; 3], 0.05, -1.0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            size: [32; 3],
            ..Default::default()
        };
        let m = make_phantom_dataset(dir.path(), 3, 7, &cfg).unwrap();
        assert_eq!(m.subjects.len(), 3);
        let subjects = load_dataset(dir.path()).unwrap();
        for (s, e) in subjects.iter().zip(&m.subjects) {
            let (img, lab) = generate_phantom(e.seed, cfg.size, cfg.tumor_fraction, cfg.noise_sigma).unwrap();
            assert_eq!((&s.image, &s.labels), (&img, &lab));
        }
        assert_ne!(subjects[0].labels, subjects[1].labels);
        assert!(make_phantom_dataset(dir.path(), 1, 7, &cfg).is_err());
    }
}
