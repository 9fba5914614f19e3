//! Training-patch center sampling and batch assembly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netexec::Tensor;
use crate::volume::{
    coords_of, linear_index, ClassHistogram, Dims, LabelVolume, MultiModalVolume, PadPolicy, PatchSpec,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Center is foreground (any label > 0) with a fixed probability.
    #[default]
    FgBgBalanced,
    /// Every voxel equally likely.
    Uniform,
    /// Class drawn uniformly among those present, then a voxel of it.
    EquiprobableClasses,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fg_bg_balanced" => Ok(Self::FgBgBalanced),
            "uniform" => Ok(Self::Uniform),
            "equiprobable_classes" => Ok(Self::EquiprobableClasses),
            _ => Err(Error::Config(format!("unknown sampling strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub patch_size: Dims,
    pub foreground_probability: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch_size: [64; 3],
            foreground_probability: 0.5,
            strategy: Strategy::FgBgBalanced,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.contains(&0) {
            return Err(Error::Config(format!("patch size must be positive, got {:?}", self.patch_size)));
        }
        if !(0.0..=1.0).contains(&self.foreground_probability) {
            return Err(Error::Config(format!(
                "foreground probability {} outside [0, 1]",
                self.foreground_probability
            )));
        }
        Ok(())
    }
}

/// Independent random stream `stream` of the generator keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Voxel indices of a label grid grouped by class, for repeated sampling.
#[derive(Clone, Debug)]
pub struct CenterSampler {
    dims: Dims,
    by_class: Vec<Vec<u32>>,
    foreground: Vec<u32>,
}

impl CenterSampler {
    pub fn new(labels: &LabelVolume) -> Self {
        let mut by_class = vec![Vec::new(); labels.num_classes() as usize];
        for (i, &l) in labels.labels().iter().enumerate() {
            by_class[l as usize].push(i as u32);
        }
        let mut foreground: Vec<u32> = by_class[1..].concat();
        foreground.sort_unstable();
        Self {
            dims: labels.dims(),
            by_class,
            foreground,
        }
    }

    fn coords(&self, idx: u32) -> [usize; 3] {
        coords_of(self.dims, idx as usize)
    }

    fn pick(&self, set: &[u32], rng: &mut impl Rng) -> [usize; 3] {
        self.coords(set[rng.random_range(0..set.len())])
    }

    /// Draws `n` centers with replacement from `rng`.
    pub fn sample(&self, n: usize, config: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<[usize; 3]>> {
        config.validate()?;
        let background = &self.by_class[0];
        let p = config.foreground_probability;
        match config.strategy {
            Strategy::FgBgBalanced => {
                if p > 0.0 && self.foreground.is_empty() {
                    return Err(Error::Sampling("no foreground voxels (labels 1-4) to center patches on".into()));
                }
                if p < 1.0 && background.is_empty() {
                    return Err(Error::Sampling("no background voxels (label 0) to center patches on".into()));
                }
                Ok((0..n)
                    .map(|_| {
                        if rng.random_bool(p) {
                            self.pick(&self.foreground, rng)
                        } else {
                            self.pick(background, rng)
                        }
                    })
                    .collect())
            }
            Strategy::Uniform => {
                let total: usize = self.dims.iter().product();
                if total == 0 {
                    return Err(Error::Sampling("empty volume".into()));
                }
                Ok((0..n).map(|_| self.coords(rng.random_range(0..total) as u32)).collect())
            }
            Strategy::EquiprobableClasses => {
                let present: Vec<&Vec<u32>> = self.by_class.iter().filter(|v| !v.is_empty()).collect();
                if present.is_empty() {
                    return Err(Error::Sampling("empty volume".into()));
                }
                Ok((0..n)
                    .map(|_| {
                        let set = present[rng.random_range(0..present.len())];
                        self.pick(set, rng)
                    })
                    .collect())
            }
        }
    }
}

/// `n` patch centers drawn from the stream seeded by `config.seed`.
pub fn sample_patch_centers(labels: &LabelVolume, n: usize, config: &SamplerConfig) -> Result<Vec<[usize; 3]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    CenterSampler::new(labels).sample(n, config, &mut rng)
}

/// Class fractions over the in-volume voxels of `n_patches` sampled
/// patches, drawn round-robin across the volumes. Zero padding beyond the
/// volume border is not counted.
pub fn realized_training_distribution(
    labels_list: &[&LabelVolume],
    config: &SamplerConfig,
    n_patches: usize,
) -> Result<ClassHistogram> {
    if n_patches == 0 {
        return Err(Error::Sampling("at least one patch is required".into()));
    }
    if labels_list.is_empty() {
        return Err(Error::Sampling("no label volumes given".into()));
    }
    let classes = labels_list.iter().map(|l| l.num_classes()).max().unwrap_or(0) as usize;
    let mut hist = ClassHistogram::from_counts(vec![0; classes]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samplers: Vec<CenterSampler> = labels_list.iter().map(|l| CenterSampler::new(l)).collect();
    for i in 0..n_patches {
        let k = i % labels_list.len();
        let center = samplers[k].sample(1, config, &mut rng)?[0];
        let spec = PatchSpec::centered(center, config.patch_size);
        count_in_volume(labels_list[k], &spec, &mut hist);
    }
    Ok(hist)
}

fn count_in_volume(labels: &LabelVolume, spec: &PatchSpec, hist: &mut ClassHistogram) {
    let dims = labels.dims();
    let range = |a: usize| {
        let lo = spec.origin[a].max(0) as usize;
        let hi = (spec.origin[a] + spec.size[a] as i64).clamp(0, dims[a] as i64) as usize;
        lo..hi.max(lo)
    };
    let (rx, ry, rz) = (range(0), range(1), range(2));
    for z in rz {
        for y in ry.clone() {
            let start = linear_index(dims, rx.start, y, z);
            hist.accumulate(&labels.labels()[start..start + rx.len()]);
        }
    }
}

/// Image and label patches stacked for one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `(batch, modality, z, y, x)`.
    pub images: Tensor<f32>,
    /// Labels in the same voxel order, batch-major.
    pub labels: Vec<u8>,
    pub centers: Vec<[usize; 3]>,
}

impl PatchBatch {
    /// `[batch, channels, x, y, z]` extents.
    pub fn shape(&self) -> [usize; 5] {
        let t = &self.images;
        [t.n, t.c, t.dims[0], t.dims[1], t.dims[2]]
    }
}

/// Extracts a zero-padded patch of `patch_size` around each center.
pub fn build_training_batch(
    vol: &MultiModalVolume,
    labels: &LabelVolume,
    centers: &[[usize; 3]],
    patch_size: Dims,
) -> Result<PatchBatch> {
    if centers.is_empty() {
        return Err(Error::Sampling("empty center list".into()));
    }
    if vol.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and labels {:?} differ in extent",
            vol.dims(),
            labels.dims()
        )));
    }
    let dims = vol.dims();
    let mut images = Vec::with_capacity(centers.len());
    let mut label_data = Vec::with_capacity(centers.len() * patch_size.iter().product::<usize>());
    for c in centers {
        if (0..3).any(|a| c[a] >= dims[a]) {
            return Err(Error::Bounds(format!("center {c:?} outside volume {dims:?}")));
        }
        let spec = PatchSpec::centered(*c, patch_size);
        images.push(vol.extract_patch(&spec, PadPolicy::Zero)?);
        label_data.extend_from_slice(labels.extract_patch(&spec, PadPolicy::Zero)?.labels());
    }
    let refs: Vec<&MultiModalVolume> = images.iter().collect();
    Ok(PatchBatch {
        images: Tensor::from_volumes(&refs)?,
        labels: label_data,
        centers: centers.to_vec(),
    })
}
