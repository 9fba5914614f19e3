//! Dense whole-volume segmentation, evaluated tile by tile.

use std::borrow::Cow;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::netexec::{Mode, Network, Tensor, WeightSet};
use crate::volume::{linear_index, voxel_count, Dims, LabelVolume, MultiModalVolume};
use crate::{Error, Result};

/// Labels plus the per-class probability grid they were taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub labels: LabelVolume,
    /// One channel per class, named `class0`, `class1`, ...
    pub probabilities: MultiModalVolume,
}

/// One block of the output grid and the input region that feeds it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub core_start: Dims,
    pub core_size: Dims,
    pub input_start: Dims,
    pub input_size: Dims,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Partitions `dims` into tiles of at most `tile` voxels per axis, each
/// read with `halo` voxels of context clamped to the grid.
pub fn plan_tiles(dims: Dims, tile: Dims, halo: usize) -> Vec<Tile> {
    let starts = |a: usize| (0..dims[a]).step_by(tile[a]).collect::<Vec<_>>();
    let (xs, ys, zs) = (starts(0), starts(1), starts(2));
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let core_start = [x, y, z];
                let core_size = [0, 1, 2].map(|a| tile[a].min(dims[a] - core_start[a]));
                let input_start = [0, 1, 2].map(|a| core_start[a].saturating_sub(halo));
                let input_end = [0, 1, 2].map(|a| (core_start[a] + core_size[a] + halo).min(dims[a]));
                out.push(Tile {
                    core_start,
                    core_size,
                    input_start,
                    input_size: [0, 1, 2].map(|a| input_end[a] - input_start[a]),
                });
            }
        }
    }
    out
}

/// Segments `vol` with batch normalization on running statistics.
///
/// The volume is zero-padded up to a multiple of the network's pooling
/// period and the halo is rounded up to one, so every tile sits on the
/// same pooling grid as a whole-volume pass. With `halo` at least the
/// receptive-field radius the result equals a single whole-volume pass.
pub fn dense_segment(
    net: &Network,
    weights: &WeightSet<f32>,
    vol: &MultiModalVolume,
    tile_size: Dims,
    halo: usize,
) -> Result<Segmentation> {
    let p = net.size_period();
    if tile_size.iter().any(|&t| t < p || t % p != 0) {
        return Err(Error::Config(format!(
            "tile size {tile_size:?} must be a positive multiple of {p}"
        )));
    }
    if vol.num_modalities() != net.in_channels() {
        return Err(Error::Shape(format!(
            "volume has {} modalities, network expects {}",
            vol.num_modalities(),
            net.in_channels()
        )));
    }
    let weights: Cow<WeightSet<f32>> = if weights.mode == Mode::Inference {
        Cow::Borrowed(weights)
    } else {
        Cow::Owned(weights.clone().with_mode(Mode::Inference))
    };
    weights.check(net)?;

    let dims = vol.dims();
    let padded = dims.map(|d| round_up(d, p));
    let mut input = Tensor::<f32>::zeros(1, vol.num_modalities(), padded);
    for m in 0..vol.num_modalities() {
        let src = vol.modality(m);
        let dst = input.channel_mut(0, m);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let s = linear_index(dims, 0, y, z);
                let d = linear_index(padded, 0, y, z);
                dst[d..d + dims[0]].copy_from_slice(&src[s..s + dims[0]]);
            }
        }
    }
    let tiles = plan_tiles(padded, tile_size, round_up(halo, p));
    let results = crate::par::map_collect(&tiles, |t| -> Result<Tensor<f32>> {
        let x = input.crop(t.input_start, t.input_size);
        let logits = net.forward(&weights, &x)?;
        let offset = [0, 1, 2].map(|a| t.core_start[a] - t.input_start[a]);
        Ok(logits.crop(offset, t.core_size))
    });

    let classes = net.num_classes();
    let n = voxel_count(dims);
    let mut labels = vec![0u8; n];
    let mut probs = vec![0.0f32; classes * n];
    let mut z = vec![0.0f64; classes];
    for (t, logits) in tiles.iter().zip(results) {
        let logits = logits?;
        let s = t.core_size;
        for lz in 0..s[2] {
            for ly in 0..s[1] {
                for lx in 0..s[0] {
                    let g = [t.core_start[0] + lx, t.core_start[1] + ly, t.core_start[2] + lz];
                    if (0..3).any(|a| g[a] >= dims[a]) {
                        continue;
                    }
                    let li = linear_index(s, lx, ly, lz);
                    for (c, zc) in z.iter_mut().enumerate() {
                        *zc = logits.channel(0, c)[li] as f64;
                    }
                    let gi = linear_index(dims, g[0], g[1], g[2]);
                    labels[gi] = softmax_argmax(&mut z) as u8;
                    for (c, &pc) in z.iter().enumerate() {
                        probs[c * n + gi] = pc as f32;
                    }
                }
            }
        }
    }
    let names = (0..classes).map(|c| format!("class{c}")).collect();
    Ok(Segmentation {
        labels: LabelVolume::new(dims, classes as u8, labels)?,
        probabilities: MultiModalVolume::new(dims, names, vol.spacing_mm(), probs)?,
    })
}

/// Replaces logits with softmax probabilities and returns the most likely
/// class, preferring the lowest index on ties.
pub fn softmax_argmax(z: &mut [f64]) -> usize {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let mut best = 0;
    for c in 0..z.len() {
        z[c] /= s;
        if z[c] > z[best] {
            best = c;
        }
    }
    best
}

/// Per-class voxel and 6-connected component counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub voxels: Vec<u64>,
    pub components: Vec<u64>,
}

pub fn segment_report(pred: &LabelVolume) -> SegmentSummary {
    let dims = pred.dims();
    let labels = pred.labels();
    let classes = pred.num_classes() as usize;
    let mut voxels = vec![0u64; classes];
    let mut components = vec![0u64; classes];
    let mut seen = vec![false; labels.len()];
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        let l = labels[start];
        voxels[l as usize] += 1;
        if seen[start] {
            continue;
        }
        components[l as usize] += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let [x, y, z] = crate::volume::coords_of(dims, i);
            let mut visit = |nx: usize, ny: usize, nz: usize| {
                let j = linear_index(dims, nx, ny, nz);
                if !seen[j] && labels[j] == l {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(x - 1, y, z);
            }
            if x + 1 < dims[0] {
                visit(x + 1, y, z);
            }
            if y > 0 {
                visit(x, y - 1, z);
            }
            if y + 1 < dims[1] {
                visit(x, y + 1, z);
            }
            if z > 0 {
                visit(x, y, z - 1);
            }
            if z + 1 < dims[2] {
                visit(x, y, z + 1);
            }
        }
    }
    SegmentSummary { voxels, components }
}
