use super::Real;
use crate::volume::{voxel_count, Dims, MultiModalVolume};
use crate::{Error, Result};

/// Dense 5D tensor `(batch, channel, z, y, x)` with `x` varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, dims: Dims) -> Self {
        Self {
            n,
            c,
            dims,
            data: vec![T::zero(); n * c * voxel_count(dims)],
        }
    }

    pub fn from_vec(n: usize, c: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} values cannot fill ({n}, {c}, {dims:?})",
                data.len()
            )));
        }
        Ok(Self { n, c, dims, data })
    }

    /// Stacks volumes into a batch, one modality per channel.
    pub fn from_volumes(vols: &[&MultiModalVolume]) -> Result<Self> {
        let first = vols
            .first()
            .ok_or_else(|| Error::Shape("cannot build a tensor from zero volumes".into()))?;
        let (dims, c) = (first.dims(), first.num_modalities());
        let mut data = Vec::with_capacity(vols.len() * c * first.voxels());
        for v in vols {
            if v.dims() != dims || v.num_modalities() != c {
                return Err(Error::Shape("batch volumes differ in shape".into()));
            }
            data.extend(v.data().iter().map(|&x| T::of(x as f64)));
        }
        Self::from_vec(vols.len(), c, dims, data)
    }

    /// One batch element as a volume with the given channel names.
    pub fn to_volume(&self, sample: usize, names: Vec<String>) -> Result<MultiModalVolume> {
        let len = self.c * self.plane();
        let data = self.data[sample * len..(sample + 1) * len]
            .iter()
            .map(|x| x.f64() as f32)
            .collect();
        MultiModalVolume::new(self.dims, names, [1.0; 3], data)
    }

    #[inline]
    pub fn plane(&self) -> usize {
        voxel_count(self.dims)
    }

    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (n * self.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.c == other.c && self.dims == other.dims
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Spatial crop `[start, start + size)` of every channel.
    pub fn crop(&self, start: Dims, size: Dims) -> Tensor<T> {
        let mut out = Tensor::zeros(self.n, self.c, size);
        for n in 0..self.n {
            for c in 0..self.c {
                let src = self.channel(n, c);
                let dst = out.channel_mut(n, c);
                for z in 0..size[2] {
                    for y in 0..size[1] {
                        let s = ((start[2] + z) * self.dims[1] + start[1] + y) * self.dims[0] + start[0];
                        let d = (z * size[1] + y) * size[0];
                        dst[d..d + size[0]].copy_from_slice(&src[s..s + size[0]]);
                    }
                }
            }
        }
        out
    }
}
