//! Volume data model, NIfTI file I/O, preprocessing and synthetic pairs.
//!
//! Voxel `(x, y, z)` of a grid with shape `(D, H, W)` lives at flat index
//! `(x * H + y) * W + z`. Displacement components follow the same axis
//! order, so component 0 moves along axis 0.

mod nifti;
mod preprocess;
mod synth;

pub use nifti::{
    load_field, load_labels, load_volume, save_field, save_labels, save_volume, NiftiHeader,
};
pub use preprocess::{
    com_initialize, com_shift, crop_or_pad, crop_or_pad_labels, normalize_intensity, shift_labels, shift_volume,
};
pub use synth::{synth_pair, GroundTruth, SyntheticPair, SyntheticPairSpec};

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub(crate) fn flat_index(shape: Shape3, x: usize, y: usize, z: usize) -> usize {
    (x * shape[1] + y) * shape[2] + z
}

/// Iterate the grid in storage order, yielding `(flat, [x, y, z])`.
pub(crate) fn grid_iter(shape: Shape3) -> impl Iterator<Item = (usize, [usize; 3])> {
    let [d, h, w] = shape;
    (0..d)
        .flat_map(move |x| (0..h).flat_map(move |y| (0..w).map(move |z| [x, y, z])))
        .enumerate()
}

/// A single-channel scalar volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("volume shape {shape:?} has an empty axis")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::shape(&[voxel_count(shape)], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape3, value: f32) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "empty volume shape {shape:?}");
        Self {
            shape,
            data: vec![value; voxel_count(shape)],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut([usize; 3]) -> f32) -> Self {
        let data = grid_iter(shape).map(|(_, p)| f(p)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[flat_index(self.shape, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = flat_index(self.shape, x, y, z);
        self.data[i] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }
}

/// Integer segmentation labels; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: Shape3,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(shape: Shape3, data: Vec<u32>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("label shape {shape:?} has an empty axis")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::shape(&[voxel_count(shape)], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0; voxel_count(shape)],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut([usize; 3]) -> u32) -> Self {
        let data = grid_iter(shape).map(|(_, p)| f(p)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[flat_index(self.shape, x, y, z)]
    }

    /// Sorted distinct non-background labels.
    pub fn labels(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.data.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    /// Center of mass of one label in voxel coordinates, `None` when absent.
    pub fn centroid(&self, label: u32) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (i, p) in grid_iter(self.shape) {
            if self.data[i] == label {
                for a in 0..3 {
                    acc[a] += p[a] as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.map(|s| s / n as f64))
    }
}
