//! Volumes, masks and the grids that carry them.
//!
//! All grids are stored C-order with the last spatial axis (D) fastest, so a
//! voxel `(i, j, k)` of an `H x W x D` grid sits at `(i * W + j) * D + k`.

pub(crate) mod io;
mod phantom;
pub(crate) mod preprocess;

pub use io::{
    decode_mask, decode_volume, encode_mask, encode_volume, load_mask, load_volume, save_mask, save_volume, NATIVE_MAGIC,
};
pub use phantom::{generate_phantom, PhantomSpec};
pub use preprocess::{
    augment, augment_with, crop_or_pad, crop_or_pad_with_placement, znormalize, znormalize_masked, AugmentParams,
    Placement,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Millimetres per voxel along each spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self::ISO
    }
}

impl Spacing {
    pub const ISO: Spacing = Spacing { sx: 1.0, sy: 1.0, sz: 1.0 };

    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = Spacing { sx, sy, sz };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Metadata(format!("spacing must be finite and positive, got {self:?}")))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sx, self.sy, self.sz]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Spacing { sx: a[0], sy: a[1], sz: a[2] }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.sx * self.sy * self.sz
    }
}

#[inline]
pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

#[inline]
pub fn unravel(dims: [usize; 3], idx: usize) -> [usize; 3] {
    let k = idx % dims[2];
    let j = (idx / dims[2]) % dims[1];
    [idx / (dims[1] * dims[2]), j, k]
}

/// A `C x H x W x D` scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 4],
    data: Vec<f32>,
    spacing: Spacing,
    pub modality: String,
}

impl Volume {
    pub fn new(shape: [usize; 4], data: Vec<f32>, spacing: Spacing) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume dimensions must be positive, got {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Integrity(format!("shape {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len())));
        }
        spacing.validate()?;
        Ok(Self { shape, data, spacing, modality: "unknown".into() })
    }

    /// Single-channel volume.
    pub fn from_grid(dims: [usize; 3], data: Vec<f32>, spacing: Spacing) -> Result<Self> {
        Self::new([1, dims[0], dims[1], dims[2]], data, spacing)
    }

    pub fn zeros(dims: [usize; 3], spacing: Spacing) -> Self {
        Self::from_grid(dims, vec![0.0; voxel_count(dims)], spacing).expect("valid zeros volume")
    }

    pub fn with_modality(mut self, modality: impl Into<String>) -> Self {
        self.modality = modality.into();
        self
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
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

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims());
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize, k: usize) -> f32 {
        self.channel(c)[linear_index(self.dims(), i, j, k)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A `1 x H x W x D` grid of exact 0/1 labels.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<u8>,
    spacing: Spacing,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<u8>, spacing: Spacing) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("mask dimensions must be positive, got {dims:?}")));
        }
        if voxel_count(dims) != data.len() {
            return Err(Error::Integrity(format!("mask {dims:?} needs {} values, got {}", voxel_count(dims), data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        spacing.validate()?;
        Ok(Self { dims, data, spacing })
    }

    pub fn zeros(dims: [usize; 3], spacing: Spacing) -> Self {
        Self { dims, data: vec![0; voxel_count(dims)], spacing }
    }

    /// Builds a mask from a predicate over voxel indices.
    pub fn from_fn(dims: [usize; 3], spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k) as u8);
                }
            }
        }
        Self { dims, data, spacing }
    }

    /// `1` where `values[x] > threshold`.
    pub fn threshold(dims: [usize; 3], values: &[f32], threshold: f32, spacing: Spacing) -> Self {
        assert_eq!(values.len(), voxel_count(dims));
        Self { dims, data: values.iter().map(|&v| (v > threshold) as u8).collect(), spacing }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[linear_index(self.dims, i, j, k)] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = linear_index(self.dims, i, j, k);
        self.data[idx] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Linear indices of foreground voxels, ascending.
    pub fn foreground(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// A single-channel grid of values in `[0, 1]`: probabilities or critic
/// confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGrid {
    dims: [usize; 3],
    data: Vec<f32>,
}

/// Voxel-wise critic confidence.
pub type ConfidenceMap = ProbGrid;

impl ProbGrid {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if voxel_count(dims) != data.len() {
            return Err(Error::Integrity(format!("grid {dims:?} needs {} values, got {}", voxel_count(dims), data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; voxel_count(dims)] }
    }

    pub fn full(dims: [usize; 3], v: f32) -> Self {
        assert!((0.0..=1.0).contains(&v));
        Self { dims, data: vec![v; voxel_count(dims)] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Binary mask of voxels strictly above `t`.
    pub fn above(&self, t: f32, spacing: Spacing) -> BinaryMask {
        BinaryMask::threshold(self.dims, &self.data, t, spacing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let dims = [3, 4, 5];
        for idx in 0..voxel_count(dims) {
            let [i, j, k] = unravel(dims, idx);
            assert_eq!(linear_index(dims, i, j, k), idx);
        }
    }

    #[test]
    fn constructors_validate() {
        assert!(Volume::new([1, 2, 2, 2], vec![0.0; 7], Spacing::ISO).is_err());
        assert!(BinaryMask::new([2, 2, 2], vec![2; 8], Spacing::ISO).is_err());
        assert!(Spacing::new(1.0, 0.0, 1.0).is_err());
        assert!(ProbGrid::new([1, 1, 2], vec![0.5, 1.5]).is_err());
    }
}
