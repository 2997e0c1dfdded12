//! Scalar and label volumes.
//!
//! Extents and spacing are given as `(x, y, z)` with x varying fastest in
//! `data`, which is the NIfTI storage order. Viewed as a tensor the same
//! buffer is `[z, y, x]`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;

pub type Affine = [[f64; 4]; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
    /// Voxel-to-world transform, carried through unchanged.
    pub affine: Option<Affine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u8>,
    pub affine: Option<Affine>,
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != len {
        return Err(Error::Input(format!("extents {dims:?} hold {n} voxels, data has {len}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Input(format!("voxel spacing {spacing:?} must be positive")));
    }
    Ok(())
}

#[inline]
pub fn voxel_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Volume { dims, spacing, data, affine: None })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[voxel_index(self.dims, x, y, z)]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

impl LabelVolume {
    /// Validates that every code is in `0..NUM_CLASSES`.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, labels.len())?;
        let v = LabelVolume { dims, spacing, labels, affine: None };
        v.validate()?;
        Ok(v)
    }

    pub fn background(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        LabelVolume { dims, spacing, labels: alloc::vec![0; dims.iter().product()], affine: None }
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.dims, self.spacing, self.labels.len())?;
        match self.labels.iter().position(|&c| c as usize >= NUM_CLASSES) {
            Some(index) => Err(Error::LabelRange { code: self.labels[index], index }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[voxel_index(self.dims, x, y, z)]
    }

    pub fn counts(&self) -> [u64; NUM_CLASSES] {
        let mut c = [0u64; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn label_code_out_of_range() {
        let err = LabelVolume::new([2, 1, 1], [1.0; 3], vec![0, 7]).unwrap_err();
        assert_eq!(err, Error::LabelRange { code: 7, index: 1 });
    }

    #[test]
    fn spacing_must_be_positive() {
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![0.0]).is_err());
    }

    #[test]
    fn x_is_fastest() {
        let v = Volume::new([2, 3, 4], [1.0; 3], (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1), 6.0);
    }
}
