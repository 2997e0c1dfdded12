//! Overlap and morphometry measures.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labels::{Structure, NUM_CLASSES};
use crate::volume::{voxel_index, LabelVolume};

/// `2|X∩Y| / (|X|+|Y|)`, counted in integers. Two empty masks score 1.
pub fn dsc(x: &[bool], y: &[bool]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("dsc", format!("masks hold {} and {} voxels", x.len(), y.len())));
    }
    let (mut nx, mut ny, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in x.iter().zip(y) {
        nx += a as u64;
        ny += b as u64;
        both += (a && b) as u64;
    }
    Ok(ratio(both, nx, ny))
}

fn ratio(both: u64, nx: u64, ny: u64) -> f64 {
    if nx + ny == 0 {
        1.0
    } else {
        (2 * both) as f64 / (nx + ny) as f64
    }
}

fn check_extents(pred: &LabelVolume, reference: &LabelVolume) -> Result<()> {
    if pred.dims != reference.dims {
        return Err(Error::shape(
            "per_class_dsc",
            format!("prediction is {:?}, reference is {:?}", pred.dims, reference.dims),
        ));
    }
    Ok(())
}

/// DSC of each label code, binarizing both volumes per class.
pub fn per_class_dsc(pred: &LabelVolume, reference: &LabelVolume) -> Result<[f64; NUM_CLASSES]> {
    check_extents(pred, reference)?;
    let mut np = [0u64; NUM_CLASSES];
    let mut nr = [0u64; NUM_CLASSES];
    let mut both = [0u64; NUM_CLASSES];
    for (&a, &b) in pred.labels.iter().zip(&reference.labels) {
        np[a as usize] += 1;
        nr[b as usize] += 1;
        if a == b {
            both[a as usize] += 1;
        }
    }
    Ok(core::array::from_fn(|c| ratio(both[c], np[c], nr[c])))
}

/// Classes absent from both volumes, whose DSC of 1 reflects agreement on
/// absence rather than overlap.
pub fn absent_in_both(pred: &LabelVolume, reference: &LabelVolume) -> Result<[bool; NUM_CLASSES]> {
    check_extents(pred, reference)?;
    let (a, b) = (pred.counts(), reference.counts());
    Ok(core::array::from_fn(|c| a[c] == 0 && b[c] == 0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n−1) standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
    };
    Ok(MeanStd { mean, std })
}

/// Mean ± sample standard deviation of each class over a cohort.
pub fn cohort_summary(subjects: &[[f64; NUM_CLASSES]]) -> Result<[MeanStd; NUM_CLASSES]> {
    if subjects.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    let mut out = [MeanStd { mean: 0.0, std: 0.0 }; NUM_CLASSES];
    for (c, slot) in out.iter_mut().enumerate() {
        let col: Vec<f64> = subjects.iter().map(|s| s[c]).collect();
        *slot = mean_std(&col)?;
    }
    Ok(out)
}

/// Volume of each class in mm³, using the label volume's spacing.
pub fn structure_volumes(labels: &LabelVolume) -> [f64; NUM_CLASSES] {
    let voxel: f64 = labels.spacing.iter().product();
    labels.counts().map(|n| n as f64 * voxel)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MpRatio {
    pub ratio: f64,
    /// x index of the midsagittal slice.
    pub slice: usize,
    pub midbrain_mm2: f64,
    pub pons_mm2: f64,
}

/// Midbrain-to-pons area ratio on the sagittal plane (fixed x) through the
/// rounded centroid of all brainstem labels.
pub fn mp_area_ratio(labels: &LabelVolume) -> Result<MpRatio> {
    let centroid = crate::preprocess::label_centroid(labels).ok_or(Error::Empty("brainstem labels"))?;
    let slice = centroid[0];
    let [_, ny, nz] = labels.dims;
    let (mut mid, mut pons) = (0u64, 0u64);
    for z in 0..nz {
        for y in 0..ny {
            match Structure::from_code(labels.labels[voxel_index(labels.dims, slice, y, z)]) {
                Some(Structure::Midbrain) => mid += 1,
                Some(Structure::Pons) => pons += 1,
                _ => {}
            }
        }
    }
    if pons == 0 {
        return Err(Error::UndefinedRatio { slice });
    }
    let pixel = labels.spacing[1] * labels.spacing[2];
    Ok(MpRatio {
        ratio: mid as f64 / pons as f64,
        slice,
        midbrain_mm2: mid as f64 * pixel,
        pons_mm2: pons as f64 * pixel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn hand_cases() {
        let x = mask(&[1, 1, 1, 1, 0, 0, 0]);
        let y = mask(&[1, 1, 1, 0, 1, 1, 1]);
        assert_eq!(dsc(&x, &y).unwrap(), 0.6);
        assert_eq!(dsc(&x, &x).unwrap(), 1.0);
        assert_eq!(dsc(&mask(&[1, 0]), &mask(&[0, 1])).unwrap(), 0.0);
        assert_eq!(dsc(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(dsc(&x, &x[..3]).is_err());
    }

    #[test]
    fn cohort_triple() {
        let s = cohort_summary(&[[0.9; 5], [0.93; 5], [0.96; 5]]).unwrap();
        assert!((s[1].mean - 0.93).abs() < 1e-12);
        assert!((s[1].std - 0.03).abs() < 1e-12);
        assert_eq!(cohort_summary(&[[0.5; 5]]).unwrap()[0].std, 0.0);
    }

    #[test]
    fn volumes_follow_spacing() {
        let mut l = LabelVolume::background([10, 10, 10], [1.0; 3]);
        l.labels.iter_mut().for_each(|v| *v = 1);
        assert_eq!(structure_volumes(&l)[1], 1000.0);
        l.spacing = [0.5; 3];
        assert_eq!(structure_volumes(&l)[1], 125.0);
        assert_eq!(structure_volumes(&l)[4], 0.0);
    }

    #[test]
    fn ratio_by_construction() {
        // slice x=2: 10×10 midbrain block above a 20×20 pons block
        let dims = [5, 30, 30];
        let mut l = LabelVolume::background(dims, [1.0; 3]);
        for z in 0..30 {
            for y in 0..30 {
                for x in 0..5 {
                    let code = if z >= 20 && y < 10 { 2 } else if z < 20 && y < 20 { 1 } else { 0 };
                    l.labels[voxel_index(dims, x, y, z)] = code;
                }
            }
        }
        let r = mp_area_ratio(&l).unwrap();
        assert_eq!(r.slice, 2);
        assert_eq!(r.ratio, 0.25);
    }
}
