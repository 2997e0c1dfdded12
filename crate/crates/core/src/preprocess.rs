//! Intensity normalization, ROI cropping, one-hot encoding and class
//! frequencies.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{voxel_index, LabelVolume, Volume};

/// Min-max rescaling to `[0, 1]`. A constant volume maps to zeros.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Input(format!("non-finite intensity at voxel {i}")));
    }
    if v.data.is_empty() {
        return Err(Error::Empty("volume"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in &v.data {
        lo = lo.min(x as f64);
        hi = hi.max(x as f64);
    }
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data.iter().map(|&x| ((x as f64 - lo) / range) as f32).collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Ok(Volume { data, ..v.clone() })
}

/// Rounded centroid `(x, y, z)` of all non-background voxels.
pub fn label_centroid(labels: &LabelVolume) -> Option<[usize; 3]> {
    let [nx, ny, _] = labels.dims;
    let mut sum = [0u64; 3];
    let mut count = 0u64;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l != 0 {
            sum[0] += (i % nx) as u64;
            sum[1] += ((i / nx) % ny) as u64;
            sum[2] += (i / (nx * ny)) as u64;
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    Some(sum.map(|s| libm::round(s as f64 / count as f64) as usize))
}

/// A box of fixed extent placed inside (or partly outside) a source grid.
///
/// The box covers source voxels `origin .. origin + extent` per axis with
/// `origin = center − extent/2`; anything outside the source is padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub origin: [isize; 3],
    pub extent: [usize; 3],
    pub source: [usize; 3],
}

impl CropWindow {
    pub fn centered(source: [usize; 3], center: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        if extent.contains(&0) {
            return Err(Error::Config("crop extent must be positive".into()));
        }
        if (0..3).any(|a| center[a] >= source[a]) {
            return Err(Error::Input(format!("crop center {center:?} lies outside the volume {source:?}")));
        }
        let origin = [0, 1, 2].map(|a| center[a] as isize - (extent[a] / 2) as isize);
        Ok(CropWindow { origin, extent, source })
    }

    /// Source coordinate of window voxel `(x, y, z)`, if it lies inside.
    #[inline]
    fn source_index(&self, x: usize, y: usize, z: usize) -> Option<usize> {
        let s = [x, y, z];
        let mut p = [0usize; 3];
        for a in 0..3 {
            let q = self.origin[a] + s[a] as isize;
            if q < 0 || q as usize >= self.source[a] {
                return None;
            }
            p[a] = q as usize;
        }
        Some(voxel_index(self.source, p[0], p[1], p[2]))
    }

    fn gather<V: Copy>(&self, src: &[V], fill: V) -> Vec<V> {
        let [ex, ey, ez] = self.extent;
        let mut out = Vec::with_capacity(ex * ey * ez);
        for z in 0..ez {
            for y in 0..ey {
                for x in 0..ex {
                    out.push(self.source_index(x, y, z).map_or(fill, |i| src[i]));
                }
            }
        }
        out
    }
}

fn check_source(window: &CropWindow, dims: [usize; 3]) -> Result<()> {
    if window.source != dims {
        return Err(Error::Input(format!(
            "crop window was placed on a {:?} grid, volume is {:?}",
            window.source, dims
        )));
    }
    Ok(())
}

/// Out-of-bounds voxels are zero.
pub fn crop_volume(v: &Volume, window: &CropWindow) -> Result<Volume> {
    check_source(window, v.dims)?;
    Ok(Volume { dims: window.extent, spacing: v.spacing, data: window.gather(&v.data, 0.0), affine: v.affine })
}

/// Out-of-bounds voxels are background.
pub fn crop_labels(l: &LabelVolume, window: &CropWindow) -> Result<LabelVolume> {
    check_source(window, l.dims)?;
    Ok(LabelVolume { dims: window.extent, spacing: l.spacing, labels: window.gather(&l.labels, 0), affine: l.affine })
}

/// Places a cropped label map back into a background grid of the source
/// extents; window voxels falling outside the source are dropped.
pub fn embed_labels(cropped: &LabelVolume, window: &CropWindow, spacing: [f64; 3]) -> Result<LabelVolume> {
    if cropped.dims != window.extent {
        return Err(Error::Input(format!(
            "cropped labels are {:?}, window extent is {:?}",
            cropped.dims, window.extent
        )));
    }
    let mut out = LabelVolume::background(window.source, spacing);
    let [ex, ey, ez] = window.extent;
    for z in 0..ez {
        for y in 0..ey {
            for x in 0..ex {
                if let Some(i) = window.source_index(x, y, z) {
                    out.labels[i] = cropped.labels[voxel_index(window.extent, x, y, z)];
                }
            }
        }
    }
    Ok(out)
}

/// Image as a `[1, 1, z, y, x]` tensor.
pub fn volume_to_tensor<T: Scalar>(v: &Volume) -> Tensor<T> {
    let [x, y, z] = v.dims;
    Tensor::from_fn(&[1, 1, z, y, x], |i| T::from_f64(v.data[i] as f64))
}

/// `[1, NUM_CLASSES, z, y, x]` indicator tensor.
pub fn one_hot_encode<T: Scalar>(labels: &LabelVolume) -> Result<Tensor<T>> {
    labels.validate()?;
    let [x, y, z] = labels.dims;
    let vol = x * y * z;
    let mut data = vec![T::ZERO; NUM_CLASSES * vol];
    for (v, &l) in labels.labels.iter().enumerate() {
        data[l as usize * vol + v] = T::ONE;
    }
    Tensor::from_vec(&[1, NUM_CLASSES, z, y, x], data)
}

/// Per-voxel argmax over channels of a `[1, C, z, y, x]` tensor, ties going
/// to the lowest class code.
pub fn argmax_decode<T: Scalar>(t: &Tensor<T>, spacing: [f64; 3]) -> Result<LabelVolume> {
    let [n, c, d, h, w] = t.dims5("argmax_decode")?;
    if n != 1 || c == 0 || c > NUM_CLASSES {
        return Err(Error::shape("argmax_decode", format!("expected [1, ≤{NUM_CLASSES}, ..], got {:?}", t.shape())));
    }
    let vol = d * h * w;
    let s = t.data();
    let labels = (0..vol)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if s[k * vol + v] > s[best * vol + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new([w, h, d], spacing, labels)
}

/// Fraction of voxels in each class, pooled over all volumes.
pub fn class_frequencies(volumes: &[&LabelVolume]) -> Result<[f64; NUM_CLASSES]> {
    let mut counts = [0u64; NUM_CLASSES];
    for v in volumes {
        v.validate()?;
        for (c, n) in v.counts().iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("label volumes"));
    }
    Ok(counts.map(|n| n as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_spans_unit_interval() {
        let v = Volume::new([4, 1, 1], [1.0; 3], vec![0.0, 4095.0, 100.0, 2000.0]).unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.data[0], 0.0);
        assert_eq!(n.data[1], 1.0);
        assert!(n.data[2] < n.data[3]);
    }

    #[test]
    fn normalize_constant_and_nan() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![7.0; 3]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().data, vec![0.0; 3]);
        let bad = Volume::new([2, 1, 1], [1.0; 3], vec![1.0, f32::NAN]).unwrap();
        assert!(normalize_intensity(&bad).is_err());
    }

    #[test]
    fn interior_crop_matches_subblock() {
        let v = Volume::new([6, 6, 6], [1.0; 3], (0..216).map(|i| i as f32).collect()).unwrap();
        let win = CropWindow::centered(v.dims, [3, 3, 3], [2, 2, 2]).unwrap();
        let c = crop_volume(&v, &win).unwrap();
        assert_eq!(c.data, vec![
            v.get(2, 2, 2), v.get(3, 2, 2), v.get(2, 3, 2), v.get(3, 3, 2),
            v.get(2, 2, 3), v.get(3, 2, 3), v.get(2, 3, 3), v.get(3, 3, 3),
        ]);
    }

    #[test]
    fn corner_crop_pads_with_zero() {
        let v = Volume::new([4, 4, 4], [1.0; 3], vec![1.0; 64]).unwrap();
        let win = CropWindow::centered(v.dims, [0, 0, 0], [4, 4, 4]).unwrap();
        let c = crop_volume(&v, &win).unwrap();
        // origin is -2 on every axis: a 2-voxel margin of zeros
        let ones = c.data.iter().filter(|&&x| x == 1.0).count();
        assert_eq!(ones, 8);
        assert_eq!(c.data[voxel_index([4; 3], 1, 3, 3)], 0.0);
        assert_eq!(c.data[voxel_index([4; 3], 2, 2, 2)], 1.0);
    }

    #[test]
    fn crop_then_embed_restores_window_content() {
        let dims = [7, 5, 6];
        let labels: Vec<u8> = (0..210).map(|i| (i % 5) as u8).collect();
        let l = LabelVolume::new(dims, [1.0; 3], labels).unwrap();
        let win = CropWindow::centered(dims, [3, 2, 3], [8, 8, 8]).unwrap();
        let back = embed_labels(&crop_labels(&l, &win).unwrap(), &win, l.spacing).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn one_hot_round_trip() {
        let l = LabelVolume::new([5, 1, 1], [1.0; 3], vec![2, 0, 4, 1, 3]).unwrap();
        let t = one_hot_encode::<f32>(&l).unwrap();
        assert_eq!(t.data()[2 * 5], 1.0);
        let sums: Vec<f64> = (0..5).map(|c| t.data()[c * 5..c * 5 + 5].iter().map(|&v| v as f64).sum()).collect();
        assert_eq!(sums, vec![1.0; 5]);
        assert_eq!(argmax_decode(&t, l.spacing).unwrap(), l);
    }

    #[test]
    fn frequencies() {
        let bg = LabelVolume::background([2, 2, 1], [1.0; 3]);
        assert_eq!(class_frequencies(&[&bg]).unwrap(), [1.0, 0.0, 0.0, 0.0, 0.0]);
        let half = LabelVolume::new([2, 1, 1], [1.0; 3], vec![0, 1]).unwrap();
        assert_eq!(class_frequencies(&[&half]).unwrap(), [0.5, 0.5, 0.0, 0.0, 0.0]);
    }
}
