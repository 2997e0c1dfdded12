//! Phantom cohorts on disk, and loading manifests into training samples.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use stemnet_core::parallel::map_tasks;
use stemnet_core::phantom::{generate_subject, simulate_atlas_fusion, split_counts, subject_seed, FusionSpec, PhantomSpec};
use stemnet_core::preprocess::{crop_labels, crop_volume, label_centroid, normalize_intensity, CropWindow};
use stemnet_core::train::Sample;
use stemnet_core::{rng, LabelVolume, Volume};

use crate::error::{CliError, Result};
use crate::manifest::{resolve, Manifest, Split, Subject};
use crate::nifti::{self, DataType};

pub const DEFAULT_SPLIT: [u32; 3] = [27, 8, 15];

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:03}")
}

/// Seeded assignment of `n` subjects to splits, indexed by subject.
pub fn assign_splits(n: usize, ratio: [u32; 3], seed: u64) -> Result<Vec<Split>> {
    let (train, val, _) = split_counts(n, ratio)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", &[]));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

pub struct GenerateOptions<'a> {
    pub spec: &'a PhantomSpec,
    pub subjects: usize,
    pub seed: u64,
    pub split: [u32; 3],
    /// Replace training and validation labels with simulated atlas fusion.
    pub fusion: Option<&'a FusionSpec>,
}

/// Writes `images/`, `labels/` and `manifest.json` under `out`.
///
/// Images are stored as int16 and labels as uint8, both gzip-compressed.
/// Test subjects always keep their true labels.
pub fn generate_dataset(out: &Path, opts: &GenerateOptions) -> Result<Manifest> {
    if opts.subjects == 0 {
        return Err(CliError::Config("need at least one subject".into()));
    }
    opts.spec.validate()?;
    if let Some(f) = opts.fusion {
        f.validate()?;
    }
    for dir in ["images", "labels"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
    }
    let splits = assign_splits(opts.subjects, opts.split, opts.seed)?;
    let results = map_tasks(opts.subjects, |i| -> Result<Subject> {
        let id = subject_id(i);
        let seed = subject_seed(opts.seed, &id);
        let (mut image, truth) = generate_subject(opts.spec, seed)?;
        for v in &mut image.data {
            *v = v.round().min(i16::MAX as f32);
        }
        let center = label_centroid(&truth).ok_or(stemnet_core::Error::Empty("phantom labels"))?;
        let labels = match (opts.fusion, splits[i]) {
            (Some(f), Split::Train | Split::Val) => simulate_atlas_fusion(&truth, f, seed)?,
            _ => truth,
        };
        let image_rel = PathBuf::from("images").join(format!("{id}.nii.gz"));
        let label_rel = PathBuf::from("labels").join(format!("{id}.nii.gz"));
        nifti::save_volume(&out.join(&image_rel), &image, DataType::I16)?;
        nifti::save_labels(&out.join(&label_rel), &labels)?;
        Ok(Subject { id, image: image_rel, label: Some(label_rel), crop_center: Some(center), split: splits[i] })
    });
    let manifest = Manifest::new(results.into_iter().collect::<Result<Vec<_>>>()?);
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// A subject in original space, ready for cropping.
pub struct LoadedSubject {
    pub subject: Subject,
    /// Normalized to `[0, 1]`.
    pub image: Volume,
    pub labels: Option<LabelVolume>,
}

impl LoadedSubject {
    /// Manifest center, else the label centroid.
    pub fn window(&self, extent: usize) -> Result<CropWindow> {
        let center = match (self.subject.crop_center, &self.labels) {
            (Some(c), _) => c,
            (None, Some(l)) => label_centroid(l).ok_or(stemnet_core::Error::MissingCenter)?,
            (None, None) => return Err(stemnet_core::Error::MissingCenter.into()),
        };
        Ok(CropWindow::centered(self.image.dims, center, [extent; 3])?)
    }

    pub fn sample(&self, extent: usize) -> Result<Sample> {
        let labels = self.labels.as_ref().ok_or_else(|| {
            CliError::Manifest(format!("subject {} has no labels to train on", self.subject.id))
        })?;
        let w = self.window(extent)?;
        Ok(Sample::new(&crop_volume(&self.image, &w)?, &crop_labels(labels, &w)?)?)
    }
}

pub fn load_subject(manifest_path: &Path, s: &Subject) -> Result<LoadedSubject> {
    let image = normalize_intensity(&nifti::load_volume(&resolve(manifest_path, &s.image))?)?;
    let labels = match &s.label {
        Some(p) => {
            let l = nifti::load_labels(&resolve(manifest_path, p))?;
            if l.dims != image.dims {
                return Err(CliError::Manifest(format!(
                    "subject {}: label extents {:?} differ from image {:?}",
                    s.id, l.dims, image.dims
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok(LoadedSubject { subject: s.clone(), image, labels })
}

pub fn load_split(manifest_path: &Path, manifest: &Manifest, split: Split) -> Result<Vec<LoadedSubject>> {
    let subjects: Vec<&Subject> = manifest.split(split).collect();
    map_tasks(subjects.len(), |i| load_subject(manifest_path, subjects[i])).into_iter().collect()
}

pub fn samples(subjects: &[LoadedSubject], extent: usize) -> Result<Vec<Sample>> {
    map_tasks(subjects.len(), |i| subjects[i].sample(extent)).into_iter().collect()
}
