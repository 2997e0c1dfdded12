use std::fs;
use std::path::{Path, PathBuf};

use stemnet::dataset::{self, assign_splits, GenerateOptions, DEFAULT_SPLIT};
use stemnet::manifest::{Manifest, Split, Subject};
use stemnet::nifti;
use stemnet::CliError;
use stemnet_core::metrics::per_class_dsc;
use stemnet_core::phantom::{FusionSpec, PhantomSpec};

fn generate(out: &Path, n: usize, split: [u32; 3], fusion: Option<&FusionSpec>) -> Manifest {
    let spec = PhantomSpec::with_extent(48);
    dataset::generate_dataset(out, &GenerateOptions { spec: &spec, subjects: n, seed: 6, split, fusion }).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "labels"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn default_proportions() {
    let s = assign_splits(50, DEFAULT_SPLIT, 0).unwrap();
    let count = |k| s.iter().filter(|&&x| x == k).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (27, 8, 15));
    assert_ne!(s, assign_splits(50, DEFAULT_SPLIT, 1).unwrap());
}

#[test]
fn generation_is_reproducible_and_complete() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate(a.path(), 5, [3, 1, 1], None);
    generate(b.path(), 5, [3, 1, 1], None);
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_eq!(m.counts(), [3, 1, 1]);
    assert_eq!(Manifest::load(&a.path().join("manifest.json")).unwrap(), m);

    let loaded = dataset::load_split(&a.path().join("manifest.json"), &m, Split::Train).unwrap();
    assert_eq!(loaded.len(), 3);
    for s in &loaded {
        let lo = s.image.data.iter().cloned().fold(f32::MAX, f32::min);
        let hi = s.image.data.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        let sample = s.sample(32).unwrap();
        assert_eq!(sample.image.shape(), [1, 1, 32, 32, 32]);
        // the crop around the label centroid keeps every structure
        assert!(sample.labels.counts().iter().all(|&c| c > 0));
    }
}

#[test]
fn fusion_touches_only_training_and_validation_labels() {
    let (plain, fused) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = generate(plain.path(), 4, [2, 1, 1], None);
    generate(fused.path(), 4, [2, 1, 1], Some(&FusionSpec::default()));
    for s in &m.subjects {
        let rel = s.label.as_ref().unwrap();
        let a = nifti::load_labels(&plain.path().join(rel)).unwrap();
        let b = nifti::load_labels(&fused.path().join(rel)).unwrap();
        if s.split == Split::Test {
            assert_eq!(a, b);
        } else {
            let d = per_class_dsc(&b, &a).unwrap();
            assert!(d[1..].iter().all(|&x| x > 0.4 && x < 1.0), "{} {d:?}", s.id);
        }
        assert_eq!(
            fs::read(plain.path().join(&s.image)).unwrap(),
            fs::read(fused.path().join(&s.image)).unwrap()
        );
    }
}

#[test]
fn manifest_validation() {
    let subject = |id: &str, split, label: bool| Subject {
        id: id.into(),
        image: format!("{id}.nii").into(),
        label: label.then(|| format!("{id}_seg.nii").into()),
        crop_center: None,
        split,
    };
    let ok = Manifest::new(vec![subject("a", Split::Train, true), subject("b", Split::Test, false)]);
    assert_eq!(Manifest::from_json(&ok.to_json()).unwrap(), ok);
    let dup = Manifest::new(vec![subject("a", Split::Train, true), subject("a", Split::Val, true)]);
    assert!(matches!(Manifest::from_json(&dup.to_json()), Err(CliError::Manifest(_))));
    let unlabeled = Manifest::new(vec![subject("a", Split::Val, false)]);
    assert!(matches!(Manifest::from_json(&unlabeled.to_json()), Err(CliError::Manifest(_))));
    assert!(Manifest::from_json(r#"{"v": 2, "subjects": []}"#).is_err());
}

#[test]
fn missing_center_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), 3, [1, 1, 1], None);
    let mut s = m.split(Split::Test).next().unwrap().clone();
    s.crop_center = None;
    s.label = None;
    let loaded = dataset::load_subject(&dir.path().join("manifest.json"), &s).unwrap();
    let err = loaded.window(32).unwrap_err();
    assert!(matches!(err, CliError::Core(stemnet_core::Error::MissingCenter)));
    assert_eq!(err.exit_code(), 2);
}
