use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stemnet::checkpoint;
use stemnet::config::RunConfig;
use stemnet::manifest::{Manifest, Split};
use stemnet::nifti;
use stemnet_core::unet::{UNetConfig, UNetParams};

fn stemnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stemnet")).args(args).env_remove("STEMNET_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A three-subject cohort at 32³ with one subject per split.
fn cohort(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = stemnet(&["phantom-gen", "--out", p(&data), "--subjects", "3", "--seed", "2", "--extent", "32", "--split", "1:1:1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

const TINY: [&str; 6] = ["--levels", "2", "--base-channels", "2", "--input-extent", "16"];

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&stemnet(&["phantom-gen"])), 2);
    assert_eq!(code(&stemnet(&["frobnicate"])), 2);
    assert_eq!(code(&stemnet(&["gradcheck", "--seeds", "0"])), 2);
    assert_eq!(code(&stemnet(&["--help"])), 0);
}

#[test]
fn non_positive_learning_rate_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = cohort(dir.path());
    let manifest = data.join("manifest.json");
    for lr in ["0", "-1"] {
        let out = dir.path().join(format!("run{lr}"));
        let o = stemnet(&["train", "--manifest", p(&manifest), "--out", p(&out), "--lr", lr]);
        assert_eq!(code(&o), 2, "{}", stderr(&o));
        assert!(stderr(&o).contains("learning"), "{}", stderr(&o));
        assert!(!out.join("final.bsun").exists());
    }
}

#[test]
fn zero_epochs_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = cohort(dir.path());
    let out = dir.path().join("run");
    let manifest = data.join("manifest.json");
    let mut args = vec!["train", "--manifest", p(&manifest)];
    args.extend(["--out", p(&out), "--epochs", "0", "--pretrain-epochs", "0", "--seed", "9"]);
    args.extend(TINY);
    let o = stemnet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = checkpoint::load(&out.join("final.bsun")).unwrap();
    let config = UNetConfig { levels: 2, base_channels: 2, input_extent: 16, ..Default::default() };
    assert_eq!(ck.params, UNetParams::init(&config, 9).unwrap());
    assert!(!out.join("pretrain.bsun").exists());

    // the echoed config reflects the flags
    let echoed = RunConfig::load(&out.join("effective_config.json")).unwrap();
    assert_eq!(echoed.unet, config);
    assert_eq!((echoed.train.seed, echoed.train.final_epochs), (9, 0));
}

#[test]
fn predict_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = cohort(dir.path());
    let manifest_path = data.join("manifest.json");
    let run = dir.path().join("run");
    let mut args = vec!["train", "--manifest", p(&manifest_path), "--out", p(&run), "--epochs", "1", "--pretrain-epochs", "1"];
    args.extend(TINY);
    assert_eq!(code(&stemnet(&args)), 0);
    let ck = run.join("final.bsun");
    let log = fs::read_to_string(run.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let m = Manifest::load(&manifest_path).unwrap();
    let test = m.split(Split::Test).next().unwrap();
    let image = data.join(&test.image);
    let pred = dir.path().join("pred.nii.gz");

    // no center and no manifest: the crop cannot be placed
    let o = stemnet(&["predict", "--checkpoint", p(&ck), "--in", p(&image), "--out", p(&pred)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("center"), "{}", stderr(&o));
    assert!(!pred.exists());

    let o = stemnet(&["predict", "--checkpoint", p(&ck), "--in", p(&image), "--manifest", p(&manifest_path), "--out", p(&pred)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels = nifti::load_labels(&pred).unwrap();
    assert!(labels.labels.iter().all(|&c| c < 5));
    assert_eq!(labels.dims, [32; 3]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    for name in ["pons", "inference"] {
        assert!(stdout.contains(name), "{stdout}");
    }

    // a prediction directory covering every test subject evaluates cleanly
    let preds = dir.path().join("preds");
    let report = dir.path().join("report.json");
    let o = stemnet(&[
        "evaluate", "--manifest", p(&manifest_path), "--checkpoint", p(&ck),
        "--save-predictions", p(&preds), "--report", p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["subjects"].as_array().unwrap().len(), 1);

    let refs = dir.path().join("refs");
    fs::create_dir(&refs).unwrap();
    fs::copy(data.join(test.label.as_ref().unwrap()), refs.join(format!("{}.nii.gz", test.id))).unwrap();
    let o = stemnet(&["evaluate", "--pred", p(&preds), "--ref", p(&refs)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // an extra reference subject is a mismatch
    fs::copy(refs.join(format!("{}.nii.gz", test.id)), refs.join("ghost.nii.gz")).unwrap();
    let o = stemnet(&["evaluate", "--pred", p(&preds), "--ref", p(&refs)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ghost"), "{}", stderr(&o));
}

#[test]
fn injected_gradient_fault_is_reported() {
    let o = stemnet(&["gradcheck", "--level", "layers", "--seeds", "1", "--inject-sign-flip", "relu"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("relu"), "{}", stderr(&o));
    let o = stemnet(&["gradcheck", "--level", "layers", "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_stemnet"))
            .args(["phantom-gen", "--out", p(&out), "--subjects", "1", "--extent", "32"])
            .env("STEMNET_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("zero")), 2);
    assert_eq!(code(&run("0")), 2);
    assert_eq!(code(&run("1")), 0);
    assert_eq!(RunConfig::load(&out.join("effective_config.json")).unwrap().threads, Some(1));
}
