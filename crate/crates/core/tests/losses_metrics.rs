use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemnet_core::loss::{
    compute_class_weights, soft_dice_loss, soft_dice_per_class, weighted_cross_entropy, ClassWeights,
};
use stemnet_core::metrics::{cohort_summary, dsc, mp_area_ratio, per_class_dsc, structure_volumes};
use stemnet_core::preprocess::one_hot_encode;
use stemnet_core::{LabelVolume, Tensor, NUM_CLASSES};

fn random_labels(r: &mut ChaCha8Rng, dims: [usize; 3]) -> LabelVolume {
    let n = dims.iter().product();
    LabelVolume::new(dims, [1.0; 3], (0..n).map(|_| r.random_range(0..NUM_CLASSES as u8)).collect()).unwrap()
}

#[test]
fn dsc_hand_cases() {
    let x = [true, true, false, true];
    assert_eq!(dsc(&x, &x).unwrap(), 1.0);
    assert_eq!(dsc(&[true, false], &[false, true]).unwrap(), 0.0);
    // |X| = 4, |Y| = 6, |X∩Y| = 3
    let a: Vec<bool> = (0..8).map(|i| i < 4).collect();
    let b: Vec<bool> = (0..8).map(|i| (1..7).contains(&i)).collect();
    assert_eq!(dsc(&a, &b).unwrap(), 0.6);
}

#[test]
fn per_class_dsc_matches_set_counting() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let dims = [r.random_range(1..6), r.random_range(1..6), r.random_range(1..6)];
        let (p, q) = (random_labels(&mut r, dims), random_labels(&mut r, dims));
        let got = per_class_dsc(&p, &q).unwrap();
        for c in 0..NUM_CLASSES as u8 {
            let xs: std::collections::BTreeSet<usize> = (0..p.len()).filter(|&i| p.labels[i] == c).collect();
            let ys: std::collections::BTreeSet<usize> = (0..q.len()).filter(|&i| q.labels[i] == c).collect();
            let want = if xs.is_empty() && ys.is_empty() {
                1.0
            } else {
                2.0 * xs.intersection(&ys).count() as f64 / (xs.len() + ys.len()) as f64
            };
            assert_eq!(got[c as usize], want);
        }
    }
}

#[test]
fn identical_and_missing_predictions() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let l = random_labels(&mut r, [4, 4, 4]);
    assert_eq!(per_class_dsc(&l, &l).unwrap(), [1.0; NUM_CLASSES]);
    let bg = LabelVolume::background([4, 4, 4], [1.0; 3]);
    assert_eq!(per_class_dsc(&bg, &l).unwrap()[1], 0.0);
}

#[test]
fn hard_soft_dice_equals_dsc() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (p, q) = (random_labels(&mut r, [5, 4, 3]), random_labels(&mut r, [5, 4, 3]));
        let soft = soft_dice_per_class(
            &one_hot_encode::<f64>(&p).unwrap(),
            &one_hot_encode::<f64>(&q).unwrap(),
            0.0,
        )
        .unwrap();
        let hard = per_class_dsc(&p, &q).unwrap();
        for c in 0..NUM_CLASSES {
            assert!((soft[c] - hard[c]).abs() <= 1e-15, "class {c}: {} vs {}", soft[c], hard[c]);
        }
    }
}

#[test]
fn dice_loss_hand_case() {
    let p = Tensor::from_vec(&[1, 2, 1, 1, 1], vec![0.5, 0.5]).unwrap();
    let g = Tensor::from_vec(&[1, 2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
    let out = soft_dice_loss(&p, &g, 0.0).unwrap();
    assert!((out.loss - 0.6).abs() < 1e-15);
}

#[test]
fn inverse_frequency_weights() {
    let w = ClassWeights::from_frequencies(&[0.916, 0.05, 0.0225, 0.011, 0.0008]).unwrap();
    let want = [1.0, 0.916 / 0.05, 0.916 / 0.0225, 0.916 / 0.011, 0.916 / 0.0008];
    for (a, b) in w.as_slice().iter().zip(want) {
        assert!((a / b - 1.0).abs() < 1e-12);
    }
    assert!((w.as_slice()[4] / 1145.0 - 1.0).abs() < 0.01);
    assert_eq!(ClassWeights::from_frequencies(&[0.5, 0.5]).unwrap().as_slice(), [1.0, 1.0]);
    assert!(ClassWeights::from_frequencies(&[1.0, 0.0]).is_err());
}

#[test]
fn weights_from_label_volumes() {
    // 8 voxels: 4 background, 2 pons, 1 midbrain, 1 medulla, and one SCP in the second volume
    let a = LabelVolume::new([8, 1, 1], [1.0; 3], vec![0, 0, 0, 0, 1, 1, 2, 3]).unwrap();
    let b = LabelVolume::new([2, 1, 1], [1.0; 3], vec![0, 4]).unwrap();
    let w = compute_class_weights(&[&a, &b]).unwrap();
    assert_eq!(w.as_slice(), [1.0, 2.5, 5.0, 5.0, 5.0]);
    assert!(compute_class_weights(&[&a]).is_err());
}

fn plain_ce(logits: &[f64], classes: usize, targets: &[usize]) -> f64 {
    let vol = targets.len();
    let mut total = 0.0;
    for (v, &t) in targets.iter().enumerate() {
        let z: Vec<f64> = (0..classes).map(|c| logits[c * vol + v]).collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - z[t];
    }
    total / vol as f64
}

#[test]
fn wce_reference_values() {
    let uniform = Tensor::<f64>::zeros(&[1, 5, 1, 1, 1]);
    let target = Tensor::from_vec(&[1, 5, 1, 1, 1], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let out = weighted_cross_entropy(&uniform, &target, &ClassWeights::uniform(5)).unwrap();
    assert!((out.loss + 0.2f64.ln()).abs() < 1e-6);

    let mut r = ChaCha8Rng::seed_from_u64(8);
    let vol = 30;
    let logits: Vec<f64> = (0..5 * vol).map(|_| r.random_range(-3.0..3.0)).collect();
    let targets: Vec<usize> = (0..vol).map(|_| r.random_range(0..5)).collect();
    let mut onehot = vec![0.0; 5 * vol];
    for (v, &t) in targets.iter().enumerate() {
        onehot[t * vol + v] = 1.0;
    }
    let lt = Tensor::from_vec(&[1, 5, 1, 1, vol], logits.clone()).unwrap();
    let tt = Tensor::from_vec(&[1, 5, 1, 1, vol], onehot).unwrap();
    let eq = weighted_cross_entropy(&lt, &tt, &ClassWeights(vec![3.0; 5])).unwrap();
    assert!((eq.loss - plain_ce(&logits, 5, &targets)).abs() < 1e-7);

    let mut confident = vec![0.0; 5];
    confident[2] = 50.0;
    let c = Tensor::from_vec(&[1, 5, 1, 1, 1], confident).unwrap();
    assert!(weighted_cross_entropy(&c, &target, &ClassWeights::uniform(5)).unwrap().loss < 1e-6);
}

#[test]
fn cohort_mean_and_sample_std() {
    let s = cohort_summary(&[[1.0, 0.9, 0.8, 0.7, 0.6], [1.0, 0.7, 0.8, 0.5, 0.2]]).unwrap();
    assert!((s[1].mean - 0.8).abs() < 1e-12);
    assert!((s[1].std - 0.02f64.sqrt()).abs() < 1e-12);
    assert_eq!(s[2].std, 0.0);
}

#[test]
fn volumes_and_midsagittal_ratio() {
    let dims = [5, 45, 45];
    let mut l = LabelVolume::background(dims, [1.0, 1.0, 1.0]);
    // midbrain block of 100 and pons block of 400 voxels on the centre slice x = 2
    for z in 0..10 {
        for y in 0..10 {
            l.labels[(z * 45 + y) * 5 + 2] = 2;
        }
    }
    for z in 20..40 {
        for y in 20..40 {
            l.labels[(z * 45 + y) * 5 + 2] = 1;
        }
    }
    let m = mp_area_ratio(&l).unwrap();
    assert_eq!(m.slice, 2);
    assert_eq!(m.ratio, 0.25);
    let v = structure_volumes(&LabelVolume { spacing: [0.5, 1.0, 2.0], ..l.clone() });
    assert_eq!(v[1], 400.0);
    assert_eq!(v[2], 100.0);

    // translation along y and z leaves the ratio alone
    let mut moved = LabelVolume::background(dims, [1.0; 3]);
    for i in 0..l.len() {
        let (x, y, z) = (i % 5, (i / 5) % 45, i / 225);
        if y + 3 < 45 && z + 2 < 45 {
            moved.labels[((z + 2) * 45 + y + 3) * 5 + x] = l.labels[i];
        }
    }
    assert_eq!(mp_area_ratio(&moved).unwrap().ratio, 0.25);
}
