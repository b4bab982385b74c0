use std::collections::BTreeSet;

use mmcc::data::{
    binarize_mask, decode_netpbm, encode_netpbm, load_dataset, load_netpbm, make_splits, resize, save_dataset,
    save_netpbm, synth_polyp_dataset, DataError, Difficulty, ResizeMode, Role, SplitKind, SplitPlan, WORKING_SIZE,
};
use mmcc::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_8bit(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w)
        .map(|_| rng.random_range(0..=255u8) as f32 / 255.0)
        .collect();
    Tensor::new(vec![c, h, w], data).unwrap()
}

#[test]
fn netpbm_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (c, name) in [(1, "a.pgm"), (3, "b.ppm")] {
        let img = random_8bit(c, 7, 11, c as u64);
        let path = dir.path().join(name);
        save_netpbm(&img, &path).unwrap();
        let back = load_netpbm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let same = back
            .data()
            .iter()
            .zip(img.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name} changed on round trip");
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..2], if c == 1 { b"P5" } else { b"P6" });
    }
}

#[test]
fn p5_payload_scaling() {
    let mut bytes = b"P5\n2 2\n255\n".to_vec();
    bytes.extend([0u8, 255, 128, 64]);
    let t = decode_netpbm(&bytes).unwrap();
    assert_eq!(t.shape(), &[1, 2, 2]);
    assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
}

#[test]
fn ascii_and_binary_variants_agree() {
    let ascii_gray = b"P2\n# comment\n3 1\n15\n0 15\n5\n";
    let t = decode_netpbm(ascii_gray).unwrap();
    assert_eq!(t.data(), &[0.0, 1.0, 5.0 / 15.0]);

    let ascii_rgb = b"P3 2 1 255 255 0 0 0 0 255";
    let mut binary_rgb = b"P6 2 1 255 ".to_vec();
    binary_rgb.extend([255u8, 0, 0, 0, 0, 255]);
    let a = decode_netpbm(ascii_rgb).unwrap();
    let b = decode_netpbm(&binary_rgb).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[3, 1, 2]);
    assert_eq!(a.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn sixteen_bit_samples_are_big_endian() {
    let mut bytes = b"P5 2 1 65535\n".to_vec();
    bytes.extend([0xff, 0xff, 0x80, 0x00]);
    let t = decode_netpbm(&bytes).unwrap();
    assert_eq!(t.data(), &[1.0, 32768.0 / 65535.0]);
}

#[test]
fn netpbm_errors_are_distinct() {
    let mut truncated = b"P5\n4 4\n255\n".to_vec();
    truncated.extend([1u8; 10]);
    assert!(matches!(
        decode_netpbm(&truncated),
        Err(DataError::Truncated {
            expected: 16,
            actual: 10
        })
    ));
    assert!(matches!(
        decode_netpbm(b"P2 2 2 255 1 2 3"),
        Err(DataError::Truncated { .. })
    ));
    assert!(matches!(
        decode_netpbm(b"P4\n2 2\n"),
        Err(DataError::UnsupportedMagic(_))
    ));
    assert!(matches!(decode_netpbm(b"GIF89a"), Err(DataError::UnsupportedMagic(_))));
    assert!(matches!(
        decode_netpbm(b"P5\nx 2\n255\n"),
        Err(DataError::MalformedHeader(_))
    ));
    assert!(matches!(
        decode_netpbm(b"P5\n2 2\n70000\n"),
        Err(DataError::MalformedHeader(_))
    ));
    assert!(matches!(
        decode_netpbm(b"P5\n0 2\n255\n"),
        Err(DataError::MalformedHeader(_))
    ));
    assert!(matches!(
        decode_netpbm(b"P2 1 1 10 11"),
        Err(DataError::MalformedPayload(_))
    ));
    let missing = tempfile::tempdir().unwrap().path().join("none.pgm");
    assert!(matches!(load_netpbm(missing), Err(DataError::Io { .. })));
    let bad = Tensor::<f32>::zeros(vec![2, 3, 3]);
    assert!(matches!(encode_netpbm(&bad), Err(DataError::Shape(_))));
}

#[test]
fn bilinear_half_pixel_example() {
    let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let r = resize(&t, 2, 4, ResizeMode::Bilinear).unwrap();
    assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn resize_to_working_size_and_constants() {
    let img = random_8bit(3, 50, 70, 3);
    let r = resize(&img, WORKING_SIZE.0, WORKING_SIZE.1, ResizeMode::Bilinear).unwrap();
    assert_eq!(r.shape(), &[3, 288, 384]);
    let batched = Tensor::full(vec![2, 3, 5, 9], 0.3f32);
    for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
        let r = resize(&batched, 17, 4, mode).unwrap();
        assert_eq!(r.shape(), &[2, 3, 17, 4]);
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
    assert!(resize(&batched, 0, 4, ResizeMode::Nearest).is_err());
}

/// Independent per-pixel oracle: source index from the mapped output center.
fn nearest_oracle(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![];
    for oy in 0..oh {
        for ox in 0..ow {
            let sy = ((2 * oy + 1) * h / (2 * oh)).min(h - 1);
            let sx = ((2 * ox + 1) * w / (2 * ow)).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

#[test]
fn nearest_matches_integer_oracle() {
    for (seed, (h, w, oh, ow)) in [(5, 9, 12, 4), (8, 8, 3, 3), (3, 7, 10, 21), (16, 12, 288, 384)]
        .iter()
        .enumerate()
    {
        let m = binarize_mask(&random_8bit(1, *h, *w, seed as u64));
        let r = resize(&m, *oh, *ow, ResizeMode::Nearest).unwrap();
        assert_eq!(r.data(), nearest_oracle(m.data(), *h, *w, *oh, *ow).as_slice());
    }
}

#[test]
fn binarize_examples() {
    let all = |v: f32| binarize_mask(&Tensor::full(vec![1, 3, 3], v));
    assert!(all(0.6).data().iter().all(|&v| v == 1.0));
    assert!(all(0.4).data().iter().all(|&v| v == 0.0));
    let mixed = random_8bit(1, 16, 16, 9);
    let b = binarize_mask(&mixed);
    for (m, o) in mixed.data().iter().zip(b.data()) {
        let expected = if *m >= 0.5 { 1.0 } else { 0.0 };
        assert_eq!(*o, expected);
    }
}

#[test]
fn table1_counts() {
    for (n, expected) in [(1000, (800, 100, 100)), (612, (490, 61, 61))] {
        let ids: Vec<String> = (0..n).map(|i| format!("img{i:04}")).collect();
        let plan = make_splits(&ids, SplitKind::Table1, 7).unwrap();
        let got = (plan.count(Role::Train), plan.count(Role::Val), plan.count(Role::Test));
        assert_eq!(got, expected, "n = {n}");
    }
}

#[test]
fn kfold_of_ten() {
    let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let plan = make_splits(&ids, SplitKind::Kfold(5), 1).unwrap();
    assert_eq!(plan.fold_count(), 5);
    let mut union = BTreeSet::new();
    for k in 0..5 {
        let fold = plan.ids(Role::Fold(k));
        assert_eq!(fold.len(), 2);
        for id in fold {
            assert!(union.insert(id.to_string()));
        }
    }
    assert_eq!(union.len(), 10);
    assert!(matches!(
        make_splits(&ids, SplitKind::Kfold(11), 1),
        Err(DataError::TooFewIds { k: 11, n: 10 })
    ));
    assert!(make_splits::<String>(&[], SplitKind::Table1, 1).is_err());
    assert!(make_splits(&["a", "a"], SplitKind::Table1, 1).is_err());
}

#[test]
fn splits_are_seeded() {
    let ids: Vec<String> = (0..50).map(|i| format!("{i}")).collect();
    let a = make_splits(&ids, SplitKind::Table1, 3).unwrap();
    let b = make_splits(&ids, SplitKind::Table1, 3).unwrap();
    let c = make_splits(&ids, SplitKind::Table1, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut reversed = ids.clone();
    reversed.reverse();
    assert_eq!(make_splits(&reversed, SplitKind::Table1, 3).unwrap(), a);
}

#[test]
fn split_file_round_trip() {
    let ids: Vec<String> = (0..13).map(|i| format!("s{i}")).collect();
    let dir = tempfile::tempdir().unwrap();
    for kind in [SplitKind::Table1, SplitKind::Kfold(3)] {
        let plan = make_splits(&ids, kind, 11).unwrap();
        let path = dir.path().join("split.tsv");
        plan.save(&path).unwrap();
        assert_eq!(SplitPlan::load(&path).unwrap(), plan);
        assert!(plan.to_text().lines().skip(1).all(|l| l.split('\t').count() == 2));
    }
    assert!(matches!(
        SplitPlan::from_text("a\tbogus\n"),
        Err(DataError::SplitFile { line: 1, .. })
    ));
    assert!(SplitPlan::from_text("a\ttrain\na\ttest\n").is_err());
}

#[test]
fn synth_is_deterministic_and_in_contract() {
    for difficulty in [Difficulty::Easy, Difficulty::Hard] {
        let a = synth_polyp_dataset(12, 32, 48, 5, difficulty).unwrap();
        let b = synth_polyp_dataset(12, 32, 48, 5, difficulty).unwrap();
        assert_eq!(a, b);
        let prefix = synth_polyp_dataset(3, 32, 48, 5, difficulty).unwrap();
        assert_eq!(&a[..3], prefix.as_slice());
        for s in &a {
            assert_eq!(s.image.shape(), &[3, 32, 48]);
            assert_eq!(s.mask.shape(), &[1, 32, 48]);
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let fraction = s.mask.sum() / s.mask.numel() as f32;
            assert!((0.02..=0.4).contains(&fraction), "{} fraction {fraction}", s.id);
        }
    }
    assert_ne!(
        synth_polyp_dataset(2, 32, 48, 5, Difficulty::Easy).unwrap(),
        synth_polyp_dataset(2, 32, 48, 6, Difficulty::Easy).unwrap()
    );
    assert!(synth_polyp_dataset(1, 30, 48, 0, Difficulty::Easy).is_err());
    assert!(synth_polyp_dataset(0, 32, 48, 0, Difficulty::Easy).is_err());
}

fn contrast_gap(samples: &[mmcc::data::SamplePair]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let hw = s.mask.numel();
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
        for p in 0..hw {
            let v: f64 = (0..3).map(|c| s.image.data()[c * hw + p] as f64).sum::<f64>() / 3.0;
            if s.mask.data()[p] == 1.0 {
                fg += v;
                nf += 1;
            } else {
                bg += v;
                nb += 1;
            }
        }
        total += (fg / nf as f64 - bg / nb as f64).abs();
    }
    total / samples.len() as f64
}

#[test]
fn easy_contrast_exceeds_hard() {
    let easy = contrast_gap(&synth_polyp_dataset(100, 32, 48, 2, Difficulty::Easy).unwrap());
    let hard = contrast_gap(&synth_polyp_dataset(100, 32, 48, 2, Difficulty::Hard).unwrap());
    assert!(easy > hard, "easy gap {easy} vs hard gap {hard}");
    assert!(hard > 0.0);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_polyp_dataset(4, 16, 24, 1, Difficulty::Easy).unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let loaded = load_dataset(dir.path(), "synth_easy", None).unwrap();
    assert_eq!(loaded.len(), 4);
    for (a, b) in loaded.iter().zip(&samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        let err = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }
    let resized = load_dataset(dir.path(), "synth_easy", Some((32, 48))).unwrap();
    assert!(resized
        .iter()
        .all(|s| s.image.shape() == [3, 32, 48] && s.mask.shape() == [1, 32, 48]));
    assert!(resized
        .iter()
        .all(|s| s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0)));

    std::fs::remove_file(dir.path().join("masks").join("synth_00002.pgm")).unwrap();
    assert!(matches!(
        load_dataset(dir.path(), "x", None),
        Err(DataError::MissingMask(id)) if id == "synth_00002"
    ));
    let empty = tempfile::tempdir().unwrap();
    std::fs::create_dir(empty.path().join("images")).unwrap();
    assert!(matches!(
        load_dataset(empty.path(), "x", None),
        Err(DataError::EmptyDataset(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_plans_partition_ids(n in 1usize..120, k in 1usize..8, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let table = make_splits(&ids, SplitKind::Table1, seed).unwrap();
        prop_assert_eq!(table.assignments.len(), n);
        prop_assert_eq!(table.count(Role::Train) + table.count(Role::Val) + table.count(Role::Test), n);
        let listed: BTreeSet<&str> = table.assignments.iter().map(|(id, _)| id.as_str()).collect();
        prop_assert_eq!(listed.len(), n);
        if k <= n {
            let plan = make_splits(&ids, SplitKind::Kfold(k), seed).unwrap();
            let sizes: Vec<usize> = (0..k).map(|f| plan.count(Role::Fold(f))).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn nearest_keeps_masks_binary(h in 1usize..20, w in 1usize..20, oh in 1usize..40, ow in 1usize..40, seed in any::<u64>()) {
        let m = binarize_mask(&random_8bit(1, h, w, seed));
        let r = resize(&m, oh, ow, ResizeMode::Nearest).unwrap();
        prop_assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn bilinear_stays_within_input_range(h in 1usize..12, w in 1usize..12, oh in 1usize..30, ow in 1usize..30, seed in any::<u64>()) {
        let img = random_8bit(2, h, w, seed);
        let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(l, u), &v| (l.min(v), u.max(v)));
        let r = resize(&img, oh, ow, ResizeMode::Bilinear).unwrap();
        prop_assert!(r.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }
}
