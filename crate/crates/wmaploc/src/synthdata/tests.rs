use super::*;
use augment::AugmentMode;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> DatasetSpec {
    DatasetSpec {
        classes: 3,
        train_per_class: 2,
        val_per_class: 1,
        test_per_class: 1,
        image_size: 32,
        ..DatasetSpec::default()
    }
}

fn tree_digest(root: &Path) -> Vec<(String, String)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, sha256_hex(&fs::read(&path).unwrap())));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn generation_is_byte_identical_for_same_seed() {
    let spec = tiny_spec();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    generate(&spec, d1.path()).unwrap();
    generate(&spec, d2.path()).unwrap();
    assert_eq!(tree_digest(d1.path()), tree_digest(d2.path()));
    let other = DatasetSpec { seed: 8, ..spec };
    let d3 = tempfile::tempdir().unwrap();
    generate(&other, d3.path()).unwrap();
    assert_ne!(tree_digest(d1.path()), tree_digest(d3.path()));
}

#[test]
fn manifest_counts_and_labels() {
    let spec = DatasetSpec {
        classes: 4,
        train_per_class: 5,
        val_per_class: 2,
        test_per_class: 2,
        image_size: 32,
        ..DatasetSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    generate(&spec, dir.path()).unwrap();
    let samples = load(dir.path(), Split::Train).unwrap();
    assert_eq!(samples.len(), 20);
    let mut labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    assert_eq!(labels, vec![0, 1, 2, 3]);
}

#[test]
fn every_gt_box_is_tight_box_of_mask() {
    let spec = tiny_spec();
    for split in Split::ALL {
        for s in render_split(&spec, split).unwrap() {
            assert_eq!(Sample::mask_tight_box(&s.gt_mask, s.h, s.w), Some(s.gt_box), "{}", s.id);
            assert!(s.gt_mask.iter().any(|&m| m), "{} mask empty", s.id);
        }
    }
}

#[test]
fn load_roundtrips_within_quantization() {
    let spec = tiny_spec();
    let dir = tempfile::tempdir().unwrap();
    generate(&spec, dir.path()).unwrap();
    let rendered = render_split(&spec, Split::Train).unwrap();
    let loaded = load(dir.path(), Split::Train).unwrap();
    assert_eq!(rendered.len(), loaded.len());
    for (a, b) in rendered.iter().zip(loaded.iter()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.gt_box, b.gt_box);
        assert_eq!(a.gt_mask, b.gt_mask);
        for (x, y) in a.image.iter().zip(b.image.iter()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn unknown_split_and_corrupt_file_errors() {
    assert!(matches!("training".parse::<Split>(), Err(DataError::UnknownSplit(_))));
    let spec = tiny_spec();
    let dir = tempfile::tempdir().unwrap();
    generate(&spec, dir.path()).unwrap();
    // corrupt one image
    let img = dir.path().join("train/images/train_c0_000.ppm");
    let mut bytes = fs::read(&img).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    fs::write(&img, &bytes).unwrap();
    match load(dir.path(), Split::Train) {
        Err(DataError::ChecksumMismatch(path)) => assert!(path.contains("train_c0_000")),
        other => panic!("expected checksum mismatch, got {other:?}"),
    }
    // remove a mask entirely
    let dir2 = tempfile::tempdir().unwrap();
    generate(&spec, dir2.path()).unwrap();
    fs::remove_file(dir2.path().join("train/masks/train_c1_000.pgm")).unwrap();
    match load(dir2.path(), Split::Train) {
        Err(DataError::Malformed { path, .. }) => assert!(path.contains("train_c1_000")),
        other => panic!("expected malformed error, got {other:?}"),
    }
}

#[test]
fn eval_augment_is_deterministic() {
    let spec = tiny_spec();
    let (sample, _) = render::render_sample(&spec, Split::Val, 0, 0).unwrap();
    let mut rng1 = ChaCha8Rng::seed_from_u64(1);
    let mut rng2 = ChaCha8Rng::seed_from_u64(999);
    let a = augment(&sample, &mut rng1, AugmentMode::Eval).unwrap();
    let b = augment(&sample, &mut rng2, AugmentMode::Eval).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.gt_box, b.gt_box);
    assert_eq!(a.gt_mask, b.gt_mask);
}

#[test]
fn forced_flip_mirrors_box_coordinates() {
    let spec = DatasetSpec { image_size: 64, ..tiny_spec() };
    let (sample, _) = render::render_sample(&spec, Split::Train, 1, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = AugmentParams { resize_to: 64, crop: 64, flip_prob: 1.0 };
    let flipped = augment_with(&sample, &mut rng, AugmentMode::Train, params).unwrap();
    let w = sample.w;
    assert_eq!(flipped.gt_box.x1, w - sample.gt_box.x2);
    assert_eq!(flipped.gt_box.x2, w - sample.gt_box.x1);
    assert_eq!(flipped.gt_box.y1, sample.gt_box.y1);
    assert_eq!(flipped.gt_box.y2, sample.gt_box.y2);
}

#[test]
fn identity_augmentation_is_a_noop() {
    let spec = tiny_spec();
    let (sample, _) = render::render_sample(&spec, Split::Test, 2, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = AugmentParams { resize_to: spec.image_size, crop: spec.image_size, flip_prob: 0.0 };
    let out = augment_with(&sample, &mut rng, AugmentMode::Train, params).unwrap();
    assert_eq!(out.image, sample.image);
    assert_eq!(out.gt_mask, sample.gt_mask);
    assert_eq!(out.gt_box, sample.gt_box);
}

#[test]
fn impossible_object_scale_errors() {
    let spec = DatasetSpec { image_size: 16, object_scale: (0.45, 0.49), ..tiny_spec() };
    // radius ~7.2..7.8 px + margin cannot fit a 16 px image
    match render::render_sample(&spec, Split::Train, 0, 0) {
        Err(DataError::CannotFit(_)) => {}
        other => panic!("expected CannotFit, got {other:?}"),
    }
}

#[test]
fn spec_validation_rejects_bad_fields() {
    assert!(DatasetSpec { classes: 1, ..tiny_spec() }.validate().is_err());
    assert!(DatasetSpec { part_fraction: 0.0, ..tiny_spec() }.validate().is_err());
    assert!(DatasetSpec { part_fraction: 0.31, ..tiny_spec() }.validate().is_err());
    assert!(DatasetSpec { val_per_class: 0, ..tiny_spec() }.validate().is_err());
    assert!(DatasetSpec { object_scale: (0.3, 0.2), ..tiny_spec() }.validate().is_err());
    assert!(tiny_spec().validate().is_ok());
}
