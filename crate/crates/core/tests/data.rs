//! Loader behaviour on archives written to a temporary directory.

use std::fs;
use std::path::Path;

use proptest::prelude::*;

use smallvae::data::{
    load_cifar10, parse_cifar_records, synth_dataset, DataError, SynthKind, CIFAR_RECORD, CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
};

/// `n` records whose label is `i % 10` and whose pixels are `(i + j) % 256`.
fn records(n: usize, offset: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for i in offset..offset + n {
        out.push((i % 10) as u8);
        out.extend((0..CIFAR_RECORD - 1).map(|j| ((i + j) % 256) as u8));
    }
    out
}

fn write_archive(dir: &Path, per_train_file: usize, test: usize) {
    for (k, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        fs::write(dir.join(name), records(per_train_file, k * per_train_file)).unwrap();
    }
    fs::write(dir.join(CIFAR_TEST_FILE), records(test, 0)).unwrap();
}

#[test]
fn full_size_archive_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path(), 10_000, 10_000);
    let (train, test) = load_cifar10(dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (50_000, 10_000));
    assert_eq!(train.image_shape(), [3, 32, 32]);
    let counts = train.class_counts().unwrap();
    assert!(counts.values().all(|&c| c == 5_000));
    // Training files are concatenated in order: record 10000 opens data_batch_2.
    assert_eq!(train.labels().unwrap()[10_000], 0);
    assert_eq!(train.image(10_001)[0], (10_001 % 256) as f32 / 255.0);
}

#[test]
fn missing_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path(), 2, 2);
    fs::remove_file(dir.path().join(CIFAR_TRAIN_FILES[3])).unwrap();
    let err = load_cifar10(dir.path()).unwrap_err();
    assert!(matches!(err, DataError::MissingFile(_)), "{err}");
    assert!(err.to_string().contains(CIFAR_TRAIN_FILES[3]), "{err}");
    assert!(matches!(load_cifar10(&dir.path().join("nope")), Err(DataError::MissingFile(_))));
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_archive(dir.path(), 2, 2);
    let mut bytes = records(2, 0);
    bytes.pop();
    fs::write(dir.path().join(CIFAR_TEST_FILE), bytes).unwrap();
    let err = load_cifar10(dir.path()).unwrap_err();
    assert!(matches!(err, DataError::BadSize { .. }), "{err}");
    assert!(err.to_string().contains(CIFAR_TEST_FILE), "{err}");
}

#[test]
fn synthetic_data_is_reproducible() {
    for kind in [SynthKind::Constant, SynthKind::GradientPatterns, SynthKind::TwoGaussians] {
        let a = synth_dataset(kind, 20, 6, 9);
        let b = synth_dataset(kind, 20, 6, 9);
        assert_eq!(a.images(), b.images());
        assert_eq!(a.labels(), b.labels());
    }
    let c = synth_dataset(SynthKind::Constant, 3, 4, 0);
    assert!(c.images().data().iter().all(|&v| v == 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pixels_are_bytes_over_255(bytes in prop::collection::vec(any::<u8>(), CIFAR_RECORD - 1), label in 0u8..10) {
        let mut rec = vec![label];
        rec.extend(&bytes);
        let (pixels, labels) = parse_cifar_records(&rec, "p.bin".as_ref()).unwrap();
        prop_assert_eq!(labels, vec![label]);
        for (p, b) in pixels.iter().zip(&bytes) {
            prop_assert!((0.0..=1.0).contains(p));
            prop_assert_eq!(*p, *b as f32 / 255.0);
        }
    }
}
