use std::fs;

use robustlab::datasets::*;
use robustlab::ImageShape;

fn write_mnist(dir: &std::path::Path, n: usize, labels: usize) {
    let (img, lbl) = mnist_file_names(Split::Test);
    let bytes: Vec<u8> = (0..n * 784).map(|i| (i % 256) as u8).collect();
    write_idx_images(&dir.join(img), 28, 28, &bytes).unwrap();
    let l: Vec<u8> = (0..labels).map(|i| (i % 10) as u8).collect();
    write_idx_labels(&dir.join(lbl), &l).unwrap();
}

#[test]
fn idx_round_trip_and_scaling() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), 3, 3);
    let d = load_mnist(dir.path(), Split::Test).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.shape(), ImageShape::MNIST);
    assert_eq!(d.pixels(0)[255], 1.0);
    assert_eq!(d.pixels(0)[0], 0.0);
    assert_eq!(d.labels(), &[0, 1, 2]);
    assert_eq!(d.checksum(), load_mnist(dir.path(), Split::Test).unwrap().checksum());
}

#[test]
fn idx_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), 3, 4);
    assert!(matches!(load_mnist(dir.path(), Split::Test), Err(DatasetError::CountMismatch { images: 3, labels: 4 })));

    write_mnist(dir.path(), 3, 3);
    let (img, lbl) = mnist_file_names(Split::Test);
    let path = dir.path().join(img);
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 10);
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_mnist(dir.path(), Split::Test), Err(DatasetError::Truncated { .. })));

    write_mnist(dir.path(), 3, 3);
    let path = dir.path().join(lbl);
    let mut bytes = fs::read(&path).unwrap();
    bytes[3] = 0x03;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_mnist(dir.path(), Split::Test), Err(DatasetError::BadMagic { found: 0x803, .. })));

    assert!(matches!(load_mnist(&dir.path().join("missing"), Split::Train), Err(DatasetError::Io { .. })));
}

#[test]
fn cifar_batch_size_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test_batch.bin");
    let mut raw = Vec::new();
    for r in 0..CIFAR_BATCH_RECORDS {
        raw.push((r % 10) as u8);
        raw.extend((0..3072).map(|i| ((i + r) % 256) as u8));
    }
    assert_eq!(raw.len(), 30_730_000);
    fs::write(&path, &raw).unwrap();
    let data = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!(data.len(), 10_000);
    assert_eq!(data.shape(), ImageShape::CIFAR10);
    assert!(data.label(0) <= 9);
    let mut out = Vec::new();
    write_cifar10_records(&mut out, &data).unwrap();
    assert_eq!(out, raw);

    fs::write(&path, &raw[..raw.len() - 1]).unwrap();
    match load_cifar10(dir.path(), Split::Test) {
        Err(DatasetError::FileSize { expected, actual, .. }) => {
            assert_eq!(expected, 30_730_000);
            assert_eq!(actual, 30_729_999);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn mini_images_default_size() {
    let d = mini_images(ImageShape::CIFAR10, 0);
    assert_eq!(d.len(), 512);
    for c in 0..10 {
        let n = d.labels().iter().filter(|&&l| l == c).count();
        assert!(n == 51 || n == 52);
    }
}
