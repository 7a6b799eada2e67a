//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, stratified subsetting and
//! a procedurally generated mini-image set for offline runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{Image, ImageShape};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3072;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const MINI_IMAGE_COUNT: usize = 512;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated file, expected {expected} bytes but found {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("image file holds {images} examples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: wrong file size, expected {expected} bytes but found {actual}")]
    FileSize { path: PathBuf, expected: usize, actual: usize },
    #[error("label {label} at index {index} is not below the class count {classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("pixel value {value} at example {index} is outside [0, 1]")]
    PixelRange { index: usize, value: f32 },
    #[error("requested {requested} examples but the dataset holds {available}")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Immutable labelled image collection, stored planar per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    split: Split,
    shape: ImageShape,
    classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        shape: ImageShape,
        classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = shape.len();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(DatasetError::CountMismatch {
                images: pixels.len().checked_div(per).unwrap_or(0),
                labels: labels.len(),
            });
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(DatasetError::LabelOutOfRange { index, label, classes });
            }
        }
        if let Some(pos) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(DatasetError::PixelRange {
                index: pos / per,
                value: pixels[pos],
            });
        }
        Ok(Self {
            name: name.into(),
            split,
            shape,
            classes,
            pixels,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Image {
        Image::new(self.shape, self.pixels(i).to_vec()).expect("example length matches the dataset shape")
    }

    /// `[B, C, H, W]` tensor holding the selected examples in order.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.shape.len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        let [c, h, w] = self.shape.dims();
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch length matches its shape")
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
        }
        Dataset {
            name: self.name.clone(),
            split: self.split,
            shape: self.shape,
            classes: self.classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Class-stratified deterministic sample of `n` examples.
    ///
    /// Each class receives `n · count_c / N` examples rounded by largest
    /// remainder; within a class the examples are a seeded shuffle prefix.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(DatasetError::SubsetTooLarge {
                requested: n,
                available: self.len(),
            });
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let total = self.len();
        let mut quota: Vec<(usize, usize, usize)> = by_class
            .iter()
            .map(|(&c, idx)| {
                let exact = n * idx.len();
                (c, exact / total, exact % total)
            })
            .collect();
        let assigned: usize = quota.iter().map(|q| q.1).sum();
        let mut order: Vec<usize> = (0..quota.len()).collect();
        order.sort_by(|&a, &b| quota[b].2.cmp(&quota[a].2).then(quota[a].0.cmp(&quota[b].0)));
        for &k in order.iter().take(n - assigned) {
            quota[k].1 += 1;
        }
        let mut chosen = Vec::with_capacity(n);
        for (c, take, _) in quota {
            let mut idx = by_class[&c].clone();
            RngStream::new(seed, c as u64).shuffle(&mut idx);
            chosen.extend_from_slice(&idx[..take]);
        }
        chosen.sort_unstable();
        Ok(self.select(&chosen))
    }

    /// Splits off the first `n` examples and the remainder.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// Hex SHA-256 over the little-endian pixel bytes followed by the labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let sizes: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + sizes.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(sizes)
}

/// Reads an IDX image/label file pair.
pub fn load_idx_pair(images: &Path, labels: &Path, name: &str, split: Split) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let dims = idx_header(images, &img_bytes, IDX_IMAGES_MAGIC, 3)?;
    let lbl_bytes = read(labels)?;
    let count = idx_header(labels, &lbl_bytes, IDX_LABELS_MAGIC, 1)?[0];
    if dims[0] != count {
        return Err(DatasetError::CountMismatch {
            images: dims[0],
            labels: count,
        });
    }
    let n = dims.iter().product::<usize>();
    let pixels = img_bytes[16..16 + n].iter().map(|&b| b as f32 / 255.0).collect();
    let labels = lbl_bytes[8..8 + count].iter().map(|&b| b as usize).collect();
    Dataset::new(name, split, ImageShape::new(1, dims[1], dims[2]), 10, pixels, labels)
}

pub fn mnist_file_names(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_file_names(split);
    load_idx_pair(&dir.join(images), &dir.join(labels), "mnist", split)
}

/// Writes `[N, 1, H, W]` pixels as an IDX3 file (values rounded to bytes).
pub fn write_idx_images(path: &Path, height: usize, width: usize, bytes: &[u8]) -> std::io::Result<()> {
    let n = bytes.len() / (height * width);
    let mut out = Vec::with_capacity(16 + bytes.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(bytes);
    fs::write(path, out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)
}

/// Parses one CIFAR-10 binary batch holding exactly `records` records.
pub fn load_cifar10_batch(path: &Path, records: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = read(path)?;
    let expected = records * CIFAR_RECORD_BYTES;
    if bytes.len() != expected {
        return Err(DatasetError::FileSize {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut pixels = Vec::with_capacity(records * 3072);
    let mut labels = Vec::with_capacity(records);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn cifar10_file_names(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    }
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in cifar10_file_names(split) {
        let (p, l) = load_cifar10_batch(&dir.join(file), CIFAR_BATCH_RECORDS)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new("cifar10", split, ImageShape::CIFAR10, 10, pixels, labels)
}

/// Serializes examples back to CIFAR-10 records (pixels rounded to bytes).
pub fn write_cifar10_records(out: &mut impl Write, data: &Dataset) -> std::io::Result<()> {
    for i in 0..data.len() {
        out.write_all(&[data.label(i) as u8])?;
        let bytes: Vec<u8> = data.pixels(i).iter().map(|&v| (v * 255.0).round() as u8).collect();
        out.write_all(&bytes)?;
    }
    Ok(())
}

/// Seeded synthetic shapes on textured backgrounds, ten classes, 512 examples.
///
/// Class `c` draws shape `c` in a random colour at a random position and scale
/// over a smooth random gradient with per-pixel grain.
pub fn mini_images(shape: ImageShape, seed: u64) -> Dataset {
    mini_images_n(shape, MINI_IMAGE_COUNT, seed)
}

pub fn mini_images_n(shape: ImageShape, n: usize, seed: u64) -> Dataset {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let mut pixels = Vec::with_capacity(n * shape.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        let mut rng = RngStream::named(seed, &format!("datasets.mini.{i}"));
        let base: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.2, 0.55)).collect();
        let grad: Vec<(f64, f64)> = (0..c)
            .map(|_| (rng.uniform_range(-0.25, 0.25), rng.uniform_range(-0.25, 0.25)))
            .collect();
        let ink: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.75, 1.0)).collect();
        let cx = rng.uniform_range(0.4, 0.6) * w as f64;
        let cy = rng.uniform_range(0.4, 0.6) * h as f64;
        let r = rng.uniform_range(0.22, 0.32) * w.min(h) as f64;
        let mut img = vec![0.0f32; shape.len()];
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 - cx) / r;
                let v = (y as f64 - cy) / r;
                let on = shape_mask(label, u, v);
                let grain = rng.uniform_range(-0.06, 0.06);
                for ch in 0..c {
                    let bg = base[ch] + grad[ch].0 * (x as f64 / w as f64 - 0.5) + grad[ch].1 * (y as f64 / h as f64 - 0.5);
                    let val = if on { ink[ch] } else { bg } + grain;
                    img[(ch * h + y) * w + x] = val.clamp(0.0, 1.0) as f32;
                }
            }
        }
        pixels.extend(img);
        labels.push(label);
    }
    Dataset::new("mini", Split::Test, shape, 10, pixels, labels).expect("generated values are in range")
}

fn shape_mask(class: usize, u: f64, v: f64) -> bool {
    let rr = (u * u + v * v).sqrt();
    match class {
        0 => rr <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) * 0.55,
        3 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0),
        4 => (0.6..=1.0).contains(&rr),
        5 => u.abs() <= 1.0 && v.abs() <= 1.0 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => u.abs() <= 1.0 && v.abs() <= 1.0 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        7 => (u - v).abs() <= 0.35 && rr <= 1.2,
        8 => u.abs() <= 1.0 && v.abs() <= 1.0 && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        _ => ((u - 0.5).powi(2) + v * v).sqrt() <= 0.4 || ((u + 0.5).powi(2) + v * v).sqrt() <= 0.4,
    }
}
