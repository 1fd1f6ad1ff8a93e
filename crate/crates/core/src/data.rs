//! Datasets: the CIFAR-10 binary format, synthetic Gaussian classes, and
//! pad-crop-flip augmentation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Labelled images in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self { images: self.images.gather_rows(rows), labels: rows.iter().map(|&r| self.labels[r]).collect(), classes: self.classes }
    }

    /// Per-channel `(x - mean) / std`.
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let [c, h, w] = self.sample_shape();
        if mean.len() != c || std.len() != c || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!("normalization needs {c} positive deviations")));
        }
        let plane = h * w;
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = T::from_f64_lossy((v.as_f64() - mean[ch]) / std[ch]);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { images: self.images.cast(), labels: self.labels.clone(), classes: self.classes }
    }
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), reason: reason.into() }
}

/// Parses CIFAR-10 binary records: one label byte, then the red, green and
/// blue 32x32 planes in row-major order. Pixels become `byte / 255`.
pub fn parse_cifar10<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Dataset<T>> {
    let n = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = n * CIFAR_RECORD;
        return Err(dataset_err(
            path,
            format!("truncated record at byte offset {offset} ({} of {CIFAR_RECORD} bytes)", bytes.len() - offset),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let inv = 1.0 / 255.0;
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(dataset_err(path, format!("label {label} at byte offset {}", r * CIFAR_RECORD)));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| T::from_f64_lossy(b as f64 * inv)));
    }
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels, CIFAR_CLASSES)
}

pub fn load_cifar10_file<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path).map_err(|e| dataset_err(path, e.to_string()))?;
    parse_cifar10(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads a split from the standard binary distribution directory
/// (`data_batch_1.bin` .. `data_batch_5.bin`, `test_batch.bin`).
pub fn load_cifar10<T: Scalar>(dir: &Path, split: Split) -> Result<Dataset<T>> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let d = load_cifar10_file::<T>(f)?;
        labels.extend(d.labels);
        images.extend(d.images.into_data());
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], images)?, labels, CIFAR_CLASSES)
}

/// `classes` isotropic Gaussian clusters in `dim` dimensions (as `N x dim x 1 x 1`),
/// with unit-variance noise around means drawn at distance `separation` scale.
pub fn gaussian_classes<T: Scalar, R: Rng>(classes: usize, per_class: usize, dim: usize, separation: f64, rng: &mut R) -> Result<Dataset<T>> {
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            separation * z
        }).collect::<Vec<f64>>())
        .collect();
    gaussian_around(&means, per_class, rng)
}

fn gaussian_around<T: Scalar, R: Rng>(means: &[Vec<f64>], per_class: usize, rng: &mut R) -> Result<Dataset<T>> {
    let dim = means.first().map_or(0, Vec::len);
    let mut order: Vec<usize> = (0..means.len() * per_class).map(|i| i % means.len()).collect();
    order.shuffle(rng);
    let mut data = Vec::with_capacity(order.len() * dim);
    for &c in &order {
        for m in &means[c] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(T::from_f64_lossy(m + z));
        }
    }
    Dataset::new(Tensor::new(vec![order.len(), dim, 1, 1], data)?, order, means.len())
}

/// Two Gaussian blobs in the plane whose means are `gap` apart, so a
/// hyperplane separates them with high probability.
pub fn two_blobs<T: Scalar, R: Rng>(per_class: usize, gap: f64, rng: &mut R) -> Result<Dataset<T>> {
    let h = gap / 2.0;
    gaussian_around(&[vec![-h, -h], vec![h, h]], per_class, rng)
}

/// Random `[c, h, w]` images where each class has its own mean pattern.
pub fn pattern_images<T: Scalar, R: Rng>(classes: usize, per_class: usize, shape: [usize; 3], noise: f64, rng: &mut R) -> Result<Dataset<T>> {
    let len = shape.iter().product::<usize>();
    let protos: Vec<Vec<f64>> = (0..classes).map(|_| (0..len).map(|_| rng.random::<f64>()).collect()).collect();
    let mut order: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    order.shuffle(rng);
    let mut data = Vec::with_capacity(order.len() * len);
    for &c in &order {
        for &p in &protos[c] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(T::from_f64_lossy((p + noise * z).clamp(0.0, 1.0)));
        }
    }
    Dataset::new(Tensor::new(vec![order.len(), shape[0], shape[1], shape[2]], data)?, order, classes)
}

/// Pads one `c x h x w` image by `pad` zeros, crops an `h x w` window at
/// `(dy, dx)` in the padded image, and optionally mirrors it horizontally.
pub fn crop_flip<T: Scalar>(img: &[T], shape: [usize; 3], pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<T> {
    let [c, h, w] = shape;
    let mut out = vec![T::zero(); img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let ox = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + ox] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub const AUGMENT_PAD: usize = 4;

/// Random pad-4 crop and 50% horizontal flip for every image of a batch.
pub fn augment<T: Scalar, R: Rng>(batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("augment expects NCHW, got {s:?}")));
    }
    let shape = [s[1], s[2], s[3]];
    let len = shape.iter().product::<usize>();
    let mut out = Vec::with_capacity(batch.len());
    for img in batch.data().chunks(len.max(1)) {
        let dy = rng.random_range(0..=2 * AUGMENT_PAD);
        let dx = rng.random_range(0..=2 * AUGMENT_PAD);
        let flip = rng.random_bool(0.5);
        out.extend(crop_flip(img, shape, AUGMENT_PAD, dy, dx, flip));
    }
    Tensor::new(s.to_vec(), out)
}

/// Shuffled mini-batch index lists covering `n` samples.
pub fn batch_order<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> Vec<u8> {
        let mut bytes = Vec::new();
        for (label, base) in [(3u8, 0u8), (9u8, 100u8)] {
            bytes.push(label);
            for i in 0..CIFAR_PIXELS {
                bytes.push(base.wrapping_add((i % 251) as u8));
            }
        }
        bytes
    }

    #[test]
    fn two_record_fixture() {
        let d: Dataset<f64> = parse_cifar10(&fixture(), Path::new("fixture")).unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(d.images.data()[0], 0.0);
        assert_eq!(d.images.data()[5], 5.0 / 255.0);
        // green plane of record 0 starts at pixel 1024
        assert_eq!(d.images.data()[1024], (1024 % 251) as f64 / 255.0);
        assert_eq!(d.images.data()[CIFAR_PIXELS + 7], 107.0 / 255.0);
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let d: Dataset<f32> = parse_cifar10(&[], Path::new("empty")).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn truncation_reports_offset() {
        let mut b = fixture();
        b.truncate(CIFAR_RECORD + 10);
        let e = parse_cifar10::<f32>(&b, Path::new("t")).unwrap_err().to_string();
        assert!(e.contains("offset 3073"), "{e}");
    }

    #[test]
    fn bad_label_is_rejected() {
        let mut b = fixture();
        b[0] = 10;
        assert!(parse_cifar10::<f32>(&b, Path::new("t")).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::<f32>::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let shape = [3, 8, 8];
        let once = crop_flip(img.data(), shape, 0, 0, 0, true);
        assert_ne!(once, img.data());
        assert_eq!(crop_flip(&once, shape, 0, 0, 0, true), img.data());
        assert_eq!(crop_flip(img.data(), shape, 4, 4, 4, false), img.data());
    }

    #[test]
    fn extremal_crop_shows_padding() {
        let img = vec![1.0f32; 3 * 32 * 32];
        let out = crop_flip(&img, [3, 32, 32], 4, 0, 0, false);
        for ch in 0..3 {
            for y in 0..32 {
                let row = &out[(ch * 32 + y) * 32..][..32];
                assert!(row[..4].iter().all(|&v| v == 0.0));
                if y >= 4 {
                    assert!(row[4..].iter().all(|&v| v == 1.0));
                }
            }
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Tensor::<f32>::rand_uniform(&[4, 3, 32, 32], 0.0, 1.0, &mut rng);
        let a = augment(&batch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&batch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_sets_have_valid_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Dataset<f32> = gaussian_classes(4, 10, 3, 2.0, &mut rng).unwrap();
        assert_eq!(d.len(), 40);
        assert!(d.labels.iter().all(|&l| l < 4));
        let b: Dataset<f32> = two_blobs(5, 6.0, &mut rng).unwrap();
        assert_eq!(b.images.shape(), &[10, 2, 1, 1]);
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut all: Vec<usize> = batch_order(10, 3, &mut rng).concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
