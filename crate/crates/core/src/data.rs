//! Labeled image datasets: CIFAR-10 binary batches, synthetic generators
//! and the preprocessing applied before kernel computation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub k: usize,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetShape {
    pub len: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, k: usize, provenance: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        if let Some(first) = images.first() {
            for img in &images[1..] {
                first.check_same_shape(img)?;
            }
        }
        Ok(Self {
            images,
            labels,
            k,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> DatasetShape {
        let (width, height, channels) = self.images.first().map(|i| i.shape()).unwrap_or((0, 0, 0));
        DatasetShape {
            len: self.len(),
            width,
            height,
            channels,
            classes: self.k,
        }
    }

    /// Flat `(i, j, channel)` vectors, e.g. for fully-connected kernels.
    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.images.iter().map(|i| i.data().to_vec()).collect()
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} out of range for {} items",
                self.len()
            )));
        }
        Ok(Self {
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            k: self.k,
            provenance: format!("{}[{start}..{end}]", self.provenance),
        })
    }

    /// Keeps only `classes` (in order of appearance) and relabels them
    /// `0..classes.len()`.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("no classes selected".into()));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (img, &l) in self.images.iter().zip(&self.labels) {
            if let Some(pos) = classes.iter().position(|&c| c == l) {
                images.push(img.clone());
                labels.push(pos);
            }
        }
        Self::new(
            images,
            labels,
            classes.len(),
            format!("{} classes {classes:?}", self.provenance),
        )
    }
}

fn decode_cifar(bytes: &[u8], limit: Option<usize>, provenance: &str) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 batch length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let total = bytes.len() / CIFAR_RECORD;
    let count = limit.map_or(total, |l| l.min(total));
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).take(count).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {r} has label byte {label}")));
        }
        let px = &rec[1..];
        let img = ImageTensor::from_fn(CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS, |i, j, c| {
            px[c * plane + i * CIFAR_SIDE + j] as f64 / 255.0
        })?;
        images.push(img);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, CIFAR_CLASSES, provenance)
}

/// Reads a CIFAR-10 binary batch (label byte then three 32x32 planes per
/// record). Pixels map to `[0, 1]`; rows are `i`, columns `j`.
pub fn read_cifar10_bin(path: &Path, limit: Option<usize>, normalize: bool) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    let ds = decode_cifar(&bytes, limit, &format!("cifar10:{}", path.display()))?;
    Ok(if normalize { normalize_unit(&ds) } else { ds })
}

/// Encodes images as CIFAR-10 binary records. Pixels are scaled by 255,
/// rounded and clamped to a byte.
pub fn encode_cifar10(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        if img.shape() != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS) || label >= CIFAR_CLASSES {
            return Err(Error::Shape(format!(
                "cannot encode a {:?} image with label {label} as CIFAR-10",
                img.shape()
            )));
        }
        out.push(label as u8);
        for c in 0..CIFAR_CHANNELS {
            for i in 0..CIFAR_SIDE {
                for j in 0..CIFAR_SIDE {
                    out.push((img.get(i, j, c) * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Ok(out)
}

/// Average-pools non-overlapping `factor x factor` blocks per channel.
pub fn downsample(ds: &LabeledDataset, factor: usize) -> Result<LabeledDataset> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(ds.clone());
    }
    let shape = ds.shape();
    if !shape.width.is_multiple_of(factor) || !shape.height.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} does not divide {}x{}",
            shape.width, shape.height
        )));
    }
    let area = (factor * factor) as f64;
    let images = ds
        .images
        .iter()
        .map(|img| {
            ImageTensor::from_fn(shape.width / factor, shape.height / factor, shape.channels, |i, j, c| {
                let mut s = 0.0;
                for a in 0..factor {
                    for b in 0..factor {
                        s += img.get(i * factor + a, j * factor + b, c);
                    }
                }
                s / area
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        images,
        labels: ds.labels.clone(),
        k: ds.k,
        provenance: format!("{} downsample x{factor}", ds.provenance),
    })
}

/// Scales every image to unit Frobenius norm; all-zero images are kept.
pub fn normalize_unit(ds: &LabeledDataset) -> LabeledDataset {
    let images = ds
        .images
        .iter()
        .map(|img| {
            let n = img.norm();
            if n > 0.0 {
                img.scaled(1.0 / n)
            } else {
                img.clone()
            }
        })
        .collect();
    LabeledDataset {
        images,
        labels: ds.labels.clone(),
        k: ds.k,
        provenance: format!("{} unit-norm", ds.provenance),
    }
}

/// Unit-norm Gaussian inputs of the given shape, labeled by the argmax of
/// `k` random linear functionals (class 0 everywhere when `k = 1`).
pub fn synthetic_sphere_dataset(
    n: usize,
    shape: (usize, usize, usize),
    k: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument("n and k must be >= 1".into()));
    }
    let (w, h, c) = shape;
    let d = w * h * c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        let scores: Vec<f64> = planes.iter().map(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let label = (0..k).fold(0, |best, i| if scores[i] > scores[best] { i } else { best });
        images.push(ImageTensor::new(w, h, c, v)?);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, k, format!("synthetic-sphere n={n} shape={w}x{h}x{c} k={k} seed={seed}"))
}

/// A stand-in for CIFAR-10 with the same record layout: each class has a
/// fixed smooth color template, and every image mixes its class template
/// with a random smooth field and pixel noise, so classes overlap.
pub fn surrogate_cifar10(n: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = CIFAR_SIDE as f64;
    let field = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64, f64, [f64; 3])> {
        (0..4)
            .map(|_| {
                let fx = rng.random_range(0.5..3.0);
                let fy = rng.random_range(0.5..3.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                (fx, fy, phase, amp)
            })
            .collect()
    };
    let eval = |terms: &[(f64, f64, f64, [f64; 3])], i: usize, j: usize, c: usize| -> f64 {
        terms
            .iter()
            .map(|(fx, fy, ph, amp)| amp[c] * (2.0 * PI * (fx * i as f64 + fy * j as f64) / side + ph).cos())
            .sum::<f64>()
            / 2.0
    };
    let templates: Vec<_> = (0..CIFAR_CLASSES).map(|_| field(&mut rng)).collect();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let label = r % CIFAR_CLASSES;
        let own = field(&mut rng);
        let strength = rng.random_range(0.3..0.7);
        let img = ImageTensor::from_fn(CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS, |i, j, c| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = 0.5 + 0.25 * (strength * eval(&templates[label], i, j, c) + eval(&own, i, j, c)) + 0.05 * noise;
            // quantize like a real 8-bit batch
            (v * 255.0).round().clamp(0.0, 255.0) / 255.0
        })?;
        images.push(img);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, CIFAR_CLASSES, format!("surrogate-cifar10 n={n} seed={seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_RECORD - 1).map(fill));
        r
    }

    #[test]
    fn decodes_records() {
        let mut bytes = record(3, |k| (k % 256) as u8);
        bytes.extend(record(7, |_| 255));
        let ds = decode_cifar(&bytes, None, "mem").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.images[0].shape(), (32, 32, 3));
        // green plane starts at byte 1024 of the pixel block
        assert_eq!(ds.images[0].get(0, 1, 1), ((1024 + 1) % 256) as f64 / 255.0);
        assert_eq!(ds.images[1].get(31, 31, 2), 1.0);
        assert_eq!(decode_cifar(&bytes, Some(1), "mem").unwrap().len(), 1);
    }

    #[test]
    fn rejects_malformed_batches() {
        assert!(matches!(decode_cifar(&vec![0u8; 3072], None, "mem"), Err(Error::Format(_))));
        assert!(matches!(decode_cifar(&record(10, |_| 0), None, "mem"), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_round_trip_through_file() {
        let ds = surrogate_cifar10(12, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        fs::write(&path, encode_cifar10(&ds).unwrap()).unwrap();
        let back = read_cifar10_bin(&path, None, false).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        let normed = read_cifar10_bin(&path, Some(3), true).unwrap();
        assert!(normed.images.iter().all(|i| (i.norm() - 1.0).abs() < 1e-12));
        assert!(read_cifar10_bin(&dir.path().join("missing.bin"), None, false).is_err());
    }

    #[test]
    fn downsample_examples() {
        let img = ImageTensor::new(2, 2, 1, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let ds = LabeledDataset::new(vec![img], vec![0], 1, "t").unwrap();
        assert_eq!(downsample(&ds, 2).unwrap().images[0].data(), &[3.0]);
        assert_eq!(downsample(&ds, 1).unwrap(), ds);
        assert!(downsample(&ds, 3).is_err());
        let constant = ImageTensor::from_fn(4, 4, 2, |_, _, _| 0.25).unwrap();
        let cds = LabeledDataset::new(vec![constant], vec![0], 1, "c").unwrap();
        let small = downsample(&cds, 2).unwrap();
        assert_eq!(small.images[0].shape(), (2, 2, 2));
        assert!(small.images[0].data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn downsample_commutes_with_scaling() {
        let ds = surrogate_cifar10(3, 2).unwrap();
        let scaled = LabeledDataset {
            images: ds.images.iter().map(|i| i.scaled(2.5)).collect(),
            ..ds.clone()
        };
        let a = downsample(&scaled, 4).unwrap();
        let b = downsample(&ds, 4).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - 2.5 * v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_dataset_contract() {
        let a = synthetic_sphere_dataset(50, (1, 1, 6), 3, 9).unwrap();
        assert_eq!(a, synthetic_sphere_dataset(50, (1, 1, 6), 3, 9).unwrap());
        assert!(a.images.iter().all(|i| (i.norm() - 1.0).abs() < 1e-12));
        assert!(a.labels.iter().all(|&l| l < 3));
        assert!((0..3).all(|c| a.labels.contains(&c)));
        let img = synthetic_sphere_dataset(4, (4, 4, 2), 2, 1).unwrap();
        assert_eq!(img.shape().width, 4);
        assert!(synthetic_sphere_dataset(0, (1, 1, 2), 2, 0).is_err());
    }

    #[test]
    fn class_selection_relabels() {
        let ds = surrogate_cifar10(30, 3).unwrap();
        let two = ds.select_classes(&[4, 1]).unwrap();
        assert_eq!(two.k, 2);
        assert_eq!(two.len(), 6);
        assert_eq!(two.labels[0], 1);
        assert!(ds.slice(5, 40).is_err());
    }

    #[test]
    fn new_validates() {
        let img = ImageTensor::zeros(2, 2, 1);
        assert!(LabeledDataset::new(vec![img.clone()], vec![], 2, "x").is_err());
        assert!(LabeledDataset::new(vec![img.clone()], vec![2], 2, "x").is_err());
        assert!(LabeledDataset::new(vec![img, ImageTensor::zeros(3, 2, 1)], vec![0, 0], 2, "x").is_err());
    }
}
