//! Exact-kernel classification: Gram matrix, test rows, ridge fit, argmax.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::cntk::{cntk_cross, cntk_matrix, CntkArch, CntkConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fc::{ntk_cross, ntk_matrix};
use crate::kernel_matrix::{KernelKind, KernelMatrix};
use crate::regression::{accuracy, classify, encode_labels, fit, FittedPredictor};
use crate::tensor::PatchGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub depth: usize,
    /// Only meaningful for convolutional kernels.
    pub geom: PatchGeometry,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, depth: usize, geom: PatchGeometry) -> Result<Self> {
        match kind {
            KernelKind::RandomFeature => {
                return Err(Error::InvalidArgument("random-feature kernels need a network, not a spec".into()))
            }
            KernelKind::CntkVanilla | KernelKind::CntkGap => {
                CntkConfig::new(depth, geom, CntkArch::Vanilla)?;
            }
            KernelKind::FcNtk => {}
        }
        Ok(Self { kind, depth, geom })
    }

    fn cntk(&self) -> Result<CntkConfig> {
        let arch = match self.kind {
            KernelKind::CntkGap => CntkArch::GlobalAveragePooling,
            _ => CntkArch::Vanilla,
        };
        CntkConfig::new(self.depth, self.geom, arch)
    }
}

pub fn gram(spec: &KernelSpec, ds: &LabeledDataset) -> Result<KernelMatrix> {
    let n = ds.len();
    let start = Instant::now();
    let k = match spec.kind {
        KernelKind::FcNtk => ntk_matrix(&ds.inputs(), spec.depth)?,
        KernelKind::CntkVanilla | KernelKind::CntkGap => cntk_matrix(&ds.images, &spec.cntk()?)?,
        KernelKind::RandomFeature => unreachable!("rejected by KernelSpec::new"),
    };
    let pairs = (n * (n + 1) / 2) as f64;
    let secs = start.elapsed().as_secs_f64();
    info!(
        "{} gram n={n}: {pairs} pairs in {secs:.2}s ({:.1} pairs/s)",
        spec.kind.name(),
        pairs / secs.max(1e-9)
    );
    Ok(k)
}

/// `queries.len() x train.len()` kernel rows.
pub fn cross(spec: &KernelSpec, queries: &LabeledDataset, train: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    let start = Instant::now();
    let rows = match spec.kind {
        KernelKind::FcNtk => ntk_cross(&queries.inputs(), &train.inputs(), spec.depth)?,
        KernelKind::CntkVanilla | KernelKind::CntkGap => cntk_cross(&queries.images, &train.images, &spec.cntk()?)?,
        KernelKind::RandomFeature => unreachable!("rejected by KernelSpec::new"),
    };
    let pairs = (queries.len() * train.len()) as f64;
    let secs = start.elapsed().as_secs_f64();
    info!(
        "{} cross {}x{}: {:.1} pairs/s",
        spec.kind.name(),
        queries.len(),
        train.len(),
        pairs / secs.max(1e-9)
    );
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    /// One-sided 95% Wilson lower bound on the accuracy.
    pub accuracy_lower95: f64,
    pub per_class: Vec<ClassReport>,
    pub predictions: Vec<usize>,
}

/// Lower end of the Wilson score interval for `hits / n` at normal quantile `z`.
pub fn wilson_lower(hits: usize, n: usize, z: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * n);
    let spread = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    (centre - spread) / (1.0 + z2 / n)
}

/// Fits on `(h, train_labels)` and scores `test_rows` against `test_labels`.
pub fn classify_with_kernel(
    h: &KernelMatrix,
    train_labels: &[usize],
    test_rows: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
    ridge: f64,
) -> Result<(FittedPredictor, ClassificationReport)> {
    if test_rows.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    if test_rows.len() != test_labels.len() {
        return Err(Error::Shape(format!(
            "{} test rows but {} test labels",
            test_rows.len(),
            test_labels.len()
        )));
    }
    let y = encode_labels(train_labels, k)?;
    let pred = fit(h, &y, ridge)?;
    let predictions = test_rows
        .iter()
        .map(|r| classify(&pred.predict(r)?))
        .collect::<Result<Vec<_>>>()?;
    for &l in test_labels {
        if l >= k {
            return Err(Error::InvalidArgument(format!("test label {l} out of range for {k} classes")));
        }
    }
    let acc = accuracy(&predictions, test_labels)?;
    let per_class = (0..k)
        .map(|c| ClassReport {
            class: c,
            count: test_labels.iter().filter(|&&l| l == c).count(),
            correct: predictions.iter().zip(test_labels).filter(|(&p, &l)| l == c && p == c).count(),
        })
        .collect();
    let hits = predictions.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    Ok((
        pred,
        ClassificationReport {
            n_train: h.n(),
            n_test: test_rows.len(),
            accuracy: acc,
            accuracy_lower95: wilson_lower(hits, test_rows.len(), 1.6448536269514722),
            per_class,
            predictions,
        },
    ))
}

/// Full pipeline for an exact kernel.
pub fn kernel_classification(
    spec: &KernelSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    ridge: f64,
) -> Result<ClassificationReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let h = gram(spec, train)?;
    let rows = cross(spec, test, train)?;
    Ok(classify_with_kernel(&h, &train.labels, &rows, &test.labels, train.k.max(test.k), ridge)?.1)
}
