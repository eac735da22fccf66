//! Gram matrices and the pair-parallel builders that fill them.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    FcNtk,
    CntkVanilla,
    CntkGap,
    /// Empirical gradient Gram of one finite-width initialization.
    RandomFeature,
}

impl KernelKind {
    pub fn tag(self) -> u8 {
        match self {
            KernelKind::FcNtk => 0,
            KernelKind::CntkVanilla => 1,
            KernelKind::CntkGap => 2,
            KernelKind::RandomFeature => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => KernelKind::FcNtk,
            1 => KernelKind::CntkVanilla,
            2 => KernelKind::CntkGap,
            3 => KernelKind::RandomFeature,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::FcNtk => "fc-ntk",
            KernelKind::CntkVanilla => "cntk-vanilla",
            KernelKind::CntkGap => "cntk-gap",
            KernelKind::RandomFeature => "random-feature",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub kind: KernelKind,
    pub depth: u32,
    /// Convolution filter side, absent for fully-connected kernels.
    pub filter_size: Option<usize>,
    /// Hex SHA-256 over the little-endian bytes of every input, in order.
    pub input_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    meta: KernelMeta,
    lambda0: Option<f64>,
}

impl KernelMatrix {
    pub fn new(entries: DMatrix<f64>, meta: KernelMeta) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Shape(format!(
                "kernel matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self {
            entries,
            meta,
            lambda0: None,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn meta(&self) -> &KernelMeta {
        &self.meta
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.entries[(i, j)]);
            }
        }
        out
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.entries.row(i).iter().copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_diagonal(&self) -> f64 {
        self.entries.diagonal().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max |K_ij - K_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.entries[(i, j)] - self.entries[(j, i)]).abs());
            }
        }
        worst
    }

    /// Smallest eigenvalue (`λ₀` for a training Gram). `None` for `n = 0`.
    pub fn min_eigenvalue(&self) -> Option<f64> {
        if self.n() == 0 {
            return None;
        }
        let eig = SymmetricEigen::new(self.entries.clone());
        eig.eigenvalues.iter().copied().reduce(f64::min)
    }

    /// Cached [`Self::min_eigenvalue`].
    pub fn lambda0(&mut self) -> Option<f64> {
        if self.lambda0.is_none() {
            self.lambda0 = self.min_eigenvalue();
        }
        self.lambda0
    }

    /// Checks symmetry to `1e-12 * max|entry|` and PSD to `-1e-8 * max diagonal`.
    pub fn check_invariants(&self) -> Result<()> {
        let asym = self.asymmetry();
        if asym > 1e-12 * self.max_abs() {
            return Err(Error::InvalidArgument(format!(
                "kernel matrix asymmetric by {asym:e}"
            )));
        }
        if let Some(min) = self.min_eigenvalue() {
            if min < -1e-8 * self.max_diagonal().abs() {
                return Err(Error::NotPsd(format!("minimum eigenvalue {min:e}")));
            }
        }
        Ok(())
    }

    /// The same kernel multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            entries: &self.entries * c,
            meta: self.meta.clone(),
            lambda0: self.lambda0.map(|l| l * c),
        }
    }
}

/// Fills a symmetric `n x n` matrix from a pure pair function, evaluating
/// only the upper triangle in parallel. Each entry depends only on its pair,
/// so the result does not depend on scheduling.
pub fn symmetric_gram<F>(n: usize, pair: F) -> Result<DMatrix<f64>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| pair(i, j))
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        out[(i, j)] = v;
        out[(j, i)] = v;
    }
    Ok(out)
}

/// Fills a rectangular `rows x cols` matrix (e.g. test-vs-train kernel rows).
pub fn cross_gram<F>(rows: usize, cols: usize, pair: F) -> Result<DMatrix<f64>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let values: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|k| pair(k / cols, k % cols))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Hex SHA-256 over the little-endian bytes of each input in order.
pub fn checksum_inputs<'a>(inputs: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for input in inputs {
        hasher.update((input.len() as u64).to_le_bytes());
        for v in input {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> KernelMeta {
        KernelMeta {
            kind: KernelKind::FcNtk,
            depth: 1,
            filter_size: None,
            input_checksum: String::new(),
        }
    }

    #[test]
    fn tags_round_trip() {
        for k in [
            KernelKind::FcNtk,
            KernelKind::CntkVanilla,
            KernelKind::CntkGap,
            KernelKind::RandomFeature,
        ] {
            assert_eq!(KernelKind::from_tag(k.tag()), Some(k));
        }
        assert_eq!(KernelKind::from_tag(200), None);
    }

    #[test]
    fn symmetric_gram_mirrors() {
        let m = symmetric_gram(4, |i, j| Ok((i * 10 + j) as f64)).unwrap();
        assert_eq!(m[(2, 1)], 12.0);
        assert_eq!(m[(1, 2)], 12.0);
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn cross_gram_layout() {
        let m = cross_gram(2, 3, |i, j| Ok((i * 10 + j) as f64)).unwrap();
        assert_eq!(m[(1, 2)], 12.0);
        assert_eq!(m.nrows(), 2);
    }

    #[test]
    fn invariants_detect_indefinite() {
        let k = KernelMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), meta()).unwrap();
        assert!(k.check_invariants().is_err());
        let mut k = KernelMatrix::new(DMatrix::identity(3, 3), meta()).unwrap();
        assert!(k.check_invariants().is_ok());
        assert_eq!(k.lambda0(), Some(1.0));
    }

    #[test]
    fn checksum_depends_on_order() {
        let a = [1.0, 2.0];
        let b = [3.0];
        assert_ne!(
            checksum_inputs([&a[..], &b[..]]),
            checksum_inputs([&b[..], &a[..]])
        );
    }
}
