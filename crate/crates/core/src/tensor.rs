//! Dense image and patch-kernel tensors.
//!
//! A [`PatchKernelTensor`] holds one value for every pair of pixel positions
//! `(i, j)` and `(i', j')` of two `P x Q` images. The convolutional kernel
//! recursion is built from three primitives on these tensors:
//! [`patch_inner_sum`], [`trace_over_patches`] and the two reductions
//! [`trace_diag`] / [`mean_all`].
//!
//! Zero padding is realised by skipping out-of-range offsets, never by
//! materialising a padded tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `P x Q x C` image stored row-major by `(i, j, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {pos} is {}", data[pos])));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
            .expect("positive dimensions")
    }

    /// A single-channel `1 x 1` image; convenient for degeneracy checks.
    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, 1, vec![value]).expect("finite scalar")
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for i in 0..width {
            for j in 0..height {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.height + j) * self.channels + c]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Multiplies every pixel by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "images differ in shape: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Filter geometry shared by every convolution layer: an odd `q x q` window,
/// stride 1 and zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    q: usize,
}

impl PatchGeometry {
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 || q.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "filter size must be a positive odd integer, got {q}"
            )));
        }
        Ok(Self { q })
    }

    #[inline]
    pub fn filter_size(&self) -> usize {
        self.q
    }

    /// Half-width `(q - 1) / 2` of the window.
    #[inline]
    pub fn radius(&self) -> usize {
        (self.q - 1) / 2
    }

    /// The offsets `-(q-1)/2 ..= (q-1)/2`.
    pub fn offsets(&self) -> impl Iterator<Item = isize> + Clone {
        let r = self.radius() as isize;
        -r..=r
    }
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self { q: 3 }
    }
}

/// Valid `(start, end)` range of `i` such that both `i + a` and `i` lie in `0..n`.
#[inline]
fn shifted_range(n: usize, a: isize) -> (usize, usize) {
    if a >= 0 {
        (0, n.saturating_sub(a as usize))
    } else {
        ((-a) as usize, n)
    }
}

/// A 4th-order `P x Q x P x Q` tensor indexed by `(i, j, i', j')`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchKernelTensor {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl PatchKernelTensor {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height).pow(2)],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != (width * height).pow(2) {
            return Err(Error::Shape(format!(
                "patch tensor {width}x{height} needs {} values, got {}",
                (width * height).pow(2),
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity((width * height).pow(2));
        for i in 0..width {
            for j in 0..height {
                for i2 in 0..width {
                    for j2 in 0..height {
                        data.push(f(i, j, i2, j2));
                    }
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// The identity tensor `I[i,j,i',j'] = 1{i = i', j = j'}`.
    pub fn identity(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |i, j, i2, j2| {
            if i == i2 && j == j2 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of pixel positions `P * Q`.
    #[inline]
    pub fn positions(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, i2: usize, j2: usize) -> usize {
        ((i * self.height + j) * self.width + i2) * self.height + j2
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, i2: usize, j2: usize) -> f64 {
        self.data[self.index(i, j, i2, j2)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, i2: usize, j2: usize, value: f64) {
        let idx = self.index(i, j, i2, j2);
        self.data[idx] = value;
    }

    pub fn check_same_shape(&self, other: &PatchKernelTensor) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape(format!(
                "patch tensors differ in shape: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self <- a * self + b * other`.
    pub fn axpby(&mut self, a: f64, b: f64, other: &PatchKernelTensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s = a * *s + b * o;
        }
        Ok(())
    }

    /// Entrywise `(i, j, i', j') -> (i', j', i, j)` transpose.
    pub fn exchanged(&self) -> Self {
        Self::from_fn(self.width, self.height, |i, j, i2, j2| self.get(i2, j2, i, j))
    }

    /// Diagonal entries `T[i,j,i,j]` as a `P * Q` vector indexed by `i * Q + j`.
    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.positions();
        (0..n).map(|k| self.data[k * n + k]).collect()
    }
}

/// `[Σ⁽⁰⁾]_{ij,i'j'}`: sum over channels and matched window offsets of
/// `x[i+a, j+b] * x'[i'+a, j'+b]`, with out-of-range pixels contributing zero.
pub fn patch_inner_sum(
    x: &ImageTensor,
    x2: &ImageTensor,
    geom: PatchGeometry,
) -> Result<PatchKernelTensor> {
    x.check_same_shape(x2)?;
    let pixel_products = PatchKernelTensor::from_fn(x.width, x.height, |i, j, i2, j2| {
        let c = x.channels;
        let a = &x.data[(i * x.height + j) * c..][..c];
        let b = &x2.data[(i2 * x.height + j2) * c..][..c];
        a.iter().zip(b).map(|(u, v)| u * v).sum()
    });
    Ok(trace_over_patches(&pixel_products, geom))
}

/// Diagonal of [`patch_inner_sum`]`(x, x)`: the squared norm of every
/// zero-padded patch, indexed by `i * Q + j`.
pub fn patch_norms_sq(x: &ImageTensor, geom: PatchGeometry) -> Vec<f64> {
    let (p, q, c) = x.shape();
    let pixel_sq: Vec<f64> = x
        .data
        .chunks_exact(c)
        .map(|px| px.iter().map(|v| v * v).sum())
        .collect();
    trace_diagonal_stream(&pixel_sq, p, q, geom)
}

/// The diagonal of [`trace_over_patches`] applied to a tensor whose diagonal
/// is `diag`; off-diagonal entries never reach the diagonal of the output.
pub fn trace_diagonal_stream(diag: &[f64], width: usize, height: usize, geom: PatchGeometry) -> Vec<f64> {
    debug_assert_eq!(diag.len(), width * height);
    let mut out = vec![0.0; width * height];
    for a in geom.offsets() {
        let (i_lo, i_hi) = shifted_range(width, a);
        for b in geom.offsets() {
            let (j_lo, j_hi) = shifted_range(height, b);
            for i in i_lo..i_hi {
                let si = (i as isize + a) as usize;
                for j in j_lo..j_hi {
                    let sj = (j as isize + b) as usize;
                    out[i * height + j] += diag[si * height + sj];
                }
            }
        }
    }
    out
}

/// Sums `T[i+a, j+b, i'+a, j'+b]` over matched offsets `(a, b)` of the
/// `q x q` window. Carries no `cσ/q²` factor.
pub fn trace_over_patches(t: &PatchKernelTensor, geom: PatchGeometry) -> PatchKernelTensor {
    let (p, q) = (t.width, t.height);
    if geom.filter_size() == 1 {
        return t.clone();
    }
    let mut out = PatchKernelTensor::zeros(p, q);
    for a in geom.offsets() {
        let (i_lo, i_hi) = shifted_range(p, a);
        for b in geom.offsets() {
            let (j_lo, j_hi) = shifted_range(q, b);
            for i in i_lo..i_hi {
                let si = (i as isize + a) as usize;
                for j in j_lo..j_hi {
                    let sj = (j as isize + b) as usize;
                    for i2 in i_lo..i_hi {
                        let si2 = (i2 as isize + a) as usize;
                        let dst = out.index(i, j, i2, j_lo);
                        let src = t.index(si, sj, si2, (j_lo as isize + b) as usize);
                        let len = j_hi - j_lo;
                        let dst_row = &mut out.data[dst..dst + len];
                        let src_row = &t.data[src..src + len];
                        for (d, s) in dst_row.iter_mut().zip(src_row) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `Σ_{i,j} T[i,j,i,j]`.
pub fn trace_diag(t: &PatchKernelTensor) -> f64 {
    t.diagonal().iter().sum()
}

/// Mean over all `P²Q²` entries.
pub fn mean_all(t: &PatchKernelTensor) -> f64 {
    if t.data.is_empty() {
        return 0.0;
    }
    t.data.iter().sum::<f64>() / t.data.len() as f64
}
