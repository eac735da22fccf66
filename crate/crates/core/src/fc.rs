//! Exact NTK of an `L`-hidden-layer fully-connected ReLU network.

use crate::error::{Error, Result};
use crate::kernel_matrix::{checksum_inputs, symmetric_gram, KernelKind, KernelMatrix, KernelMeta};
use crate::relu::{relu_expectations_unchecked, C_SIGMA};

/// Every quantity of the covariance recursion for one input pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FcKernelTrace {
    /// `Σ⁽⁰⁾ … Σ⁽ᴸ⁾` for the cross pair.
    pub sigmas: Vec<f64>,
    /// `Σ̇⁽¹⁾ … Σ̇⁽ᴸ⁺¹⁾`; the last entry is exactly 1.
    pub sigma_dots: Vec<f64>,
    /// `Θ⁽ᴸ⁾`.
    pub theta: f64,
}

impl FcKernelTrace {
    pub fn depth(&self) -> usize {
        self.sigmas.len() - 1
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn check_pair(x: &[f64], x2: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Shape("inputs must have dimension >= 1".into()));
    }
    if x.len() != x2.len() {
        return Err(Error::Shape(format!(
            "input dimensions differ: {} vs {}",
            x.len(),
            x2.len()
        )));
    }
    Ok(())
}

/// `Σ⁽ʰ⁾(x, x)` for `h = 0..=depth`.
pub fn diagonal_stream(x: &[f64], depth: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(depth + 1);
    let mut s = dot(x, x);
    out.push(s);
    for _ in 0..depth {
        s = C_SIGMA * relu_expectations_unchecked(s, s, s).t;
        out.push(s);
    }
    out
}

/// Runs the recursion for the cross pair given `Σ⁽⁰⁾(x, x')` and both
/// precomputed diagonal streams.
pub fn ntk_from_streams(cross0: f64, diag_x: &[f64], diag_y: &[f64], depth: usize) -> FcKernelTrace {
    debug_assert!(diag_x.len() > depth && diag_y.len() > depth);
    let mut sigmas = Vec::with_capacity(depth + 1);
    let mut sigma_dots = Vec::with_capacity(depth + 1);
    sigmas.push(cross0);
    let mut theta = cross0;
    for h in 1..=depth {
        let e = relu_expectations_unchecked(diag_x[h - 1], sigmas[h - 1], diag_y[h - 1]);
        let sigma = C_SIGMA * e.t;
        let sigma_dot = C_SIGMA * e.tdot;
        theta = theta * sigma_dot + sigma;
        sigmas.push(sigma);
        sigma_dots.push(sigma_dot);
    }
    sigma_dots.push(1.0);
    FcKernelTrace {
        sigmas,
        sigma_dots,
        theta,
    }
}

pub fn ntk_pair(x: &[f64], x2: &[f64], depth: usize) -> Result<FcKernelTrace> {
    check_pair(x, x2)?;
    let dx = diagonal_stream(x, depth);
    let dy = diagonal_stream(x2, depth);
    Ok(ntk_from_streams(dot(x, x2), &dx, &dy, depth))
}

/// Gram matrix of `Θ⁽ᴸ⁾` over `inputs`; diagonal streams are computed once per input.
pub fn ntk_matrix<X: AsRef<[f64]> + Sync>(inputs: &[X], depth: usize) -> Result<KernelMatrix> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::InvalidArgument("ntk_matrix needs at least one input".into()));
    }
    for x in inputs {
        check_pair(inputs[0].as_ref(), x.as_ref())?;
    }
    let streams: Vec<Vec<f64>> = inputs.iter().map(|x| diagonal_stream(x.as_ref(), depth)).collect();
    let entries = symmetric_gram(n, |i, j| {
        let cross = dot(inputs[i].as_ref(), inputs[j].as_ref());
        Ok(ntk_from_streams(cross, &streams[i], &streams[j], depth).theta)
    })?;
    KernelMatrix::new(
        entries,
        KernelMeta {
            kind: KernelKind::FcNtk,
            depth: depth as u32,
            filter_size: None,
            input_checksum: checksum_inputs(inputs.iter().map(|x| x.as_ref())),
        },
    )
}

/// Kernel values between each of `queries` and each of `train`
/// (`queries.len() x train.len()`, row-major).
pub fn ntk_cross<X: AsRef<[f64]> + Sync>(queries: &[X], train: &[X], depth: usize) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = train.first().or(queries.first()) {
        for x in queries.iter().chain(train) {
            check_pair(first.as_ref(), x.as_ref())?;
        }
    }
    let qs: Vec<Vec<f64>> = queries.iter().map(|x| diagonal_stream(x.as_ref(), depth)).collect();
    let ts: Vec<Vec<f64>> = train.iter().map(|x| diagonal_stream(x.as_ref(), depth)).collect();
    let m = crate::kernel_matrix::cross_gram(queries.len(), train.len(), |i, j| {
        let cross = dot(queries[i].as_ref(), train[j].as_ref());
        Ok(ntk_from_streams(cross, &qs[i], &ts[j], depth).theta)
    })?;
    Ok(m.row_iter().map(|r| r.iter().copied().collect()).collect())
}
