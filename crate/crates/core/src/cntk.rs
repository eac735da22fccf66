//! Exact convolutional NTK for vanilla CNNs and CNNs with global average
//! pooling.
//!
//! The recursion streams one layer at a time. Per pair it keeps the cross
//! covariance `Σ⁽ʰ⁾(x, x')` and `Θ⁽ʰ⁾(x, x')` as full `P x Q x P x Q` tensors;
//! the same-input covariances only ever enter through their diagonals, so
//! they are carried as `P * Q` vectors and cached per input when building a
//! Gram matrix.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_matrix::{checksum_inputs, cross_gram, symmetric_gram, KernelKind, KernelMatrix, KernelMeta};
use crate::relu::{mc_relu_expectations, relu_expectations_unchecked, rescaled_expectations, Cov2, ReluExpectationPair, C_SIGMA};
use crate::tensor::{
    mean_all, patch_inner_sum, patch_norms_sq, trace_diag, trace_diagonal_stream, trace_over_patches,
    ImageTensor, PatchGeometry, PatchKernelTensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CntkArch {
    Vanilla,
    /// Global average pooling head; the first and last layers are untrained.
    GlobalAveragePooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CntkConfig {
    pub depth: usize,
    pub geom: PatchGeometry,
    pub arch: CntkArch,
}

impl CntkConfig {
    pub fn new(depth: usize, geom: PatchGeometry, arch: CntkArch) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("CNTK depth must be >= 1".into()));
        }
        if depth == 1 && arch == CntkArch::GlobalAveragePooling {
            warn!("GAP-CNTK with a single convolution layer trains no weights; the kernel is identically 0");
        }
        Ok(Self { depth, geom, arch })
    }

    pub fn kind(&self) -> KernelKind {
        match self.arch {
            CntkArch::Vanilla => KernelKind::CntkVanilla,
            CntkArch::GlobalAveragePooling => KernelKind::CntkGap,
        }
    }

    /// `cσ / q²`.
    #[inline]
    fn layer_factor(&self) -> f64 {
        let q = self.geom.filter_size() as f64;
        C_SIGMA / (q * q)
    }
}

/// Recursion state for one image pair after layer `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct CntkPairState {
    /// Diagonal of `Σ⁽ʰ⁾(x, x)`, indexed by `i * Q + j`.
    pub sigma_xx: Vec<f64>,
    pub sigma_xy: PatchKernelTensor,
    /// Diagonal of `Σ⁽ʰ⁾(x', x')`.
    pub sigma_yy: Vec<f64>,
    pub theta: PatchKernelTensor,
    pub layer: usize,
}

/// Diagonals of `Σ⁽ʰ⁾(x, x)` for `h = 0..=depth`, shared by every pair
/// involving `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalStreams {
    layers: Vec<Vec<f64>>,
}

impl DiagonalStreams {
    pub fn new(x: &ImageTensor, cfg: &CntkConfig) -> Self {
        let (p, q, _) = x.shape();
        let mut layers = Vec::with_capacity(cfg.depth + 1);
        layers.push(patch_norms_sq(x, cfg.geom));
        for h in 1..=cfg.depth {
            let next = next_diagonal(&layers[h - 1], p, q, cfg);
            layers.push(next);
        }
        Self { layers }
    }

    pub fn layer(&self, h: usize) -> &[f64] {
        &self.layers[h]
    }
}

fn next_diagonal(prev: &[f64], width: usize, height: usize, cfg: &CntkConfig) -> Vec<f64> {
    let factor = cfg.layer_factor();
    let k_diag: Vec<f64> = prev
        .iter()
        .map(|&s| factor * relu_expectations_unchecked(s, s, s).t)
        .collect();
    trace_diagonal_stream(&k_diag, width, height, cfg.geom)
}

pub fn cntk_layer0(x: &ImageTensor, x2: &ImageTensor, cfg: &CntkConfig) -> Result<CntkPairState> {
    x.check_same_shape(x2)?;
    let sigma_xy = patch_inner_sum(x, x2, cfg.geom)?;
    let theta = match cfg.arch {
        CntkArch::Vanilla => sigma_xy.clone(),
        CntkArch::GlobalAveragePooling => PatchKernelTensor::zeros(x.width(), x.height()),
    };
    Ok(CntkPairState {
        sigma_xx: patch_norms_sq(x, cfg.geom),
        sigma_xy,
        sigma_yy: patch_norms_sq(x2, cfg.geom),
        theta,
        layer: 0,
    })
}

/// `K⁽ʰ⁾` and `K̇⁽ʰ⁾` for the cross pair. Each `Λ` is rebuilt from the cached
/// diagonal scales `D_x`, `D_x'` and the unit-diagonal closed forms.
fn activation_kernels(
    sigma_xy: &PatchKernelTensor,
    diag_x: &[f64],
    diag_y: &[f64],
    factor: f64,
) -> (PatchKernelTensor, PatchKernelTensor) {
    let n = sigma_xy.positions();
    let scale_x: Vec<f64> = diag_x.iter().map(|v| v.max(0.0).sqrt()).collect();
    let scale_y: Vec<f64> = diag_y.iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut k = vec![0.0; n * n];
    let mut kdot = vec![0.0; n * n];
    let src = sigma_xy.data();
    for (a, &c1) in scale_x.iter().enumerate() {
        let row = a * n;
        for b in 0..n {
            let c2 = scale_y[b];
            // a single division: arccos amplifies rounding near |λ| = 1
            let scale = c1 * c2;
            let lambda = if scale > 0.0 { src[row + b] / scale } else { 0.0 };
            let e = rescaled_expectations(lambda, c1, c2);
            k[row + b] = factor * e.t;
            kdot[row + b] = factor * e.tdot;
        }
    }
    let (p, q) = (sigma_xy.width(), sigma_xy.height());
    (
        PatchKernelTensor::from_vec(p, q, k).expect("shape"),
        PatchKernelTensor::from_vec(p, q, kdot).expect("shape"),
    )
}

/// `K̇ ⊙ Θ (+ K)`.
fn theta_update(kdot: &PatchKernelTensor, theta: &PatchKernelTensor, k: Option<&PatchKernelTensor>) -> PatchKernelTensor {
    let mut out = kdot.clone();
    for (o, t) in out.data_mut().iter_mut().zip(theta.data()) {
        *o *= t;
    }
    if let Some(k) = k {
        for (o, kv) in out.data_mut().iter_mut().zip(k.data()) {
            *o += kv;
        }
    }
    out
}

struct StepOutput {
    sigma_xy: Option<PatchKernelTensor>,
    theta: PatchKernelTensor,
}

fn step_cross(
    sigma_xy: &PatchKernelTensor,
    theta: &PatchKernelTensor,
    diag_x: &[f64],
    diag_y: &[f64],
    cfg: &CntkConfig,
    is_last: bool,
    want_sigma: bool,
) -> StepOutput {
    let (k, kdot) = activation_kernels(sigma_xy, diag_x, diag_y, cfg.layer_factor());
    let theta = if is_last {
        match cfg.arch {
            CntkArch::Vanilla => theta_update(&kdot, theta, Some(&k)),
            CntkArch::GlobalAveragePooling => theta_update(&kdot, theta, None),
        }
    } else {
        trace_over_patches(&theta_update(&kdot, theta, Some(&k)), cfg.geom)
    };
    let sigma_xy = want_sigma.then(|| trace_over_patches(&k, cfg.geom));
    StepOutput { sigma_xy, theta }
}

/// Advances a layer-`(h-1)` state to layer `h`. With `is_last` the final
/// `Θ⁽ᴸ⁾` is formed without the trace-over-patches step.
pub fn cntk_step(state: &CntkPairState, cfg: &CntkConfig, is_last: bool) -> Result<CntkPairState> {
    state.sigma_xy.check_same_shape(&state.theta)?;
    let (p, q) = (state.sigma_xy.width(), state.sigma_xy.height());
    if state.sigma_xx.len() != p * q || state.sigma_yy.len() != p * q {
        return Err(Error::Shape("diagonal streams do not match the patch tensors".into()));
    }
    let out = step_cross(&state.sigma_xy, &state.theta, &state.sigma_xx, &state.sigma_yy, cfg, is_last, true);
    if out.theta.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("Θ at layer {}", state.layer + 1)));
    }
    Ok(CntkPairState {
        sigma_xx: next_diagonal(&state.sigma_xx, p, q, cfg),
        sigma_xy: out.sigma_xy.expect("requested"),
        sigma_yy: next_diagonal(&state.sigma_yy, p, q, cfg),
        theta: out.theta,
        layer: state.layer + 1,
    })
}

fn reduce(theta: &PatchKernelTensor, cfg: &CntkConfig) -> f64 {
    match cfg.arch {
        CntkArch::Vanilla => trace_diag(theta),
        CntkArch::GlobalAveragePooling => mean_all(theta),
    }
}

/// Pair value from precomputed diagonal streams.
pub fn cntk_pair_cached(
    x: &ImageTensor,
    x2: &ImageTensor,
    streams_x: &DiagonalStreams,
    streams_y: &DiagonalStreams,
    cfg: &CntkConfig,
) -> Result<f64> {
    x.check_same_shape(x2)?;
    let mut sigma = patch_inner_sum(x, x2, cfg.geom)?;
    let mut theta = match cfg.arch {
        CntkArch::Vanilla => sigma.clone(),
        CntkArch::GlobalAveragePooling => PatchKernelTensor::zeros(x.width(), x.height()),
    };
    for h in 1..=cfg.depth {
        let is_last = h == cfg.depth;
        let out = step_cross(
            &sigma,
            &theta,
            streams_x.layer(h - 1),
            streams_y.layer(h - 1),
            cfg,
            is_last,
            !is_last,
        );
        theta = out.theta;
        if let Some(s) = out.sigma_xy {
            sigma = s;
        }
    }
    Ok(reduce(&theta, cfg))
}

pub fn cntk_pair(x: &ImageTensor, x2: &ImageTensor, cfg: &CntkConfig) -> Result<f64> {
    x.check_same_shape(x2)?;
    let sx = DiagonalStreams::new(x, cfg);
    let sy = DiagonalStreams::new(x2, cfg);
    cntk_pair_cached(x, x2, &sx, &sy, cfg)
}

fn check_uniform(inputs: &[ImageTensor]) -> Result<()> {
    if let Some(first) = inputs.first() {
        for x in inputs {
            first.check_same_shape(x)?;
        }
    }
    Ok(())
}

fn meta_for(inputs: &[ImageTensor], cfg: &CntkConfig) -> KernelMeta {
    KernelMeta {
        kind: cfg.kind(),
        depth: cfg.depth as u32,
        filter_size: Some(cfg.geom.filter_size()),
        input_checksum: checksum_inputs(inputs.iter().map(|x| x.data())),
    }
}

/// Symmetric Gram matrix; diagonal streams are computed in a first pass and
/// shared read-only by all pairs.
pub fn cntk_matrix(inputs: &[ImageTensor], cfg: &CntkConfig) -> Result<KernelMatrix> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("cntk_matrix needs at least one input".into()));
    }
    check_uniform(inputs)?;
    let streams: Vec<DiagonalStreams> = inputs.iter().map(|x| DiagonalStreams::new(x, cfg)).collect();
    let entries = symmetric_gram(inputs.len(), |i, j| {
        cntk_pair_cached(&inputs[i], &inputs[j], &streams[i], &streams[j], cfg)
    })?;
    KernelMatrix::new(entries, meta_for(inputs, cfg))
}

/// Kernel rows between `queries` and `train` (`queries.len() x train.len()`).
pub fn cntk_cross(queries: &[ImageTensor], train: &[ImageTensor], cfg: &CntkConfig) -> Result<Vec<Vec<f64>>> {
    let all: Vec<ImageTensor> = queries.iter().chain(train).cloned().collect();
    check_uniform(&all)?;
    let qs: Vec<DiagonalStreams> = queries.iter().map(|x| DiagonalStreams::new(x, cfg)).collect();
    let ts: Vec<DiagonalStreams> = train.iter().map(|x| DiagonalStreams::new(x, cfg)).collect();
    let m = cross_gram(queries.len(), train.len(), |i, j| {
        cntk_pair_cached(&queries[i], &train[j], &qs[i], &ts[j], cfg)
    })?;
    Ok(m.row_iter().map(|r| r.iter().copied().collect()).collect())
}

/// From-definition recursion: materializes the full `Σ(x, x)`, `Σ(x', x')`
/// and `Σ(x, x')` tensors, builds every `Λ_{ij,i'j'}` explicitly and
/// evaluates the expectations through `expect`.
pub fn cntk_pair_reference<F>(x: &ImageTensor, x2: &ImageTensor, cfg: &CntkConfig, mut expect: F) -> Result<f64>
where
    F: FnMut(Cov2) -> Result<ReluExpectationPair>,
{
    x.check_same_shape(x2)?;
    let (p, q) = (x.width(), x.height());
    let factor = cfg.layer_factor();
    let mut sxx = patch_inner_sum(x, x, cfg.geom)?;
    let mut syy = patch_inner_sum(x2, x2, cfg.geom)?;
    let mut sxy = patch_inner_sum(x, x2, cfg.geom)?;
    let mut theta = match cfg.arch {
        CntkArch::Vanilla => sxy.clone(),
        CntkArch::GlobalAveragePooling => PatchKernelTensor::zeros(p, q),
    };

    let mut kernels = |s_left: &PatchKernelTensor, s_cross: &PatchKernelTensor, s_right: &PatchKernelTensor| -> Result<(PatchKernelTensor, PatchKernelTensor)> {
        let mut k = PatchKernelTensor::zeros(p, q);
        let mut kd = PatchKernelTensor::zeros(p, q);
        for i in 0..p {
            for j in 0..q {
                for i2 in 0..p {
                    for j2 in 0..q {
                        let lambda = Cov2 {
                            s11: s_left.get(i, j, i, j),
                            s12: s_cross.get(i, j, i2, j2),
                            s22: s_right.get(i2, j2, i2, j2),
                        };
                        let e = expect(lambda)?;
                        k.set(i, j, i2, j2, factor * e.t);
                        kd.set(i, j, i2, j2, factor * e.tdot);
                    }
                }
            }
        }
        Ok((k, kd))
    };

    for h in 1..=cfg.depth {
        let is_last = h == cfg.depth;
        let (k_xy, kd_xy) = kernels(&sxx, &sxy, &syy)?;
        theta = if is_last {
            match cfg.arch {
                CntkArch::Vanilla => theta_update(&kd_xy, &theta, Some(&k_xy)),
                CntkArch::GlobalAveragePooling => theta_update(&kd_xy, &theta, None),
            }
        } else {
            trace_over_patches(&theta_update(&kd_xy, &theta, Some(&k_xy)), cfg.geom)
        };
        if !is_last {
            let (k_xx, _) = kernels(&sxx, &sxx, &sxx)?;
            let (k_yy, _) = kernels(&syy, &syy, &syy)?;
            sxx = trace_over_patches(&k_xx, cfg.geom);
            syy = trace_over_patches(&k_yy, cfg.geom);
            sxy = trace_over_patches(&k_xy, cfg.geom);
        }
    }
    Ok(reduce(&theta, cfg))
}

/// [`cntk_pair_reference`] with Monte Carlo expectations: a stochastic
/// oracle, deterministic given `seed`.
pub fn cntk_pair_naive(
    x: &ImageTensor,
    x2: &ImageTensor,
    cfg: &CntkConfig,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut counter = 0u64;
    cntk_pair_reference(x, x2, cfg, |lambda| {
        counter += 1;
        let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(counter);
        Ok(mc_relu_expectations(&lambda, mc_samples, sub_seed)?.mean)
    })
}
