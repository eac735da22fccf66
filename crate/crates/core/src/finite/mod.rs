//! Finite-width ReLU networks under NTK parameterization.
//!
//! Every weight is stored as a standard normal draw; the `√(cσ / width)`
//! (MLP) and `√(cσ / (C q²))` (CNN) factors are applied in the forward pass.
//! These networks are the empirical side of every convergence check: their
//! gradient inner products approach the exact kernels as width grows.

mod cnn;
mod mlp;
pub mod train;

use std::ops::Range;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_matrix::{checksum_inputs, KernelKind, KernelMatrix, KernelMeta};
use crate::tensor::PatchGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CnnHead {
    /// `f = Σ_α ⟨W_α, x_α⟩` with a `P x Q` weight map per channel.
    Dense,
    /// `f = Σ_α w_α · mean(x_α)`; first and last layers are frozen.
    GapScalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Hidden widths `d₁ … d_L`, scalar output.
    Mlp { input_dim: usize, hidden: Vec<usize> },
    /// Channels `C⁽¹⁾ … C⁽ᴸ⁾` over a `width x height x in_channels` input.
    Cnn {
        width: usize,
        height: usize,
        in_channels: usize,
        channels: Vec<usize>,
        geom: PatchGeometry,
        head: CnnHead,
    },
}

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>) -> Self {
        Architecture::Mlp { input_dim, hidden }
    }

    /// Number of hidden (MLP) or convolution (CNN) layers `L`.
    pub fn depth(&self) -> usize {
        match self {
            Architecture::Mlp { hidden, .. } => hidden.len(),
            Architecture::Cnn { channels, .. } => channels.len(),
        }
    }

    /// Length of a flat input vector.
    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Mlp { input_dim, .. } => *input_dim,
            Architecture::Cnn {
                width,
                height,
                in_channels,
                ..
            } => width * height * in_channels,
        }
    }

    /// Parameter count of each of the `L + 1` weight blocks.
    fn layer_sizes(&self) -> Vec<usize> {
        match self {
            Architecture::Mlp { input_dim, hidden } => {
                let mut sizes = Vec::with_capacity(hidden.len() + 1);
                let mut prev = *input_dim;
                for &d in hidden {
                    sizes.push(d * prev);
                    prev = d;
                }
                sizes.push(prev);
                sizes
            }
            Architecture::Cnn {
                width,
                height,
                in_channels,
                channels,
                geom,
                head,
            } => {
                let q2 = geom.filter_size().pow(2);
                let mut sizes = Vec::with_capacity(channels.len() + 1);
                let mut prev = *in_channels;
                for &c in channels {
                    sizes.push(c * prev * q2);
                    prev = c;
                }
                sizes.push(match head {
                    CnnHead::Dense => prev * width * height,
                    CnnHead::GapScalar => prev,
                });
                sizes
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Architecture::Mlp { input_dim, hidden } => *input_dim > 0 && hidden.iter().all(|&d| d > 0),
            Architecture::Cnn {
                width,
                height,
                in_channels,
                channels,
                ..
            } => *width > 0 && *height > 0 && *in_channels > 0 && !channels.is_empty() && channels.iter().all(|&c| c > 0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("zero width in architecture {self:?}")))
        }
    }

    /// Layers whose weights are trained. The GAP head freezes the first
    /// convolution and the pooled readout.
    fn default_trainable(&self) -> Vec<bool> {
        let n = self.depth() + 1;
        match self {
            Architecture::Cnn {
                head: CnnHead::GapScalar,
                ..
            } => (0..n).map(|h| h != 0 && h != n - 1).collect(),
            _ => vec![true; n],
        }
    }
}

/// Weights `W⁽¹⁾ … W⁽ᴸ⁺¹⁾` of one network, flattened in layer order.
///
/// MLP blocks are `d_h x d_{h-1}` row-major; CNN filter blocks are laid out
/// `[β][α][a][b]` (output channel, input channel, filter row, filter column).
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteNetParams {
    arch: Architecture,
    weights: Vec<f64>,
    layers: Vec<Range<usize>>,
    trainable: Vec<bool>,
    seed: u64,
}

/// `∂f/∂θ`, aligned with [`FiniteNetParams::weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn init_net(arch: &Architecture, seed: u64) -> Result<FiniteNetParams> {
    arch.validate()?;
    let sizes = arch.layer_sizes();
    let total: usize = sizes.iter().sum();
    let mut layers = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        layers.push(start..start + s);
        start += s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..total).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(FiniteNetParams {
        trainable: arch.default_trainable(),
        arch: arch.clone(),
        weights,
        layers,
        seed,
    })
}

impl FiniteNetParams {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    /// Index range of layer `h` (0-based: `W⁽ʰ⁺¹⁾`).
    pub fn layer_range(&self, h: usize) -> Range<usize> {
        self.layers[h].clone()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, h: usize) -> &[f64] {
        &self.weights[self.layers[h].clone()]
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_trainable(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "trainable mask has {} entries for {} layers",
                mask.len(),
                self.layers.len()
            )));
        }
        self.trainable = mask;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_len() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.arch.input_len(),
                x.len()
            )));
        }
        Ok(())
    }

    /// `Σ_{trainable h} ⟨a_h, b_h⟩`.
    pub fn masked_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.layers
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(r, _)| a[r.clone()].iter().zip(&b[r.clone()]).map(|(u, v)| u * v).sum::<f64>())
            .sum()
    }
}

/// `f(θ, x)`.
pub fn forward(params: &FiniteNetParams, x: &[f64]) -> Result<f64> {
    params.check_input(x)?;
    Ok(match params.arch {
        Architecture::Mlp { .. } => mlp::forward(params, x),
        Architecture::Cnn { .. } => cnn::forward(params, x),
    })
}

/// Exact `∂f/∂θ` by reverse mode, with `relu'(0) = 0`.
pub fn param_gradient(params: &FiniteNetParams, x: &[f64]) -> Result<GradientVector> {
    params.check_input(x)?;
    Ok(GradientVector(match params.arch {
        Architecture::Mlp { .. } => mlp::gradient(params, x),
        Architecture::Cnn { .. } => cnn::gradient(params, x).1,
    }))
}

/// `⟨∂f(θ, x)/∂θ, ∂f(θ, x')/∂θ⟩` over the trainable layers.
pub fn empirical_kernel(params: &FiniteNetParams, x: &[f64], x2: &[f64]) -> Result<f64> {
    params.check_input(x)?;
    params.check_input(x2)?;
    Ok(match params.arch {
        Architecture::Mlp { .. } => mlp::empirical_kernel(params, x, x2),
        Architecture::Cnn { .. } => {
            let g1 = cnn::gradient(params, x).1;
            let g2 = cnn::gradient(params, x2).1;
            params.masked_dot(&g1, &g2)
        }
    })
}

/// Sample mean and standard error of an estimator over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedStatistics {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl SeedStatistics {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            f64::INFINITY
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
            samples: values.len(),
        }
    }
}

/// Empirical kernel values for seeds `base_seed .. base_seed + num_seeds`.
pub fn empirical_kernel_samples(
    arch: &Architecture,
    x: &[f64],
    x2: &[f64],
    num_seeds: usize,
    base_seed: u64,
) -> Result<Vec<f64>> {
    (0..num_seeds as u64)
        .into_par_iter()
        .map(|s| {
            let params = init_net(arch, base_seed + s)?;
            empirical_kernel(&params, x, x2)
        })
        .collect()
}

/// Monte Carlo estimate of the expected empirical kernel over initializations.
pub fn mc_ntk_estimate(
    arch: &Architecture,
    x: &[f64],
    x2: &[f64],
    num_seeds: usize,
    base_seed: u64,
) -> Result<SeedStatistics> {
    if num_seeds < 2 {
        return Err(Error::InvalidArgument("num_seeds must be >= 2".into()));
    }
    let samples = empirical_kernel_samples(arch, x, x2, num_seeds, base_seed)?;
    Ok(SeedStatistics::from_samples(&samples))
}

/// Gram matrix of the empirical kernel at this single initialization.
pub fn random_feature_kernel<X: AsRef<[f64]> + Sync>(params: &FiniteNetParams, inputs: &[X]) -> Result<KernelMatrix> {
    for x in inputs {
        params.check_input(x.as_ref())?;
    }
    let entries = match params.arch {
        Architecture::Mlp { .. } => mlp::gram(params, inputs),
        Architecture::Cnn { .. } => {
            let features = cnn::trainable_features(params, inputs);
            features.dot(&features.t())
        }
    };
    let n = inputs.len();
    let mut m = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // exact symmetry regardless of summation order
            m[(i, j)] = if i <= j { entries[(i, j)] } else { entries[(j, i)] };
        }
    }
    KernelMatrix::new(
        m,
        KernelMeta {
            kind: KernelKind::RandomFeature,
            depth: params.arch.depth() as u32,
            filter_size: match params.arch {
                Architecture::Cnn { geom, .. } => Some(geom.filter_size()),
                _ => None,
            },
            input_checksum: checksum_inputs(inputs.iter().map(|x| x.as_ref())),
        },
    )
}

/// Rows of the empirical kernel between `queries` and `train`.
pub fn random_feature_cross<X: AsRef<[f64]> + Sync>(
    params: &FiniteNetParams,
    queries: &[X],
    train: &[X],
) -> Result<Vec<Vec<f64>>> {
    for x in queries.iter().chain(train) {
        params.check_input(x.as_ref())?;
    }
    let m: Array2<f64> = match params.arch {
        Architecture::Mlp { .. } => mlp::cross(params, queries, train),
        Architecture::Cnn { .. } => {
            let fq = cnn::trainable_features(params, queries);
            let ft = cnn::trainable_features(params, train);
            fq.dot(&ft.t())
        }
    };
    Ok(m.outer_iter().map(|r| r.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fc::ntk_pair;
    use rand::Rng;
    use std::f64::consts::PI;

    fn small_cnn(head: CnnHead) -> Architecture {
        Architecture::Cnn {
            width: 4,
            height: 3,
            in_channels: 2,
            channels: vec![3, 4],
            geom: PatchGeometry::new(3).unwrap(),
            head,
        }
    }

    fn random_input(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central differences with step 1e-5 on every weight.
    fn finite_difference(params: &FiniteNetParams, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        let mut p = params.clone();
        (0..params.num_params())
            .map(|k| {
                let w = p.weights[k];
                p.weights[k] = w + h;
                let up = forward(&p, x).unwrap();
                p.weights[k] = w - h;
                let down = forward(&p, x).unwrap();
                p.weights[k] = w;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn init_is_reproducible() {
        let arch = Architecture::mlp(3, vec![5, 4]);
        let a = init_net(&arch, 1).unwrap();
        assert_eq!(a, init_net(&arch, 1).unwrap());
        assert_ne!(a.weights(), init_net(&arch, 2).unwrap().weights());
        assert_eq!(a.num_params(), 15 + 20 + 4);
        assert!(init_net(&Architecture::mlp(3, vec![0]), 0).is_err());
    }

    #[test]
    fn init_is_standard_normal() {
        let arch = Architecture::mlp(1000, vec![1000]);
        let p = init_net(&arch, 3).unwrap();
        let n = p.num_params() as f64;
        let mean = p.weights().iter().sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt());
        let var = p.weights().iter().map(|w| w * w).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn zero_input_gives_zero() {
        for arch in [Architecture::mlp(3, vec![4, 4]), small_cnn(CnnHead::Dense), small_cnn(CnnHead::GapScalar)] {
            let p = init_net(&arch, 5).unwrap();
            let zero = vec![0.0; arch.input_len()];
            assert_eq!(forward(&p, &zero).unwrap(), 0.0);
            assert!(param_gradient(&p, &zero).unwrap().0.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn width_one_network() {
        let mut p = init_net(&Architecture::mlp(1, vec![1]), 0).unwrap();
        let (w, a, x) = (0.7, -1.3, 2.0);
        p.weights_mut().copy_from_slice(&[w, a]);
        let expected = a * 2f64.sqrt() * (w * x).max(0.0);
        assert!((forward(&p, &[x]).unwrap() - expected).abs() < 1e-15);
        let g = param_gradient(&p, &[x]).unwrap();
        assert!((g.0[1] - 2f64.sqrt() * (w * x).max(0.0)).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let p = init_net(&Architecture::mlp(3, vec![4]), 0).unwrap();
        assert!(forward(&p, &[1.0]).is_err());
        assert!(param_gradient(&p, &[1.0, 2.0]).is_err());
        assert!(empirical_kernel(&p, &[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, arch) in [
            Architecture::mlp(3, vec![5, 4]),
            small_cnn(CnnHead::Dense),
            small_cnn(CnnHead::GapScalar),
        ]
        .into_iter()
        .enumerate()
        {
            let p = init_net(&arch, 20 + k as u64).unwrap();
            let x = random_input(arch.input_len(), &mut rng);
            let g = param_gradient(&p, &x).unwrap();
            let fd = finite_difference(&p, &x);
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in g.0.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * scale.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn layerwise_homogeneity_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for arch in [Architecture::mlp(3, vec![6, 5, 4]), small_cnn(CnnHead::Dense), small_cnn(CnnHead::GapScalar)] {
            let p = init_net(&arch, 7).unwrap();
            let x = random_input(arch.input_len(), &mut rng);
            let f = forward(&p, &x).unwrap();
            let g = param_gradient(&p, &x).unwrap();
            let mut total = 0.0;
            for h in 0..p.num_layers() {
                let r = p.layer_range(h);
                let layer: f64 = p.weights[r.clone()].iter().zip(&g.0[r]).map(|(w, d)| w * d).sum();
                assert!((layer - f).abs() <= 1e-10 * f.abs().max(1.0));
                total += layer;
            }
            assert!((total / p.num_layers() as f64 - f).abs() <= 1e-10 * f.abs().max(1.0));
        }
    }

    #[test]
    fn input_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for arch in [Architecture::mlp(3, vec![6, 5]), small_cnn(CnnHead::GapScalar)] {
            let p = init_net(&arch, 9).unwrap();
            let x = random_input(arch.input_len(), &mut rng);
            let cx: Vec<f64> = x.iter().map(|v| 3.5 * v).collect();
            let (a, b) = (forward(&p, &x).unwrap(), forward(&p, &cx).unwrap());
            assert!((b - 3.5 * a).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn factored_kernel_matches_gradient_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = init_net(&Architecture::mlp(4, vec![7, 6, 5]), 3).unwrap();
        let x = random_input(4, &mut rng);
        let y = random_input(4, &mut rng);
        let gx = param_gradient(&p, &x).unwrap();
        let gy = param_gradient(&p, &y).unwrap();
        let direct: f64 = gx.0.iter().zip(&gy.0).map(|(a, b)| a * b).sum();
        let k = empirical_kernel(&p, &x, &y).unwrap();
        assert!((k - direct).abs() < 1e-12 * direct.abs().max(1.0));
        assert!(empirical_kernel(&p, &x, &x).unwrap() >= 0.0);
        assert!((k - empirical_kernel(&p, &y, &x).unwrap()).abs() < 1e-12 * k.abs().max(1.0));
    }

    #[test]
    fn gap_kernel_excludes_frozen_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let arch = small_cnn(CnnHead::GapScalar);
        let p = init_net(&arch, 4).unwrap();
        assert_eq!(p.trainable(), &[false, true, false]);
        let x = random_input(arch.input_len(), &mut rng);
        let g = param_gradient(&p, &x).unwrap();
        let r = p.layer_range(1);
        let middle: f64 = g.0[r].iter().map(|v| v * v).sum();
        assert!((empirical_kernel(&p, &x, &x).unwrap() - middle).abs() < 1e-12 * middle);
    }

    #[test]
    fn random_feature_gram_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for arch in [Architecture::mlp(3, vec![8, 8]), small_cnn(CnnHead::Dense), small_cnn(CnnHead::GapScalar)] {
            let p = init_net(&arch, 6).unwrap();
            let xs: Vec<Vec<f64>> = (0..6).map(|_| random_input(arch.input_len(), &mut rng)).collect();
            let k = random_feature_kernel(&p, &xs).unwrap();
            k.check_invariants().unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let direct = empirical_kernel(&p, &xs[i], &xs[j]).unwrap();
                    assert!((k.get(i, j) - direct).abs() < 1e-10 * direct.abs().max(1.0));
                }
            }
            let rows = random_feature_cross(&p, &xs[..2], &xs).unwrap();
            assert!((rows[1][3] - k.get(1, 3)).abs() < 1e-10 * k.max_abs());
            let single = random_feature_kernel(&p, &xs[..1]).unwrap();
            let g = param_gradient(&p, &xs[0]).unwrap();
            let sq = p.masked_dot(&g.0, &g.0);
            assert!((single.get(0, 0) - sq).abs() < 1e-10 * sq);
        }
    }

    #[test]
    fn wide_net_kernel_near_analytic() {
        let arch = Architecture::mlp(2, vec![4096]);
        let est = mc_ntk_estimate(&arch, &[1.0, 0.0], &[0.0, 1.0], 20, 100).unwrap();
        let exact = ntk_pair(&[1.0, 0.0], &[0.0, 1.0], 1).unwrap().theta;
        assert!((exact - 1.0 / PI).abs() < 1e-15);
        assert!((est.mean - exact).abs() < 0.1, "{} vs {exact}", est.mean);
    }

    #[test]
    fn mc_estimate_contract() {
        let arch = Architecture::mlp(2, vec![32]);
        let x = [0.6, 0.8];
        assert!(mc_ntk_estimate(&arch, &x, &x, 1, 0).is_err());
        let a = mc_ntk_estimate(&arch, &x, &x, 16, 5).unwrap();
        assert_eq!(a, mc_ntk_estimate(&arch, &x, &x, 16, 5).unwrap());
        assert!(a.mean > 0.0);
        // stderr shrinks roughly as 1/sqrt(seeds)
        let b = mc_ntk_estimate(&arch, &x, &x, 256, 5).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!(ratio > 2.0 && ratio < 8.0, "ratio {ratio}");
    }
}
