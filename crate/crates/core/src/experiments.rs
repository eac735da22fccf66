//! Finite-width verification experiments shared by the CLI and the
//! acceptance suite. Every driver is deterministic given its seeds.

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cntk::{cntk_matrix, CntkArch, CntkConfig};
use crate::data::{synthetic_sphere_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::fc::{ntk_cross, ntk_matrix, ntk_pair};
use crate::finite::train::{network_outputs, train_until, TrainState};
use crate::finite::{
    empirical_kernel, empirical_kernel_samples, init_net, random_feature_cross, random_feature_kernel, Architecture,
    CnnHead,
};
use crate::pipeline::{classify_with_kernel, cross, gram, KernelSpec};
use crate::kernel_matrix::KernelKind;
use crate::regression::fit_entries;
use crate::tensor::PatchGeometry;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub depth: usize,
    pub x: Vec<f64>,
    pub x2: Vec<f64>,
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub base_seed: u64,
}

impl ConvergenceConfig {
    /// Unit orthogonal inputs `e₁`, `e₂` in `R^dim`.
    pub fn orthogonal(depth: usize, dim: usize, widths: Vec<usize>, seeds: usize, base_seed: u64) -> Self {
        let mut x = vec![0.0; dim.max(2)];
        let mut x2 = x.clone();
        x[0] = 1.0;
        x2[1] = 1.0;
        Self {
            depth,
            x,
            x2,
            widths,
            seeds,
            base_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WidthRow {
    pub width: usize,
    pub median_abs_dev: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub depth: usize,
    pub analytic: f64,
    pub rows: Vec<WidthRow>,
    /// Median deviation never increases from one width to the next.
    pub monotone: bool,
}

pub fn ntk_convergence(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    if cfg.seeds < 2 || cfg.widths.is_empty() {
        return Err(Error::InvalidArgument("need at least 2 seeds and one width".into()));
    }
    let analytic = ntk_pair(&cfg.x, &cfg.x2, cfg.depth)?.theta;
    let mut rows = Vec::with_capacity(cfg.widths.len());
    for &w in &cfg.widths {
        let arch = Architecture::mlp(cfg.x.len(), vec![w; cfg.depth]);
        let samples = empirical_kernel_samples(&arch, &cfg.x, &cfg.x2, cfg.seeds, cfg.base_seed)?;
        let stats = crate::finite::SeedStatistics::from_samples(&samples);
        let mut devs: Vec<f64> = samples.iter().map(|s| (s - analytic).abs()).collect();
        let row = WidthRow {
            width: w,
            median_abs_dev: median(&mut devs),
            mean: stats.mean,
            stderr: stats.stderr,
        };
        info!("width {w}: median |dev| {:.4}, mean {:.4}", row.median_abs_dev, row.mean);
        rows.push(row);
    }
    let monotone = rows.windows(2).all(|w| w[1].median_abs_dev <= w[0].median_abs_dev);
    Ok(ConvergenceReport {
        depth: cfg.depth,
        analytic,
        rows,
        monotone,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub kappa: f64,
    /// Defaults to `1 / (κ² λ_max(H*))` when absent.
    pub step_size: Option<f64>,
    /// Stop once `loss <= loss_ratio * initial loss`.
    pub loss_ratio: f64,
    pub max_steps: usize,
    pub data_seed: u64,
    pub net_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub net_seed: u64,
    pub step_size: f64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub converged: bool,
    pub max_abs_y: f64,
    /// `max |κ f(θ(0), x_te)|`: the offset the zero-initialization assumption ignores.
    pub initial_test_bias: f64,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    /// `max |f_nn − (u₀(x_te) + k(x_te)ᵀ H*⁻¹ (y − u₀))|`: the same comparison
    /// with the initial outputs carried through the kernel predictor.
    pub max_abs_diff_with_init: f64,
}

/// Training inputs, their targets, and test inputs.
pub type EquivalenceData = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// `±1` targets from a planted two-class split of unit points.
pub fn equivalence_data(cfg: &EquivalenceConfig) -> Result<EquivalenceData> {
    let ds = synthetic_sphere_dataset(cfg.n_train + cfg.n_test, (1, 1, cfg.input_dim), 2, cfg.data_seed)?;
    let xs = ds.inputs();
    let ys: Vec<f64> = ds.labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    Ok((xs[..cfg.n_train].to_vec(), ys[..cfg.n_train].to_vec(), xs[cfg.n_train..].to_vec()))
}

/// Trains a finite MLP with multiplier κ and compares its test outputs with
/// the exact-kernel predictor `k(x)ᵀ H*⁻¹ y`.
pub fn equivalence(cfg: &EquivalenceConfig) -> Result<EquivalenceReport> {
    let (xs, ys, xt) = equivalence_data(cfg)?;
    let h = ntk_matrix(&xs, cfg.depth)?;
    let y = DMatrix::from_column_slice(ys.len(), 1, &ys);
    let pred = fit_entries(h.entries(), &y, 0.0)?;
    let rows = ntk_cross(&xt, &xs, cfg.depth)?;
    let f_ntk: Vec<f64> = rows.iter().map(|r| pred.predict(r).map(|v| v[0])).collect::<Result<_>>()?;

    let lambda_max = nalgebra::SymmetricEigen::new(h.entries().clone())
        .eigenvalues
        .max();
    let eta = cfg.step_size.unwrap_or(1.0 / (cfg.kappa * cfg.kappa * lambda_max));
    let arch = Architecture::mlp(cfg.input_dim, vec![cfg.width; cfg.depth]);
    let params = init_net(&arch, cfg.net_seed)?;
    let u0_test = network_outputs(&params, cfg.kappa, &xt)?;
    let initial_test_bias = u0_test.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let u0 = network_outputs(&params, cfg.kappa, &xs)?;
    let r0 = DMatrix::from_iterator(u0.len(), 1, ys.iter().zip(&u0).map(|(y, u)| y - u));
    let pred0 = fit_entries(h.entries(), &r0, 0.0)?;
    let f_lin: Vec<f64> = rows
        .iter()
        .zip(&u0_test)
        .map(|(r, u)| pred0.predict(r).map(|v| u + v[0]))
        .collect::<Result<_>>()?;
    let initial_loss = 0.5 * u0.iter().zip(&ys).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let target = cfg.loss_ratio * initial_loss;
    let state = train_until(TrainState::new(params, cfg.kappa, eta), &xs, &ys, target, cfg.max_steps)?;
    let f_nn = network_outputs(&state.params, cfg.kappa, &xt)?;
    let diffs: Vec<f64> = f_nn.iter().zip(&f_ntk).map(|(a, b)| (a - b).abs()).collect();
    let report = EquivalenceReport {
        net_seed: cfg.net_seed,
        step_size: eta,
        steps: state.steps,
        initial_loss,
        final_loss: state.loss,
        converged: state.loss <= target,
        max_abs_y: ys.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        initial_test_bias,
        max_abs_diff: diffs.iter().copied().fold(0.0, f64::max),
        mean_abs_diff: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
        max_abs_diff_with_init: f_nn.iter().zip(&f_lin).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
    };
    info!(
        "seed {}: {} steps, max |f_nn - f_ntk| = {:.4}",
        cfg.net_seed, report.steps, report.max_abs_diff
    );
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub n: usize,
    pub input_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub kappa: f64,
    pub step_size: f64,
    pub data_seed: u64,
    pub net_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DynamicsReport {
    pub net_seed: u64,
    /// `‖Δu − (−η κ² H (u − y))‖ / ‖η κ² H (u − y)‖`.
    pub relative_error: f64,
    pub predicted_norm: f64,
}

/// Compares one gradient step's output change with the kernel prediction.
pub fn one_step_dynamics(cfg: &DynamicsConfig) -> Result<DynamicsReport> {
    let ds = synthetic_sphere_dataset(cfg.n, (1, 1, cfg.input_dim), 2, cfg.data_seed)?;
    let xs = ds.inputs();
    let ys: Vec<f64> = ds.labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let arch = Architecture::mlp(cfg.input_dim, vec![cfg.width; cfg.depth]);
    let params = init_net(&arch, cfg.net_seed)?;
    let h: Vec<Vec<f64>> = xs
        .iter()
        .map(|a| xs.iter().map(|b| empirical_kernel(&params, a, b)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let state = crate::finite::train::train_full_batch(
        TrainState::new(params, cfg.kappa, cfg.step_size),
        &xs,
        &ys,
        1,
    )?;
    let (u0, u1) = (&state.output_history[0], &state.output_history[1]);
    let scale = cfg.step_size * cfg.kappa * cfg.kappa;
    let mut err = 0.0;
    let mut norm = 0.0;
    for i in 0..cfg.n {
        let predicted = -scale * (0..cfg.n).map(|j| h[i][j] * (u0[j] - ys[j])).sum::<f64>();
        err += (u1[i] - u0[i] - predicted).powi(2);
        norm += predicted * predicted;
    }
    Ok(DynamicsReport {
        net_seed: cfg.net_seed,
        relative_error: (err / norm).sqrt(),
        predicted_norm: norm.sqrt(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfCompareConfig {
    pub depth: usize,
    pub geom: PatchGeometry,
    pub head: CnnHead,
    /// Channel counts for the deviation study.
    pub channels: Vec<usize>,
    /// Channel counts at which the random-feature kernel is also used to classify.
    pub accuracy_channels: Vec<usize>,
    /// Number of leading training images on which deviation is measured.
    pub deviation_subset: usize,
    /// Initializations averaged per channel count (seeds `seed..seed + n`).
    pub deviation_seeds: usize,
    pub seed: u64,
    pub ridge: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RfRow {
    pub channels: usize,
    /// `mean |K_rf − K| / mean |K|` over the deviation subset, averaged over seeds.
    pub deviation: f64,
    pub deviation_per_seed: Vec<f64>,
    /// `max |K_rf − K| / max |K|` over the deviation subset, averaged over seeds.
    pub max_deviation: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RfCompareReport {
    pub kernel: KernelKind,
    pub exact_accuracy: f64,
    pub rows: Vec<RfRow>,
    /// Deviation strictly decreases as channels grow.
    pub deviation_decreasing: bool,
}

fn rf_arch(ds: &LabeledDataset, cfg: &RfCompareConfig, channels: usize) -> Architecture {
    let s = ds.shape();
    Architecture::Cnn {
        width: s.width,
        height: s.height,
        in_channels: s.channels,
        channels: vec![channels; cfg.depth],
        geom: cfg.geom,
        head: cfg.head,
    }
}

/// Exact CNTK against single-initialization random-feature kernels.
pub fn rf_compare(train: &LabeledDataset, test: &LabeledDataset, cfg: &RfCompareConfig) -> Result<RfCompareReport> {
    let kind = match cfg.head {
        CnnHead::Dense => KernelKind::CntkVanilla,
        CnnHead::GapScalar => KernelKind::CntkGap,
    };
    let k = train.k.max(test.k);
    let spec = KernelSpec::new(kind, cfg.depth, cfg.geom)?;
    let h = gram(&spec, train)?;
    let rows = cross(&spec, test, train)?;
    let exact_accuracy = classify_with_kernel(&h, &train.labels, &rows, &test.labels, k, cfg.ridge)?.1.accuracy;
    info!("exact {}: accuracy {exact_accuracy:.3}", kind.name());

    let m = cfg.deviation_subset.min(train.len());
    let subset = train.slice(0, m)?;
    let arch_cfg = CntkConfig::new(
        cfg.depth,
        cfg.geom,
        match cfg.head {
            CnnHead::Dense => CntkArch::Vanilla,
            CnnHead::GapScalar => CntkArch::GlobalAveragePooling,
        },
    )?;
    let exact_sub = cntk_matrix(&subset.images, &arch_cfg)?;
    let mean_exact = exact_sub.entries().iter().map(|v| v.abs()).sum::<f64>() / (m * m) as f64;

    let mut out = Vec::with_capacity(cfg.channels.len());
    if cfg.deviation_seeds == 0 {
        return Err(Error::InvalidArgument("deviation_seeds must be >= 1".into()));
    }
    let sub_inputs = subset.inputs();
    for &c in &cfg.channels {
        let arch = rf_arch(train, cfg, c);
        let mut deviation_per_seed = Vec::with_capacity(cfg.deviation_seeds);
        let mut max_dev_sum = 0.0;
        for s in 0..cfg.deviation_seeds as u64 {
            let params = init_net(&arch, cfg.seed + s)?;
            let rf_sub = random_feature_kernel(&params, &sub_inputs)?;
            let diff = rf_sub.entries() - exact_sub.entries();
            deviation_per_seed.push(diff.iter().map(|v| v.abs()).sum::<f64>() / (m * m) as f64 / mean_exact);
            max_dev_sum += diff.abs().max() / exact_sub.max_abs();
        }
        let deviation = deviation_per_seed.iter().sum::<f64>() / cfg.deviation_seeds as f64;
        let max_deviation = max_dev_sum / cfg.deviation_seeds as f64;
        let accuracy = if cfg.accuracy_channels.contains(&c) {
            let params = init_net(&arch, cfg.seed)?;
            let train_in = train.inputs();
            let test_in = test.inputs();
            let rf_h = random_feature_kernel(&params, &train_in)?;
            let rf_rows = random_feature_cross(&params, &test_in, &train_in)?;
            Some(classify_with_kernel(&rf_h, &train.labels, &rf_rows, &test.labels, k, cfg.ridge)?.1.accuracy)
        } else {
            None
        };
        info!("random features C={c}: deviation {deviation:.4}, accuracy {accuracy:?}");
        out.push(RfRow {
            channels: c,
            deviation,
            deviation_per_seed,
            max_deviation,
            accuracy,
        });
    }
    let deviation_decreasing = out.windows(2).all(|w| w[1].deviation < w[0].deviation);
    Ok(RfCompareReport {
        kernel: kind,
        exact_accuracy,
        rows: out,
        deviation_decreasing,
    })
}

/// Runs `f` for every seed in parallel, preserving seed order.
pub fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    seeds.par_iter().map(|&s| f(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cntk::cntk_pair;
    use crate::finite::mc_ntk_estimate;
    use crate::tensor::ImageTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(w: usize, h: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::from_fn(w, h, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        img.scaled(1.0 / img.norm())
    }

    /// The exact CNTK is the expectation of the finite-width empirical
    /// kernel; averaging over initializations must land near it.
    #[test]
    fn finite_cnn_kernel_matches_cntk() {
        let geom = PatchGeometry::new(3).unwrap();
        let (x, y) = (image(4, 4, 2, 1), image(4, 4, 2, 2));
        for (head, arch) in [(CnnHead::Dense, CntkArch::Vanilla), (CnnHead::GapScalar, CntkArch::GlobalAveragePooling)] {
            let exact = cntk_pair(&x, &y, &CntkConfig::new(2, geom, arch).unwrap()).unwrap();
            let net = Architecture::Cnn {
                width: 4,
                height: 4,
                in_channels: 2,
                channels: vec![128, 128],
                geom,
                head,
            };
            let est = mc_ntk_estimate(&net, x.data(), y.data(), 24, 40).unwrap();
            let tol = 4.0 * est.stderr + 0.05 * exact.abs();
            assert!((est.mean - exact).abs() <= tol, "{head:?}: {} +- {} vs {exact}", est.mean, est.stderr);
        }
    }

    #[test]
    fn convergence_report_shape() {
        let cfg = ConvergenceConfig::orthogonal(1, 2, vec![16, 256], 8, 3);
        let r = ntk_convergence(&cfg).unwrap();
        assert!((r.analytic - 1.0 / std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows[1].median_abs_dev < r.rows[0].median_abs_dev);
    }

    #[test]
    fn small_equivalence_run() {
        let cfg = EquivalenceConfig {
            n_train: 4,
            n_test: 3,
            input_dim: 3,
            depth: 1,
            width: 512,
            kappa: 0.2,
            step_size: None,
            loss_ratio: 1e-4,
            max_steps: 20_000,
            data_seed: 1,
            net_seed: 2,
        };
        let r = equivalence(&cfg).unwrap();
        assert!(r.converged, "{r:?}");
        assert!(r.max_abs_diff < 0.5, "{r:?}");
    }

    #[test]
    fn dynamics_error_is_small() {
        let cfg = DynamicsConfig {
            n: 4,
            input_dim: 5,
            depth: 2,
            width: 128,
            kappa: 1.0,
            step_size: 0.05,
            data_seed: 3,
            net_seed: 4,
        };
        let r = one_step_dynamics(&cfg).unwrap();
        assert!(r.relative_error < 5.0 * cfg.step_size, "{r:?}");
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
