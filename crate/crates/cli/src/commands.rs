use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use ntk_core::data::LabeledDataset;
use ntk_core::experiments::{
    equivalence, ntk_convergence, per_seed, rf_compare, ConvergenceConfig, EquivalenceConfig, RfCompareConfig,
};
use ntk_core::finite::CnnHead;
use ntk_core::kernel_file::{read_kernel, write_kernel};
use ntk_core::kernel_matrix::{checksum_inputs, KernelKind};
use ntk_core::pipeline::{classify_with_kernel, cross, gram, KernelSpec};
use ntk_core::tensor::PatchGeometry;

use crate::data::{split, DataArgs};

#[derive(Debug, Parser)]
#[command(name = "ntk", version, about = "Exact NTK/CNTK kernels, kernel regression and finite-width checks")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute an exact Gram matrix and write it to a kernel file.
    Kernel(KernelCmd),
    /// Kernel regression on a train/test split, reporting accuracy.
    FitPredict(FitPredictCmd),
    /// Check that empirical MLP kernels concentrate on the exact NTK as width grows.
    VerifyNtk(VerifyNtkCmd),
    /// Compare a trained wide MLP with the exact-kernel predictor.
    VerifyEquivalence(VerifyEquivalenceCmd),
    /// Compare exact CNTKs with single-initialization random-feature kernels.
    RfCompare(RfCompareCmd),
}

pub enum Outcome {
    Success,
    VerifyFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelArg {
    FcNtk,
    CntkVanilla,
    CntkGap,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::FcNtk => KernelKind::FcNtk,
            KernelArg::CntkVanilla => KernelKind::CntkVanilla,
            KernelArg::CntkGap => KernelKind::CntkGap,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KernelArgs {
    #[arg(long, value_enum)]
    pub kernel: KernelArg,

    /// Number of hidden (fc) or convolutional layers.
    #[arg(long)]
    pub depth: usize,

    /// Odd convolution filter side; convolutional kernels only (default 3).
    #[arg(long)]
    pub filter_size: Option<usize>,
}

impl KernelArgs {
    fn spec(&self) -> Result<KernelSpec> {
        let geom = match (self.kernel, self.filter_size) {
            (KernelArg::FcNtk, Some(_)) => bail!("--filter-size only applies to convolutional kernels"),
            (KernelArg::FcNtk, None) => PatchGeometry::default(),
            (_, q) => PatchGeometry::new(q.unwrap_or(3))?,
        };
        Ok(KernelSpec::new(self.kernel.into(), self.depth, geom)?)
    }

    fn resolved(&self) -> Value {
        let filter = match self.kernel {
            KernelArg::FcNtk => None,
            _ => Some(self.filter_size.unwrap_or(3)),
        };
        json!({"kernel": self.kernel, "depth": self.depth, "filter_size": filter})
    }
}

#[derive(Debug, Args, Serialize)]
pub struct KernelCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Destination kernel file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitPredictCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Leading examples used for training.
    #[arg(long)]
    train: usize,
    /// Examples after the training block used for testing.
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Reuse a training Gram from a kernel file instead of recomputing it.
    #[arg(long)]
    train_kernel: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyNtkCmd {
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// First network seed.
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// Input dimension of the two orthogonal unit inputs.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Largest allowed median deviation at the widest width (default 0.15 (L+1)).
    #[arg(long)]
    max_final_deviation: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyEquivalenceCmd {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, alias = "widths", default_value_t = 2048)]
    width: usize,
    #[arg(long, default_value_t = 0.2)]
    kappa: f64,
    /// Step size; defaults to 1 / (κ² λmax) of the training Gram.
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 8)]
    n_train: usize,
    #[arg(long, default_value_t = 8)]
    n_test: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// First network seed.
    #[arg(long, default_value_t = 100)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    /// Stop once the loss falls below this fraction of the initial loss.
    #[arg(long, default_value_t = 1e-6)]
    loss_ratio: f64,
    #[arg(long, default_value_t = 100_000)]
    max_steps: usize,
    /// Largest allowed |f_nn - f_ntk| on the test points.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// Seeds that must meet the tolerance (default: 90% rounded up).
    #[arg(long)]
    min_pass: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RfCompareCmd {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "cntk-gap")]
    kernel: KernelArg,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    filter_size: usize,
    /// Channel counts of the random networks.
    #[arg(long, value_delimiter = ',', default_value = "1024")]
    channels: Vec<usize>,
    /// Channel counts also scored for accuracy (default: those whose
    /// feature matrix fits in 1 GiB).
    #[arg(long, value_delimiter = ',')]
    accuracy_channels: Option<Vec<usize>>,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    test: usize,
    /// Training images on which kernel deviation is measured.
    #[arg(long, default_value_t = 8)]
    deviation_subset: usize,
    /// Initializations averaged for the deviation.
    #[arg(long, default_value_t = 20)]
    deviation_seeds: usize,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'static str,
    config: Value,
    threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolved: Option<&'a Value>,
}

fn manifest(command: &'static str, config: &impl Serialize, ds: Option<&LabeledDataset>, resolved: Option<&Value>) -> Result<Value> {
    let dataset = ds.map(|d| json!({"provenance": d.provenance, "shape": d.shape()}));
    Ok(serde_json::to_value(Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: serde_json::to_value(config)?,
        threads: rayon::current_num_threads(),
        dataset,
        resolved,
    })?)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be >= 1");
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build()?;
    pool.install(|| match &cli.command {
        Command::Kernel(c) => kernel(c),
        Command::FitPredict(c) => fit_predict(c),
        Command::VerifyNtk(c) => verify_ntk(c),
        Command::VerifyEquivalence(c) => verify_equivalence(c),
        Command::RfCompare(c) => rf(c),
    })
}

fn kernel(c: &KernelCmd) -> Result<Outcome> {
    let spec = c.kernel.spec()?;
    let ds = c.data.load()?;
    let k = gram(&spec, &ds)?;
    let resolved = c.kernel.resolved();
    let m = manifest("kernel", c, Some(&ds), Some(&resolved))?;
    write_kernel(&c.out, &k, m.clone()).with_context(|| format!("writing {}", c.out.display()))?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(Outcome::Success)
}

fn fit_predict(c: &FitPredictCmd) -> Result<Outcome> {
    let spec = c.kernel.spec()?;
    let ds = c.data.load()?;
    let (train, test) = split(&ds, c.train, c.test)?;
    let h = match &c.train_kernel {
        Some(path) => {
            let (h, _) = read_kernel(path).with_context(|| format!("reading {}", path.display()))?;
            let meta = h.meta();
            let want = checksum_inputs(train.images.iter().map(|x| x.data()));
            if meta.kind != spec.kind || meta.depth as usize != spec.depth {
                bail!("{} holds a {} depth-{} kernel, not the requested one", path.display(), meta.kind.name(), meta.depth);
            }
            if spec.kind != KernelKind::FcNtk && meta.filter_size != Some(spec.geom.filter_size()) {
                bail!("{} was computed with filter size {:?}", path.display(), meta.filter_size);
            }
            if meta.input_checksum != want {
                bail!("{} was computed on different training inputs", path.display());
            }
            info!("loaded training Gram from {}", path.display());
            h
        }
        None => gram(&spec, &train)?,
    };
    let rows = cross(&spec, &test, &train)?;
    let (_, report) = classify_with_kernel(&h, &train.labels, &rows, &test.labels, train.k.max(test.k), c.ridge)?;

    println!("{} depth {} on {}", spec.kind.name(), spec.depth, ds.provenance);
    println!("train {}  test {}  ridge {}", report.n_train, report.n_test, c.ridge);
    println!("{:>6} {:>6} {:>8} {:>9}", "class", "count", "correct", "accuracy");
    for r in &report.per_class {
        let acc = if r.count == 0 { f64::NAN } else { r.correct as f64 / r.count as f64 };
        println!("{:>6} {:>6} {:>8} {:>9.4}", r.class, r.count, r.correct, acc);
    }
    println!("accuracy {:.4} (95% lower bound {:.4})", report.accuracy, report.accuracy_lower95);

    if let Some(out) = &c.out {
        let resolved = c.kernel.resolved();
        let m = manifest("fit-predict", c, Some(&ds), Some(&resolved))?;
        write_json(out, &json!({"manifest": m, "report": report}))?;
    }
    Ok(Outcome::Success)
}

fn verify_ntk(c: &VerifyNtkCmd) -> Result<Outcome> {
    if c.widths.is_empty() {
        bail!("--widths is empty");
    }
    let cfg = ConvergenceConfig::orthogonal(c.depth, c.dim, c.widths.clone(), c.seeds, c.seed);
    let report = ntk_convergence(&cfg)?;
    println!("depth {}  analytic Θ(x, x') = {:.6}", report.depth, report.analytic);
    println!("{:>6} {:>12} {:>12} {:>10}", "width", "median|dev|", "mean", "stderr");
    for r in &report.rows {
        println!("{:>6} {:>12.5} {:>12.5} {:>10.5}", r.width, r.median_abs_dev, r.mean, r.stderr);
    }
    let limit = c.max_final_deviation.unwrap_or(0.15 * (c.depth + 1) as f64);
    let last = report.rows.last().map_or(f64::INFINITY, |r| r.median_abs_dev);
    println!("median deviation decreases with width: {}", report.monotone);
    println!("final median {last:.5} within {limit}: {}", last <= limit);
    if let Some(out) = &c.out {
        let m = manifest("verify-ntk", c, None, Some(&json!({"max_final_deviation": limit})))?;
        write_json(out, &json!({"manifest": m, "report": report}))?;
    }
    Ok(if report.monotone && last <= limit { Outcome::Success } else { Outcome::VerifyFailed })
}

fn verify_equivalence(c: &VerifyEquivalenceCmd) -> Result<Outcome> {
    if c.seeds == 0 {
        bail!("--seeds must be >= 1");
    }
    let min_pass = c.min_pass.unwrap_or((c.seeds * 9).div_ceil(10));
    let seeds: Vec<u64> = (0..c.seeds as u64).map(|s| c.seed + s).collect();
    let reports = per_seed(&seeds, |net_seed| {
        equivalence(&EquivalenceConfig {
            n_train: c.n_train,
            n_test: c.n_test,
            input_dim: c.dim,
            depth: c.depth,
            width: c.width,
            kappa: c.kappa,
            step_size: c.step_size,
            loss_ratio: c.loss_ratio,
            max_steps: c.max_steps,
            data_seed: c.data_seed,
            net_seed,
        })
    })?;
    println!(
        "{:>6} {:>7} {:>10} {:>11} {:>11} {:>10} {:>5}",
        "seed", "steps", "final", "max|diff|", "mean|diff|", "init bias", "ok"
    );
    let mut passed = 0;
    for r in &reports {
        let ok = r.converged && r.max_abs_diff <= c.tolerance;
        passed += ok as usize;
        println!(
            "{:>6} {:>7} {:>10.2e} {:>11.5} {:>11.5} {:>10.5} {:>5}",
            r.net_seed, r.steps, r.final_loss, r.max_abs_diff, r.mean_abs_diff, r.initial_test_bias, ok
        );
    }
    let success = passed >= min_pass;
    println!("{passed}/{} seeds within {} (need {min_pass})", reports.len(), c.tolerance);
    if let Some(out) = &c.out {
        let m = manifest("verify-equivalence", c, None, Some(&json!({"min_pass": min_pass})))?;
        write_json(out, &json!({"manifest": m, "reports": reports, "passed": passed}))?;
    }
    Ok(if success { Outcome::Success } else { Outcome::VerifyFailed })
}

/// Parameter count of the random-feature network the comparison builds.
fn rf_params(ds: &LabeledDataset, depth: usize, q: usize, c: usize, head: CnnHead) -> usize {
    let s = ds.shape();
    let conv = s.channels * c * q * q + depth.saturating_sub(1) * c * c * q * q;
    conv + match head {
        CnnHead::Dense => c * s.width * s.height,
        CnnHead::GapScalar => c,
    }
}

fn rf(c: &RfCompareCmd) -> Result<Outcome> {
    let head = match c.kernel {
        KernelArg::CntkVanilla => CnnHead::Dense,
        KernelArg::CntkGap => CnnHead::GapScalar,
        KernelArg::FcNtk => bail!("rf-compare needs a convolutional kernel"),
    };
    let geom = PatchGeometry::new(c.filter_size)?;
    let ds = c.data.load()?;
    let (train, test) = split(&ds, c.train, c.test)?;
    let accuracy_channels = match &c.accuracy_channels {
        Some(a) => a.clone(),
        None => c
            .channels
            .iter()
            .copied()
            .filter(|&ch| (c.train + c.test) * rf_params(&ds, c.depth, c.filter_size, ch, head) * 8 <= 1 << 30)
            .collect(),
    };
    let cfg = RfCompareConfig {
        depth: c.depth,
        geom,
        head,
        channels: c.channels.clone(),
        accuracy_channels,
        deviation_subset: c.deviation_subset,
        deviation_seeds: c.deviation_seeds,
        seed: c.seed,
        ridge: c.ridge,
    };
    let report = rf_compare(&train, &test, &cfg)?;
    println!("{} depth {}: exact accuracy {:.4}", report.kernel.name(), c.depth, report.exact_accuracy);
    println!("{:>9} {:>10} {:>10} {:>9}", "channels", "mean dev", "max dev", "accuracy");
    for r in &report.rows {
        let acc = r.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("{:>9} {:>10.4} {:>10.4} {:>9}", r.channels, r.deviation, r.max_deviation, acc);
    }
    println!("deviation decreases with channels: {}", report.deviation_decreasing);
    if let Some(out) = &c.out {
        let resolved = json!({"accuracy_channels": cfg.accuracy_channels});
        let m = manifest("rf-compare", c, Some(&ds), Some(&resolved))?;
        write_json(out, &json!({"manifest": m, "report": report}))?;
    }
    Ok(Outcome::Success)
}
