use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args};
use serde::Serialize;

use ntk_core::data::{
    downsample, normalize_unit, read_cifar10_bin, surrogate_cifar10, synthetic_sphere_dataset, LabeledDataset,
};

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["cifar", "surrogate_cifar", "sphere"])))]
pub struct DataArgs {
    /// CIFAR-10 binary batch file (3073-byte records).
    #[arg(long, value_name = "FILE")]
    pub cifar: Option<PathBuf>,

    /// Generate N images from the built-in CIFAR-like surrogate.
    #[arg(long, value_name = "N")]
    pub surrogate_cifar: Option<usize>,

    /// Generate N unit-norm Gaussian points with planted labels.
    #[arg(long, value_name = "N")]
    pub sphere: Option<usize>,

    /// Shape of generated sphere points, WxHxC.
    #[arg(long, default_value = "1x1x8", value_parser = parse_shape)]
    pub shape: (usize, usize, usize),

    /// Number of classes for generated sphere points.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,

    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,

    /// Keep only these labels, relabelled 0.. in the given order.
    #[arg(long, value_delimiter = ',')]
    pub select_classes: Option<Vec<usize>>,

    /// Read at most this many CIFAR records.
    #[arg(long)]
    pub limit: Option<usize>,

    /// Average-pool images by this integer factor.
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,

    /// Rescale every image to unit Frobenius norm.
    #[arg(long)]
    pub normalize: bool,
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad shape {s:?}: {e}"))?;
    match dims[..] {
        [w, h, c] if w > 0 && h > 0 && c > 0 => Ok((w, h, c)),
        _ => Err(format!("shape must be WxHxC with positive sides, got {s:?}")),
    }
}

impl DataArgs {
    pub fn load(&self) -> Result<LabeledDataset> {
        let mut ds = if let Some(path) = &self.cifar {
            read_cifar10_bin(path, self.limit, false).with_context(|| format!("reading {}", path.display()))?
        } else if let Some(n) = self.surrogate_cifar {
            surrogate_cifar10(n, self.data_seed)?
        } else if let Some(n) = self.sphere {
            synthetic_sphere_dataset(n, self.shape, self.classes, self.data_seed)?
        } else {
            bail!("no data source given");
        };
        if let Some(classes) = &self.select_classes {
            ds = ds.select_classes(classes)?;
        }
        if self.downsample > 1 {
            ds = downsample(&ds, self.downsample)?;
        }
        if self.normalize {
            ds = normalize_unit(&ds);
        }
        Ok(ds)
    }
}

/// Splits off `train` leading and `test` following examples.
pub fn split(ds: &LabeledDataset, train: usize, test: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    if train == 0 {
        bail!("training set is empty");
    }
    if test == 0 {
        bail!("test set is empty");
    }
    if train + test > ds.len() {
        bail!("need {} examples for the split but the dataset has {}", train + test, ds.len());
    }
    Ok((ds.slice(0, train)?, ds.slice(train, train + test)?))
}
