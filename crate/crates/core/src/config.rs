//! Experiment options shared by the command line and TOML config files.
//!
//! Every field is optional. A file supplies values first and flags given on
//! the command line replace them; anything still unset falls back to the
//! library defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, load_idx, synth_dataset, Dataset, Split};
use crate::energy::SkipRule;
use crate::error::{Error, Result};
use crate::objective::{EnergyNormalization, ObjectiveScope};
use crate::streaming::{BatteryModel, StreamingConfig};
use crate::sweep::{ModelSpec, SweepAxis, SweepSpec};
use crate::trainer::TrainConfig;

pub const DEFAULT_TRAIN_SIZE: usize = 2000;
pub const DEFAULT_VAL_SIZE: usize = 500;
pub const DEFAULT_CLASSES: usize = 10;
pub const DEFAULT_IMAGE_SIZE: usize = 8;
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.0, 1.0, 5.0, 10.0, 20.0];

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    /// Energy term weight
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Surrogate smoothness
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Fraction of training samples whose batches carry the energy term
    #[arg(long)]
    pub poison_frac: Option<f64>,
    /// Learning rate
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Which activations enter the energy objective: post-relu or all
    #[arg(long)]
    pub scope: Option<ObjectiveScope>,
    /// How per-layer surrogate values combine: layer-mean or sum
    #[arg(long)]
    pub energy_norm: Option<EnergyNormalization>,

    /// `synth`, a CIFAR-10 binary batch, or an IDX image file (with --labels)
    #[arg(long)]
    pub dataset: Option<String>,
    /// IDX label file paired with an IDX --dataset
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Classes of the synthetic dataset
    #[arg(long)]
    pub classes: Option<usize>,
    /// Side length of synthetic images
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Average channels of loaded images into one
    #[arg(long)]
    #[serde(default)]
    pub grayscale: bool,
    /// Box-downsample loaded images by this factor
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Channel width multiplier of the default network
    #[arg(long)]
    pub width: Option<f64>,

    /// skip-on-zero-activation, skip-on-zero-weight or skip-on-either
    #[arg(long)]
    pub skip_rule: Option<SkipRule>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model checkpoint to evaluate, stream, or resume training from
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// sigma, lambda or poison-fraction
    #[arg(long)]
    pub axis: Option<SweepAxis>,
    /// Comma-separated grid values
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Exit successfully even when some grid points fail
    #[arg(long)]
    #[serde(default)]
    pub allow_partial: bool,

    #[arg(long)]
    pub battery_mah: Option<f64>,
    #[arg(long)]
    pub voltage_mv: Option<f64>,
    #[arg(long)]
    pub joules_per_mac: Option<f64>,
    #[arg(long)]
    pub overhead_joules: Option<f64>,
    /// Passes over the validation set in a streaming run
    #[arg(long)]
    pub stream_epochs: Option<usize>,
    #[arg(long)]
    pub seconds_per_inference: Option<f64>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),* ; $($flag:ident),*) => {
        Options {
            $($field: $top.$field.or($base.$field),)*
            $($flag: $top.$flag || $base.$flag,)*
        }
    };
}

impl Options {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format { what: "config", detail: e.to_string() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format { what, detail: format!("{}: {detail}", path.display()) },
            other => other,
        })
    }

    /// `self` with every value set in `top` replaced by it.
    pub fn overlay(self, top: Options) -> Options {
        let base = self;
        overlay!(base, top;
            lambda, sigma, poison_frac, alpha, epochs, batch_size, seed, scope, energy_norm,
            dataset, labels, train_size, val_size, classes, image_size, downsample, width,
            skip_rule, out, model, axis, grid,
            battery_mah, voltage_mv, joules_per_mac, overhead_joules, stream_epochs, seconds_per_inference;
            grayscale, allow_partial)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let mut cfg = TrainConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed(),
            scope: self.scope.unwrap_or(d.scope),
            normalization: self.energy_norm.unwrap_or(d.normalization),
            sponge: d.sponge,
        };
        cfg.sponge.lambda = self.lambda.unwrap_or(d.sponge.lambda);
        cfg.sponge.sigma = self.sigma.unwrap_or(d.sponge.sigma);
        cfg.sponge.poison_fraction = self.poison_frac.unwrap_or(d.sponge.poison_fraction);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            width_multiplier: self.width.unwrap_or(ModelSpec::default().width_multiplier),
            seed: self.seed(),
        }
    }

    pub fn skip_rule(&self) -> SkipRule {
        self.skip_rule.unwrap_or_default()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let axis = self.axis.unwrap_or(SweepAxis::Lambda);
        let grid = match (&self.grid, axis) {
            (Some(g), _) => g.clone(),
            (None, SweepAxis::Lambda) => DEFAULT_LAMBDA_GRID.to_vec(),
            (None, _) => return Err(Error::InvalidArgument(format!("--grid is required for a {axis} sweep"))),
        };
        let spec = SweepSpec {
            axis,
            grid,
            base: self.train_config()?,
            model: self.model_spec(),
            rule: self.skip_rule(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn battery(&self) -> BatteryModel {
        let d = BatteryModel::default();
        BatteryModel {
            capacity_mah: self.battery_mah.unwrap_or(d.capacity_mah),
            nominal_voltage_mv: self.voltage_mv.unwrap_or(d.nominal_voltage_mv),
            joules_per_mac: self.joules_per_mac.unwrap_or(d.joules_per_mac),
            per_inference_overhead_joules: self.overhead_joules.unwrap_or(d.per_inference_overhead_joules),
        }
    }

    pub fn streaming(&self) -> StreamingConfig {
        let d = StreamingConfig::default();
        StreamingConfig {
            epochs: self.stream_epochs.unwrap_or(d.epochs),
            seconds_per_inference: self.seconds_per_inference.unwrap_or(d.seconds_per_inference),
        }
    }

    /// Loads or generates the data, applies the image transforms and cuts it
    /// into train and validation parts.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = self.train_size.unwrap_or(DEFAULT_TRAIN_SIZE);
        let val = self.val_size.unwrap_or(DEFAULT_VAL_SIZE);
        if train == 0 || val == 0 {
            return Err(Error::InvalidArgument("train and validation sizes must be positive".into()));
        }
        let source = self.dataset.as_deref().unwrap_or("synth");
        let mut ds = if source == "synth" {
            let side = self.image_size.unwrap_or(DEFAULT_IMAGE_SIZE);
            let classes = self.classes.unwrap_or(DEFAULT_CLASSES);
            synth_dataset(train + val, classes, &[1, side, side], self.seed())?
        } else if let Some(labels) = &self.labels {
            load_idx(source, labels)?
        } else {
            load_cifar10(source)?
        };
        if self.grayscale {
            ds = ds.grayscale();
        }
        if let Some(factor) = self.downsample {
            ds = ds.downsample(factor)?;
        }
        if ds.len() < train + val {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} samples, need {train} train + {val} validation",
                ds.len()
            )));
        }
        let (trainset, rest) = ds.split_at(train)?;
        let valset = if rest.len() == val { rest } else { rest.split_at(val)?.0.with_split(Split::Val) };
        Ok((trainset, valset))
    }
}
