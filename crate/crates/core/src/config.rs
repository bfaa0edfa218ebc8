//! Plain-text `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected, and
//! values applied later (for example command-line overrides) win.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cooc::CoocParams;
use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{CriticConfig, GeneratorConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    pub cooc: CoocParams,
    pub downsample: usize,
    pub crops: usize,
    pub crop_size: usize,
    pub train_fraction: f64,
    pub noise_channels: usize,
    pub generator_widths: Vec<usize>,
    pub critic_widths: Vec<usize>,
    pub kernel: usize,
    pub critic_inject_after: usize,
    pub critic_slope: f64,
    pub critic_sigmoid: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 4,
            cooc: CoocParams::default(),
            downsample: 32,
            crops: 2000,
            crop_size: 128,
            train_fraction: 0.9,
            noise_channels: 32,
            generator_widths: vec![256, 128, 64, 32, 3],
            critic_widths: vec![64, 128, 256, 512, 1],
            kernel: 5,
            critic_inject_after: 3,
            critic_slope: 0.2,
            critic_sigmoid: false,
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "k",
    "patch_size",
    "window_size",
    "sigma_sq",
    "downsample",
    "crops",
    "crop_size",
    "train_fraction",
    "noise_channels",
    "generator_widths",
    "critic_widths",
    "kernel",
    "critic_inject_after",
    "critic_slope",
    "critic_sigmoid",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "lambda_gp",
    "lambda_cooc",
    "n_critic",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` lines, skipping blanks and comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("config", format!("line {} is not `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Reduced model and statistics sizes that train in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            k: 2,
            cooc: CoocParams {
                patch_size: 33,
                window_size: 9,
                sigma_sq: 4.0,
            },
            crops: 500,
            noise_channels: 8,
            generator_widths: vec![48, 32, 16, 8, 3],
            critic_widths: vec![8, 16, 32, 64, 1],
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "patch_size" => self.cooc.patch_size = parse(key, value)?,
            "window_size" => self.cooc.window_size = parse(key, value)?,
            "sigma_sq" => self.cooc.sigma_sq = parse(key, value)?,
            "downsample" => self.downsample = parse(key, value)?,
            "crops" => self.crops = parse(key, value)?,
            "crop_size" => self.crop_size = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "noise_channels" => self.noise_channels = parse(key, value)?,
            "generator_widths" => self.generator_widths = parse_list(key, value)?,
            "critic_widths" => self.critic_widths = parse_list(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "critic_inject_after" => self.critic_inject_after = parse(key, value)?,
            "critic_slope" => self.critic_slope = parse(key, value)?,
            "critic_sigmoid" => self.critic_sigmoid = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "lambda_gp" => self.train.lambda_gp = parse(key, value)?,
            "lambda_cooc" => self.train.lambda_cooc = parse(key, value)?,
            "n_critic" => self.train.n_critic = parse(key, value)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "k" => self.k.to_string(),
            "patch_size" => self.cooc.patch_size.to_string(),
            "window_size" => self.cooc.window_size.to_string(),
            "sigma_sq" => self.cooc.sigma_sq.to_string(),
            "downsample" => self.downsample.to_string(),
            "crops" => self.crops.to_string(),
            "crop_size" => self.crop_size.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "noise_channels" => self.noise_channels.to_string(),
            "generator_widths" => join(&self.generator_widths),
            "critic_widths" => join(&self.critic_widths),
            "kernel" => self.kernel.to_string(),
            "critic_inject_after" => self.critic_inject_after.to_string(),
            "critic_slope" => self.critic_slope.to_string(),
            "critic_sigmoid" => self.critic_sigmoid.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "lambda_gp" => self.train.lambda_gp.to_string(),
            "lambda_cooc" => self.train.lambda_cooc.to_string(),
            "n_critic" => self.train.n_critic.to_string(),
            other => return Err(Error::UnknownKey(other.to_string())),
        })
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            noise_channels: self.noise_channels,
            cond_channels: self.k * self.k,
            widths: self.generator_widths.clone(),
            kernel: self.kernel,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            cond_channels: self.k * self.k,
            widths: self.critic_widths.clone(),
            kernel: self.kernel,
            inject_after: self.critic_inject_after,
            slope: self.critic_slope,
            sigmoid_output: self.critic_sigmoid,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            crops: self.crops,
            crop_size: self.crop_size,
            train_fraction: self.train_fraction,
            k: self.k,
            params: self.cooc,
            downsample: self.downsample,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cooc.validate()?;
        if !(2..=16).contains(&self.k) {
            return Err(Error::invalid("k must be between 2 and 16"));
        }
        self.generator_config().validate()?;
        self.critic_config().validate()?;
        if self.generator_config().upsampling() != self.downsample || self.critic_config().downsampling() != self.downsample
        {
            return Err(Error::invalid(format!(
                "downsample = {} must equal 2^layers for both models",
                self.downsample
            )));
        }
        if self.crop_size % self.downsample != 0 {
            return Err(Error::invalid("crop_size must be a multiple of downsample"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie strictly between 0 and 1"));
        }
        self.train.validate()
    }
}
