//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::approximators::ReadoutMode;
use crate::error::{Error, Result};
use crate::kernels::ScheduleMode;
use crate::objective::TrainConfig;

/// Source of training data for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A numeric text file written by `gen-data`.
    File(PathBuf),
    /// Generate `n` points with the named generator and `data_seed`.
    Generate { generator: String, n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub data: DataSource,
    pub data_seed: u64,
    /// Rows held out from the end of the data for evaluation.
    pub holdout: usize,
    pub steps: usize,
    pub beta1: f64,
    pub schedule: ScheduleMode,
    pub model: String,
    pub hidden: Vec<usize>,
    pub readout: ReadoutMode,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "name",
    "data",
    "dataset",
    "n",
    "data_seed",
    "holdout",
    "steps",
    "beta1",
    "schedule",
    "model",
    "hidden",
    "readout",
    "init_seed",
    "batch_size",
    "train_steps",
    "learning_rate",
    "final_lr_fraction",
    "rms_decay",
    "epsilon",
    "seed",
    "t_samples",
    "learn_schedule",
    "log_every",
    "out_dir",
];

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value for '{key}': '{value}'"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", lineno + 1)));
            }
            if pairs.iter().any(|(p, _)| p == k) {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", lineno + 1)));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let get = |k: &str| pairs.iter().find(|(p, _)| p == k).map(|(_, v)| v.as_str());
        let required = |k: &str| get(k).ok_or_else(|| Error::Config(format!("missing required key '{k}'")));

        let data = match (get("data"), get("dataset")) {
            (Some(path), None) => DataSource::File(base.join(path)),
            (None, Some(generator)) => DataSource::Generate {
                generator: generator.to_string(),
                n: parse("n", required("n")?)?,
            },
            _ => return Err(Error::Config("set exactly one of 'data' or 'dataset'".into())),
        };
        let defaults = TrainConfig::default();
        let or = |k: &str, d: String| get(k).map(str::to_string).unwrap_or(d);
        let hidden = or("hidden", String::new());
        let hidden = if hidden.is_empty() {
            Vec::new()
        } else {
            hidden.split(',').map(|h| parse("hidden", h.trim())).collect::<Result<_>>()?
        };
        let train = TrainConfig {
            batch_size: parse("batch_size", &or("batch_size", defaults.batch_size.to_string()))?,
            steps: parse("train_steps", &or("train_steps", defaults.steps.to_string()))?,
            learning_rate: parse("learning_rate", &or("learning_rate", defaults.learning_rate.to_string()))?,
            final_lr_fraction: parse(
                "final_lr_fraction",
                &or("final_lr_fraction", defaults.final_lr_fraction.to_string()),
            )?,
            rms_decay: parse("rms_decay", &or("rms_decay", defaults.rms_decay.to_string()))?,
            epsilon: parse("epsilon", &or("epsilon", defaults.epsilon.to_string()))?,
            seed: parse("seed", &or("seed", defaults.seed.to_string()))?,
            t_samples: parse("t_samples", &or("t_samples", defaults.t_samples.to_string()))?,
            learn_schedule: parse("learn_schedule", &or("learn_schedule", defaults.learn_schedule.to_string()))?,
            log_every: parse("log_every", &or("log_every", defaults.log_every.to_string()))?,
        };
        train.validate().map_err(|e| Error::Config(e.to_string()))?;
        let schedule = match or("schedule", "fixed".into()).as_str() {
            "fixed" => ScheduleMode::Fixed,
            "learnable" => ScheduleMode::Learnable,
            other => return Err(bad("schedule", other)),
        };
        Ok(Self {
            name: or("name", "run".into()),
            data,
            data_seed: parse("data_seed", &or("data_seed", "0".into()))?,
            holdout: parse("holdout", &or("holdout", "0".into()))?,
            steps: parse("steps", required("steps")?)?,
            beta1: parse("beta1", &or("beta1", "1e-4".into()))?,
            schedule,
            model: required("model")?.to_string(),
            hidden,
            readout: or("readout", "per-step".into()).parse().map_err(|_| bad("readout", get("readout").unwrap_or("")))?,
            init_seed: parse("init_seed", &or("init_seed", "0".into()))?,
            train,
            out_dir: base.join(or("out_dir", "run".into())),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}
