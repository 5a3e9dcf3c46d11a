//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be one
//! of [`KNOWN_KEYS`]; anything else is rejected with the key named.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use super::HarnessError;
use crate::controller::ControllerConfig;
use crate::prune::Direction;
use crate::sensitivity::{KlMode, DEFAULT_CALIB_BATCHES, DEFAULT_CALIB_BATCH_SIZE};
use crate::train::{KdConfig, OptimizerKind, TrainConfig};

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "dataset.name",
    "dataset.path",
    "dataset.samples",
    "dataset.noise",
    "dataset.test_fraction",
    "model.name",
    "train.epochs",
    "train.batch_size",
    "train.accumulation_steps",
    "train.optimizer",
    "train.lr_max",
    "train.lr_min",
    "train.momentum",
    "train.weight_decay",
    "train.t0",
    "train.t_mult",
    "train.mixup_alpha",
    "train.label_smoothing",
    "kd.temperature",
    "kd.alpha_start",
    "kd.alpha_end",
    "kd.epochs",
    "kd.batch_size",
    "kd.accumulation_steps",
    "kd.lr_max",
    "kd.lr_min",
    "kd.weight_decay",
    "kd.t0",
    "kd.t_mult",
    "kd.label_smoothing",
    "sensitivity.mode",
    "sensitivity.direction",
    "sensitivity.calib_batches",
    "sensitivity.calib_batch_size",
    "controller.base_rate",
    "controller.episodes",
    "controller.lambda_r",
    "controller.epsilon",
    "controller.epsilon_decay",
    "controller.epsilon_floor",
    "controller.eta",
    "controller.replay_capacity",
    "controller.minibatch",
    "controller.eval_subset",
    "controller.seed",
    "prune.identity",
    "output.dir",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticBlobs,
    Cifar10,
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    /// Synthetic sample count, or a cap on samples read from files.
    pub samples: Option<usize>,
    pub noise: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityConfig {
    pub mode: KlMode,
    pub direction: Direction,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: String,
    pub train: TrainConfig,
    pub kd: KdConfig,
    pub sensitivity: SensitivityConfig,
    pub controller: ControllerConfig,
    pub eval_subset: usize,
    pub identity_prune: bool,
    pub output_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Splits text into `key → (line, value)`, rejecting unknown and repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>, HarnessError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            config_err(format!(
                "line {}: expected key = value, got {line:?}",
                i + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN_KEYS.contains(&k) {
            return Err(config_err(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.to_owned(), (i + 1, v.to_owned())).is_some() {
            return Err(config_err(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

struct Pairs(BTreeMap<String, (usize, String)>);

impl Pairs {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|e| config_err(format!("line {line}: {key} = {v:?}: {e}"))),
        }
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| config_err(format!("line {line}: {key} = {v:?}: {e}"))),
        }
    }

    fn string(&self, key: &str) -> Option<String> {
        self.0.get(key).map(|(_, v)| v.clone())
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        Self::parse_with_seed(text, None)
    }

    /// Parses with the global `seed` optionally overridden; seeds of the
    /// individual stages default to the global one.
    pub fn parse_with_seed(text: &str, seed_override: Option<u64>) -> Result<Self, HarnessError> {
        let p = Pairs(parse_pairs(text)?);
        let seed: u64 = match seed_override {
            Some(s) => s,
            None => p.get("seed", 0)?,
        };

        let kind = match p
            .string("dataset.name")
            .as_deref()
            .unwrap_or("synthetic_blobs")
        {
            "synthetic_blobs" => DatasetKind::SyntheticBlobs,
            "cifar10" => DatasetKind::Cifar10,
            "mnist" => DatasetKind::Mnist,
            other => {
                return Err(config_err(format!(
                    "dataset.name: unknown dataset {other:?}"
                )))
            }
        };
        let path = p.string("dataset.path").map(PathBuf::from);
        if kind != DatasetKind::SyntheticBlobs && path.is_none() {
            return Err(config_err("dataset.path is required for file datasets"));
        }
        let dataset = DatasetConfig {
            kind,
            path,
            samples: p.opt("dataset.samples")?,
            noise: p.get("dataset.noise", crate::data::DEFAULT_BLOB_NOISE)?,
            test_fraction: p.get("dataset.test_fraction", 0.2)?,
        };
        if !(0.0..1.0).contains(&dataset.test_fraction) || dataset.test_fraction == 0.0 {
            return Err(config_err("dataset.test_fraction must lie in (0, 1)"));
        }

        let d = TrainConfig::default();
        let optimizer = match p.string("train.optimizer").as_deref() {
            None | Some("sgd_momentum") => OptimizerKind::SgdMomentum,
            Some("adamw") => OptimizerKind::Adamw,
            Some(other) => {
                return Err(config_err(format!(
                    "train.optimizer: unknown optimizer {other:?}"
                )))
            }
        };
        let train = TrainConfig {
            epochs: p.get("train.epochs", d.epochs)?,
            batch_size: p.get("train.batch_size", d.batch_size)?,
            accumulation_steps: p.get("train.accumulation_steps", d.accumulation_steps)?,
            optimizer,
            lr_max: p.get("train.lr_max", d.lr_max)?,
            lr_min: p.get("train.lr_min", d.lr_min)?,
            momentum: p.get("train.momentum", d.momentum)?,
            weight_decay: p.get("train.weight_decay", d.weight_decay)?,
            t0: p.get("train.t0", d.t0)?,
            t_mult: p.get("train.t_mult", d.t_mult)?,
            mixup_alpha: p.get("train.mixup_alpha", d.mixup_alpha)?,
            label_smoothing: p.get("train.label_smoothing", d.label_smoothing)?,
            seed,
            fit_normalization: true,
        };
        train
            .validate()
            .map_err(|e| config_err(format!("train: {e}")))?;

        let k = KdConfig::default();
        let kd = KdConfig {
            temperature: p.get("kd.temperature", k.temperature)?,
            alpha_start: p.get("kd.alpha_start", k.alpha_start)?,
            alpha_end: p.get("kd.alpha_end", k.alpha_end)?,
            epochs: p.get("kd.epochs", k.epochs)?,
            batch_size: p.get("kd.batch_size", k.batch_size)?,
            accumulation_steps: p.get("kd.accumulation_steps", k.accumulation_steps)?,
            lr_max: p.get("kd.lr_max", k.lr_max)?,
            lr_min: p.get("kd.lr_min", k.lr_min)?,
            weight_decay: p.get("kd.weight_decay", k.weight_decay)?,
            t0: p.get("kd.t0", k.t0)?,
            t_mult: p.get("kd.t_mult", k.t_mult)?,
            label_smoothing: p.get("kd.label_smoothing", k.label_smoothing)?,
            seed,
        };
        kd.validate().map_err(|e| config_err(format!("kd: {e}")))?;

        let sensitivity = SensitivityConfig {
            mode: p.get("sensitivity.mode", KlMode::default())?,
            direction: p.get("sensitivity.direction", Direction::default())?,
            calib_batches: p.get("sensitivity.calib_batches", DEFAULT_CALIB_BATCHES)?,
            calib_batch_size: p.get("sensitivity.calib_batch_size", DEFAULT_CALIB_BATCH_SIZE)?,
        };
        if sensitivity.calib_batches == 0 || sensitivity.calib_batch_size == 0 {
            return Err(config_err(
                "sensitivity.calib_batches and calib_batch_size must be positive",
            ));
        }

        let c = ControllerConfig::default();
        let controller = ControllerConfig {
            base_rate: p.get("controller.base_rate", c.base_rate)?,
            episodes: p.get("controller.episodes", c.episodes)?,
            lambda_r: p.get("controller.lambda_r", c.lambda_r)?,
            epsilon: p.get("controller.epsilon", c.epsilon)?,
            epsilon_decay: p.get("controller.epsilon_decay", c.epsilon_decay)?,
            epsilon_floor: p.get("controller.epsilon_floor", c.epsilon_floor)?,
            eta: p.get("controller.eta", c.eta)?,
            replay_capacity: p.get("controller.replay_capacity", c.replay_capacity)?,
            minibatch: p.get("controller.minibatch", c.minibatch)?,
            seed: p.get("controller.seed", seed)?,
        };
        controller
            .validate()
            .map_err(|e| config_err(format!("controller: {e}")))?;
        let eval_subset: usize = p.get("controller.eval_subset", 512)?;
        if eval_subset == 0 {
            return Err(config_err("controller.eval_subset must be positive"));
        }

        Ok(RunConfig {
            seed,
            dataset,
            model: p.string("model.name").unwrap_or_else(|| "tiny_cnn".into()),
            train,
            kd,
            sensitivity,
            controller,
            eval_subset,
            identity_prune: p.get("prune.identity", false)?,
            output_dir: PathBuf::from(p.string("output.dir").unwrap_or_else(|| "dsfp-out".into())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::parse(
            "# comment\nseed = 7\ntrain.epochs=3\nsensitivity.direction = prune_lowest\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.controller.seed, 7);
        assert_eq!(cfg.sensitivity.direction, Direction::PruneLowest);
        assert_eq!(cfg.model, "tiny_cnn");
        assert_eq!(cfg.train.accumulation_steps, 4);
        assert_eq!(cfg.kd.temperature, 4.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("trian.epochs = 3\n").unwrap_err();
        assert!(err.to_string().contains("trian.epochs"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn malformed_values_are_config_errors() {
        for text in [
            "train.epochs = three",
            "sensitivity.mode = fancy",
            "controller.base_rate = 95",
            "dataset.name = cifar10",
            "seed = 1\nseed = 2",
            "just a line",
            "kd.alpha_start = 0.1\nkd.alpha_end = 0.5",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }
}
