//! Experiment configuration: a flat `key = value` text format with `#`
//! comments. Values resolve as defaults, then the file, then overrides.

use std::path::{Path, PathBuf};

use crate::controller::ControllerConfig;
use crate::envs::{FrameShape, KNOWN_TASKS};
use crate::error::{Error, Result};
use crate::rollouts::{LatentTarget, RolloutConfig};
use crate::vae::VaeConfig;
use crate::world_model::{MTrainConfig, ModelConfig};

/// Which experimental conditions a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RehearsalMode {
    On,
    Off,
    Paired,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub tasks: Vec<String>,
    pub outdir: PathBuf,
    pub seed: u64,
    pub n_reps: usize,
    pub rehearsal: RehearsalMode,
    pub frame: FrameShape,
    pub frame_skip: usize,
    pub vae: VaeConfig,
    pub vae_episodes_per_task: usize,
    pub vae_frame_stride: usize,
    pub model: ModelConfig,
    pub m_train: MTrainConfig,
    pub controller: ControllerConfig,
    pub rollouts: RolloutConfig,
    pub exposures_per_task: usize,
    pub total_epochs_per_task: usize,
    pub min_epochs: usize,
    pub knn_k: usize,
    pub attribution_samples: usize,
}

impl ExperimentConfig {
    /// Defaults for every key; `tasks` and `outdir` stay empty until set.
    pub fn defaults(seed: u64) -> Self {
        Self {
            tasks: Vec::new(),
            outdir: PathBuf::new(),
            seed,
            n_reps: 10,
            rehearsal: RehearsalMode::Paired,
            frame: FrameShape::default(),
            frame_skip: 4,
            vae: VaeConfig::default(),
            vae_episodes_per_task: 20,
            vae_frame_stride: 2,
            model: ModelConfig::default(),
            m_train: MTrainConfig::default(),
            controller: ControllerConfig::default(),
            rollouts: RolloutConfig::default(),
            exposures_per_task: 3,
            total_epochs_per_task: 30,
            min_epochs: 3,
            knn_k: 5,
            attribution_samples: 1000,
        }
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "tasks" => {
                self.tasks = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "outdir" => self.outdir = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            "n_reps" => self.n_reps = num(key, v)?,
            "rehearsal" => {
                self.rehearsal = match v {
                    "on" => RehearsalMode::On,
                    "off" => RehearsalMode::Off,
                    "paired" => RehearsalMode::Paired,
                    _ => return Err(bad(key, v, "on, off or paired")),
                }
            }
            "frame_height" => self.frame.height = num(key, v)?,
            "frame_width" => self.frame.width = num(key, v)?,
            "frame_channels" => self.frame.channels = num(key, v)?,
            "frame_skip" => self.frame_skip = num(key, v)?,
            "latent_dim" => {
                self.vae.latent_dim = num(key, v)?;
                self.model.latent_dim = self.vae.latent_dim;
            }
            "vae_filters" => {
                self.vae.conv_stack = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "vae_lr" => self.vae.lr = num(key, v)?,
            "vae_batch" => self.vae.batch = num(key, v)?,
            "vae_patience" => self.vae.patience = num(key, v)?,
            "vae_min_delta" => self.vae.min_delta = num(key, v)?,
            "vae_beta" => self.vae.beta = num(key, v)?,
            "vae_epoch_samples" => self.vae.epoch_samples = num(key, v)?,
            "vae_max_epochs" => self.vae.max_epochs = num(key, v)?,
            "vae_episodes_per_task" => self.vae_episodes_per_task = num(key, v)?,
            "vae_frame_stride" => self.vae_frame_stride = num(key, v)?,
            "mdn_mixtures" => self.model.mixtures = num(key, v)?,
            "lstm_hidden" => self.model.hidden = num(key, v)?,
            "m_lr" => self.m_train.lr = num(key, v)?,
            "m_batches_per_epoch" => self.m_train.batches_per_epoch = num(key, v)?,
            "m_batch" => self.m_train.batch = num(key, v)?,
            "m_seq_len" => self.m_train.seq_len = num(key, v)?,
            "m_target" => {
                self.rollouts.latent_target = match v {
                    "mean" => LatentTarget::Mean,
                    "sample" => LatentTarget::Sample,
                    _ => return Err(bad(key, v, "mean or sample")),
                }
            }
            "c_hidden" => self.controller.hidden = num(key, v)?,
            "c_lr" => self.controller.lr = num(key, v)?,
            "tau" => self.controller.tau = num(key, v)?,
            "gamma" => self.controller.gamma = num(key, v)?,
            "horizon" => self.controller.horizon = num(key, v)?,
            "value_coef" => self.controller.value_coef = num(key, v)?,
            "entropy_coef" => self.controller.entropy_coef = num(key, v)?,
            "n_steps_per_exposure" => self.controller.n_steps_per_exposure = num(key, v)?,
            "distill_window" => self.controller.distill_window = num(key, v)?,
            "distill_batch" => self.controller.distill_batch = num(key, v)?,
            "n_rollouts" => self.rollouts.n = num(key, v)?,
            "t_max" => self.rollouts.t_max = num(key, v)?,
            "t_min" => self.rollouts.t_min = num(key, v)?,
            "max_attempts" => self.rollouts.max_attempts = num(key, v)?,
            "temperature" => self.rollouts.temperature = num(key, v)?,
            "exposures_per_task" => self.exposures_per_task = num(key, v)?,
            "total_epochs_per_task" => self.total_epochs_per_task = num(key, v)?,
            "min_epochs" => self.min_epochs = num(key, v)?,
            "knn_k" => self.knn_k = num(key, v)?,
            "attribution_samples" => self.attribution_samples = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Parsing this
    /// text reproduces the config.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let c = &self.controller;
        let r = &self.rollouts;
        let pairs: Vec<(&str, String)> = vec![
            ("tasks", self.tasks.join(",")),
            ("outdir", self.outdir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("n_reps", self.n_reps.to_string()),
            (
                "rehearsal",
                match self.rehearsal {
                    RehearsalMode::On => "on",
                    RehearsalMode::Off => "off",
                    RehearsalMode::Paired => "paired",
                }
                .to_string(),
            ),
            ("frame_height", self.frame.height.to_string()),
            ("frame_width", self.frame.width.to_string()),
            ("frame_channels", self.frame.channels.to_string()),
            ("frame_skip", self.frame_skip.to_string()),
            ("latent_dim", self.vae.latent_dim.to_string()),
            ("vae_filters", list(&self.vae.conv_stack)),
            ("vae_lr", self.vae.lr.to_string()),
            ("vae_batch", self.vae.batch.to_string()),
            ("vae_patience", self.vae.patience.to_string()),
            ("vae_min_delta", self.vae.min_delta.to_string()),
            ("vae_beta", self.vae.beta.to_string()),
            ("vae_epoch_samples", self.vae.epoch_samples.to_string()),
            ("vae_max_epochs", self.vae.max_epochs.to_string()),
            ("vae_episodes_per_task", self.vae_episodes_per_task.to_string()),
            ("vae_frame_stride", self.vae_frame_stride.to_string()),
            ("mdn_mixtures", self.model.mixtures.to_string()),
            ("lstm_hidden", self.model.hidden.to_string()),
            ("m_lr", self.m_train.lr.to_string()),
            ("m_batches_per_epoch", self.m_train.batches_per_epoch.to_string()),
            ("m_batch", self.m_train.batch.to_string()),
            ("m_seq_len", self.m_train.seq_len.to_string()),
            (
                "m_target",
                match r.latent_target {
                    LatentTarget::Mean => "mean",
                    LatentTarget::Sample => "sample",
                }
                .to_string(),
            ),
            ("c_hidden", c.hidden.to_string()),
            ("c_lr", c.lr.to_string()),
            ("tau", c.tau.to_string()),
            ("gamma", c.gamma.to_string()),
            ("horizon", c.horizon.to_string()),
            ("value_coef", c.value_coef.to_string()),
            ("entropy_coef", c.entropy_coef.to_string()),
            ("n_steps_per_exposure", c.n_steps_per_exposure.to_string()),
            ("distill_window", c.distill_window.to_string()),
            ("distill_batch", c.distill_batch.to_string()),
            ("n_rollouts", r.n.to_string()),
            ("t_max", r.t_max.to_string()),
            ("t_min", r.t_min.to_string()),
            ("max_attempts", r.max_attempts.to_string()),
            ("temperature", r.temperature.to_string()),
            ("exposures_per_task", self.exposures_per_task.to_string()),
            ("total_epochs_per_task", self.total_epochs_per_task.to_string()),
            ("min_epochs", self.min_epochs.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("attribution_samples", self.attribution_samples.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("missing required key \"tasks\"".into()));
        }
        if self.outdir.as_os_str().is_empty() {
            return Err(Error::Config("missing required key \"outdir\"".into()));
        }
        for t in &self.tasks {
            if !KNOWN_TASKS.contains(&t.as_str()) {
                return Err(Error::UnknownTask(format!("{t:?} (known: {})", KNOWN_TASKS.join(", "))));
            }
        }
        if self.frame.is_empty() || self.frame_skip == 0 || self.n_reps == 0 {
            return Err(Error::Config(
                "frame dimensions, frame_skip and n_reps must be ≥ 1".into(),
            ));
        }
        if self.m_train.batches_per_epoch == 0 || self.m_train.batch == 0 || self.m_train.seq_len == 0 {
            return Err(Error::Config(
                "m_batches_per_epoch, m_batch and m_seq_len must be ≥ 1".into(),
            ));
        }
        if self.exposures_per_task == 0
            || self.min_epochs == 0
            || self.total_epochs_per_task < self.exposures_per_task * self.min_epochs
        {
            return Err(Error::Config(format!(
                "infeasible schedule: {} exposures of at least {} epochs cannot fit in {}",
                self.exposures_per_task, self.min_epochs, self.total_epochs_per_task
            )));
        }
        if self.knn_k == 0 || self.attribution_samples == 0 {
            return Err(Error::Config("knn_k and attribution_samples must be ≥ 1".into()));
        }
        self.controller.validate()?;
        self.rollouts.validate()?;
        Ok(())
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>()))
}

fn bad(key: &str, v: &str, expected: &str) -> Error {
    Error::Config(format!("key {key:?}: cannot read {v:?} as {expected}"))
}

/// Splits config text into `(line number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolves defaults ← `text` ← `overrides` and validates the result.
pub fn parse_config_text(text: &str, overrides: &[(String, String)], default_seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::defaults(default_seed);
    for (line, k, v) in parse_pairs(text)? {
        cfg.set(&k, &v)
            .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if given) and applies overrides.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
    default_seed: u64,
) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    parse_config_text(&text, overrides, default_seed)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))
}
