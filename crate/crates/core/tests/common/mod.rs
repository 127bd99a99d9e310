//! Configs shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use prwm::config::{parse_config_text, ExperimentConfig};

pub const DESK_CONFIG: &str = include_str!("../../../../configs/desk.cfg");

/// Seconds-scale variant of the desk config: two small tasks, two
/// exposures each, tiny networks.
pub const TINY_OVERRIDES: &[(&str, &str)] = &[
    ("tasks", "paddle, gather"),
    ("n_reps", "1"),
    ("vae_filters", "4, 8"),
    ("vae_epoch_samples", "128"),
    ("vae_max_epochs", "2"),
    ("vae_episodes_per_task", "2"),
    ("n_rollouts", "6"),
    ("t_max", "40"),
    ("t_min", "10"),
    ("m_batches_per_epoch", "4"),
    ("m_batch", "4"),
    ("m_seq_len", "8"),
    ("lstm_hidden", "8"),
    ("c_hidden", "16"),
    ("n_steps_per_exposure", "200"),
    ("distill_window", "50"),
    ("exposures_per_task", "2"),
    ("total_epochs_per_task", "4"),
    ("min_epochs", "1"),
    ("attribution_samples", "50"),
];

pub fn desk_config() -> ExperimentConfig {
    parse_config_text(DESK_CONFIG, &[], 0).expect("shipped desk config parses")
}

pub fn tiny_config(outdir: &Path, extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut overrides: Vec<(String, String)> = TINY_OVERRIDES
        .iter()
        .chain(extra)
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    overrides.push(("outdir".into(), outdir.display().to_string()));
    parse_config_text(DESK_CONFIG, &overrides, 0).expect("tiny config parses")
}
