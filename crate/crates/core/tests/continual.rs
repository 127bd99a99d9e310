mod common;

use prwm::continual::{
    conditions, pretrain_vae, run_continual_experiment, run_replications, schedule_for, RunOptions, RunPaths,
};
use prwm::envs::TaskId;
use prwm::metrics::{Condition, MetricsLog};
use prwm::vae::Vae;
use prwm::Error;

use common::tiny_config;

fn vae_for(config: &prwm::config::ExperimentConfig) -> Vae {
    pretrain_vae(config).unwrap().vae
}

fn run(config: &prwm::config::ExperimentConfig, vae: &Vae, condition: Condition) -> MetricsLog {
    run_continual_experiment(config, vae, 0, condition, None, &RunOptions::default()).unwrap()
}

#[test]
fn bookkeeping_identities() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let vae = vae_for(&config);
    let log = run(&config, &vae, Condition::Rehearsal);
    let total = log.schedule.total_epochs();
    assert_eq!(total, config.tasks.len() * config.total_epochs_per_task);
    assert_eq!(log.losses.len(), total * config.tasks.len());
    // Epochs are contiguous and every task is scored after each one.
    for (i, row) in log.losses.iter().enumerate() {
        assert_eq!(row.epoch, i / config.tasks.len());
        assert_eq!(row.eval_task, TaskId(i % config.tasks.len()));
        assert!(row.loss.is_finite());
    }
    // Attribution after every entry, each summing to one.
    for k in 0..log.schedule.entries.len() {
        let s: f64 = log
            .attribution
            .iter()
            .filter(|a| a.entry == k)
            .map(|a| a.proportion)
            .sum();
        assert!((s - 1.0).abs() < 1e-12, "entry {k}: {s}");
    }
}

#[test]
fn conditions_share_everything_until_rehearsal_starts() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let vae = vae_for(&config);
    let with = run(&config, &vae, Condition::Rehearsal);
    let without = run(&config, &vae, Condition::NoRehearsal);
    assert_eq!(with.schedule, without.schedule);
    assert!(without.attribution.is_empty());

    // Entry 0 has nothing to rehearse, so both conditions match bit for bit.
    let first = with.schedule.entries[0].epochs * config.tasks.len();
    assert_eq!(with.losses[..first], without.losses[..first]);
    let entry0 = |log: &MetricsLog| log.rewards.iter().filter(|r| r.entry == 0).cloned().collect::<Vec<_>>();
    assert_eq!(entry0(&with), entry0(&without));
    assert_ne!(with.losses[first..], without.losses[first..]);
}

#[test]
fn disk_and_memory_runs_agree_and_resume_checks_identity() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[]);
    let vae = vae_for(&config);
    let memory = run(&config, &vae, Condition::Rehearsal);
    let paths = RunPaths::new(dir.path(), None, 0, Condition::Rehearsal);
    let disk = run_continual_experiment(
        &config,
        &vae,
        0,
        Condition::Rehearsal,
        Some(&paths),
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(memory, disk);
    let params = (
        config.exposures_per_task,
        config.total_epochs_per_task,
        config.min_epochs,
    );
    assert_eq!(MetricsLog::load(&paths.run, &config.tasks, params).unwrap(), disk);

    // A directory holding another family's run is not resumed into.
    let partial = RunPaths::new(&dir.path().join("p"), None, 0, Condition::Rehearsal);
    run_continual_experiment(
        &config,
        &vae,
        0,
        Condition::Rehearsal,
        Some(&partial),
        &RunOptions { stop_after: Some(1) },
    )
    .unwrap();
    assert_eq!(partial.progress().unwrap(), 1);
    let mut other = config.clone();
    other.seed = 1;
    while schedule_for(&other, 0).unwrap() == schedule_for(&config, 0).unwrap() {
        other.seed += 1;
    }
    let err = run_continual_experiment(
        &other,
        &vae,
        0,
        Condition::Rehearsal,
        Some(&partial),
        &RunOptions::default(),
    );
    assert!(matches!(err, Err(Error::State(_))), "{err:?}");
}

#[test]
fn replications_pair_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[("n_reps", "1")]);
    let vae = vae_for(&config);
    assert_eq!(conditions(&config), vec![Condition::Rehearsal, Condition::NoRehearsal]);
    let logs = run_replications(&config, &vae, 1, None, None).unwrap();
    assert_eq!(logs.len(), 2);
    assert_eq!(logs[0].rep, logs[1].rep);
    assert_eq!(logs[0].schedule, logs[1].schedule);
    assert_ne!(logs[0].condition, logs[1].condition);
    assert_ne!(schedule_for(&config, 0).unwrap(), schedule_for(&config, 1).unwrap());
    assert_eq!(
        schedule_for(&config, 0).unwrap().entries[0],
        schedule_for(&config, 1).unwrap().entries[0]
    );
}

#[test]
fn single_task_runs_in_both_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &[("tasks", "dodge")]);
    let vae = vae_for(&config);
    let with = run(&config, &vae, Condition::Rehearsal);
    let without = run(&config, &vae, Condition::NoRehearsal);
    assert!(with.schedule.entries.iter().all(|e| e.task == TaskId(0)));
    // All pseudo-samples attribute to the only task.
    assert!(with.attribution.iter().all(|a| a.proportion == 1.0));
    let (a, b) = (with.curve(TaskId(0)), without.curve(TaskId(0)));
    let rel = (a.last().unwrap() - b.last().unwrap()).abs() / b.last().unwrap();
    assert!(rel < 0.5, "final losses {a:?} vs {b:?}");
}
