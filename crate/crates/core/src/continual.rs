//! The experiment engine: a randomized schedule of task exposures, each of
//! which collects real rollouts, trains M (interleaving dreamed rollouts
//! when rehearsal is on), trains C (with distillation when rehearsal is on),
//! snapshots both, and dreams a fresh rehearsal set from the snapshots.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::{ExperimentConfig, RehearsalMode};
use crate::controller::{build_distill_set, train_c_exposure, Controller};
use crate::envs::{TaskId, TaskRegistry};
use crate::error::{Error, Result};
use crate::metrics::{knn_task_attribution, median_reward, AttributionRow, Condition, LossRow, MetricsLog, RewardRow};
use crate::numerics::checkpoint::{load_tensors, save_tensors};
use crate::numerics::{Adam, Tensor};
use crate::rng::{self, Rng};
use crate::rollouts::{
    collect_frames, collect_policy_rollouts, collect_random_rollouts, generate_sim_rollouts, load_rollouts,
    save_rollouts, split_point, RolloutConfig, RolloutSet,
};
use crate::vae::{train_vae, Vae, VaeTraining};
use crate::world_model::{evaluate_m, train_m_epoch, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub task: TaskId,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExposureSchedule {
    pub entries: Vec<ScheduleEntry>,
    pub exposures_per_task: usize,
    pub total_epochs_per_task: usize,
    pub min_epochs: usize,
}

impl ExposureSchedule {
    /// Global epoch index at which each entry starts.
    pub fn start_epochs(&self) -> Vec<usize> {
        let mut acc = 0;
        self.entries
            .iter()
            .map(|e| {
                let s = acc;
                acc += e.epochs;
                s
            })
            .collect()
    }

    pub fn total_epochs(&self) -> usize {
        self.entries.iter().map(|e| e.epochs).sum()
    }
}

/// Per task, draws exposure lengths one at a time, each uniform in
/// `[min_epochs, ⌊remaining / exposures_left⌋]`, the last taking the
/// remainder; then shuffles all entries. Entry 0 is task 0 with a length
/// drawn from `family_seed` alone, so every replication of a family starts
/// identically.
pub fn sample_exposure_schedule(
    num_tasks: usize,
    family_seed: u64,
    rng: &mut Rng,
    exposures: usize,
    total: usize,
    min_epochs: usize,
) -> Result<ExposureSchedule> {
    if num_tasks == 0 || exposures == 0 || min_epochs == 0 || total < exposures * min_epochs {
        return Err(Error::Config(format!(
            "infeasible schedule: {num_tasks} tasks, {exposures} exposures of ≥ {min_epochs} epochs in {total}"
        )));
    }
    let draw = |rng: &mut Rng, remaining: usize, left: usize| -> usize {
        if left == 1 {
            remaining
        } else {
            rng.random_range(min_epochs..=remaining / left)
        }
    };
    let mut family = rng::seeded(rng::derive(family_seed, &[rng::tag("pinned-entry")]));
    let pinned = ScheduleEntry {
        task: TaskId(0),
        epochs: draw(&mut family, total, exposures),
    };
    let mut rest = Vec::new();
    for t in 0..num_tasks {
        let (mut remaining, mut first) = (total, 0);
        if t == 0 {
            remaining -= pinned.epochs;
            first = 1;
        }
        for k in first..exposures {
            let epochs = draw(rng, remaining, exposures - k);
            remaining -= epochs;
            rest.push(ScheduleEntry {
                task: TaskId(t),
                epochs,
            });
        }
    }
    rest.shuffle(rng);
    let mut entries = vec![pinned];
    entries.extend(rest);
    Ok(ExposureSchedule {
        entries,
        exposures_per_task: exposures,
        total_epochs_per_task: total,
        min_epochs,
    })
}

/// Seed shared by both conditions of replication `rep`.
pub fn replication_seed(config: &ExperimentConfig, rep: usize) -> u64 {
    rng::derive(config.seed, &[rng::tag("replication"), rep as u64])
}

pub fn schedule_for(config: &ExperimentConfig, rep: usize) -> Result<ExposureSchedule> {
    let mut r = rng::seeded(rng::derive(replication_seed(config, rep), &[rng::tag("schedule")]));
    sample_exposure_schedule(
        config.tasks.len(),
        config.seed,
        &mut r,
        config.exposures_per_task,
        config.total_epochs_per_task,
        config.min_epochs,
    )
}

pub fn registry_for(config: &ExperimentConfig) -> Result<TaskRegistry> {
    TaskRegistry::new(&config.tasks, config.frame, config.frame_skip)
}

/// Trains the encoder on random-policy frames from every task.
pub fn pretrain_vae(config: &ExperimentConfig) -> Result<VaeTraining> {
    let registry = registry_for(config)?;
    let frames = collect_frames(
        &registry,
        config.vae_episodes_per_task,
        config.rollouts.t_max,
        config.vae_frame_stride,
        rng::derive(config.seed, &[rng::tag("vae-frames")]),
    )?;
    let mut vc = config.vae.clone();
    vc.seed = rng::derive(config.seed, &[rng::tag("vae-init")]);
    train_vae(config.frame, &frames, &vc)
}

pub fn save_vae(vae: &Vae, path: &Path) -> Result<()> {
    vae.params().save(path)
}

pub fn load_vae(config: &ExperimentConfig, path: &Path) -> Result<Vae> {
    let mut vae = Vae::new(config.frame, &config.vae)?;
    vae.params_mut().load_from(path)?;
    Ok(vae)
}

pub fn run_dir(outdir: &Path, rep: usize, condition: Condition) -> PathBuf {
    outdir.join(format!("rep{rep:02}")).join(condition.as_str())
}

/// Where one run keeps its state. Rollout files live under a separate root
/// with names that carry the experiment, entry and kind.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub run: PathBuf,
    pub rollouts: PathBuf,
    rep: usize,
    condition: Condition,
}

impl RunPaths {
    /// `rollout_root` defaults to `<outdir>/rollouts`.
    pub fn new(outdir: &Path, rollout_root: Option<&Path>, rep: usize, condition: Condition) -> Self {
        Self {
            run: run_dir(outdir, rep, condition),
            rollouts: rollout_root.map_or_else(|| outdir.join("rollouts"), Path::to_path_buf),
            rep,
            condition,
        }
    }

    pub fn checkpoint(&self, entry: usize) -> PathBuf {
        self.run.join("checkpoints").join(format!("entry{entry:03}.prwm"))
    }

    /// `kind` is `real` or `sim`.
    pub fn rollout_file(&self, entry: usize, kind: &str) -> PathBuf {
        self.rollouts.join(format!(
            "rep{:02}-{}-entry{entry:03}-{kind}.prrl",
            self.rep,
            self.condition.as_str()
        ))
    }

    /// Held-out set for `task`, shared by both conditions.
    pub fn test_file(&self, task: &str) -> PathBuf {
        self.rollouts.join(format!("rep{:02}-test-{task}.prrl", self.rep))
    }

    /// Number of schedule entries the run has completed.
    pub fn progress(&self) -> Result<usize> {
        read_progress(&self.run)
    }
}

const PROGRESS_FILE: &str = "progress.txt";

/// Everything that evolves across schedule entries.
struct RunState {
    model: WorldModel,
    controller: Controller,
    m_opt: Adam,
    c_opt: Adam,
    d_opt: Adam,
    /// Rehearsal set dreamed by the latest snapshot.
    sim: Option<RolloutSet>,
}

impl RunState {
    fn fresh(config: &ExperimentConfig, rep_seed: u64) -> Result<Self> {
        let model = WorldModel::new(config.model, rng::derive(rep_seed, &[rng::tag("m-init")]))?;
        let controller = Controller::new(
            config.model.latent_dim,
            config.model.hidden,
            config.controller.hidden,
            rng::derive(rep_seed, &[rng::tag("c-init")]),
        );
        Ok(Self {
            m_opt: Adam::new(model.params(), config.m_train.lr),
            c_opt: Adam::new(controller.params(), config.controller.lr),
            d_opt: Adam::new(controller.params(), config.controller.lr),
            model,
            controller,
            sim: None,
        })
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (n, t) in self
            .model
            .params()
            .named_tensors()
            .chain(self.controller.params().named_tensors())
        {
            tensors.push((n.to_string(), t.clone()));
        }
        tensors.extend(self.m_opt.named_state(self.model.params(), "opt.m"));
        tensors.extend(self.c_opt.named_state(self.controller.params(), "opt.c"));
        tensors.extend(self.d_opt.named_state(self.controller.params(), "opt.d"));
        save_tensors(path, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = load_tensors(path)?;
        self.model.params_mut().load_named(&tensors)?;
        self.controller.params_mut().load_named(&tensors)?;
        self.m_opt.load_named_state(self.model.params(), "opt.m", &tensors)?;
        self.c_opt
            .load_named_state(self.controller.params(), "opt.c", &tensors)?;
        self.d_opt
            .load_named_state(self.controller.params(), "opt.d", &tensors)?;
        Ok(())
    }
}

/// Fixed held-out rollouts per task (random policy), shared by both
/// conditions of a replication and evaluated in full. Cached on disk when
/// `paths` is given.
pub fn test_sets(
    config: &ExperimentConfig,
    registry: &TaskRegistry,
    vae: &Vae,
    rep: usize,
    paths: Option<&RunPaths>,
) -> Result<Vec<RolloutSet>> {
    let rep_seed = replication_seed(config, rep);
    let held_out = config.rollouts.n - split_point(config.rollouts.n);
    let rc = RolloutConfig {
        n: held_out.max(1),
        ..config.rollouts.clone()
    };
    registry
        .ids()
        .map(|task| {
            let path = match paths {
                Some(p) => Some(p.test_file(registry.name(task)?)),
                None => None,
            };
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                return load_rollouts(p);
            }
            let set = collect_random_rollouts(
                registry,
                task,
                vae,
                &rc,
                rng::derive(rep_seed, &[rng::tag("test-set"), task.0 as u64]),
            )?;
            if let Some(p) = &path {
                save_rollouts(&set, p)?;
            }
            Ok(set)
        })
        .collect()
}

/// Latents of every held-out frame, labeled by task, as the attribution
/// reference.
fn reference_latents(tests: &[RolloutSet]) -> Vec<(Vec<f64>, TaskId)> {
    tests
        .iter()
        .enumerate()
        .flat_map(|(t, set)| set.all_latents().map(move |z| (z.to_vec(), TaskId(t))))
        .collect()
}

/// Up to `count` dreamed latents drawn without replacement, skipping each
/// rollout's prior draw at step 0.
fn pseudo_latents(sim: &RolloutSet, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut all: Vec<&[f64]> = sim
        .rollouts
        .iter()
        .flat_map(|r| (1..r.len()).map(move |t| r.z(t)))
        .collect();
    all.shuffle(rng);
    all.into_iter().take(count).map(<[f64]>::to_vec).collect()
}

fn read_progress(dir: &Path) -> Result<usize> {
    let p = dir.join(PROGRESS_FILE);
    if !p.exists() {
        return Ok(0);
    }
    let text = std::fs::read_to_string(&p)?;
    text.trim()
        .strip_prefix("entries_completed = ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("unreadable {}", p.display())))
}

fn write_progress(dir: &Path, done: usize) -> Result<()> {
    let tmp = dir.join("progress.tmp");
    std::fs::write(&tmp, format!("entries_completed = {done}\n"))?;
    std::fs::rename(tmp, dir.join(PROGRESS_FILE))?;
    Ok(())
}

pub const CONFIG_FILE: &str = "config.txt";
pub const SEEDS_FILE: &str = "seeds.txt";

/// Resolved config and the seeds derived from it, enough to rerun `rep`.
fn write_run_record(config: &ExperimentConfig, rep: usize, schedule: &ExposureSchedule, dir: &Path) -> Result<()> {
    std::fs::write(dir.join(CONFIG_FILE), config.to_text())?;
    let rep_seed = replication_seed(config, rep);
    let mut seeds = format!("seed = {}\nrep = {rep}\nrep_seed = {rep_seed}\n", config.seed);
    for (k, e) in schedule.entries.iter().enumerate() {
        seeds.push_str(&format!(
            "entry{k:03} = task {} epochs {} collect {} c_train {} dream {}\n",
            e.task.0,
            e.epochs,
            rng::derive(rep_seed, &[rng::tag("collect"), k as u64]),
            rng::derive(rep_seed, &[rng::tag("c-train"), k as u64]),
            rng::derive(rep_seed, &[rng::tag("dream"), k as u64]),
        ));
    }
    std::fs::write(dir.join(SEEDS_FILE), seeds)?;
    Ok(())
}

/// Options that shape a run without changing its results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many schedule entries (used to exercise resumption).
    pub stop_after: Option<usize>,
}

/// Runs one condition of one replication. With `paths`, every completed
/// entry leaves a checkpoint, its rollout files and the metrics so far; a
/// later call with the same `paths` resumes after the last completed entry.
pub fn run_continual_experiment(
    config: &ExperimentConfig,
    vae: &Vae,
    rep: usize,
    condition: Condition,
    paths: Option<&RunPaths>,
    options: &RunOptions,
) -> Result<MetricsLog> {
    config.validate()?;
    let registry = registry_for(config)?;
    let rep_seed = replication_seed(config, rep);
    let schedule = schedule_for(config, rep)?;
    let rehearse = condition == Condition::Rehearsal;
    if let Some(p) = paths {
        std::fs::create_dir_all(p.run.join("checkpoints"))?;
        std::fs::create_dir_all(&p.rollouts)?;
    }
    let tests = test_sets(config, &registry, vae, rep, paths)?;
    let reference = reference_latents(&tests);

    let mut state = RunState::fresh(config, rep_seed)?;
    let mut log = MetricsLog::new(condition, rep, config.tasks.clone(), schedule.clone());
    let mut start_entry = 0;
    if let Some(p) = paths {
        let d = &p.run;
        start_entry = read_progress(d)?;
        if start_entry == 0 {
            write_run_record(config, rep, &schedule, d)?;
        } else {
            let last = start_entry - 1;
            state.load(&p.checkpoint(last))?;
            let sim_path = p.rollout_file(last, "sim");
            state.sim = sim_path.exists().then(|| load_rollouts(&sim_path)).transpose()?;
            log = MetricsLog::load(
                d,
                &config.tasks,
                (
                    config.exposures_per_task,
                    config.total_epochs_per_task,
                    config.min_epochs,
                ),
            )?;
            if log.schedule != schedule || log.condition != condition || log.rep != rep {
                return Err(Error::State(format!("{} holds a different run", d.display())));
            }
            log::info!("resuming {} after entry {last}", d.display());
        }
    }

    let starts = schedule.start_epochs();
    let end = options
        .stop_after
        .map_or(schedule.entries.len(), |s| s.min(schedule.entries.len()));
    for k in start_entry..end {
        let entry = schedule.entries[k];
        let task = entry.task;
        let name = registry.name(task)?.to_string();
        log::info!(
            "rep {rep} {} entry {k}/{}: task {name} for {} epochs",
            condition.as_str(),
            schedule.entries.len(),
            entry.epochs
        );
        // (a) live data through the latest snapshot, random before one exists.
        let collect_seed = rng::derive(rep_seed, &[rng::tag("collect"), k as u64]);
        let real = if k == 0 {
            collect_random_rollouts(&registry, task, vae, &config.rollouts, collect_seed)?
        } else {
            collect_policy_rollouts(
                &registry,
                task,
                vae,
                &state.model,
                &state.controller,
                &config.rollouts,
                collect_seed,
            )?
        };
        // The snapshot that dreamed the rehearsal set is the current model.
        let snapshot = state.model.clone();
        let sim = if rehearse && k > 0 { state.sim.as_ref() } else { None };

        // (b) world model, evaluated on every task after each epoch.
        for e in 0..entry.epochs {
            let mut erng = rng::seeded(rng::derive(rep_seed, &[rng::tag("m-epoch"), k as u64, e as u64]));
            let stats = train_m_epoch(
                &mut state.model,
                &mut state.m_opt,
                real.train(),
                sim.map(|s| &s.rollouts[..]),
                &config.m_train,
                &mut erng,
            )?;
            let epoch = starts[k] + e;
            for (t, test) in tests.iter().enumerate() {
                let loss = evaluate_m(&state.model, &test.rollouts, config.m_train.seq_len)?;
                log.losses.push(LossRow {
                    epoch,
                    trained_task: task,
                    eval_task: TaskId(t),
                    loss,
                });
            }
            log::debug!("epoch {epoch}: train loss {:.5}", stats.mean_loss);
        }

        // (c) controller on the live task, distilling from the snapshot's dreams.
        let distill = match sim {
            Some(s) => Some(build_distill_set(&snapshot, &s.rollouts)?),
            None => None,
        };
        let reward_log = train_c_exposure(
            &registry,
            task,
            vae,
            &state.model,
            &mut state.controller,
            &mut state.c_opt,
            distill.as_ref().map(|d| (d, &mut state.d_opt)),
            &config.controller,
            rng::derive(rep_seed, &[rng::tag("c-train"), k as u64]),
        )?;
        let medians = median_reward(
            &reward_log.episodes,
            config.controller.distill_window,
            reward_log.real_steps,
        )?;
        for (window, median) in medians.into_iter().enumerate() {
            log.rewards.push(RewardRow {
                entry: k,
                task,
                window,
                median,
            });
        }

        // (d) the trained networks become the snapshot; (e) dream from it.
        state.sim = None;
        if rehearse {
            let dreamed = generate_sim_rollouts(
                &state.model,
                &state.controller,
                &config.rollouts,
                rng::derive(rep_seed, &[rng::tag("dream"), k as u64]),
            )?;
            let mut arng = rng::seeded(rng::derive(rep_seed, &[rng::tag("attribution"), k as u64]));
            let queries = pseudo_latents(&dreamed, config.attribution_samples, &mut arng);
            if !queries.is_empty() {
                let shares = knn_task_attribution(&queries, &reference, config.knn_k, config.tasks.len())?;
                for (t, proportion) in shares.into_iter().enumerate() {
                    log.attribution.push(AttributionRow {
                        entry: k,
                        task: TaskId(t),
                        proportion,
                    });
                }
            }
            state.sim = Some(dreamed);
        }

        if let Some(p) = paths {
            save_rollouts(&real, &p.rollout_file(k, "real"))?;
            if let Some(s) = &state.sim {
                save_rollouts(s, &p.rollout_file(k, "sim"))?;
            }
            state.save(&p.checkpoint(k))?;
            log.save(&p.run)?;
            write_progress(&p.run, k + 1)?;
        }
    }
    Ok(log)
}

/// Conditions selected by the config, rehearsal first.
pub fn conditions(config: &ExperimentConfig) -> Vec<Condition> {
    match config.rehearsal {
        RehearsalMode::On => vec![Condition::Rehearsal],
        RehearsalMode::Off => vec![Condition::NoRehearsal],
        RehearsalMode::Paired => vec![Condition::Rehearsal, Condition::NoRehearsal],
    }
}

/// Runs replications `0..n_reps`, each under every selected condition with
/// the same schedule and seeds.
pub fn run_replications(
    config: &ExperimentConfig,
    vae: &Vae,
    n_reps: usize,
    outdir: Option<&Path>,
    rollout_root: Option<&Path>,
) -> Result<Vec<MetricsLog>> {
    let mut logs = Vec::new();
    for rep in 0..n_reps {
        for condition in conditions(config) {
            let paths = outdir.map(|o| RunPaths::new(o, rollout_root, rep, condition));
            logs.push(run_continual_experiment(
                config,
                vae,
                rep,
                condition,
                paths.as_ref(),
                &RunOptions::default(),
            )?);
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        for tasks in [1, 3, 6, 13] {
            for rep in 0..200u64 {
                let mut r = rng::seeded(rep);
                let s = sample_exposure_schedule(tasks, 42, &mut r, 3, 30, 3).unwrap();
                assert_eq!(s.entries.len(), 3 * tasks);
                assert_eq!(s.entries[0].task, TaskId(0));
                for t in 0..tasks {
                    let mine: Vec<usize> = s
                        .entries
                        .iter()
                        .filter(|e| e.task == TaskId(t))
                        .map(|e| e.epochs)
                        .collect();
                    assert_eq!(mine.len(), 3);
                    assert_eq!(mine.iter().sum::<usize>(), 30);
                    assert!(mine.iter().all(|&e| e >= 3));
                }
                let mut other = rng::seeded(rep + 1000);
                let s2 = sample_exposure_schedule(tasks, 42, &mut other, 3, 30, 3).unwrap();
                assert_eq!(s.entries[0], s2.entries[0]);
            }
        }
    }

    #[test]
    fn schedule_edge_cases() {
        let mut r = rng::seeded(1);
        let s = sample_exposure_schedule(3, 7, &mut r, 1, 30, 3).unwrap();
        assert!(s.entries.iter().all(|e| e.epochs == 30));
        assert_eq!(s.entries.len(), 3);
        assert!(sample_exposure_schedule(3, 7, &mut r, 3, 8, 3).is_err());
        assert_eq!(s.start_epochs(), vec![0, 30, 60]);
        assert_eq!(s.total_epochs(), 90);
    }
}
