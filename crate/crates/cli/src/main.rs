//! `prwm`: train the shared encoder, run paired continual-learning
//! experiments, and turn their logs into CSV reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use prwm::config::{parse_config, parse_override, ExperimentConfig};
use prwm::continual::{
    conditions, load_vae, pretrain_vae, registry_for, run_continual_experiment, save_vae, schedule_for, test_sets,
    RunOptions, RunPaths, CONFIG_FILE,
};
use prwm::controller::Controller;
use prwm::envs::TaskId;
use prwm::metrics::{
    summarize, write_attribution, write_decomposition, write_loss_curves, write_rewards, write_summary, Condition,
    MetricsLog,
};
use prwm::numerics::checkpoint::load_tensors;
use prwm::rollouts::{collect_policy_rollouts, collect_random_rollouts, generate_sim_rollouts, save_rollouts};
use prwm::world_model::{evaluate_m, WorldModel};
use prwm::{rng, Error};

const VAE_FILE: &str = "vae.prwm";
const VAE_HISTORY_FILE: &str = "vae_history.csv";
const LOG_FILE: &str = "prwm.log";
const REPORT_DIR: &str = "report";

#[derive(Parser, Debug)]
#[command(
    name = "prwm",
    version,
    about = "Continual world-model learning with pseudo-rehearsal"
)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set tau=0.5`. Repeatable; applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Replace existing results instead of refusing.
    #[arg(long, global = true)]
    force: bool,

    /// Root directory for rollout files (default `<outdir>/rollouts`).
    #[arg(long, global = true)]
    rollout_dir: Option<PathBuf>,

    /// Verbose progress output.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the frame encoder on random-policy frames from every task and freeze it.
    TrainVae,
    /// Run one replication under the configured rehearsal condition(s).
    Run {
        #[arg(long, default_value_t = 0)]
        rep: usize,
    },
    /// Run replications 0..n_reps.
    Replicate {
        /// Overrides the config's n_reps.
        #[arg(long)]
        n_reps: Option<usize>,
    },
    /// Score a checkpoint's world model on every task's held-out rollouts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replication whose held-out sets to use.
        #[arg(long, default_value_t = 0)]
        rep: usize,
        /// Output CSV (default `<outdir>/eval.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a rollout file from the environment or from a checkpoint's dreams.
    GenRollouts {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Task for real rollouts.
        #[arg(long)]
        task: Option<String>,
        /// Checkpoint supplying M and C; real rollouts use a random policy without one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the CSV suite from every run under outdir.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Real,
    Sim,
}

/// A failure tagged with its exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) | Some(Error::UnknownTask(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            if log::log_enabled!(log::Level::Error) {
                log::error!("{e:#}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(2)
        }
    }
}

fn default_seed() -> Result<u64, Failure> {
    match std::env::var("PRWM_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(anyhow!("PRWM_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let overrides = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let config = parse_config(cli.config.as_deref(), &overrides, default_seed()?)?;
    fs::create_dir_all(&config.outdir).with_context(|| format!("cannot create {}", config.outdir.display()))?;
    init_logging(&config.outdir, cli.verbose)?;
    fs::write(config.outdir.join(CONFIG_FILE), config.to_text()).context("writing resolved config")?;

    match cli.command {
        Command::TrainVae => train_vae_cmd(&config, cli.force),
        Command::Run { rep } => run_reps(&config, rep..rep + 1, cli.force, cli.rollout_dir.as_deref()),
        Command::Replicate { n_reps } => run_reps(
            &config,
            0..n_reps.unwrap_or(config.n_reps),
            cli.force,
            cli.rollout_dir.as_deref(),
        ),
        Command::Eval { checkpoint, rep, out } => eval_cmd(&config, &checkpoint, rep, out, cli.rollout_dir.as_deref()),
        Command::GenRollouts {
            kind,
            task,
            checkpoint,
            out,
        } => gen_rollouts_cmd(&config, kind, task, checkpoint, &out, cli.force),
        Command::Report => report_cmd(&config),
    }
}

/// Progress goes to stderr and is mirrored into `<outdir>/prwm.log`.
fn init_logging(outdir: &Path, verbose: bool) -> anyhow::Result<()> {
    struct Tee(Mutex<File>);
    impl Write for Tee {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            io::stderr().write_all(buf)?;
            self.0
                .lock()
                .map_err(|_| io::Error::other("log poisoned"))?
                .write_all(buf)?;
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            io::stderr().flush()
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(outdir.join(LOG_FILE))
        .context("opening log file")?;
    let level = if verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("PRWM_LOG")
        .target(env_logger::Target::Pipe(Box::new(Tee(Mutex::new(file)))))
        .try_init();
    Ok(())
}

fn train_vae_cmd(config: &ExperimentConfig, force: bool) -> Result<(), Failure> {
    let path = config.outdir.join(VAE_FILE);
    if path.exists() && !force {
        return Err(Failure::Runtime(anyhow!(
            "{} exists; pass --force to retrain",
            path.display()
        )));
    }
    obtain_vae(config, true)?;
    Ok(())
}

/// Loads `<outdir>/vae.prwm`, training it first when absent or `retrain`.
fn obtain_vae(config: &ExperimentConfig, retrain: bool) -> anyhow::Result<prwm::vae::Vae> {
    let path = config.outdir.join(VAE_FILE);
    if path.exists() && !retrain {
        log::info!("loading encoder from {}", path.display());
        return load_vae(config, &path).with_context(|| format!("loading {}", path.display()));
    }
    log::info!("training encoder on {} tasks", config.tasks.len());
    let training = pretrain_vae(config)?;
    let mut hist = String::from("epoch,train_loss,test_loss,best_test_loss\n");
    for (e, h) in training.history.iter().enumerate() {
        hist.push_str(&format!("{e},{},{},{}\n", h.train_loss, h.test_loss, h.best_test_loss));
        log::info!("encoder epoch {e}: train {:.5} test {:.5}", h.train_loss, h.test_loss);
    }
    fs::write(config.outdir.join(VAE_HISTORY_FILE), hist)?;
    save_vae(&training.vae, &path)?;
    Ok(training.vae)
}

fn run_reps(
    config: &ExperimentConfig,
    reps: std::ops::Range<usize>,
    force: bool,
    rollout_root: Option<&Path>,
) -> Result<(), Failure> {
    let vae = obtain_vae(config, false)?;
    let total = schedule_for(config, 0)?.entries.len();
    for rep in reps {
        for condition in conditions(config) {
            let paths = RunPaths::new(&config.outdir, rollout_root, rep, condition);
            let done = paths.progress()?;
            if done > 0 {
                let recorded = fs::read_to_string(paths.run.join(CONFIG_FILE)).unwrap_or_default();
                if force {
                    log::info!("--force: clearing {}", paths.run.display());
                    fs::remove_dir_all(&paths.run)?;
                } else if done >= total {
                    return Err(Failure::Runtime(anyhow!(
                        "{} is complete; pass --force to rerun",
                        paths.run.display()
                    )));
                } else if recorded != config.to_text() {
                    return Err(Failure::Runtime(anyhow!(
                        "{} was started with a different config; pass --force to restart",
                        paths.run.display()
                    )));
                }
            }
            run_continual_experiment(config, &vae, rep, condition, Some(&paths), &RunOptions::default())?;
            log::info!("finished {}", paths.run.display());
        }
    }
    Ok(())
}

/// Rebuilds M and C with the config's shapes and loads them from a run checkpoint.
fn load_agent(config: &ExperimentConfig, path: &Path) -> anyhow::Result<(WorldModel, Controller)> {
    let tensors = load_tensors(path).with_context(|| format!("reading {}", path.display()))?;
    let mut model = WorldModel::new(config.model, 0)?;
    let mut controller = Controller::new(
        config.model.latent_dim,
        config.model.hidden,
        config.controller.hidden,
        0,
    );
    model.params_mut().load_named(&tensors)?;
    controller.params_mut().load_named(&tensors)?;
    Ok((model, controller))
}

fn eval_cmd(
    config: &ExperimentConfig,
    checkpoint: &Path,
    rep: usize,
    out: Option<PathBuf>,
    rollout_root: Option<&Path>,
) -> Result<(), Failure> {
    let vae = obtain_vae(config, false)?;
    let (model, _) = load_agent(config, checkpoint)?;
    let registry = registry_for(config)?;
    let paths = RunPaths::new(&config.outdir, rollout_root, rep, Condition::Rehearsal);
    fs::create_dir_all(&paths.rollouts)?;
    let tests = test_sets(config, &registry, &vae, rep, Some(&paths))?;
    let mut text = String::from("task,loss\n");
    for (t, set) in tests.iter().enumerate() {
        let loss = evaluate_m(&model, &set.rollouts, config.m_train.seq_len)?;
        log::info!("{}: held-out loss {loss:.6}", config.tasks[t]);
        text.push_str(&format!("{},{loss}\n", config.tasks[t]));
    }
    let out = out.unwrap_or_else(|| config.outdir.join("eval.csv"));
    fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn gen_rollouts_cmd(
    config: &ExperimentConfig,
    kind: Kind,
    task: Option<String>,
    checkpoint: Option<PathBuf>,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    if out.exists() && !force {
        return Err(Failure::Runtime(anyhow!(
            "{} exists; pass --force to overwrite",
            out.display()
        )));
    }
    let agent = checkpoint.as_deref().map(|c| load_agent(config, c)).transpose()?;
    let seed = rng::derive(config.seed, &[rng::tag("gen-rollouts")]);
    let set = match kind {
        Kind::Sim => {
            let Some((model, controller)) = &agent else {
                return Err(Failure::Usage(anyhow!("--kind sim needs --checkpoint")));
            };
            generate_sim_rollouts(model, controller, &config.rollouts, seed)?
        }
        Kind::Real => {
            let Some(name) = task else {
                return Err(Failure::Usage(anyhow!("--kind real needs --task")));
            };
            let registry = registry_for(config)?;
            let id = config
                .tasks
                .iter()
                .position(|t| *t == name)
                .map(TaskId)
                .ok_or_else(|| Error::UnknownTask(format!("{name} is not in the config's tasks")))?;
            let vae = obtain_vae(config, false)?;
            match &agent {
                Some((m, c)) => collect_policy_rollouts(&registry, id, &vae, m, c, &config.rollouts, seed)?,
                None => collect_random_rollouts(&registry, id, &vae, &config.rollouts, seed)?,
            }
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_rollouts(&set, out)?;
    log::info!(
        "wrote {} rollouts ({} steps) to {}",
        set.rollouts.len(),
        set.steps(),
        out.display()
    );
    Ok(())
}

/// Every finished run under outdir.
fn discover_logs(config: &ExperimentConfig) -> anyhow::Result<Vec<MetricsLog>> {
    let mut reps: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&config.outdir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rep) = name.strip_prefix("rep").and_then(|r| r.parse().ok()) {
            reps.push((rep, entry.path()));
        }
    }
    reps.sort();
    let params = (
        config.exposures_per_task,
        config.total_epochs_per_task,
        config.min_epochs,
    );
    let mut logs = Vec::new();
    for (rep, dir) in reps {
        for condition in [Condition::Rehearsal, Condition::NoRehearsal] {
            let run = dir.join(condition.as_str());
            let paths = RunPaths::new(&config.outdir, None, rep, condition);
            let total = schedule_for(config, rep)?.entries.len();
            let done = paths.progress()?;
            if done > 0 && done < total {
                log::warn!("skipping {}: {done} of {total} entries done", run.display());
            } else if run.join(prwm::metrics::LOSS_FILE).exists() {
                logs.push(
                    MetricsLog::load(&run, &config.tasks, params)
                        .with_context(|| format!("loading {}", run.display()))?,
                );
            }
        }
    }
    Ok(logs)
}

fn report_cmd(config: &ExperimentConfig) -> Result<(), Failure> {
    let logs = discover_logs(config)?;
    if logs.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "no runs found under {}",
            config.outdir.display()
        )));
    }
    let dir = config.outdir.join(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    let refs: Vec<&MetricsLog> = logs.iter().collect();
    let create = |name: &str| File::create(dir.join(name)).with_context(|| format!("creating {name}"));
    write_loss_curves(&refs, create("loss_curves.csv")?)?;
    write_summary(&config.tasks, &summarize(&logs)?, create("summary.csv")?)?;
    write_decomposition(&refs, create("decomposition.csv")?)?;
    write_attribution(&refs, create("attribution.csv")?)?;
    write_rewards(&refs, create("rewards.csv")?)?;
    log::info!("report for {} runs written to {}", logs.len(), dir.display());
    Ok(())
}
