use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const TINY: &str = "\
tasks = paddle, gather
seed = 5
vae_filters = 4, 8
vae_epoch_samples = 128
vae_max_epochs = 2
vae_episodes_per_task = 2
n_rollouts = 6
t_max = 40
t_min = 10
m_batches_per_epoch = 4
m_batch = 4
m_seq_len = 8
lstm_hidden = 8
c_hidden = 16
n_steps_per_exposure = 200
distill_window = 50
exposures_per_task = 2
total_epochs_per_task = 4
min_epochs = 1
attribution_samples = 50
";

fn prwm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prwm"));
    c.env_remove("PRWM_SEED").env_remove("PRWM_LOG");
    c
}

/// Writes the tiny config with `outdir` and any extra lines.
fn config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, format!("{TINY}outdir = {}\n{extra}", dir.join("out").display())).unwrap();
    path
}

fn run(cfg: &Path, args: &[&str]) -> Output {
    prwm().arg("-c").arg(cfg).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let o = run(&cfg, &["--set", "foo=1", "report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("\"foo\""), "{}", stderr(&o));
}

#[test]
fn unknown_command_and_missing_outdir_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    assert_eq!(run(&cfg, &["frobnicate"]).status.code(), Some(1));
    let bare = dir.path().join("bare.cfg");
    fs::write(&bare, "tasks = paddle\n").unwrap();
    let o = run(&bare, &["report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("outdir"));
    assert_eq!(prwm().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    // Nothing to report yet.
    assert_eq!(run(&cfg, &["report"]).status.code(), Some(2));
    // A corrupt encoder file.
    fs::write(dir.path().join("out/vae.prwm"), b"not a checkpoint").unwrap();
    let o = run(&cfg, &["run"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn seed_comes_from_environment_unless_configured() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noseed.cfg");
    fs::write(
        &path,
        format!("tasks = paddle\noutdir = {}\n", dir.path().join("out").display()),
    )
    .unwrap();
    let o = prwm()
        .env("PRWM_SEED", "77")
        .arg("-c")
        .arg(&path)
        .arg("report")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let echoed = fs::read_to_string(dir.path().join("out/config.txt")).unwrap();
    assert!(echoed.contains("seed = 77\n"), "{echoed}");
    let o = prwm()
        .env("PRWM_SEED", "x")
        .arg("-c")
        .arg(&path)
        .arg("report")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_without_rehearsal_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "rehearsal = off\n");
    let o = run(&cfg, &["run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let o = run(&cfg, &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let summary = fs::read_to_string(out.join("report/summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("task,pct_with,pct_without,diff,ci_lo,ci_hi"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert!(cols[1].is_empty());
        assert_eq!(cols[2], "1");
    }
    for name in ["loss_curves.csv", "decomposition.csv", "attribution.csv", "rewards.csv"] {
        assert!(out.join("report").join(name).exists(), "{name}");
    }
    let run_dir = out.join("rep00/none");
    for name in [
        "config.txt",
        "seeds.txt",
        "progress.txt",
        "schedule.csv",
        "checkpoints/entry000.prwm",
    ] {
        assert!(run_dir.join(name).exists(), "{name}");
    }
    assert!(out.join("rollouts/rep00-none-entry000-real.prrl").exists());
    assert!(out.join("prwm.log").exists());

    // A finished run is not overwritten without --force.
    assert_eq!(run(&cfg, &["run"]).status.code(), Some(2));
    assert!(run(&cfg, &["--force", "run"]).status.success());
}

#[test]
fn replicate_writes_paired_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let o = run(&cfg, &["replicate", "--n-reps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for rep in ["rep00", "rep01"] {
        for cond in ["rehearsal", "none"] {
            assert!(
                out.join(rep).join(cond).join("loss_curves.csv").exists(),
                "{rep}/{cond}"
            );
        }
    }
    assert!(run(&cfg, &["report"]).status.success());
    let summary = fs::read_to_string(out.join("report/summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        assert!((cols[0] + cols[1] - 1.0).abs() < 1e-12);
        assert!(cols[3] <= cols[2] && cols[2] <= cols[4]);
    }

    // Checkpoints score on held-out data and dream rollout files.
    let ckpt = out.join("rep00/rehearsal/checkpoints/entry003.prwm");
    let o = run(&cfg, &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    let sim = dir.path().join("sim.prrl");
    let o = run(
        &cfg,
        &[
            "gen-rollouts",
            "--kind",
            "sim",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            sim.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let set = prwm::rollouts::load_rollouts(&sim).unwrap();
    assert_eq!(set.rollouts.len(), 6);
    let real = dir.path().join("real.prrl");
    let o = run(
        &cfg,
        &[
            "gen-rollouts",
            "--kind",
            "real",
            "--task",
            "gather",
            "--out",
            real.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(prwm::rollouts::load_rollouts(&real)
        .unwrap()
        .rollouts
        .iter()
        .all(|r| r.teacher.is_none()));
    let o = run(
        &cfg,
        &[
            "gen-rollouts",
            "--kind",
            "sim",
            "--out",
            dir.path().join("x.prrl").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn killed_run_resumes_to_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "rehearsal = on\nn_steps_per_exposure = 3000\n";
    let reference = tempfile::tempdir().unwrap();
    let ref_cfg = config(reference.path(), extra);
    assert!(run(&ref_cfg, &["run"]).status.success());

    let cfg = config(dir.path(), extra);
    let rollout_root = dir.path().join("rollstore");
    let args = ["--rollout-dir", rollout_root.to_str().unwrap(), "run"];
    let progress = dir.path().join("out/rep00/rehearsal/progress.txt");
    let mut child = prwm()
        .arg("-c")
        .arg(&cfg)
        .args(args)
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    while !progress.exists() && start.elapsed() < Duration::from_secs(120) {
        std::thread::sleep(Duration::from_millis(5));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let done: usize = fs::read_to_string(&progress)
        .unwrap()
        .trim()
        .rsplit(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(done < 4, "run finished before it could be interrupted");

    let o = run(&cfg, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("resuming"), "{}", stderr(&o));
    assert!(rollout_root.join("rep00-rehearsal-entry003-sim.prrl").exists());
    assert_eq!(
        csvs(&dir.path().join("out/rep00/rehearsal")),
        csvs(&reference.path().join("out/rep00/rehearsal"))
    );
}
