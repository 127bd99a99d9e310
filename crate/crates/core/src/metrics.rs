//! Loss and reward curves, percent integrated loss, the transfer /
//! preservation / reconsolidation decomposition, KNN attribution of dreamed
//! latents, and the CSV files a run leaves behind.

use std::io::{Read, Write};
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::continual::{ExposureSchedule, ScheduleEntry};
use crate::envs::TaskId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Rehearsal,
    NoRehearsal,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Rehearsal => "rehearsal",
            Condition::NoRehearsal => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rehearsal" => Ok(Condition::Rehearsal),
            "none" => Ok(Condition::NoRehearsal),
            _ => Err(Error::Format(format!("unknown condition {s:?}"))),
        }
    }
}

/// Held-out loss of `eval_task` after global M epoch `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub trained_task: TaskId,
    pub eval_task: TaskId,
    pub loss: f64,
}

/// Median episode return over one window of live controller steps within
/// schedule entry `entry`; `None` when no episode ended in the window.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardRow {
    pub entry: usize,
    pub task: TaskId,
    pub window: usize,
    pub median: Option<f64>,
}

/// Share of dreamed latents attributed to `task` after schedule entry
/// `entry`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionRow {
    pub entry: usize,
    pub task: TaskId,
    pub proportion: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub condition: Condition,
    pub rep: usize,
    pub tasks: Vec<String>,
    pub schedule: ExposureSchedule,
    pub losses: Vec<LossRow>,
    pub rewards: Vec<RewardRow>,
    pub attribution: Vec<AttributionRow>,
}

impl MetricsLog {
    pub fn new(condition: Condition, rep: usize, tasks: Vec<String>, schedule: ExposureSchedule) -> Self {
        Self {
            condition,
            rep,
            tasks,
            schedule,
            losses: Vec::new(),
            rewards: Vec::new(),
            attribution: Vec::new(),
        }
    }

    /// Held-out loss of `task` at every logged epoch, in epoch order.
    pub fn curve(&self, task: TaskId) -> Vec<f64> {
        let mut rows: Vec<&LossRow> = self.losses.iter().filter(|r| r.eval_task == task).collect();
        rows.sort_by_key(|r| r.epoch);
        rows.into_iter().map(|r| r.loss).collect()
    }

    /// Per-task median rewards in schedule order, skipping empty windows.
    pub fn reward_curve(&self, task: TaskId) -> Vec<f64> {
        self.rewards
            .iter()
            .filter(|r| r.task == task)
            .filter_map(|r| r.median)
            .collect()
    }
}

/// Trapezoidal area under a curve sampled at unit spacing.
pub fn trapezoid(curve: &[f64]) -> f64 {
    curve.windows(2).fold(0.0, |acc, w| acc + 0.5 * (w[0] + w[1]))
}

/// `(A_w / (A_w + A_wo), A_wo / (A_w + A_wo))` from trapezoidal areas.
pub fn percent_integrated_loss(with: &[f64], without: &[f64]) -> Result<(f64, f64)> {
    if with.len() != without.len() {
        return Err(Error::Shape(format!(
            "curves differ in length ({} vs {})",
            with.len(),
            without.len()
        )));
    }
    let (aw, awo) = (trapezoid(with), trapezoid(without));
    let total = aw + awo;
    if !(total > 0.0) || aw < 0.0 || awo < 0.0 {
        return Err(Error::Domain(format!(
            "percent integrated loss needs non-negative areas with positive sum, got {aw} and {awo}"
        )));
    }
    let pw = aw / total;
    Ok((pw, 1.0 - pw))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDecomposition {
    pub transfer: f64,
    pub preservation: f64,
    pub reconsolidation: f64,
}

/// Splits a task's curve at the epoch where its first exposure starts
/// (transfer before, preservation after); reconsolidation integrates from
/// the start of its last exposure.
pub fn decompose_loss(curve: &[f64], schedule: &ExposureSchedule, task: TaskId) -> Result<LossDecomposition> {
    let starts = schedule.start_epochs();
    let mine: Vec<usize> = schedule
        .entries
        .iter()
        .zip(&starts)
        .filter(|(e, _)| e.task == task)
        .map(|(_, &s)| s)
        .collect();
    let (&first, &last) = match (mine.first(), mine.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::UnknownTask(format!("task {} is not in the schedule", task.0))),
    };
    if curve.is_empty() {
        return Ok(LossDecomposition {
            transfer: 0.0,
            preservation: 0.0,
            reconsolidation: 0.0,
        });
    }
    let end = curve.len() - 1;
    let (first, last) = (first.min(end), last.min(end));
    Ok(LossDecomposition {
        transfer: trapezoid(&curve[..=first]),
        preservation: trapezoid(&curve[first..]),
        reconsolidation: trapezoid(&curve[last..]),
    })
}

/// Mean, standard error and normal-approximation 95 % interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn mean_ci(values: &[f64]) -> Result<MeanCi> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Empty(
            "a confidence interval needs at least two replications".into(),
        ));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    Ok(MeanCi {
        mean,
        se,
        lo: mean - 1.96 * se,
        hi: mean + 1.96 * se,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSummary {
    pub task: TaskId,
    pub pct_with: f64,
    pub pct_without: f64,
    pub diff: MeanCi,
}

/// Per task: mean percent integrated loss of each condition and the mean
/// paired difference `pct_with − pct_without` with its 95 % interval.
pub fn pairwise_condition_difference(pairs: &[(MetricsLog, MetricsLog)]) -> Result<Vec<TaskSummary>> {
    let first = pairs.first().ok_or_else(|| Error::Empty("no paired logs".into()))?;
    for (w, wo) in pairs {
        if w.condition != Condition::Rehearsal
            || wo.condition != Condition::NoRehearsal
            || w.rep != wo.rep
            || w.schedule != wo.schedule
            || w.tasks != first.0.tasks
            || wo.tasks != first.0.tasks
        {
            return Err(Error::Shape(format!(
                "logs of replication {} are not a matched pair",
                w.rep
            )));
        }
    }
    (0..first.0.tasks.len())
        .map(|t| {
            let task = TaskId(t);
            let mut pw = Vec::new();
            let mut pwo = Vec::new();
            for (w, wo) in pairs {
                let (a, b) = percent_integrated_loss(&w.curve(task), &wo.curve(task))?;
                pw.push(a);
                pwo.push(b);
            }
            let diffs: Vec<f64> = pw.iter().zip(&pwo).map(|(a, b)| a - b).collect();
            let n = pw.len() as f64;
            Ok(TaskSummary {
                task,
                pct_with: pw.iter().sum::<f64>() / n,
                pct_without: pwo.iter().sum::<f64>() / n,
                diff: mean_ci(&diffs)?,
            })
        })
        .collect()
}

/// Labels each query by majority vote of its `k` nearest reference latents
/// (Euclidean). Vote ties go to the smaller summed distance, then the lower
/// task id. Returns the share of queries per task, indexed by task id.
pub fn knn_task_attribution(
    queries: &[Vec<f64>],
    reference: &[(Vec<f64>, TaskId)],
    k: usize,
    num_tasks: usize,
) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Empty("no pseudo-latents to attribute".into()));
    }
    if reference.is_empty() || k == 0 {
        return Err(Error::Empty("knn needs k ≥ 1 and a nonempty reference set".into()));
    }
    if let Some((_, t)) = reference.iter().find(|(_, t)| t.0 >= num_tasks) {
        return Err(Error::UnknownTask(format!("reference label {} out of range", t.0)));
    }
    let mut counts = vec![0usize; num_tasks];
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for q in queries {
        dist.clear();
        for (i, (r, _)) in reference.iter().enumerate() {
            let d2: f64 = q.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d2, i));
        }
        let kk = k.min(dist.len());
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        dist.select_nth_unstable_by(kk - 1, by_distance);
        let mut votes = vec![(0usize, 0.0f64); num_tasks];
        for &(d2, i) in &dist[..kk] {
            let t = reference[i].1 .0;
            votes[t].0 += 1;
            votes[t].1 += d2.sqrt();
        }
        let winner = (0..num_tasks)
            .filter(|&t| votes[t].0 > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .0
                    .cmp(&votes[a].0)
                    .then(votes[a].1.total_cmp(&votes[b].1))
                    .then(a.cmp(&b))
            })
            .expect("k ≥ 1 neighbours voted");
        counts[winner] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / queries.len() as f64).collect())
}

/// Median episode return per window of `window` steps over `total_steps`,
/// bucketing episodes by the step at which they ended (`1..=total_steps`).
pub fn median_reward(episodes: &[(usize, f64)], window: usize, total_steps: usize) -> Result<Vec<Option<f64>>> {
    if window == 0 {
        return Err(Error::Domain("reward window must be positive".into()));
    }
    let n_windows = total_steps.div_ceil(window);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n_windows];
    for &(end, ret) in episodes {
        let w = end.saturating_sub(1) / window;
        if w < n_windows {
            buckets[w].push(ret);
        }
    }
    Ok(buckets.into_iter().map(median).collect())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Spearman's rho with a two-sided p-value from the t approximation.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Shape(
            "rank correlation needs two equal-length samples of at least 3".into(),
        ));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let constant = |r: &[f64]| r.iter().all(|&v| v == r[0]);
    if constant(&rx) || constant(&ry) {
        return Err(Error::Domain(
            "rank correlation is undefined for a constant sample".into(),
        ));
    }
    let rho = pearson(&rx, &ry).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Domain(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok((rho, p))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn task_name(log: &MetricsLog, t: TaskId) -> &str {
    log.tasks.get(t.0).map_or("?", String::as_str)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch, trained_task, eval_task, loss, condition, rep`.
pub fn write_loss_curves<W: Write>(logs: &[&MetricsLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "trained_task", "eval_task", "loss", "condition", "rep"])
        .map_err(csv_err)?;
    for log in logs {
        for r in &log.losses {
            w.write_record([
                r.epoch.to_string(),
                task_name(log, r.trained_task).to_string(),
                task_name(log, r.eval_task).to_string(),
                r.loss.to_string(),
                log.condition.as_str().to_string(),
                log.rep.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `task, pct_with, pct_without, diff, ci_lo, ci_hi`. Columns a summary
/// cannot fill (a single replication has no interval) are left empty.
pub fn write_summary<W: Write>(tasks: &[String], rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "pct_with", "pct_without", "diff", "ci_lo", "ci_hi"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            tasks.get(r.task.0).cloned().unwrap_or_default(),
            fmt_opt(r.pct_with),
            fmt_opt(r.pct_without),
            fmt_opt(r.diff),
            fmt_opt(r.ci_lo),
            fmt_opt(r.ci_hi),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub task: TaskId,
    pub pct_with: Option<f64>,
    pub pct_without: Option<f64>,
    pub diff: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// Summary rows from whatever logs exist. With both conditions, percents
/// are averaged over matched replications and the interval needs at least
/// two of them. A lone condition has nothing to share its area with, so its
/// percent is 1.
pub fn summarize(logs: &[MetricsLog]) -> Result<Vec<SummaryRow>> {
    let first = logs
        .first()
        .ok_or_else(|| Error::Empty("no logs to summarize".into()))?;
    let mut pairs = Vec::new();
    let mut lone: Vec<&MetricsLog> = Vec::new();
    for log in logs {
        let partner = logs.iter().find(|o| o.rep == log.rep && o.condition != log.condition);
        match (log.condition, partner) {
            (Condition::Rehearsal, Some(p)) => pairs.push((log.clone(), p.clone())),
            (_, None) => lone.push(log),
            _ => {}
        }
    }
    pairs.sort_by_key(|p| p.0.rep);
    (0..first.tasks.len())
        .map(|t| {
            let task = TaskId(t);
            if pairs.is_empty() {
                let has = |c| lone.iter().any(|l| l.condition == c).then_some(1.0);
                return Ok(SummaryRow {
                    task,
                    pct_with: has(Condition::Rehearsal),
                    pct_without: has(Condition::NoRehearsal),
                    diff: None,
                    ci_lo: None,
                    ci_hi: None,
                });
            }
            let mut pw = Vec::new();
            for (w, wo) in &pairs {
                pw.push(percent_integrated_loss(&w.curve(task), &wo.curve(task))?.0);
            }
            let n = pw.len() as f64;
            let mean_w = pw.iter().sum::<f64>() / n;
            let diffs: Vec<f64> = pw.iter().map(|p| 2.0 * p - 1.0).collect();
            let ci = mean_ci(&diffs).ok();
            Ok(SummaryRow {
                task,
                pct_with: Some(mean_w),
                pct_without: Some(1.0 - mean_w),
                diff: Some(diffs.iter().sum::<f64>() / n),
                ci_lo: ci.map(|c| c.lo),
                ci_hi: ci.map(|c| c.hi),
            })
        })
        .collect()
}

/// `rep, condition, task, transfer, preservation, reconsolidation, total`.
pub fn write_decomposition<W: Write>(logs: &[&MetricsLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rep",
        "condition",
        "task",
        "transfer",
        "preservation",
        "reconsolidation",
        "total",
    ])
    .map_err(csv_err)?;
    for log in logs {
        for t in 0..log.tasks.len() {
            let curve = log.curve(TaskId(t));
            let d = decompose_loss(&curve, &log.schedule, TaskId(t))?;
            w.write_record([
                log.rep.to_string(),
                log.condition.as_str().to_string(),
                log.tasks[t].clone(),
                d.transfer.to_string(),
                d.preservation.to_string(),
                d.reconsolidation.to_string(),
                trapezoid(&curve).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `rep, condition, entry, task, proportion`.
pub fn write_attribution<W: Write>(logs: &[&MetricsLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "condition", "entry", "task", "proportion"])
        .map_err(csv_err)?;
    for log in logs {
        for r in &log.attribution {
            w.write_record([
                log.rep.to_string(),
                log.condition.as_str().to_string(),
                r.entry.to_string(),
                task_name(log, r.task).to_string(),
                r.proportion.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `rep, condition, entry, task, window, median_reward`; empty windows
/// leave the median blank.
pub fn write_rewards<W: Write>(logs: &[&MetricsLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "condition", "entry", "task", "window", "median_reward"])
        .map_err(csv_err)?;
    for log in logs {
        for r in &log.rewards {
            w.write_record([
                log.rep.to_string(),
                log.condition.as_str().to_string(),
                r.entry.to_string(),
                task_name(log, r.task).to_string(),
                r.window.to_string(),
                fmt_opt(r.median),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `entry, task, epochs`.
pub fn write_schedule<W: Write>(tasks: &[String], schedule: &ExposureSchedule, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["entry", "task", "epochs"]).map_err(csv_err)?;
    for (k, e) in schedule.entries.iter().enumerate() {
        w.write_record([k.to_string(), tasks[e.task.0].clone(), e.epochs.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn records<R: Read>(input: R) -> Result<Vec<csv::StringRecord>> {
    csv::Reader::from_reader(input)
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad csv field {i} in {rec:?}")))
}

fn task_id(tasks: &[String], name: &str) -> Result<TaskId> {
    tasks
        .iter()
        .position(|t| t == name)
        .map(TaskId)
        .ok_or_else(|| Error::UnknownTask(name.to_string()))
}

pub const LOSS_FILE: &str = "loss_curves.csv";
pub const REWARD_FILE: &str = "rewards.csv";
pub const ATTRIBUTION_FILE: &str = "attribution.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";

impl MetricsLog {
    /// Writes the per-run CSV files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let put = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
            let mut buf = Vec::new();
            f(&mut buf)?;
            let tmp = dir.join(format!("{name}.tmp"));
            std::fs::write(&tmp, buf)?;
            std::fs::rename(tmp, dir.join(name))?;
            Ok(())
        };
        put(LOSS_FILE, &|b| write_loss_curves(&[self], b))?;
        put(REWARD_FILE, &|b| write_rewards(&[self], b))?;
        put(ATTRIBUTION_FILE, &|b| write_attribution(&[self], b))?;
        put(SCHEDULE_FILE, &|b| write_schedule(&self.tasks, &self.schedule, b))?;
        Ok(())
    }

    /// Reads a log written by [`MetricsLog::save`].
    pub fn load(dir: &Path, tasks: &[String], schedule_params: (usize, usize, usize)) -> Result<Self> {
        let open = |name: &str| std::fs::File::open(dir.join(name));
        let mut entries = Vec::new();
        for rec in records(open(SCHEDULE_FILE)?)? {
            entries.push(ScheduleEntry {
                task: task_id(tasks, rec.get(1).unwrap_or(""))?,
                epochs: field(&rec, 2)?,
            });
        }
        let (exposures_per_task, total_epochs_per_task, min_epochs) = schedule_params;
        let schedule = ExposureSchedule {
            entries,
            exposures_per_task,
            total_epochs_per_task,
            min_epochs,
        };
        let loss_recs = records(open(LOSS_FILE)?)?;
        let (condition, rep) = match loss_recs.first() {
            Some(r) => (Condition::parse(r.get(4).unwrap_or(""))?, field(r, 5)?),
            None => return Err(Error::Format(format!("{} has no rows", dir.join(LOSS_FILE).display()))),
        };
        let mut log = MetricsLog::new(condition, rep, tasks.to_vec(), schedule);
        for rec in loss_recs {
            log.losses.push(LossRow {
                epoch: field(&rec, 0)?,
                trained_task: task_id(tasks, rec.get(1).unwrap_or(""))?,
                eval_task: task_id(tasks, rec.get(2).unwrap_or(""))?,
                loss: field(&rec, 3)?,
            });
        }
        for rec in records(open(REWARD_FILE)?)? {
            let median = match rec.get(5) {
                Some("") | None => None,
                Some(_) => Some(field(&rec, 5)?),
            };
            log.rewards.push(RewardRow {
                entry: field(&rec, 2)?,
                task: task_id(tasks, rec.get(3).unwrap_or(""))?,
                window: field(&rec, 4)?,
                median,
            });
        }
        for rec in records(open(ATTRIBUTION_FILE)?)? {
            log.attribution.push(AttributionRow {
                entry: field(&rec, 2)?,
                task: task_id(tasks, rec.get(3).unwrap_or(""))?,
                proportion: field(&rec, 4)?,
            });
        }
        Ok(log)
    }
}
