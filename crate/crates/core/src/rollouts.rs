//! Real rollouts collected from the environments through the frozen
//! encoder, simulated rollouts dreamed by frozen copies of M and C, and the
//! `PRRL` file format that stores both.
//!
//! Step `t` of a rollout holds `(z_t, a_t, r_t, d_t)`: the latent of frame
//! `t`, the action taken there, and the reward and done flag that arrived
//! with frame `t`. Step 0 therefore always carries `r = 0, d = 0`.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::controller::{sample_action, Controller};
use crate::envs::{random_policy_action, Action, Env, Observation, TaskId, TaskRegistry, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::numerics::LstmState;
use crate::rng::{self, Rng};
use crate::vae::{sample_latent, Vae};
use crate::world_model::{sample_next, MdnOutput, WorldModel};

pub const MAGIC: &[u8; 4] = b"PRRL";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutKind {
    Real,
    Simulated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub latent_dim: usize,
    /// `len × L`, row per step.
    pub latents: Vec<f64>,
    pub actions: Vec<u8>,
    pub rewards: Vec<i8>,
    pub dones: Vec<u8>,
    /// `len × 6` teacher logits; present exactly on simulated rollouts.
    pub teacher: Option<Vec<f64>>,
    pub source_task: Option<TaskId>,
}

impl Rollout {
    fn empty(latent_dim: usize, simulated: bool, source_task: Option<TaskId>) -> Self {
        Self {
            latent_dim,
            latents: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            teacher: simulated.then(Vec::new),
            source_task,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn z(&self, t: usize) -> &[f64] {
        &self.latents[t * self.latent_dim..(t + 1) * self.latent_dim]
    }

    fn push(&mut self, z: &[f64], action: usize, reward: f64, done: bool) {
        self.latents.extend_from_slice(z);
        self.actions.push(action as u8);
        self.rewards.push(reward as i8);
        self.dones.push(done as u8);
    }

    pub fn ends_done(&self) -> bool {
        self.dones.last() == Some(&1)
    }

    /// A constant rollout, handy for overfitting checks.
    #[cfg(test)]
    pub(crate) fn repeated(z: &[f64], action: usize, reward: i8, len: usize) -> Self {
        let mut r = Self::empty(z.len(), false, Some(TaskId(0)));
        for _ in 0..len {
            r.push(z, action, reward as f64, false);
        }
        r
    }

    fn validate(&self, kind: RolloutKind) -> Result<()> {
        let n = self.len();
        if self.latents.len() != n * self.latent_dim || self.rewards.len() != n || self.dones.len() != n {
            return Err(Error::Format("rollout field lengths disagree".into()));
        }
        if self.dones.iter().take(n.saturating_sub(1)).any(|&d| d != 0) {
            return Err(Error::Format("done flag before the final step".into()));
        }
        if self.actions.iter().any(|&a| a as usize >= NUM_ACTIONS)
            || self.rewards.iter().any(|r| !(-1..=1).contains(r))
            || self.dones.iter().any(|&d| d > 1)
        {
            return Err(Error::Format("step record out of range".into()));
        }
        match (kind, &self.teacher) {
            (RolloutKind::Simulated, Some(t)) if t.len() == n * NUM_ACTIONS => Ok(()),
            (RolloutKind::Real, None) => Ok(()),
            _ => Err(Error::Format(
                "teacher logits must accompany exactly the simulated steps".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSet {
    pub kind: RolloutKind,
    pub latent_dim: usize,
    pub rollouts: Vec<Rollout>,
}

/// Train/test boundary for `n` rollouts: 90% train, at least one test
/// rollout once there are two.
pub fn split_point(n: usize) -> usize {
    if n < 2 {
        n
    } else {
        (n * 9 / 10).clamp(1, n - 1)
    }
}

impl RolloutSet {
    /// Rollouts in the training split: the first 90 %, keeping at least one
    /// for testing whenever there are two or more.
    pub fn split_point(&self) -> usize {
        split_point(self.rollouts.len())
    }

    pub fn train(&self) -> &[Rollout] {
        &self.rollouts[..self.split_point()]
    }

    pub fn test(&self) -> &[Rollout] {
        &self.rollouts[self.split_point()..]
    }

    pub fn steps(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }

    /// Every latent of every rollout, row-major.
    pub fn all_latents(&self) -> impl Iterator<Item = &[f64]> {
        self.rollouts.iter().flat_map(|r| r.latents.chunks(self.latent_dim))
    }
}

/// What a real rollout stores as the latent of each frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentTarget {
    /// The encoder mean.
    Mean,
    /// One reparameterized posterior draw, fixed at collection time.
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub n: usize,
    pub t_max: usize,
    pub t_min: usize,
    /// Episodes tried per slot before a short one is accepted.
    pub max_attempts: usize,
    pub latent_target: LatentTarget,
    pub temperature: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n: 100,
            t_max: 300,
            t_min: 100,
            max_attempts: 10,
            latent_target: LatentTarget::Sample,
            temperature: 1.0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_max == 0 || self.t_min > self.t_max || self.max_attempts == 0 {
            return Err(Error::Config(format!(
                "rollout config needs n ≥ 1, 1 ≤ t_min ≤ t_max, attempts ≥ 1 (got n={}, t_min={}, t_max={})",
                self.n, self.t_min, self.t_max
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen networks that pick actions during real collection.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Random,
    Agent {
        model: &'a WorldModel,
        controller: &'a Controller,
    },
}

struct Slot {
    index: u64,
    attempt: u64,
    env: Env,
    obs: Observation,
    rng: Rng,
    last_action: Action,
    record: Rollout,
    best_short: Option<Rollout>,
    done: Option<Rollout>,
}

fn open_slot(
    registry: &TaskRegistry,
    task: TaskId,
    latent_dim: usize,
    seed: u64,
    index: u64,
    attempt: u64,
) -> Result<Slot> {
    let (env, obs) = registry.reset(task, rng::derive(seed, &[rng::tag("episode"), index, attempt]))?;
    Ok(Slot {
        index,
        attempt,
        env,
        obs,
        rng: rng::seeded(rng::derive(seed, &[rng::tag("actions"), index, attempt])),
        last_action: Action::Noop,
        record: Rollout::empty(latent_dim, false, Some(task)),
        best_short: None,
        done: None,
    })
}

/// Collects `config.n` rollouts of the task, all episodes stepped in
/// lockstep so encoding and policy evaluation run batched. Every episode
/// draws its seeds from `(seed, slot, attempt)`, so results do not depend on
/// the batching.
pub fn collect_rollouts(
    registry: &TaskRegistry,
    task: TaskId,
    vae: &Vae,
    policy: Policy<'_>,
    config: &RolloutConfig,
    seed: u64,
) -> Result<RolloutSet> {
    config.validate()?;
    let l = vae.latent_dim();
    let frame_len = registry.shape().len();
    let mut slots = (0..config.n as u64)
        .map(|i| open_slot(registry, task, l, seed, i, 0))
        .collect::<Result<Vec<_>>>()?;
    let hidden = match policy {
        Policy::Agent { model, .. } => model.config().hidden,
        Policy::Random => 0,
    };
    let mut states: Vec<LstmState> = (0..config.n).map(|_| LstmState::zeros(1, hidden)).collect();

    loop {
        let active: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].done.is_none()).collect();
        if active.is_empty() {
            break;
        }
        let mut frames = Vec::with_capacity(active.len() * frame_len);
        for &i in &active {
            frames.extend_from_slice(&slots[i].obs.frame);
        }
        let dists = vae.encode_batch(&frames, active.len())?;
        let recorded: Vec<Vec<f64>> = active
            .iter()
            .zip(&dists)
            .map(|(&i, d)| match config.latent_target {
                LatentTarget::Mean => d.mu.clone(),
                LatentTarget::Sample => sample_latent(d, &mut slots[i].rng),
            })
            .collect();
        let actions: Vec<usize> = match policy {
            Policy::Random => active
                .iter()
                .map(|&i| {
                    let s = &mut slots[i];
                    let a = random_policy_action(&mut s.rng, s.last_action);
                    s.last_action = a;
                    a.index()
                })
                .collect(),
            Policy::Agent { model, controller } => {
                let mut input = Vec::with_capacity(active.len() * controller.input_dim());
                let mut z_batch = Vec::with_capacity(active.len() * l);
                let mut batch_state = LstmState::zeros(0, hidden);
                for (&i, d) in active.iter().zip(&dists) {
                    input.extend_from_slice(&d.mu);
                    input.extend_from_slice(&states[i].h);
                    z_batch.extend_from_slice(&d.mu);
                    batch_state.h.extend_from_slice(&states[i].h);
                    batch_state.c.extend_from_slice(&states[i].c);
                }
                let (logits, _) = controller.forward_batch(&input, active.len())?;
                let next = model.advance(&z_batch, &batch_state)?;
                active
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        states[i] = LstmState {
                            h: next.h[k * hidden..(k + 1) * hidden].to_vec(),
                            c: next.c[k * hidden..(k + 1) * hidden].to_vec(),
                        };
                        sample_action(&logits[k * NUM_ACTIONS..(k + 1) * NUM_ACTIONS], &mut slots[i].rng)
                    })
                    .collect()
            }
        };
        for (k, &i) in active.iter().enumerate() {
            let s = &mut slots[i];
            s.record.push(&recorded[k], actions[k], s.obs.reward, s.obs.done);
            if !s.obs.done && s.record.len() < config.t_max {
                s.obs = s.env.step(Action::from_index(actions[k])?)?;
                continue;
            }
            let finished = std::mem::replace(&mut s.record, Rollout::empty(l, false, Some(task)));
            if finished.len() >= config.t_min || s.attempt + 1 >= config.max_attempts as u64 {
                let best = match s.best_short.take() {
                    Some(b) if b.len() > finished.len() => b,
                    _ => finished,
                };
                s.done = Some(best);
            } else {
                let keep = match s.best_short.take() {
                    Some(b) if b.len() >= finished.len() => b,
                    _ => finished,
                };
                let mut fresh = open_slot(registry, task, l, seed, s.index, s.attempt + 1)?;
                fresh.best_short = Some(keep);
                *s = fresh;
                states[i] = LstmState::zeros(1, hidden);
            }
        }
    }
    Ok(RolloutSet {
        kind: RolloutKind::Real,
        latent_dim: l,
        rollouts: slots
            .into_iter()
            .map(|s| s.done.expect("every slot finished"))
            .collect(),
    })
}

/// Random-policy rollouts, as used before any controller exists.
pub fn collect_random_rollouts(
    registry: &TaskRegistry,
    task: TaskId,
    vae: &Vae,
    config: &RolloutConfig,
    seed: u64,
) -> Result<RolloutSet> {
    collect_rollouts(registry, task, vae, Policy::Random, config, seed)
}

/// Rollouts whose actions are sampled from the frozen controller, fed the
/// frozen model's recurrent state.
pub fn collect_policy_rollouts(
    registry: &TaskRegistry,
    task: TaskId,
    vae: &Vae,
    model: &WorldModel,
    controller: &Controller,
    config: &RolloutConfig,
    seed: u64,
) -> Result<RolloutSet> {
    collect_rollouts(registry, task, vae, Policy::Agent { model, controller }, config, seed)
}

/// Random-policy frames for encoder training: every `stride`-th frame of
/// `episodes` episodes per task (at most `t_max` steps each), interleaved
/// across tasks.
pub fn collect_frames(
    registry: &TaskRegistry,
    episodes: usize,
    t_max: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let stride = stride.max(1);
    let mut per_task: Vec<Vec<Vec<f64>>> = Vec::new();
    for task in registry.ids() {
        let mut frames = Vec::new();
        for e in 0..episodes as u64 {
            let (mut env, mut obs) =
                registry.reset(task, rng::derive(seed, &[rng::tag("vae-episode"), task.0 as u64, e]))?;
            let mut rng = rng::seeded(rng::derive(seed, &[rng::tag("vae-actions"), task.0 as u64, e]));
            let mut last = Action::Noop;
            for t in 0..t_max {
                if t % stride == 0 {
                    frames.push(obs.frame.clone());
                }
                if obs.done {
                    break;
                }
                last = random_policy_action(&mut rng, last);
                obs = env.step(last)?;
            }
        }
        per_task.push(frames);
    }
    let longest = per_task.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for k in 0..longest {
        for frames in &per_task {
            if let Some(f) = frames.get(k) {
                out.extend_from_slice(f);
            }
        }
    }
    Ok(out)
}

/// Dreams `config.n` rollouts: `z₀ ~ N(0, I)`, zero recurrent state and a
/// uniformly random first action, then the frozen model and controller are
/// iterated until predicted termination or `t_max` steps. A rollout whose
/// state turns non-finite is discarded and redrawn.
pub fn generate_sim_rollouts(
    model: &WorldModel,
    controller: &Controller,
    config: &RolloutConfig,
    seed: u64,
) -> Result<RolloutSet> {
    config.validate()?;
    let mc = model.config();
    let (l, hd) = (mc.latent_dim, mc.hidden);
    struct Dream {
        attempt: u64,
        rng: Rng,
        state: LstmState,
        record: Rollout,
        finished: bool,
    }
    let start = |index: u64, attempt: u64| -> Result<Dream> {
        let mut rng = rng::seeded(rng::derive(seed, &[rng::tag("dream"), index, attempt]));
        let z: Vec<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
        let state = LstmState::zeros(1, hd);
        let (logits, _) = controller.c_forward(&z, &state.h)?;
        let a = rng.random_range(0..NUM_ACTIONS);
        let mut record = Rollout::empty(l, true, None);
        record.push(&z, a, 0.0, false);
        record.teacher.as_mut().expect("simulated").extend_from_slice(&logits);
        let finished = config.t_max == 1;
        Ok(Dream {
            attempt,
            rng,
            state,
            record,
            finished,
        })
    };
    let mut dreams = (0..config.n as u64).map(|i| start(i, 0)).collect::<Result<Vec<_>>>()?;
    let mut failures = 0usize;

    loop {
        let active: Vec<usize> = (0..dreams.len()).filter(|&i| !dreams[i].finished).collect();
        if active.is_empty() {
            break;
        }
        let mut z = Vec::with_capacity(active.len() * l);
        let mut actions = Vec::with_capacity(active.len());
        let mut state = LstmState::zeros(0, hd);
        for &i in &active {
            let d = &dreams[i];
            let t = d.record.len() - 1;
            z.extend_from_slice(d.record.z(t));
            actions.push(d.record.actions[t] as usize);
            state.h.extend_from_slice(&d.state.h);
            state.c.extend_from_slice(&d.state.c);
        }
        let (raw, next) = model.step_batch(&z, &actions, &state)?;
        let width = mc.output_width();
        let mut samples = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let out = MdnOutput::from_raw(&raw[k * width..(k + 1) * width], mc.mixtures, l)?;
            let d = &mut dreams[i];
            d.state = LstmState {
                h: next.h[k * hd..(k + 1) * hd].to_vec(),
                c: next.c[k * hd..(k + 1) * hd].to_vec(),
            };
            samples.push(sample_next(&out, &mut d.rng, config.temperature)?);
        }
        let mut input = Vec::with_capacity(active.len() * controller.input_dim());
        for (k, &i) in active.iter().enumerate() {
            input.extend_from_slice(&samples[k].0);
            input.extend_from_slice(&dreams[i].state.h);
        }
        let (logits, _) = controller.forward_batch(&input, active.len())?;
        for (k, &i) in active.iter().enumerate() {
            let (z_next, reward, done) = &samples[k];
            let row = &logits[k * NUM_ACTIONS..(k + 1) * NUM_ACTIONS];
            let healthy = z_next.iter().chain(row).all(|v| v.is_finite()) && dreams[i].state.is_finite();
            if !healthy {
                failures += 1;
                if dreams[i].attempt + 1 >= 100 {
                    return Err(Error::Domain("simulated rollouts keep turning non-finite".into()));
                }
                dreams[i] = start(i as u64, dreams[i].attempt + 1)?;
                continue;
            }
            let d = &mut dreams[i];
            let a = sample_action(row, &mut d.rng);
            d.record.push(z_next, a, *reward, *done);
            d.record.teacher.as_mut().expect("simulated").extend_from_slice(row);
            d.finished = *done || d.record.len() >= config.t_max;
        }
    }
    if failures > 0 {
        log::warn!("{failures} simulated rollouts turned non-finite and were redrawn");
    }
    Ok(RolloutSet {
        kind: RolloutKind::Simulated,
        latent_dim: l,
        rollouts: dreams.into_iter().map(|d| d.record).collect(),
    })
}

pub fn encode_rollouts(set: &RolloutSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.latent_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(NUM_ACTIONS as u32).to_le_bytes());
    buf.push(match set.kind {
        RolloutKind::Real => 0,
        RolloutKind::Simulated => 1,
    });
    buf.extend_from_slice(&(set.rollouts.len() as u64).to_le_bytes());
    for r in &set.rollouts {
        let task = r.source_task.map_or(-1, |t| t.0 as i32);
        buf.extend_from_slice(&task.to_le_bytes());
        buf.extend_from_slice(&(r.len() as u64).to_le_bytes());
        for t in 0..r.len() {
            for v in r.z(t) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(r.actions[t]);
            buf.push(r.rewards[t] as u8);
            buf.push(r.dones[t]);
            if let Some(teacher) = &r.teacher {
                for v in &teacher[t * NUM_ACTIONS..(t + 1) * NUM_ACTIONS] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated rollout file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_rollouts(buf: &[u8]) -> Result<RolloutSet> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::Format("not a rollout file (bad magic)".into()));
    }
    if buf.len() < 4 + 2 + 4 {
        return Err(Error::Format("truncated rollout file".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported rollout file version {version}")));
    }
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::Format("rollout file checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 6 };
    let latent_dim = r.u32()? as usize;
    if r.u32()? as usize != NUM_ACTIONS {
        return Err(Error::Format("rollout file action count differs".into()));
    }
    let kind = match r.u8()? {
        0 => RolloutKind::Real,
        1 => RolloutKind::Simulated,
        k => return Err(Error::Format(format!("unknown rollout kind {k}"))),
    };
    let count = r.u64()?;
    let mut rollouts = Vec::new();
    for _ in 0..count {
        let task = i32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let source_task = (task >= 0).then_some(TaskId(task as usize));
        let len = r.u64()? as usize;
        let mut ro = Rollout::empty(latent_dim, kind == RolloutKind::Simulated, source_task);
        for _ in 0..len {
            for _ in 0..latent_dim {
                ro.latents.push(r.f64()?);
            }
            ro.actions.push(r.u8()?);
            ro.rewards.push(r.u8()? as i8);
            ro.dones.push(r.u8()?);
            if let Some(teacher) = ro.teacher.as_mut() {
                for _ in 0..NUM_ACTIONS {
                    teacher.push(r.f64()?);
                }
            }
        }
        ro.validate(kind)?;
        rollouts.push(ro);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in rollout file".into()));
    }
    Ok(RolloutSet {
        kind,
        latent_dim,
        rollouts,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_rollouts(set: &RolloutSet, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_rollouts(set))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_rollouts(path: &Path) -> Result<RolloutSet> {
    decode_rollouts(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::FrameShape;
    use crate::vae::VaeConfig;
    use crate::world_model::ModelConfig;
    use proptest::prelude::*;

    fn setup() -> (TaskRegistry, Vae) {
        let shape = FrameShape::default();
        let names: Vec<String> = ["paddle", "gather", "dodge"].iter().map(|s| s.to_string()).collect();
        (
            TaskRegistry::new(&names, shape, 4).unwrap(),
            Vae::new(shape, &VaeConfig::default()).unwrap(),
        )
    }

    fn small() -> RolloutConfig {
        RolloutConfig {
            n: 10,
            t_max: 120,
            t_min: 50,
            ..RolloutConfig::default()
        }
    }

    #[test]
    fn random_collection_lengths_split_and_determinism() {
        let (reg, vae) = setup();
        let cfg = small();
        for task in reg.ids() {
            let set = collect_random_rollouts(&reg, task, &vae, &cfg, 1).unwrap();
            assert_eq!(set.rollouts.len(), 10);
            for r in &set.rollouts {
                assert!((cfg.t_min..=cfg.t_max).contains(&r.len()), "{}", r.len());
                r.validate(RolloutKind::Real).unwrap();
                assert_eq!((r.rewards[0], r.dones[0]), (0, 0));
                assert_eq!(r.source_task, Some(task));
            }
            assert_eq!((set.train().len(), set.test().len()), (9, 1));
            assert_eq!(set, collect_random_rollouts(&reg, task, &vae, &cfg, 1).unwrap());
        }
    }

    #[test]
    fn split_sizes() {
        let mk = |n| RolloutSet {
            kind: RolloutKind::Real,
            latent_dim: 1,
            rollouts: vec![Rollout::repeated(&[0.0], 0, 0, 3); n],
        };
        assert_eq!((mk(100).train().len(), mk(100).test().len()), (90, 10));
        assert_eq!((mk(5).train().len(), mk(5).test().len()), (4, 1));
        assert_eq!((mk(1).train().len(), mk(1).test().len()), (1, 0));
    }

    #[test]
    fn policy_rollouts_follow_controller() {
        let (reg, vae) = setup();
        let model = WorldModel::new(ModelConfig::default(), 2).unwrap();
        let mut c = Controller::new(8, 32, 16, 3);
        // Make the policy strongly prefer RIGHT regardless of input.
        let bias = c.params().find("c.actor.bias").unwrap();
        c.params_mut()
            .value_mut(bias)
            .copy_from_slice(&[0.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let set = collect_policy_rollouts(&reg, TaskId(0), &vae, &model, &c, &small(), 4).unwrap();
        let (mut right, mut total) = (0, 0);
        for r in &set.rollouts {
            assert!(r.len() <= 120);
            right += r.actions.iter().filter(|&&a| a == Action::Right.index() as u8).count();
            total += r.len();
        }
        assert!(right as f64 / total as f64 > 1.0 / 6.0 + 0.2);
    }

    #[test]
    fn dreams_start_from_prior_and_respect_caps() {
        let model = WorldModel::new(ModelConfig::default(), 5).unwrap();
        let c = Controller::new(8, 32, 16, 6);
        let cfg = RolloutConfig {
            n: 20,
            t_max: 40,
            t_min: 1,
            ..RolloutConfig::default()
        };
        let set = generate_sim_rollouts(&model, &c, &cfg, 7).unwrap();
        assert_eq!(set.kind, RolloutKind::Simulated);
        for r in &set.rollouts {
            assert!(r.len() <= 40 && !r.is_empty());
            r.validate(RolloutKind::Simulated).unwrap();
            assert_eq!(r.source_task, None);
            let (logits, _) = c.c_forward(r.z(0), &[0.0; 32]).unwrap();
            assert_eq!(&r.teacher.as_ref().unwrap()[..6], &logits[..]);
        }
        assert_eq!(set, generate_sim_rollouts(&model, &c, &cfg, 7).unwrap());

        // A done head that always fires ends every dream after one step.
        let mut eager = model.clone();
        let bias = eager.params().find("m.head.bias").unwrap();
        let w = eager.config().output_width();
        eager.params_mut().value_mut(bias)[w - 1] = 1e3;
        let set = generate_sim_rollouts(&eager, &c, &cfg, 7).unwrap();
        assert!(set.rollouts.iter().all(|r| r.len() == 2 && r.ends_done()));
    }

    #[test]
    fn file_errors() {
        let set = RolloutSet {
            kind: RolloutKind::Real,
            latent_dim: 2,
            rollouts: vec![Rollout::repeated(&[0.5, 0.25], 1, -1, 4)],
        };
        let bytes = encode_rollouts(&set);
        assert_eq!(decode_rollouts(&bytes).unwrap(), set);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_rollouts(&bad), Err(Error::Format(_))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(decode_rollouts(&flipped).is_err());
        assert!(decode_rollouts(&bytes[..bytes.len() - 7]).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode_rollouts(&version).is_err());
    }

    fn arb_set() -> impl Strategy<Value = RolloutSet> {
        (1usize..4, any::<bool>(), 0usize..4).prop_flat_map(|(l, sim, n)| {
            let rollout = (1usize..6).prop_flat_map(move |len| {
                (
                    proptest::collection::vec(any::<f64>(), len * l),
                    proptest::collection::vec(0u8..6, len),
                    proptest::collection::vec(-1i8..=1, len),
                    any::<bool>(),
                    proptest::collection::vec(any::<f64>(), len * NUM_ACTIONS),
                    0usize..5,
                )
                    .prop_map(move |(latents, actions, rewards, last_done, teacher, task)| {
                        let mut dones = vec![0; len];
                        dones[len - 1] = last_done as u8;
                        Rollout {
                            latent_dim: l,
                            latents,
                            actions,
                            rewards,
                            dones,
                            teacher: sim.then_some(teacher),
                            source_task: (!sim).then_some(TaskId(task)),
                        }
                    })
            });
            proptest::collection::vec(rollout, n).prop_map(move |rollouts| RolloutSet {
                kind: if sim { RolloutKind::Simulated } else { RolloutKind::Real },
                latent_dim: l,
                rollouts,
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(set in arb_set()) {
            let back = decode_rollouts(&encode_rollouts(&set)).unwrap();
            prop_assert_eq!(encode_rollouts(&back), encode_rollouts(&set));
        }
    }
}
