//! The C network: one hidden layer over `concat(z, h)` splitting into an
//! actor head (action logits) and a critic head (state value). Trained by
//! synchronous n-step advantage actor-critic on the live task and by
//! temperature-softened policy distillation on dreamed rollouts.

use rand::Rng as _;

use crate::envs::{Action, TaskId, TaskRegistry, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::numerics::math::{log_softmax, softmax};
use crate::numerics::{relu_backward_in_place, relu_in_place, Adam, Linear, LstmState, ParamSet};
use crate::rng::{self, Rng};
use crate::vae::Vae;
use crate::world_model::WorldModel;

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub lr: f64,
    pub tau: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Agent steps of live experience per exposure.
    pub n_steps_per_exposure: usize,
    /// Live steps between distillation rounds; each round distills on as
    /// many simulated steps.
    pub distill_window: usize,
    pub distill_batch: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            lr: 7e-4,
            tau: 0.01,
            gamma: 0.99,
            horizon: 5,
            value_coef: 0.5,
            entropy_coef: 0.01,
            n_steps_per_exposure: 20_000,
            distill_window: 2_000,
            distill_batch: 32,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.hidden == 0 || self.horizon == 0 || self.distill_window == 0 || self.distill_batch == 0 {
            return Err(Error::Config(
                "c_hidden, horizon, distill_window and distill_batch must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Controller {
    input_dim: usize,
    params: ParamSet,
    hidden: Linear,
    actor: Linear,
    critic: Linear,
}

/// Activations kept for a backward pass through a batch.
struct ForwardTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Controller {
    /// `latent_dim + state_dim` inputs: the latent and M's hidden state.
    pub fn new(latent_dim: usize, state_dim: usize, hidden: usize, seed: u64) -> Self {
        let input_dim = latent_dim + state_dim;
        let mut params = ParamSet::new(seed);
        let hidden_layer = Linear::new(&mut params, "c.hidden", input_dim, hidden);
        let actor = Linear::new(&mut params, "c.actor", hidden, NUM_ACTIONS);
        let critic = Linear::new(&mut params, "c.critic", hidden, 1);
        Self {
            input_dim,
            params,
            hidden: hidden_layer,
            actor,
            critic,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn trace(&self, input: &[f64], batch: usize) -> Result<ForwardTrace> {
        if input.len() != batch * self.input_dim {
            return Err(Error::Shape(format!(
                "controller expects {batch}×{} inputs, got {} values",
                self.input_dim,
                input.len()
            )));
        }
        let mut hidden = self.hidden.forward(&self.params, input, batch);
        relu_in_place(&mut hidden);
        Ok(ForwardTrace {
            input: input.to_vec(),
            hidden,
        })
    }

    /// Returns `(batch × 6 logits, batch values)`.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let tr = self.trace(input, batch)?;
        Ok((
            self.actor.forward(&self.params, &tr.hidden, batch),
            self.critic.forward(&self.params, &tr.hidden, batch),
        ))
    }

    pub fn c_forward(&self, z: &[f64], h: &[f64]) -> Result<(Vec<f64>, f64)> {
        let input: Vec<f64> = z.iter().chain(h).copied().collect();
        let (logits, value) = self.forward_batch(&input, 1)?;
        Ok((logits, value[0]))
    }

    fn backward(&mut self, tr: &ForwardTrace, dlogits: &[f64], dvalue: Option<&[f64]>, batch: usize) {
        let mut dh = self.actor.backward(&mut self.params, &tr.hidden, dlogits, batch);
        if let Some(dv) = dvalue {
            let dcrit = self.critic.backward(&mut self.params, &tr.hidden, dv, batch);
            dh.iter_mut().zip(dcrit).for_each(|(a, b)| *a += b);
        }
        relu_backward_in_place(&tr.hidden, &mut dh);
        self.hidden.backward_params(&mut self.params, &tr.input, &dh, batch);
    }

    /// One A2C gradient step on an n-step trajectory.
    pub fn a2c_update(
        &mut self,
        opt: &mut Adam,
        trajectory: &[A2cStep],
        bootstrap: f64,
        config: &ControllerConfig,
    ) -> Result<A2cLosses> {
        if trajectory.is_empty() {
            return Err(Error::Empty("a2c update needs at least one step".into()));
        }
        let n = trajectory.len();
        let rewards: Vec<f64> = trajectory.iter().map(|s| s.reward).collect();
        let dones: Vec<bool> = trajectory.iter().map(|s| s.done).collect();
        let returns = discounted_returns(&rewards, &dones, bootstrap, config.gamma);
        let input: Vec<f64> = trajectory.iter().flat_map(|s| s.input.iter().copied()).collect();
        let tr = self.trace(&input, n)?;
        let logits = self.actor.forward(&self.params, &tr.hidden, n);
        let values = self.critic.forward(&self.params, &tr.hidden, n);

        let mut losses = A2cLosses::default();
        let mut dlogits = vec![0.0; n * NUM_ACTIONS];
        let mut dvalues = vec![0.0; n];
        for (t, step) in trajectory.iter().enumerate() {
            let row = &logits[t * NUM_ACTIONS..(t + 1) * NUM_ACTIONS];
            let logp = log_softmax(row);
            let p: Vec<f64> = logp.iter().map(|x| x.exp()).collect();
            let entropy = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
            let advantage = returns[t] - step.value;
            losses.policy -= advantage * logp[step.action];
            losses.value += (returns[t] - values[t]).powi(2);
            losses.entropy += entropy;
            let d = &mut dlogits[t * NUM_ACTIONS..(t + 1) * NUM_ACTIONS];
            for j in 0..NUM_ACTIONS {
                let onehot = if j == step.action { 1.0 } else { 0.0 };
                d[j] = advantage * (p[j] - onehot) + config.entropy_coef * p[j] * (logp[j] + entropy);
            }
            dvalues[t] = -2.0 * config.value_coef * (returns[t] - values[t]);
        }
        self.params.zero_grad();
        self.backward(&tr, &dlogits, Some(&dvalues), n);
        opt.step(&mut self.params);
        Ok(losses)
    }

    /// One distillation step towards teacher logits at temperature `tau`.
    /// Only the shared layer and actor head move.
    pub fn distill_update(&mut self, opt: &mut Adam, input: &[f64], teacher: &[f64], tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("tau must be positive, got {tau}")));
        }
        let batch = teacher.len() / NUM_ACTIONS;
        let tr = self.trace(input, batch)?;
        let logits = self.actor.forward(&self.params, &tr.hidden, batch);
        let (loss, dlogits) = distill_loss_and_grad(&logits, teacher, tau)?;
        self.params.zero_grad();
        self.backward(&tr, &dlogits, None, batch);
        opt.step(&mut self.params);
        Ok(loss)
    }
}

/// `−Σ softmax(teacher/τ)·ln softmax(student/τ)` summed over rows, with its
/// gradient `(softmax(student/τ) − softmax(teacher/τ)) / τ` per logit.
pub fn distill_loss_and_grad(student: &[f64], teacher: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() || !student.len().is_multiple_of(NUM_ACTIONS) {
        return Err(Error::Shape(
            "student and teacher logits must be matching batch × 6".into(),
        ));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.len()];
    for (k, (s, t)) in student.chunks(NUM_ACTIONS).zip(teacher.chunks(NUM_ACTIONS)).enumerate() {
        let s_scaled: Vec<f64> = s.iter().map(|x| x / tau).collect();
        let t_scaled: Vec<f64> = t.iter().map(|x| x / tau).collect();
        let log_q = log_softmax(&s_scaled);
        let p = softmax(&t_scaled);
        let q = softmax(&s_scaled);
        for j in 0..NUM_ACTIONS {
            if p[j] > 0.0 {
                loss -= p[j] * log_q[j];
            }
            grad[k * NUM_ACTIONS + j] = (q[j] - p[j]) / tau;
        }
    }
    Ok((loss, grad))
}

/// `R_t = r_t + γ·R_{t+1}`, restarting from zero after a terminal step and
/// from `bootstrap` past the end.
pub fn discounted_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            next = 0.0;
        }
        next = rewards[t] + gamma * next;
        out[t] = next;
    }
    out
}

/// One transition as seen by the actor-critic. `reward` and `done` are the
/// consequences of taking `action` in `input`.
#[derive(Clone, Debug, PartialEq)]
pub struct A2cStep {
    pub input: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct A2cLosses {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

/// Samples an action index from `softmax(logits)`.
pub fn sample_action(logits: &[f64], rng: &mut Rng) -> usize {
    let p = softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, pj) in p.iter().enumerate() {
        acc += pj;
        if u < acc {
            return j;
        }
    }
    p.len() - 1
}

/// Episode returns finished during one exposure, keyed by the live step at
/// which each ended.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardLog {
    pub episodes: Vec<(usize, f64)>,
    pub real_steps: usize,
    pub distill_steps: usize,
}

/// Distillation data: controller inputs `concat(z, h)` and teacher logits,
/// one row per simulated step.
#[derive(Clone, Debug, Default)]
pub struct DistillSet {
    pub inputs: Vec<f64>,
    pub teacher: Vec<f64>,
}

impl DistillSet {
    pub fn len(&self) -> usize {
        self.teacher.len() / NUM_ACTIONS
    }

    pub fn is_empty(&self) -> bool {
        self.teacher.is_empty()
    }
}

/// Runs A2C on the live task for `n_steps_per_exposure` agent steps. The
/// controller sees the frozen encoder's mean latent and `model`'s recurrent
/// state. With `distill`, every `distill_window` live steps are followed by
/// distillation on as many simulated steps drawn from it.
#[allow(clippy::too_many_arguments)]
pub fn train_c_exposure(
    registry: &TaskRegistry,
    task: TaskId,
    vae: &Vae,
    model: &WorldModel,
    controller: &mut Controller,
    opt: &mut Adam,
    distill: Option<(&DistillSet, &mut Adam)>,
    config: &ControllerConfig,
    seed: u64,
) -> Result<RewardLog> {
    config.validate()?;
    let mut rng = rng::seeded(rng::derive(seed, &[rng::tag("a2c")]));
    let mut log = RewardLog::default();
    let mut episode = 0u64;
    let (mut env, mut obs) = registry.reset(task, rng::derive(seed, &[rng::tag("episode"), episode]))?;
    let mut state = model.initial_state(1);
    let mut episode_return = 0.0;
    let mut distill = distill;
    let mut since_distill = 0;
    let mut traj: Vec<A2cStep> = Vec::with_capacity(config.horizon);

    while log.real_steps < config.n_steps_per_exposure {
        let z = vae.encode(&obs.frame)?.mu;
        let input: Vec<f64> = z.iter().chain(&state.h).copied().collect();
        let (logits, value) = controller.forward_batch(&input, 1)?;
        let action = sample_action(&logits, &mut rng);
        obs = env.step(Action::from_index(action)?)?;
        log.real_steps += 1;
        since_distill += 1;
        episode_return += obs.reward;
        traj.push(A2cStep {
            input,
            action,
            reward: obs.reward,
            done: obs.done,
            value: value[0],
        });
        state = model.advance(&z, &state)?;

        let exhausted = log.real_steps >= config.n_steps_per_exposure;
        if obs.done || traj.len() == config.horizon || exhausted {
            let bootstrap = if obs.done {
                0.0
            } else {
                let z_next = vae.encode(&obs.frame)?.mu;
                let next: Vec<f64> = z_next.iter().chain(&state.h).copied().collect();
                controller.forward_batch(&next, 1)?.1[0]
            };
            controller.a2c_update(opt, &traj, bootstrap, config)?;
            traj.clear();
        }
        if obs.done {
            log.episodes.push((log.real_steps, episode_return));
            episode_return = 0.0;
            episode += 1;
            let (e, o) = registry.reset(task, rng::derive(seed, &[rng::tag("episode"), episode]))?;
            env = e;
            obs = o;
            state = model.initial_state(1);
        }
        if since_distill == config.distill_window || exhausted {
            if let Some((set, dopt)) = distill.as_mut() {
                log.distill_steps += distill_round(controller, dopt, set, since_distill, config, &mut rng)?;
            }
            since_distill = 0;
        }
    }
    Ok(log)
}

/// Distills on `count` rows drawn uniformly from `set`; returns the number
/// of rows used.
fn distill_round(
    controller: &mut Controller,
    opt: &mut Adam,
    set: &DistillSet,
    count: usize,
    config: &ControllerConfig,
    rng: &mut Rng,
) -> Result<usize> {
    if set.is_empty() {
        return Ok(0);
    }
    let dim = controller.input_dim;
    let mut done = 0;
    while done < count {
        let b = config.distill_batch.min(count - done);
        let mut input = Vec::with_capacity(b * dim);
        let mut teacher = Vec::with_capacity(b * NUM_ACTIONS);
        for _ in 0..b {
            let k = rng.random_range(0..set.len());
            input.extend_from_slice(&set.inputs[k * dim..(k + 1) * dim]);
            teacher.extend_from_slice(&set.teacher[k * NUM_ACTIONS..(k + 1) * NUM_ACTIONS]);
        }
        controller.distill_update(opt, &input, &teacher, config.tau)?;
        done += b;
    }
    Ok(done)
}

/// Replays `model` over each simulated rollout to recover the recurrent
/// state that accompanied every dreamed latent.
pub fn build_distill_set(model: &WorldModel, rollouts: &[crate::rollouts::Rollout]) -> Result<DistillSet> {
    let mut set = DistillSet::default();
    for r in rollouts {
        let teacher = r
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Format("simulated rollout lacks teacher logits".into()))?;
        let mut state: LstmState = model.initial_state(1);
        for t in 0..r.len() {
            let z = r.z(t);
            set.inputs.extend_from_slice(z);
            set.inputs.extend_from_slice(&state.h);
            set.teacher
                .extend_from_slice(&teacher[t * NUM_ACTIONS..(t + 1) * NUM_ACTIONS]);
            state = model.advance(z, &state)?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::FrameShape;
    use crate::vae::VaeConfig;
    use crate::world_model::ModelConfig;

    #[test]
    fn forward_shapes_and_zero_params() {
        let mut c = Controller::new(3, 4, 16, 1);
        let (logits, v) = c.c_forward(&[0.1, 0.2, 0.3], &[0.0; 4]).unwrap();
        assert_eq!(logits.len(), NUM_ACTIONS);
        assert_eq!((logits.clone(), v), c.c_forward(&[0.1, 0.2, 0.3], &[0.0; 4]).unwrap());
        assert!(c.c_forward(&[0.1], &[0.0; 4]).is_err());
        c.params_mut().fill_values(0.0);
        let (logits, v) = c.c_forward(&[0.1, 0.2, 0.3], &[0.5; 4]).unwrap();
        assert!(softmax(&logits).iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn returns_match_direct_summation() {
        assert_eq!(discounted_returns(&[1.0], &[true], 5.0, 0.99), vec![1.0]);
        let mut rng = rng::seeded(2);
        for len in 1..=10 {
            let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<bool> = (0..len).map(|_| rng.random_bool(0.2)).collect();
            let boot = rng.random_range(-2.0..2.0);
            let gamma = 0.9;
            let got = discounted_returns(&r, &d, boot, gamma);
            for t in 0..len {
                let mut expect = 0.0;
                let mut discount = 1.0;
                let mut terminal = false;
                for k in t..len {
                    expect += discount * r[k];
                    discount *= gamma;
                    if d[k] {
                        terminal = true;
                        break;
                    }
                }
                if !terminal {
                    expect += discount * boot;
                }
                assert!((got[t] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_advantage_gives_no_policy_gradient() {
        let cfg = ControllerConfig {
            entropy_coef: 0.0,
            ..ControllerConfig::default()
        };
        let mut c = Controller::new(2, 2, 8, 3);
        let before = c.params().clone();
        let mut opt = Adam::new(c.params(), 0.1);
        // Terminal step with value equal to its reward: advantage and value
        // error are both zero.
        let input = vec![0.3, -0.2, 0.1, 0.4];
        let (_, v) = c.forward_batch(&input, 1).unwrap();
        let step = A2cStep {
            input,
            action: 2,
            reward: v[0],
            done: true,
            value: v[0],
        };
        c.a2c_update(&mut opt, &[step], 0.0, &cfg).unwrap();
        assert_eq!(c.params().checksum(), before.checksum());
    }

    #[test]
    fn distillation_gradient_and_targets() {
        let logits = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (_, g) = distill_loss_and_grad(&logits, &logits, 0.01).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let scaled: Vec<f64> = logits.iter().map(|x| x / 0.01).collect();
        let p = softmax(&scaled);
        assert!((p[0] - 1.0).abs() < 1e-30 && p[1..].iter().all(|&x| x < 1e-30));

        // Gibbs: loss ≥ target entropy, with equality at the target.
        let teacher = [0.02, 0.01, -0.01, 0.0, 0.015, -0.02];
        let tp = softmax(&teacher.iter().map(|x| x / 0.01).collect::<Vec<_>>());
        let h = crate::numerics::math::entropy(&tp);
        let (at_target, _) = distill_loss_and_grad(&teacher, &teacher, 0.01).unwrap();
        assert!((at_target - h).abs() < 1e-12);
        let (off, _) = distill_loss_and_grad(&[0.0; 6], &teacher, 0.01).unwrap();
        assert!(off > h);
    }

    #[test]
    fn self_distillation_is_a_fixed_point() {
        let mut c = Controller::new(3, 5, 32, 4);
        let frozen = c.clone();
        let mut opt = Adam::new(c.params(), 0.01);
        let mut rng = rng::seeded(5);
        let before = c.params().checksum();
        for _ in 0..20 {
            let input: Vec<f64> = (0..8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (teacher, _) = frozen.forward_batch(&input, 8).unwrap();
            c.distill_update(&mut opt, &input, &teacher, 0.01).unwrap();
        }
        assert_eq!(c.params().checksum(), before);
    }

    #[test]
    fn distillation_leaves_critic_alone() {
        let mut c = Controller::new(2, 2, 8, 6);
        let critic_before = c.params().value(c.critic.weight).to_vec();
        let mut opt = Adam::new(c.params(), 0.05);
        let input = vec![0.5, -0.5, 0.2, 0.1];
        c.distill_update(&mut opt, &input, &[3.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.01)
            .unwrap();
        assert_eq!(c.params().value(c.critic.weight), &critic_before[..]);
    }

    #[test]
    fn sampled_actions_follow_policy() {
        let mut rng = rng::seeded(7);
        let logits = [0.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        let n = 20_000;
        let hits = (0..n).filter(|_| sample_action(&logits, &mut rng) == 1).count();
        let p = softmax(&logits)[1];
        assert!((hits as f64 / n as f64 - p).abs() < 0.02);
    }

    #[test]
    fn a2c_learns_the_bandit() {
        let shape = FrameShape::default();
        let registry = TaskRegistry::new(&["bandit".to_string()], shape, 4).unwrap();
        let vae = Vae::new(shape, &VaeConfig::default()).unwrap();
        let model = WorldModel::new(ModelConfig::default(), 1).unwrap();
        let cfg = ControllerConfig {
            n_steps_per_exposure: 2_000,
            hidden: 64,
            lr: 3e-3,
            ..ControllerConfig::default()
        };
        let mut c = Controller::new(8, 32, cfg.hidden, 2);
        let mut opt = Adam::new(c.params(), cfg.lr);
        let log = train_c_exposure(&registry, TaskId(0), &vae, &model, &mut c, &mut opt, None, &cfg, 3).unwrap();
        assert_eq!(log.real_steps, 2_000);
        assert_eq!(log.distill_steps, 0);
        let tail = &log.episodes[log.episodes.len() - 200..];
        let mean = tail.iter().map(|e| e.1).sum::<f64>() / tail.len() as f64;
        assert!(mean > 0.9, "mean reward {mean}");
    }
}
