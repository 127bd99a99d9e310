//! The M network: an LSTM over latents whose output, concatenated with the
//! one-hot action, feeds a mixture-density head predicting the next latent,
//! the reward, and the termination probability.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{Action, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::numerics::math::{bce_with_logit, log_sum_exp, sigmoid, softmax, HALF_LN_2PI};
use crate::numerics::{Adam, Linear, LstmCell, LstmGrad, LstmState, LstmStepCache, ParamSet};
use crate::rng::Rng;
use crate::rollouts::Rollout;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub mixtures: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            mixtures: 5,
            hidden: 32,
        }
    }
}

impl ModelConfig {
    /// `3·G·L + 2`.
    pub fn output_width(&self) -> usize {
        3 * self.mixtures * self.latent_dim + 2
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.mixtures == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "latent_dim, mdn_mixtures and lstm_hidden must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Raw head output. Every `G×L` block is indexed `g·L + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MdnOutput {
    pub mixtures: usize,
    pub latent_dim: usize,
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub reward_pred: f64,
    pub done_logit: f64,
}

impl MdnOutput {
    pub fn from_raw(raw: &[f64], mixtures: usize, latent_dim: usize) -> Result<Self> {
        let gl = mixtures * latent_dim;
        if raw.len() != 3 * gl + 2 {
            return Err(Error::Shape(format!(
                "mdn output has {} values, expected {}",
                raw.len(),
                3 * gl + 2
            )));
        }
        Ok(Self {
            mixtures,
            latent_dim,
            pi: raw[..gl].to_vec(),
            mu: raw[gl..2 * gl].to_vec(),
            log_sigma: raw[2 * gl..3 * gl].to_vec(),
            reward_pred: raw[3 * gl],
            done_logit: raw[3 * gl + 1],
        })
    }

    pub fn to_raw(&self) -> Vec<f64> {
        let mut raw = Vec::with_capacity(3 * self.pi.len() + 2);
        raw.extend_from_slice(&self.pi);
        raw.extend_from_slice(&self.mu);
        raw.extend_from_slice(&self.log_sigma);
        raw.push(self.reward_pred);
        raw.push(self.done_logit);
        raw
    }

    /// Mixture weights of latent dimension `i`.
    pub fn weights(&self, i: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.mixtures).map(|g| self.pi[g * self.latent_dim + i]).collect();
        softmax(&logits)
    }
}

/// Prediction target for one step: the next latent, its clipped reward and
/// the done flag.
#[derive(Clone, Copy, Debug)]
pub struct StepTarget<'a> {
    pub z_next: &'a [f64],
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub gmm: f64,
    pub reward_mse: f64,
    pub done_bce: f64,
}

impl LossParts {
    fn add(&mut self, other: &LossParts) {
        self.total += other.total;
        self.gmm += other.gmm;
        self.reward_mse += other.reward_mse;
        self.done_bce += other.done_bce;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.gmm *= s;
        self.reward_mse *= s;
        self.done_bce *= s;
    }
}

/// `(1/L)·Σ_i −ln Σ_g softmax(Π_{·,i})_g · N(z_i | μ_{g,i}, σ_{g,i})`,
/// evaluated in log space.
pub fn mdn_loss(out: &MdnOutput, z_next: &[f64]) -> Result<f64> {
    if z_next.len() != out.latent_dim {
        return Err(Error::Shape(format!(
            "target has {} dims, model {}",
            z_next.len(),
            out.latent_dim
        )));
    }
    Ok(loss_and_grad(
        &out.to_raw(),
        out.mixtures,
        out.latent_dim,
        StepTarget {
            z_next,
            reward: 0.0,
            done: false,
        },
        None,
    )
    .gmm)
}

/// All three losses and their mean.
pub fn m_total_loss(out: &MdnOutput, target: StepTarget<'_>) -> Result<LossParts> {
    if target.z_next.len() != out.latent_dim {
        return Err(Error::Shape("target latent width".into()));
    }
    Ok(loss_and_grad(&out.to_raw(), out.mixtures, out.latent_dim, target, None))
}

/// Loss of one raw output row. With `grad`, writes `scale · dtotal/draw`.
fn loss_and_grad(
    raw: &[f64],
    g_count: usize,
    l: usize,
    target: StepTarget<'_>,
    grad: Option<(&mut [f64], f64)>,
) -> LossParts {
    let gl = g_count * l;
    let mut comp = vec![0.0; g_count];
    let mut logits = vec![0.0; g_count];
    let mut gmm = 0.0;
    let mut grad = grad;
    for i in 0..l {
        for g in 0..g_count {
            logits[g] = raw[g * l + i];
        }
        let log_norm = log_sum_exp(&logits);
        let z = target.z_next[i];
        for g in 0..g_count {
            let mu = raw[gl + g * l + i];
            let log_sigma = raw[2 * gl + g * l + i];
            let u = (z - mu) * (-log_sigma).exp();
            comp[g] = logits[g] - log_norm - log_sigma - HALF_LN_2PI - 0.5 * u * u;
        }
        let lse = log_sum_exp(&comp);
        gmm -= lse;
        if let Some((dr, scale)) = grad.as_mut() {
            let s = *scale / (3.0 * l as f64);
            for g in 0..g_count {
                let post = (comp[g] - lse).exp();
                let weight = (logits[g] - log_norm).exp();
                let mu = raw[gl + g * l + i];
                let inv_sigma = (-raw[2 * gl + g * l + i]).exp();
                let u = (z - mu) * inv_sigma;
                dr[g * l + i] = s * (weight - post);
                dr[gl + g * l + i] = -s * post * u * inv_sigma;
                dr[2 * gl + g * l + i] = -s * post * (u * u - 1.0);
            }
        }
    }
    gmm /= l as f64;
    let reward_pred = raw[3 * gl];
    let done_logit = raw[3 * gl + 1];
    let d = if target.done { 1.0 } else { 0.0 };
    let reward_mse = (reward_pred - target.reward).powi(2);
    let done_bce = bce_with_logit(done_logit, d);
    if let Some((dr, scale)) = grad {
        dr[3 * gl] = scale * 2.0 * (reward_pred - target.reward) / 3.0;
        dr[3 * gl + 1] = scale * (sigmoid(done_logit) - d) / 3.0;
    }
    LossParts {
        total: (gmm + reward_mse + done_bce) / 3.0,
        gmm,
        reward_mse,
        done_bce,
    }
}

/// Draws `(z_next, clipped reward, done)` from one output.
pub fn sample_next(out: &MdnOutput, rng: &mut Rng, temperature: f64) -> Result<(Vec<f64>, f64, bool)> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let l = out.latent_dim;
    let mut z = Vec::with_capacity(l);
    for i in 0..l {
        let w = out.weights(i);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut g = w.len() - 1;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                g = k;
                break;
            }
        }
        let eps: f64 = StandardNormal.sample(rng);
        let idx = g * l + i;
        z.push(out.mu[idx] + temperature * out.log_sigma[idx].exp() * eps);
    }
    Ok((z, clip_reward(out.reward_pred), sigmoid(out.done_logit) > 0.5))
}

/// Rounds a predicted reward to the nearest of `{-1, 0, 1}`.
pub fn clip_reward(r: f64) -> f64 {
    if r >= 0.5 {
        1.0
    } else if r <= -0.5 {
        -1.0
    } else {
        0.0
    }
}

/// A batch of equal-length training windows laid out time-major.
#[derive(Clone, Debug, Default)]
pub struct SequenceBatch {
    pub batch: usize,
    pub steps: usize,
    /// `(steps + 1) × batch × L`: inputs for `t < steps`, targets for `t ≥ 1`.
    pub z: Vec<f64>,
    /// `steps × batch` action indices.
    pub actions: Vec<usize>,
    /// `steps × batch` targets that arrive with `z[t + 1]`.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl SequenceBatch {
    /// Copies `steps` transitions starting at each `(rollout, start)` pair.
    pub fn from_windows(windows: &[(&Rollout, usize)], steps: usize, latent_dim: usize) -> Self {
        let batch = windows.len();
        let mut sb = SequenceBatch {
            batch,
            steps,
            z: vec![0.0; (steps + 1) * batch * latent_dim],
            actions: vec![0; steps * batch],
            rewards: vec![0.0; steps * batch],
            dones: vec![false; steps * batch],
        };
        for t in 0..=steps {
            for (b, (r, start)) in windows.iter().enumerate() {
                let k = start + t;
                sb.z[(t * batch + b) * latent_dim..(t * batch + b + 1) * latent_dim].copy_from_slice(r.z(k));
                if t < steps {
                    sb.actions[t * batch + b] = r.actions[k] as usize;
                    sb.rewards[t * batch + b] = r.rewards[k + 1] as f64;
                    sb.dones[t * batch + b] = r.dones[k + 1] != 0;
                }
            }
        }
        sb
    }
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    config: ModelConfig,
    params: ParamSet,
    lstm: LstmCell,
    head: Linear,
}

impl WorldModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new(seed);
        let lstm = LstmCell::new(&mut params, "m.lstm", config.latent_dim, config.hidden);
        let head = Linear::new(
            &mut params,
            "m.head",
            config.hidden + NUM_ACTIONS,
            config.output_width(),
        );
        Ok(Self {
            config,
            params,
            lstm,
            head,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn initial_state(&self, batch: usize) -> LstmState {
        LstmState::zeros(batch, self.config.hidden)
    }

    fn head_input(&self, h: &[f64], actions: &[usize], batch: usize) -> Vec<f64> {
        let hd = self.config.hidden;
        let w = hd + NUM_ACTIONS;
        let mut x = vec![0.0; batch * w];
        for b in 0..batch {
            x[b * w..b * w + hd].copy_from_slice(&h[b * hd..(b + 1) * hd]);
            x[b * w + hd + actions[b]] = 1.0;
        }
        x
    }

    /// Advances a batch one step: returns raw outputs (`batch × (3GL+2)`) and
    /// the new state.
    pub fn step_batch(&self, z: &[f64], actions: &[usize], state: &LstmState) -> Result<(Vec<f64>, LstmState)> {
        let batch = actions.len();
        if actions.iter().any(|&a| a >= NUM_ACTIONS) {
            return Err(Error::Shape("action index out of range".into()));
        }
        let (next, _) = self.lstm.step(&self.params, z, state, batch)?;
        let x = self.head_input(&next.h, actions, batch);
        Ok((self.head.forward(&self.params, &x, batch), next))
    }

    /// Consumes one latent per row without evaluating the head. The action
    /// does not enter the recurrence.
    pub fn advance(&self, z: &[f64], state: &LstmState) -> Result<LstmState> {
        let batch = state.h.len() / self.config.hidden;
        Ok(self.lstm.step(&self.params, z, state, batch)?.0)
    }

    pub fn m_forward(&self, z: &[f64], action: Action, state: &LstmState) -> Result<(MdnOutput, LstmState)> {
        let (raw, next) = self.step_batch(z, &[action.index()], state)?;
        Ok((
            MdnOutput::from_raw(&raw, self.config.mixtures, self.config.latent_dim)?,
            next,
        ))
    }

    /// Mean loss over every transition of the batch, each window starting
    /// from the zero state. With `train`, accumulates the gradient of that
    /// mean by backpropagation through the whole window.
    pub fn sequence_loss(&mut self, seq: &SequenceBatch, train: bool) -> Result<LossParts> {
        let (b, l, hd) = (seq.batch, self.config.latent_dim, self.config.hidden);
        let width = self.config.output_width();
        let count = (b * seq.steps) as f64;
        if count == 0.0 {
            return Err(Error::Empty("empty sequence batch".into()));
        }
        let mut state = self.initial_state(b);
        let mut caches: Vec<(LstmStepCache, Vec<f64>)> = Vec::new();
        let mut dheads: Vec<Vec<f64>> = Vec::new();
        let mut parts = LossParts::default();
        for t in 0..seq.steps {
            let z = &seq.z[t * b * l..(t + 1) * b * l];
            let actions = &seq.actions[t * b..(t + 1) * b];
            let (next, cache) = self.lstm.step(&self.params, z, &state, b)?;
            let x = self.head_input(&next.h, actions, b);
            let raw = self.head.forward(&self.params, &x, b);
            let mut draw = vec![0.0; raw.len()];
            for k in 0..b {
                let target = StepTarget {
                    z_next: &seq.z[((t + 1) * b + k) * l..((t + 1) * b + k + 1) * l],
                    reward: seq.rewards[t * b + k],
                    done: seq.dones[t * b + k],
                };
                let g = train.then(|| (&mut draw[k * width..(k + 1) * width], 1.0 / count));
                parts.add(&loss_and_grad(
                    &raw[k * width..(k + 1) * width],
                    self.config.mixtures,
                    l,
                    target,
                    g,
                ));
            }
            if train {
                caches.push((cache, x));
                dheads.push(draw);
            }
            state = next;
        }
        if train {
            let mut carry = LstmGrad::zeros(b, hd);
            for t in (0..seq.steps).rev() {
                let (cache, x) = &caches[t];
                let dx = self.head.backward(&mut self.params, x, &dheads[t], b);
                for k in 0..b {
                    for j in 0..hd {
                        carry.dh[k * hd + j] += dx[k * (hd + NUM_ACTIONS) + j];
                    }
                }
                carry = self.lstm.step_backward(&mut self.params, cache, &carry, false).0;
            }
        }
        parts.scale(1.0 / count);
        Ok(parts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MTrainConfig {
    pub lr: f64,
    pub batches_per_epoch: usize,
    pub batch: usize,
    pub seq_len: usize,
}

impl Default for MTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batches_per_epoch: 100,
            batch: 16,
            seq_len: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub real_batches: usize,
    pub sim_batches: usize,
}

/// Draws `batch` windows of `seq_len` transitions (`seq_len + 1` records)
/// uniformly over rollouts long enough to hold one. If no rollout is, the
/// window shrinks to the longest available.
fn sample_windows<'a>(
    rollouts: &'a [Rollout],
    batch: usize,
    seq_len: usize,
    rng: &mut Rng,
) -> Result<(Vec<(&'a Rollout, usize)>, usize)> {
    let longest = rollouts.iter().map(Rollout::len).max().unwrap_or(0);
    if longest < 2 {
        return Err(Error::Empty("no rollout holds a single transition".into()));
    }
    let steps = seq_len.min(longest - 1);
    let eligible: Vec<&Rollout> = rollouts.iter().filter(|r| r.len() > steps).collect();
    let windows = (0..batch)
        .map(|_| {
            let r = eligible[rng.random_range(0..eligible.len())];
            (r, rng.random_range(0..r.len() - steps))
        })
        .collect();
    Ok((windows, steps))
}

/// One epoch of M training. With `sim`, batches alternate real, simulated,
/// real, … so each source supplies half of them.
pub fn train_m_epoch(
    model: &mut WorldModel,
    opt: &mut Adam,
    real: &[Rollout],
    sim: Option<&[Rollout]>,
    config: &MTrainConfig,
    rng: &mut Rng,
) -> Result<EpochStats> {
    let mut stats = EpochStats::default();
    let l = model.config.latent_dim;
    for k in 0..config.batches_per_epoch {
        let source = match sim {
            Some(s) if k % 2 == 1 => {
                stats.sim_batches += 1;
                s
            }
            _ => {
                stats.real_batches += 1;
                real
            }
        };
        let (windows, steps) = sample_windows(source, config.batch, config.seq_len, rng)?;
        let seq = SequenceBatch::from_windows(&windows, steps, l);
        model.params.zero_grad();
        let parts = model.sequence_loss(&seq, true)?;
        if !parts.total.is_finite() || !model.params.grads_finite() {
            return Err(Error::Domain("non-finite world-model loss during training".into()));
        }
        opt.step(&mut model.params);
        stats.mean_loss += parts.total;
    }
    stats.mean_loss /= config.batches_per_epoch.max(1) as f64;
    model.params.zero_grad();
    Ok(stats)
}

/// Average loss per output unit over held-out rollouts. Each rollout is cut
/// into consecutive windows of at most `seq_len` transitions, each starting
/// from the zero state; the average is over transitions.
pub fn evaluate_m(model: &WorldModel, test: &[Rollout], seq_len: usize) -> Result<f64> {
    let mut windows: Vec<(&Rollout, usize, usize)> = Vec::new();
    for r in test {
        let transitions = r.len().saturating_sub(1);
        let mut start = 0;
        while start < transitions {
            let steps = seq_len.min(transitions - start);
            windows.push((r, start, steps));
            start += steps;
        }
    }
    if windows.is_empty() {
        return Err(Error::Empty("no held-out transitions to evaluate".into()));
    }
    windows.sort_by_key(|w| w.2);
    // Evaluation needs no gradients; a scratch copy keeps `model` immutable.
    let mut scratch = model.clone();
    let (mut total, mut count) = (0.0, 0usize);
    let mut i = 0;
    while i < windows.len() {
        let steps = windows[i].2;
        let mut j = i;
        while j < windows.len() && windows[j].2 == steps && j - i < 64 {
            j += 1;
        }
        let group: Vec<(&Rollout, usize)> = windows[i..j].iter().map(|w| (w.0, w.1)).collect();
        let seq = SequenceBatch::from_windows(&group, steps, model.config.latent_dim);
        let n = group.len() * steps;
        total += scratch.sequence_loss(&seq, false)?.total * n as f64;
        count += n;
        i = j;
    }
    let avg = total / count as f64 / model.config.output_width() as f64;
    if !avg.is_finite() {
        return Err(Error::Domain("held-out loss is not finite".into()));
    }
    Ok(avg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::seeded;

    fn random_output(g: usize, l: usize, rng: &mut Rng) -> MdnOutput {
        let raw: Vec<f64> = (0..3 * g * l + 2).map(|_| rng.random_range(-1.5..1.5)).collect();
        MdnOutput::from_raw(&raw, g, l).unwrap()
    }

    /// Density summed directly in linear space.
    fn oracle_nll(out: &MdnOutput, z: &[f64]) -> f64 {
        let l = out.latent_dim;
        let mut acc = 0.0;
        for i in 0..l {
            let w = out.weights(i);
            let mut density = 0.0;
            for g in 0..out.mixtures {
                let mu = out.mu[g * l + i];
                let s = out.log_sigma[g * l + i].exp();
                density +=
                    w[g] * (-(z[i] - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            }
            acc -= density.ln();
        }
        acc / l as f64
    }

    #[test]
    fn output_width_and_zero_params() {
        let cfg = ModelConfig {
            latent_dim: 4,
            mixtures: 3,
            hidden: 5,
        };
        let mut m = WorldModel::new(cfg, 1).unwrap();
        let (out, state) = m
            .m_forward(&[0.1, 0.2, 0.3, 0.4], Action::Left, &m.initial_state(1))
            .unwrap();
        assert_eq!(out.to_raw().len(), 3 * 3 * 4 + 2);
        assert_eq!(state.h.len(), 5);
        let again = m
            .m_forward(&[0.1, 0.2, 0.3, 0.4], Action::Left, &m.initial_state(1))
            .unwrap();
        assert_eq!(out, again.0);
        m.params_mut().fill_values(0.0);
        let (out, _) = m
            .m_forward(&[0.1, 0.2, 0.3, 0.4], Action::Left, &m.initial_state(1))
            .unwrap();
        for i in 0..4 {
            assert!(out.weights(i).iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
        assert!(out.mu.iter().all(|&x| x == 0.0));
        assert!(m.m_forward(&[0.0; 3], Action::Left, &m.initial_state(1)).is_err());
    }

    #[test]
    fn single_component_at_mean() {
        let out = MdnOutput::from_raw(&[0.3, 1.25, 0.0, 0.0, 0.0], 1, 1).unwrap();
        assert!((mdn_loss(&out, &[1.25]).unwrap() - HALF_LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = seeded(11);
        for _ in 0..100 {
            let g = rng.random_range(1..=3);
            let l = rng.random_range(1..=4);
            let out = random_output(g, l, &mut rng);
            let z: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!((mdn_loss(&out, &z).unwrap() - oracle_nll(&out, &z)).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_component_invariance() {
        let mut rng = seeded(12);
        let out = random_output(2, 3, &mut rng);
        let l = 3;
        // Append a copy of component 0 and move ln 2 of its weight to it.
        let mut dup = out.clone();
        dup.mixtures = 3;
        for i in 0..l {
            dup.pi[i] -= std::f64::consts::LN_2;
        }
        let head: Vec<f64> = dup.pi[..l].to_vec();
        dup.pi.extend(head);
        dup.mu.extend((0..l).map(|i| out.mu[i]));
        dup.log_sigma.extend((0..l).map(|i| out.log_sigma[i]));
        let z = [0.3, -0.7, 1.1];
        assert!((mdn_loss(&out, &z).unwrap() - mdn_loss(&dup, &z).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn far_target_stays_finite() {
        let out = MdnOutput::from_raw(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 2, 1).unwrap();
        let loss = mdn_loss(&out, &[51.0]).unwrap();
        assert!(loss.is_finite());
        assert!((loss - (HALF_LN_2PI + 0.5 * 50.0 * 50.0 + std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn total_loss_components() {
        let raw = [0.0, 0.5, 0.0, 0.7, 0.0];
        let out = MdnOutput::from_raw(&raw, 1, 1).unwrap();
        let p = m_total_loss(
            &out,
            StepTarget {
                z_next: &[0.5],
                reward: 0.7,
                done: true,
            },
        )
        .unwrap();
        assert_eq!(p.reward_mse, 0.0);
        assert!((p.done_bce - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((p.total - (p.gmm + p.reward_mse + p.done_bce) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = seeded(13);
        let out = random_output(5, 4, &mut rng);
        for i in 0..4 {
            assert!((out.weights(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_contracts() {
        let mut rng = seeded(14);
        let out = MdnOutput::from_raw(
            &[0.0, 0.0, 0.4, -0.2, (1e-12f64).ln(), (1e-12f64).ln(), 0.3, -10.0],
            1,
            2,
        )
        .unwrap();
        let (z, r, done) = sample_next(&out, &mut rng, 1.0).unwrap();
        assert!((z[0] - 0.4).abs() < 1e-10 && (z[1] + 0.2).abs() < 1e-10);
        assert_eq!(r, 0.0);
        assert!(!done);
        assert!(sample_next(&out, &mut rng, 0.0).is_err());

        // Components far apart with tiny scales reveal which one was drawn.
        let logits = [0.5, -0.3, 1.0];
        let mut raw = logits.to_vec();
        raw.extend([-100.0, 0.0, 100.0]);
        raw.extend([-10.0; 3]);
        raw.extend([0.0, 0.0]);
        let out = MdnOutput::from_raw(&raw, 3, 1).unwrap();
        let expected = softmax(&logits);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let (z, _, _) = sample_next(&out, &mut rng, 1.0).unwrap();
            counts[((z[0] + 100.0) / 100.0).round() as usize] += 1;
        }
        for g in 0..3 {
            assert!((counts[g] as f64 / n as f64 - expected[g]).abs() < 0.01);
        }
    }

    fn random_batch(cfg: ModelConfig, batch: usize, steps: usize, rng: &mut Rng) -> SequenceBatch {
        SequenceBatch {
            batch,
            steps,
            z: (0..(steps + 1) * batch * cfg.latent_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            actions: (0..steps * batch).map(|_| rng.random_range(0..NUM_ACTIONS)).collect(),
            rewards: (0..steps * batch).map(|_| rng.random_range(-1..=1) as f64).collect(),
            dones: (0..steps * batch).map(|_| rng.random_bool(0.3)).collect(),
        }
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            latent_dim: 3,
            mixtures: 2,
            hidden: 4,
        };
        let mut rng = seeded(15);
        let mut model = WorldModel::new(cfg, 3).unwrap();
        let seq = random_batch(cfg, 2, 4, &mut rng);
        let mut params = model.params().clone();
        let report = grad_check(&mut params, 1e-5, |p| {
            model.params = p.clone();
            let loss = model.sequence_loss(&seq, true).unwrap().total;
            for id in p.ids().collect::<Vec<_>>() {
                let g = model.params.grad(id).to_vec();
                p.grad_mut(id).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            loss
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn batched_step_matches_single() {
        let cfg = ModelConfig::default();
        let model = WorldModel::new(cfg, 5).unwrap();
        let mut rng = seeded(16);
        let z: Vec<f64> = (0..2 * cfg.latent_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (raw, _) = model.step_batch(&z, &[1, 4], &model.initial_state(2)).unwrap();
        let (single, _) = model
            .m_forward(&z[cfg.latent_dim..], Action::ALL[4], &model.initial_state(1))
            .unwrap();
        let w = cfg.output_width();
        for (a, b) in raw[w..].iter().zip(single.to_raw()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn overfits_a_repeated_transition() {
        let cfg = ModelConfig {
            latent_dim: 2,
            mixtures: 2,
            hidden: 8,
        };
        let rollout = Rollout::repeated(&[0.5, -0.25], 2, 0, 40);
        let mut model = WorldModel::new(cfg, 9).unwrap();
        let mut opt = Adam::new(model.params(), 1e-2);
        let tc = MTrainConfig {
            batches_per_epoch: 60,
            batch: 4,
            seq_len: 8,
            ..MTrainConfig::default()
        };
        let rs = [rollout];
        let seq = SequenceBatch::from_windows(&[(&rs[0], 0)], 8, 2);
        let before = model.sequence_loss(&seq, false).unwrap().gmm;
        let eval_before = evaluate_m(&model, &rs, 8).unwrap();
        let mut rng = seeded(1);
        let stats = train_m_epoch(&mut model, &mut opt, &rs, None, &tc, &mut rng).unwrap();
        assert_eq!((stats.real_batches, stats.sim_batches), (60, 0));
        let after = model.sequence_loss(&seq, false).unwrap().gmm;
        assert!(after < before, "{after} !< {before}");
        let eval_after = evaluate_m(&model, &rs, 8).unwrap();
        assert!(eval_after <= eval_before * 1.01);
        assert_eq!(eval_after, evaluate_m(&model, &rs, 8).unwrap());
        let stats = train_m_epoch(&mut model, &mut opt, &rs, Some(&rs), &tc, &mut rng).unwrap();
        assert_eq!((stats.real_batches, stats.sim_batches), (30, 30));
        assert!(evaluate_m(&model, &[], 8).is_err());
    }
}
