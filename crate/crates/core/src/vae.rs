//! Convolutional variational autoencoder that maps frames to a small latent
//! space. It is trained once on frames from every task and then frozen.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::FrameShape;
use crate::error::{Error, Result};
use crate::numerics::math::sigmoid;
use crate::numerics::{
    relu_backward_in_place, relu_in_place, Adam, Conv2d, ConvCache, ConvTranspose2d, ConvTransposeCache, Linear,
    ParamSet,
};
use crate::rng::{self, Rng};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
/// Decoder logits are clamped here so decoded pixels stay strictly inside
/// `(0, 1)` in floating point.
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub conv_stack: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Weight of the KL term.
    pub beta: f64,
    /// Frames drawn per training epoch.
    pub epoch_samples: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            conv_stack: vec![16, 32],
            lr: 1e-3,
            batch: 32,
            patience: 5,
            min_delta: 1e-4,
            beta: 1.0,
            epoch_samples: 4000,
            max_epochs: 40,
            seed: 0,
        }
    }
}

/// Diagonal Gaussian posterior over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Reparameterized draw `mu + sigma ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_latent(dist: &LatentDistribution, rng: &mut Rng) -> Vec<f64> {
    dist.mu
        .iter()
        .zip(&dist.sigma)
        .map(|(m, s)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + s * eps
        })
        .collect()
}

/// Returns `(total, reconstruction, kl)` where reconstruction is the mean
/// squared error over pixels and `total = reconstruction + beta · kl`.
pub fn vae_loss(frame: &[f64], recon: &[f64], dist: &LatentDistribution, beta: f64) -> (f64, f64, f64) {
    let recon_term = frame.iter().zip(recon).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / frame.len() as f64;
    let kl = kl_to_standard_normal(&dist.mu, &dist.sigma);
    (recon_term + beta * kl, recon_term, kl)
}

/// `0.5 Σ (mu² + sigma² - 1 - 2 ln sigma)`.
pub fn kl_to_standard_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln())
        .sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct Vae {
    shape: FrameShape,
    latent_dim: usize,
    params: ParamSet,
    convs: Vec<Conv2d>,
    /// Spatial size at the input of each conv, plus the final output.
    sizes: Vec<(usize, usize)>,
    head: Linear,
    expand: Linear,
    deconvs: Vec<ConvTranspose2d>,
}

struct EncoderTrace {
    conv_caches: Vec<ConvCache>,
    activations: Vec<Vec<f64>>,
}

struct DecoderTrace {
    expanded: Vec<f64>,
    caches: Vec<ConvTransposeCache>,
    activations: Vec<Vec<f64>>,
}

impl Vae {
    pub fn new(shape: FrameShape, config: &VaeConfig) -> Result<Self> {
        if config.latent_dim == 0 || config.conv_stack.is_empty() {
            return Err(Error::Config(
                "vae needs latent_dim ≥ 1 and at least one conv layer".into(),
            ));
        }
        let mut params = ParamSet::new(config.seed);
        let mut sizes = vec![(shape.height, shape.width)];
        let mut convs = Vec::new();
        let mut in_ch = shape.channels;
        for (i, &filters) in config.conv_stack.iter().enumerate() {
            let conv = Conv2d::new(&mut params, &format!("enc.conv{i}"), in_ch, filters, KERNEL, STRIDE);
            sizes.push(conv.out_hw(*sizes.last().expect("nonempty"))?);
            convs.push(conv);
            in_ch = filters;
        }
        let (fh, fw) = *sizes.last().expect("nonempty");
        let flat = fh * fw * in_ch;
        let head = Linear::new(&mut params, "enc.head", flat, 2 * config.latent_dim);
        let expand = Linear::new(&mut params, "dec.expand", config.latent_dim, flat);
        let mut deconvs = Vec::new();
        for i in (0..convs.len()).rev() {
            let out_ch = if i == 0 {
                shape.channels
            } else {
                config.conv_stack[i - 1]
            };
            let deconv = ConvTranspose2d::new(
                &mut params,
                &format!("dec.deconv{}", convs.len() - 1 - i),
                config.conv_stack[i],
                out_ch,
                KERNEL,
                STRIDE,
            );
            deconv.check_sizes(sizes[i + 1], sizes[i])?;
            deconvs.push(deconv);
        }
        Ok(Self {
            shape,
            latent_dim: config.latent_dim,
            params,
            convs,
            sizes,
            head,
            expand,
            deconvs,
        })
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_frames(&self, frames: &[f64], batch: usize) -> Result<()> {
        if frames.len() != batch * self.shape.len() {
            return Err(Error::Shape(format!(
                "expected {batch} frames of {}×{}×{}, got {} values",
                self.shape.height,
                self.shape.width,
                self.shape.channels,
                frames.len()
            )));
        }
        Ok(())
    }

    /// Returns `batch × 2L` raw head output: means then log-sigmas per row.
    fn encode_raw(&self, frames: &[f64], batch: usize) -> Result<(Vec<f64>, EncoderTrace)> {
        self.check_frames(frames, batch)?;
        let mut x = frames.to_vec();
        let mut trace = EncoderTrace {
            conv_caches: Vec::new(),
            activations: Vec::new(),
        };
        for (i, conv) in self.convs.iter().enumerate() {
            let (mut y, cache) = conv.forward(&self.params, &x, batch, self.sizes[i])?;
            relu_in_place(&mut y);
            trace.conv_caches.push(cache);
            trace.activations.push(y.clone());
            x = y;
        }
        let raw = self.head.forward(&self.params, &x, batch);
        Ok((raw, trace))
    }

    fn split_raw(&self, raw: &[f64], batch: usize) -> Vec<LatentDistribution> {
        let l = self.latent_dim;
        (0..batch)
            .map(|b| {
                let row = &raw[b * 2 * l..(b + 1) * 2 * l];
                LatentDistribution {
                    mu: row[..l].to_vec(),
                    sigma: row[l..].iter().map(|s| s.exp()).collect(),
                }
            })
            .collect()
    }

    pub fn encode(&self, frame: &[f64]) -> Result<LatentDistribution> {
        Ok(self.encode_batch(frame, 1)?.remove(0))
    }

    pub fn encode_batch(&self, frames: &[f64], batch: usize) -> Result<Vec<LatentDistribution>> {
        let (raw, _) = self.encode_raw(frames, batch)?;
        Ok(self.split_raw(&raw, batch))
    }

    fn decode_raw(&self, z: &[f64], batch: usize) -> Result<(Vec<f64>, DecoderTrace)> {
        if z.len() != batch * self.latent_dim || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("decoder input must be finite batch × L".into()));
        }
        let mut x = self.expand.forward(&self.params, z, batch);
        relu_in_place(&mut x);
        let mut trace = DecoderTrace {
            expanded: x.clone(),
            caches: Vec::new(),
            activations: Vec::new(),
        };
        let n = self.deconvs.len();
        for (j, deconv) in self.deconvs.iter().enumerate() {
            let level = n - 1 - j;
            let (mut y, cache) = deconv.forward(&self.params, &x, batch, self.sizes[level + 1], self.sizes[level])?;
            if j + 1 < n {
                relu_in_place(&mut y);
            } else {
                y.iter_mut()
                    .for_each(|v| *v = sigmoid(v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)));
            }
            trace.caches.push(cache);
            trace.activations.push(y.clone());
            x = y;
        }
        Ok((x, trace))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decode_batch(z, 1)
    }

    pub fn decode_batch(&self, z: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.decode_raw(z, batch)?.0)
    }

    /// Loss of one minibatch; with `train`, accumulates gradients of the
    /// batch-mean loss. `noise` supplies the reparameterization ε (zeros give
    /// the deterministic mean-latent evaluation).
    fn batch_loss(
        &mut self,
        frames: &[f64],
        batch: usize,
        noise: &[f64],
        beta: f64,
        train: bool,
    ) -> Result<(f64, f64, f64)> {
        let l = self.latent_dim;
        let (raw, enc) = self.encode_raw(frames, batch)?;
        let mut z = vec![0.0; batch * l];
        for b in 0..batch {
            for i in 0..l {
                let mu = raw[b * 2 * l + i];
                let sigma = raw[b * 2 * l + l + i].exp();
                z[b * l + i] = mu + sigma * noise[b * l + i];
            }
        }
        let (recon, dec) = self.decode_raw(&z, batch)?;
        let dists = self.split_raw(&raw, batch);
        let p = self.shape.len();
        let (mut total, mut rec, mut kl) = (0.0, 0.0, 0.0);
        for (b, dist) in dists.iter().enumerate() {
            let (t, r, k) = vae_loss(&frames[b * p..(b + 1) * p], &recon[b * p..(b + 1) * p], dist, beta);
            total += t;
            rec += r;
            kl += k;
        }
        let n = batch as f64;
        if train {
            self.backward(frames, batch, &raw, noise, &z, &recon, enc, dec, beta)?;
        }
        Ok((total / n, rec / n, kl / n))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &mut self,
        frames: &[f64],
        batch: usize,
        raw: &[f64],
        noise: &[f64],
        z: &[f64],
        recon: &[f64],
        enc: EncoderTrace,
        dec: DecoderTrace,
        beta: f64,
    ) -> Result<()> {
        let l = self.latent_dim;
        let n = batch as f64;
        let p = self.shape.len() as f64;
        // Through the sigmoid output.
        let mut grad: Vec<f64> = recon
            .iter()
            .zip(frames)
            .map(|(y, x)| {
                let d = 2.0 * (y - x) / (p * n);
                // Clamped logits pass no gradient.
                if *y <= sigmoid(-LOGIT_CLAMP) || *y >= sigmoid(LOGIT_CLAMP) {
                    0.0
                } else {
                    d * y * (1.0 - y)
                }
            })
            .collect();
        let nd = self.deconvs.len();
        for j in (0..nd).rev() {
            if j + 1 < nd {
                relu_backward_in_place(&dec.activations[j], &mut grad);
            }
            grad = self.deconvs[j]
                .backward(&mut self.params, &dec.caches[j], &grad, true)
                .expect("input grad requested");
        }
        relu_backward_in_place(&dec.expanded, &mut grad);
        let dz = self.expand.backward(&mut self.params, z, &grad, batch);

        let mut draw = vec![0.0; batch * 2 * l];
        for b in 0..batch {
            for i in 0..l {
                let mu = raw[b * 2 * l + i];
                let s = raw[b * 2 * l + l + i];
                let sigma = s.exp();
                let g = dz[b * l + i];
                draw[b * 2 * l + i] = g + beta * mu / n;
                draw[b * 2 * l + l + i] = g * noise[b * l + i] * sigma + beta * (sigma * sigma - 1.0) / n;
            }
        }
        let last = enc.activations.last().expect("at least one conv");
        let mut grad = self.head.backward(&mut self.params, last, &draw, batch);
        for i in (0..self.convs.len()).rev() {
            relu_backward_in_place(&enc.activations[i], &mut grad);
            match self.convs[i].backward(&mut self.params, &enc.conv_caches[i], &grad, i > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeEpoch {
    pub train_loss: f64,
    pub test_loss: f64,
    pub best_test_loss: f64,
}

#[derive(Clone, Debug)]
pub struct VaeTraining {
    pub vae: Vae,
    pub history: Vec<VaeEpoch>,
}

/// Mean deterministic (ε = 0) loss over a frame set.
pub fn evaluate_vae(vae: &mut Vae, frames: &[f64], beta: f64, batch: usize) -> Result<f64> {
    let p = vae.shape.len();
    let count = frames.len() / p;
    if count == 0 {
        return Err(Error::Empty("no frames to evaluate".into()));
    }
    let mut total = 0.0;
    for start in (0..count).step_by(batch.max(1)) {
        let end = (start + batch).min(count);
        let noise = vec![0.0; (end - start) * vae.latent_dim];
        let (t, _, _) = vae.batch_loss(&frames[start * p..end * p], end - start, &noise, beta, false)?;
        total += t * (end - start) as f64;
    }
    Ok(total / count as f64)
}

/// Minibatch Adam training with early stopping on held-out loss. `frames`
/// holds interleaved frames from every task; the last tenth is held out.
/// Returns the parameters from the best held-out epoch.
pub fn train_vae(shape: FrameShape, frames: &[f64], config: &VaeConfig) -> Result<VaeTraining> {
    let p = shape.len();
    let count = frames.len() / p;
    if count < 2 || !frames.len().is_multiple_of(p) {
        return Err(Error::Empty("vae training needs at least two whole frames".into()));
    }
    let mut vae = Vae::new(shape, config)?;
    let mut rng = rng::seeded(rng::derive(config.seed, &[rng::tag("vae-train")]));
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let n_test = (count / 10).max(1);
    let (train_idx, test_idx) = order.split_at(count - n_test);
    let test: Vec<f64> = test_idx
        .iter()
        .flat_map(|&i| frames[i * p..(i + 1) * p].iter().copied())
        .collect();
    let mut train_idx = train_idx.to_vec();

    let mut opt = Adam::new(vae.params(), config.lr);
    let mut best = f64::INFINITY;
    let mut best_params = vae.params.clone();
    let mut stale = 0;
    let mut history = Vec::new();
    let l = config.latent_dim;
    for _ in 0..config.max_epochs {
        train_idx.shuffle(&mut rng);
        let take = config.epoch_samples.min(train_idx.len()).max(1);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in train_idx[..take].chunks(config.batch.max(1)) {
            let batch: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| frames[i * p..(i + 1) * p].iter().copied())
                .collect();
            let noise: Vec<f64> = (0..chunk.len() * l).map(|_| StandardNormal.sample(&mut rng)).collect();
            vae.params.zero_grad();
            let (t, _, _) = vae.batch_loss(&batch, chunk.len(), &noise, config.beta, true)?;
            opt.step(&mut vae.params);
            epoch_loss += t;
            batches += 1;
        }
        let test_loss = evaluate_vae(&mut vae, &test, config.beta, 64)?;
        if test_loss < best - config.min_delta {
            best = test_loss;
            best_params = vae.params.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(VaeEpoch {
            train_loss: epoch_loss / batches as f64,
            test_loss,
            best_test_loss: best,
        });
        if stale >= config.patience {
            break;
        }
    }
    vae.params = best_params;
    vae.params.zero_grad();
    Ok(VaeTraining { vae, history })
}
