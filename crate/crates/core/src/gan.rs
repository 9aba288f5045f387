//! WGAN-GP generator/critic pair and its two training steps: a
//! differentially private critic update, and a generator update that never
//! sees the private data.
//!
//! The critic is three stride-2 convolutions (kernel 5, padding 2, leaky
//! ReLU 0.2) with `c, 2c, 4c` filters followed by a dense scalar head. The
//! generator mirrors it: dense from the latent space to the critic's last
//! feature map, three transposed convolutions, and a tanh output, so images
//! live in `[-1, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{AccountantError, Charge, PrivacyAccountant};
use crate::checkpoint::{self, CheckpointError};
use crate::dp_optim::{clip_per_example, noisy_mean, DpError, GaussianNoise, Optimizer, PrivacyParams};
use crate::grad_engine::{
    forward, gradient_penalty, per_example_values_and_grads, value_and_grad, BoundParams, GradError, GradScope, Layer,
    LayerKind, Network, ParamSet, Tape, Tensor, Var,
};
use crate::rng::{self, stream};

pub const SUPPORTED_SIDES: [usize; 3] = [8, 16, 28];
pub const DEFAULT_LATENT_DIM: usize = 128;
pub const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 5;
const STRIDE: usize = 2;
const PADDING: usize = 2;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("unsupported image side {side}; supported sides are {supported:?}")]
    UnsupportedSide { side: usize, supported: Vec<usize> },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Architecture hyperparameters shared by the critic and generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Filters in the first critic convolution.
    pub capacity: usize,
    pub latent_dim: usize,
    pub image_side: usize,
}

impl Architecture {
    pub fn new(capacity: usize, latent_dim: usize, image_side: usize) -> Result<Self, GanError> {
        if !SUPPORTED_SIDES.contains(&image_side) {
            return Err(GanError::UnsupportedSide {
                side: image_side,
                supported: SUPPORTED_SIDES.to_vec(),
            });
        }
        if capacity == 0 || latent_dim == 0 {
            return Err(GanError::InvalidConfig(format!(
                "capacity and latent dim must be positive, got {capacity} and {latent_dim}"
            )));
        }
        Ok(Self {
            capacity,
            latent_dim,
            image_side,
        })
    }

    /// Spatial side at the input and after each critic convolution,
    /// e.g. `[28, 14, 7, 4]`.
    pub fn spatial_sides(&self) -> [usize; 4] {
        let mut s = [self.image_side; 4];
        for i in 1..4 {
            s[i] = (s[i - 1] + 2 * PADDING - KERNEL) / STRIDE + 1;
        }
        s
    }

    pub fn critic_filters(&self) -> [usize; 3] {
        [self.capacity, 2 * self.capacity, 4 * self.capacity]
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![1, self.image_side, self.image_side]
    }

    pub fn critic(&self) -> Network {
        let [c1, c2, c3] = self.critic_filters();
        let last = self.spatial_sides()[3];
        let conv = |name: &str, ci, co| {
            Layer::new(
                name,
                LayerKind::Conv2d {
                    in_channels: ci,
                    out_channels: co,
                    kernel: KERNEL,
                    stride: STRIDE,
                    padding: PADDING,
                },
            )
        };
        let act = |name: &str| Layer::new(name, LayerKind::LeakyRelu { slope: LEAKY_SLOPE });
        Network::new(
            self.image_shape(),
            vec![
                conv("conv1", 1, c1),
                act("act1"),
                conv("conv2", c1, c2),
                act("act2"),
                conv("conv3", c2, c3),
                act("act3"),
                Layer::new("flatten", LayerKind::Flatten),
                Layer::new(
                    "head",
                    LayerKind::Dense {
                        inputs: c3 * last * last,
                        outputs: 1,
                    },
                ),
            ],
        )
    }

    pub fn generator(&self) -> Network {
        let [c1, c2, c3] = self.critic_filters();
        let sides = self.spatial_sides();
        let deconv = |name: &str, ci, co, out_side| {
            Layer::new(
                name,
                LayerKind::ConvTranspose2d {
                    in_channels: ci,
                    out_channels: co,
                    kernel: KERNEL,
                    stride: STRIDE,
                    padding: PADDING,
                    out_side,
                },
            )
        };
        let act = |name: &str| Layer::new(name, LayerKind::LeakyRelu { slope: LEAKY_SLOPE });
        Network::new(
            vec![self.latent_dim],
            vec![
                Layer::new(
                    "project",
                    LayerKind::Dense {
                        inputs: self.latent_dim,
                        outputs: c3 * sides[3] * sides[3],
                    },
                ),
                act("act0"),
                Layer::new(
                    "unflatten",
                    LayerKind::Reshape {
                        shape: vec![c3, sides[3], sides[3]],
                    },
                ),
                deconv("deconv1", c3, c2, sides[2]),
                act("act1"),
                deconv("deconv2", c2, c1, sides[1]),
                act("act2"),
                deconv("deconv3", c1, 1, sides[0]),
                Layer::new("out", LayerKind::Tanh),
            ],
        )
    }
}

/// Generator parameters `theta` and critic parameters `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub arch: Architecture,
    pub generator: ParamSet,
    pub critic: ParamSet,
}

pub fn build_models(capacity: usize, latent_dim: usize, image_side: usize, seed: u64) -> Result<GanModel, GanError> {
    let arch = Architecture::new(capacity, latent_dim, image_side)?;
    let critic = arch.critic().init_params(&mut rng::stream_rng(seed, stream::CRITIC_INIT, 0));
    let generator = arch
        .generator()
        .init_params(&mut rng::stream_rng(seed, stream::GENERATOR_INIT, 0));
    Ok(GanModel {
        arch,
        generator,
        critic,
    })
}

impl GanModel {
    /// `G(z)` for `z: [n, latent_dim]`, giving `[n, 1, side, side]`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor, GanError> {
        Ok(forward(&self.generator, &self.arch.generator(), z)?)
    }

    /// `D(x)` for `x: [n, 1, side, side]`, giving `[n, 1]`.
    pub fn critic_scores(&self, x: &Tensor) -> Result<Tensor, GanError> {
        Ok(forward(&self.critic, &self.arch.critic(), x)?)
    }

    /// Writes both parameter sets to one checkpoint (names prefixed with
    /// `generator.` and `critic.`) and `meta` to its JSON sidecar.
    pub fn save(&self, path: &Path, meta: &GanCheckpointMeta) -> Result<(), GanError> {
        let mut all = self.generator.prefixed("generator.");
        all.extend(self.critic.prefixed("critic."))?;
        checkpoint::save(path, &all)?;
        checkpoint::save_sidecar(path, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(GanModel, GanCheckpointMeta), GanError> {
        let all = checkpoint::load(path)?;
        let meta: GanCheckpointMeta = checkpoint::load_sidecar(path)?;
        let arch = meta.architecture;
        let model = GanModel {
            arch,
            generator: all.strip_prefix("generator."),
            critic: all.strip_prefix("critic."),
        };
        arch.generator().check_params(&model.generator)?;
        arch.critic().check_params(&model.critic)?;
        Ok((model, meta))
    }
}

/// Privacy state recorded next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    /// Charged critic steps `T`.
    pub steps: u64,
    pub q: f64,
    pub sigma: f64,
    /// `None` stands for an unbounded clip (non-private baseline).
    pub clip: Option<f64>,
    pub delta: f64,
    /// `None` when no finite guarantee exists.
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanCheckpointMeta {
    pub architecture: Architecture,
    pub critic_steps: u64,
    pub generator_steps: u64,
    pub accountant: AccountantState,
}

/// Which way the generator moves the critic output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorObjective {
    /// Minimize `-mean D(G(z))`, the usual WGAN generator loss.
    #[default]
    MaximizeCritic,
    /// Minimize `mean D(G(z))`.
    MinimizeCritic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    /// Gradient-penalty weight.
    pub lambda: f64,
    /// Critic steps per generator step.
    pub n_critic: usize,
    pub lr: f64,
    /// Latent draws per generator step.
    pub batch_size: usize,
    pub objective: GeneratorObjective,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            n_critic: 5,
            lr: 1e-3,
            batch_size: 64,
            objective: GeneratorObjective::MaximizeCritic,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        if self.lambda > 0.0 && self.n_critic > 0 && self.lr > 0.0 && self.batch_size > 0 {
            Ok(())
        } else {
            Err(GanError::InvalidConfig(format!("bad gradient-penalty configuration {self:?}")))
        }
    }
}

/// Seeded i.i.d. standard normal latent draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSampler {
    pub seed: u64,
    pub latent_dim: usize,
}

impl LatentSampler {
    pub fn new(seed: u64, latent_dim: usize) -> Self {
        Self { seed, latent_dim }
    }

    /// Draw number `counter`: `n` latent vectors as `[n, latent_dim]`.
    pub fn sample(&self, counter: u64, n: usize) -> Tensor {
        let mut r = rng::stream_rng(self.seed, stream::LATENT, counter);
        let data = rng::standard_normals(&mut r, n * self.latent_dim);
        Tensor::new(vec![n, self.latent_dim], data).expect("positive latent batch")
    }

    /// Interpolation weights `rho ~ U[0, 1]` for critic step `step`.
    pub fn interpolation_weights(&self, step: u64, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut r = rng::stream_rng(self.seed, stream::INTERPOLATION, step);
        (0..n).map(|_| r.random::<f64>()).collect()
    }
}

/// Records `D(fake) - D(x) + lambda (||grad_y D(y)|| - 1)^2` with
/// `y = rho x + (1 - rho) fake`, for one example of shape `[1, 1, s, s]`.
pub fn critic_loss_on_tape(
    tape: &mut Tape,
    critic: &Network,
    params: &BoundParams,
    x: &Tensor,
    fake: &Tensor,
    rho: f64,
    lambda: f64,
) -> Result<Var, GradError> {
    let interpolate = x.zip_map(fake, |a, b| rho * a + (1.0 - rho) * b);
    let real = tape.leaf(x.clone());
    let fake = tape.leaf(fake.clone());
    let y = tape.leaf(interpolate);
    let d_real = critic.apply(tape, params, real)?;
    let d_fake = critic.apply(tape, params, fake)?;
    let gap = tape.sub(d_fake, d_real);
    let gap = tape.sum(gap);
    let penalty = gradient_penalty(tape, critic, params, y)?;
    let penalty = tape.scale(penalty, lambda);
    Ok(tape.add(gap, penalty))
}

/// Critic loss of one real example `x_i: [1, 1, s, s]` against `G(z)` for a
/// single latent draw `z: [1, latent_dim]`.
pub fn critic_loss_per_example(
    model: &GanModel,
    x: &Tensor,
    z: &Tensor,
    rho: f64,
    lambda: f64,
) -> Result<f64, GanError> {
    let fake = model.generate(z)?;
    let critic = model.arch.critic();
    let (value, _) = value_and_grad(&model.critic, GradScope::PerExample, |tape, bound| {
        critic_loss_on_tape(tape, &critic, bound, x, &fake, rho, lambda)
    })?;
    Ok(value)
}

/// Everything the private critic update needs besides the model: the
/// mechanism's parameters, its noise source, the critic optimizer, and the
/// accountant it charges.
#[derive(Clone, Debug)]
pub struct PrivateCritic {
    pub privacy: PrivacyParams,
    pub noise: GaussianNoise,
    pub optimizer: Optimizer,
    pub accountant: PrivacyAccountant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticReport {
    /// Mean per-example critic loss; `None` for an empty batch.
    pub loss: Option<f64>,
    pub batch_len: usize,
    /// Largest per-example gradient norm after clipping.
    pub max_clipped_norm: f64,
    pub charge: Charge,
}

/// One DP critic update on `batch` (each entry `[1, 1, s, s]`): per-example
/// gradients of the critic loss, clipping, the Gaussian mechanism, an
/// optimizer step, and exactly one accountant charge at rate `|B| / n`.
pub fn dp_critic_step(
    model: &mut GanModel,
    batch: &[Tensor],
    sampler: &LatentSampler,
    gp: &GpConfig,
    private: &mut PrivateCritic,
    step: u64,
) -> Result<CriticReport, GanError> {
    let n = batch.len();
    let critic = model.arch.critic();
    let per_example = if n == 0 {
        Vec::new()
    } else {
        let fakes = model.generate(&sampler.sample(2 * step, n))?;
        let rho = sampler.interpolation_weights(step, n);
        let loss = |tape: &mut Tape, bound: &BoundParams, &i: &usize| {
            critic_loss_on_tape(tape, &critic, bound, &batch[i], &fakes.rows(i, 1), rho[i], gp.lambda)
        };
        let idx: Vec<usize> = (0..n).collect();
        per_example_values_and_grads(&model.critic, &loss, &idx)?
    };
    let loss = (n > 0).then(|| per_example.iter().map(|(v, _)| v).sum::<f64>() / n as f64);
    let grads: Vec<_> = per_example.into_iter().map(|(_, g)| g).collect();
    let clipped = clip_per_example(&grads, private.privacy.clip)?;
    let max_clipped_norm = clipped.iter().map(|g| g.norm()).fold(0.0, f64::max);
    let released = noisy_mean(&clipped, &model.critic, &private.privacy, &private.noise, step)?;
    private.optimizer.step(&mut model.critic, &released.grad)?;

    let charge = Charge {
        q: private.privacy.sampling_rate(),
        sigma: private.privacy.noise_multiplier,
    };
    let before = private.accountant.steps();
    private.accountant.charge(charge)?;
    assert_eq!(private.accountant.steps(), before + 1, "critic step left uncharged");
    Ok(CriticReport {
        loss,
        batch_len: n,
        max_clipped_norm,
        charge,
    })
}

/// One non-private generator update from fresh latent draws. It receives
/// no data and no accountant: nothing here can touch the private set.
/// Returns the generator loss.
pub fn generator_step(
    model: &mut GanModel,
    sampler: &LatentSampler,
    gp: &GpConfig,
    optimizer: &mut Optimizer,
    step: u64,
) -> Result<f64, GanError> {
    let z = sampler.sample(2 * step + 1, gp.batch_size);
    let (generator, critic) = (model.arch.generator(), model.arch.critic());
    let critic_params = &model.critic;
    let (loss, grad) = value_and_grad(&model.generator, GradScope::BatchMean, |tape, gen_bound| {
        let frozen = BoundParams::bind(tape, critic_params);
        let z = tape.leaf(z);
        let images = generator.apply(tape, gen_bound, z)?;
        let scores = critic.apply(tape, &frozen, images)?;
        let mean = tape.mean(scores);
        Ok(match gp.objective {
            GeneratorObjective::MaximizeCritic => tape.scale(mean, -1.0),
            GeneratorObjective::MinimizeCritic => mean,
        })
    })?;
    optimizer.step(&mut model.generator, &grad)?;
    Ok(loss)
}

/// How critic batches are drawn from the private set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchSampling {
    /// Each example joins independently with probability `|B| / n`; the
    /// regime the sampled-Gaussian accountant assumes.
    #[default]
    Poisson,
    /// Consecutive slices of a per-epoch permutation. The accountant still
    /// charges at rate `|B| / n`, which this sampling does not strictly
    /// satisfy.
    Shuffle,
}

/// Indices of the critic batch for `step`.
pub fn sample_batch(mode: BatchSampling, seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    match mode {
        BatchSampling::Poisson => {
            let q = batch_size as f64 / n as f64;
            let mut r = rng::stream_rng(seed, stream::BATCH_SAMPLING, step);
            (0..n).filter(|_| r.random::<f64>() < q).collect()
        }
        BatchSampling::Shuffle => {
            let per_epoch = (n / batch_size).max(1) as u64;
            let (epoch, slot) = (step / per_epoch, (step % per_epoch) as usize);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream_rng(seed, stream::BATCH_SAMPLING, epoch));
            order[slot * batch_size..][..batch_size].to_vec()
        }
    }
}

/// Algorithm state for a full training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: GanModel,
    pub gp: GpConfig,
    pub sampler: LatentSampler,
    pub sampling: BatchSampling,
    pub seed: u64,
    pub private: PrivateCritic,
    pub generator_optimizer: Optimizer,
    pub critic_steps: u64,
    pub generator_steps: u64,
}

impl Trainer {
    /// One critic step on a batch drawn from `data` (each entry `[1, 1, s, s]`).
    pub fn critic_step(&mut self, data: &[Tensor]) -> Result<CriticReport, GanError> {
        let idx = sample_batch(
            self.sampling,
            self.seed,
            self.critic_steps,
            data.len(),
            self.private.privacy.batch_size,
        );
        let batch: Vec<Tensor> = idx.iter().map(|&i| data[i].clone()).collect();
        let report = dp_critic_step(
            &mut self.model,
            &batch,
            &self.sampler,
            &self.gp,
            &mut self.private,
            self.critic_steps,
        )?;
        self.critic_steps += 1;
        Ok(report)
    }

    pub fn generator_step(&mut self) -> Result<f64, GanError> {
        let loss = generator_step(
            &mut self.model,
            &self.sampler,
            &self.gp,
            &mut self.generator_optimizer,
            self.generator_steps,
        )?;
        self.generator_steps += 1;
        Ok(loss)
    }

    pub fn accountant_state(&self) -> AccountantState {
        let p = &self.private.privacy;
        AccountantState {
            steps: self.private.accountant.steps(),
            q: p.sampling_rate(),
            sigma: p.noise_multiplier,
            clip: p.clip.is_finite().then_some(p.clip),
            delta: p.delta,
            epsilon: self
                .private
                .accountant
                .epsilon(p.delta)
                .ok()
                .filter(|e| e.is_bounded())
                .map(|e| e.epsilon),
        }
    }

    pub fn checkpoint_meta(&self) -> GanCheckpointMeta {
        GanCheckpointMeta {
            architecture: self.model.arch,
            critic_steps: self.critic_steps,
            generator_steps: self.generator_steps,
            accountant: self.accountant_state(),
        }
    }
}
