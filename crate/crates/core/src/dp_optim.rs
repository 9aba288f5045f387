//! DP-SGD building blocks: per-example L2 clipping, the Gaussian mechanism
//! on the clipped sum, and the SGD / Adam parameter updates.
//!
//! Sensitivity contract: with every per-example gradient clipped to norm
//! `C` and the sum divided by the configured batch size `|B|`, adding or
//! removing one example moves the released mean by at most `C/|B|` in L2.
//! The accountant charges each noisy mean as one sampled-Gaussian step
//! under that add/remove adjacency.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad_engine::{GradError, GradRecord, GradScope, ParamSet};
use crate::rng;

/// Slack allowed when checking that inputs to [`noisy_mean`] are clipped.
pub const CLIP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("invalid privacy parameter: {0}")]
    InvalidParams(String),
    #[error("gradient {index} has batch-mean scope; clipping must see each example's gradient")]
    BatchMeanClipped { index: usize },
    #[error("gradient {index} has norm {norm} above the clip bound {clip}")]
    Unclipped { index: usize, norm: f64, clip: f64 },
    #[error("gradient {index} is not finite")]
    NonFinite { index: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Clip bound, noise multiplier, batch size, dataset size and target delta.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub clip: f64,
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn new(
        clip: f64,
        noise_multiplier: f64,
        batch_size: usize,
        dataset_size: usize,
        delta: f64,
    ) -> Result<Self, DpError> {
        let p = Self {
            clip,
            noise_multiplier,
            batch_size,
            dataset_size,
            delta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DpError> {
        let bad = |m: String| Err(DpError::InvalidParams(m));
        // NaN fails every comparison below, so negate the accepted ranges.
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.noise_multiplier >= 0.0) || self.noise_multiplier.is_infinite() {
            return bad(format!("noise multiplier must be finite and >= 0, got {}", self.noise_multiplier));
        }
        if self.batch_size == 0 || self.dataset_size == 0 || self.batch_size > self.dataset_size {
            return bad(format!(
                "need 0 < batch size <= dataset size, got {} / {}",
                self.batch_size, self.dataset_size
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        Ok(())
    }

    /// Sampling rate `q = |B| / n`.
    pub fn sampling_rate(&self) -> f64 {
        self.batch_size as f64 / self.dataset_size as f64
    }

    /// Per-coordinate standard deviation of the noise added to the clipped sum.
    pub fn noise_std(&self) -> f64 {
        if self.noise_multiplier == 0.0 {
            // An unbounded clip with no noise is the non-private baseline.
            0.0
        } else {
            self.clip * self.noise_multiplier
        }
    }

    /// Per-coordinate noise variance of the released mean, `C^2 sigma^2 / |B|^2`.
    pub fn mean_noise_variance(&self) -> f64 {
        let s = self.noise_std() / self.batch_size as f64;
        s * s
    }
}

/// Scales `grad` by `1 / max(1, ||grad|| / clip)`; the result is guaranteed
/// to have a floating-point norm `<= clip`, which makes clipping idempotent.
/// The norm of `grad` must be finite.
pub fn clip_gradient(grad: &GradRecord, clip: f64) -> GradRecord {
    let norm = grad.norm();
    assert!(norm.is_finite(), "clip_gradient on a non-finite gradient");
    if norm <= clip {
        return grad.clone();
    }
    let mut factor = clip / norm;
    loop {
        let mut out = grad.clone();
        out.scale(factor);
        if out.norm() <= clip {
            return out;
        }
        factor = f64::from_bits(factor.to_bits() - 1);
    }
}

/// Clips each per-example gradient to L2 norm `clip` over its full
/// flattened parameter vector (one global bound, never per parameter group).
pub fn clip_per_example(grads: &[GradRecord], clip: f64) -> Result<Vec<GradRecord>, DpError> {
    if !(clip > 0.0) {
        return Err(DpError::InvalidParams(format!("clip must be positive, got {clip}")));
    }
    grads
        .iter()
        .enumerate()
        .map(|(index, g)| match g.scope() {
            GradScope::BatchMean => Err(DpError::BatchMeanClipped { index }),
            GradScope::PerExample if !g.norm().is_finite() => Err(DpError::NonFinite { index }),
            GradScope::PerExample => Ok(clip_gradient(g, clip)),
        })
        .collect()
}

/// Counter-based source of standard normal noise. Draw `index` always
/// yields the same vector, so paired runs can share noise exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub seed: u64,
}

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn standard(&self, index: u64, len: usize) -> Vec<f64> {
        let mut r = rng::stream_rng(self.seed, rng::stream::GRADIENT_NOISE, index);
        rng::standard_normals(&mut r, len)
    }
}

/// Where the noise of a [`NoisyGrad`] came from, and how large it was.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub seed: u64,
    pub index: u64,
    /// Per-coordinate variance of the noise in the released mean.
    pub variance: f64,
}

/// Privatized batch-mean gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyGrad {
    pub grad: GradRecord,
    pub noise: NoiseRecord,
}

/// Releases `(sum_i g_i + xi) / |B|` with `xi ~ N(0, C^2 sigma^2 I)`,
/// one draw per batch. `like` supplies the shapes, so an empty Poisson
/// batch still releases pure noise.
pub fn noisy_mean(
    clipped: &[GradRecord],
    like: &ParamSet,
    privacy: &PrivacyParams,
    noise: &GaussianNoise,
    index: u64,
) -> Result<NoisyGrad, DpError> {
    privacy.validate()?;
    let mut sum = vec![0.0; like.numel()];
    for (i, g) in clipped.iter().enumerate() {
        g.check_aligned(like)?;
        let norm = g.norm();
        if norm > privacy.clip + CLIP_TOLERANCE {
            return Err(DpError::Unclipped {
                index: i,
                norm,
                clip: privacy.clip,
            });
        }
        for (s, v) in sum.iter_mut().zip(g.tensors().iter().flat_map(|t| t.data())) {
            *s += v;
        }
    }
    let std = privacy.noise_std();
    if std > 0.0 {
        for (s, z) in sum.iter_mut().zip(noise.standard(index, like.numel())) {
            *s += std * z;
        }
    }
    let b = privacy.batch_size as f64;
    for s in &mut sum {
        *s /= b;
    }
    Ok(NoisyGrad {
        grad: GradRecord::from_flat(like, &sum, GradScope::BatchMean)?,
        noise: NoiseRecord {
            seed: noise.seed,
            index,
            variance: privacy.mean_noise_variance(),
        },
    })
}

/// `theta <- theta - lr * g`.
pub fn sgd_step(params: &mut ParamSet, grad: &GradRecord, lr: f64) -> Result<(), DpError> {
    grad.check_aligned(params)?;
    for (p, g) in params.tensors_mut().zip(grad.tensors()) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to `sqrt(v_hat)` in the denominator.
    pub eps: f64,
    pub bias_correction: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.5,
            eps: 1e-8,
            bias_correction: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DpError::InvalidParams(format!("bad Adam configuration {self:?}")))
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamSet, config: AdamConfig) -> Result<Self, DpError> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    /// One Adam update. A coordinate whose denominator is exactly zero (only
    /// possible with `eps = 0` and an all-zero gradient history) is left
    /// unchanged.
    pub fn step(&mut self, params: &mut ParamSet, grad: &GradRecord) -> Result<(), DpError> {
        grad.check_aligned(params)?;
        if self.m.len() != params.len() {
            return Err(GradError::ShapeMismatch {
                context: "Adam state".into(),
                expected: vec![params.len()],
                actual: vec![self.m.len()],
            }
            .into());
        }
        let c = self.config;
        self.t += 1;
        let (corr1, corr2) = if c.bias_correction {
            let t = i32::try_from(self.t).unwrap_or(i32::MAX);
            (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t))
        } else {
            (1.0, 1.0)
        };
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grad.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                debug_assert!(*vv >= 0.0, "second moment went negative");
                let denom = (*vv / corr2).sqrt() + c.eps;
                if denom > 0.0 {
                    *pv -= c.lr * (*mv / corr1) / denom;
                }
            }
        }
        Ok(())
    }
}

/// Parameter update rule applied to a (noisy) batch gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamSet, grad: &GradRecord) -> Result<(), DpError> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grad, *lr),
            Optimizer::Adam(state) => state.step(params, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_engine::Tensor;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    fn per_example(values: &[f64]) -> GradRecord {
        GradRecord::new(vec![Tensor::from_vec(values.to_vec())], GradScope::PerExample)
    }

    #[test]
    fn clip_halves_a_gradient_at_twice_the_bound() {
        let g = per_example(&[3.0, 4.0]); // norm 5
        let c = clip_per_example(&[g], 2.5).unwrap().remove(0);
        assert!((c.norm() - 2.5).abs() < 1e-12);
        assert!((c.flatten()[0] / c.flatten()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_and_zero_gradients_alone() {
        let small = per_example(&[0.3, 0.4]);
        let zero = per_example(&[0.0, 0.0]);
        let out = clip_per_example(&[small.clone(), zero.clone()], 1.0).unwrap();
        assert_eq!(out, vec![small, zero]);
    }

    #[test]
    fn clip_rejects_batch_mean_gradients() {
        let g = per_example(&[1.0]).with_scope(GradScope::BatchMean);
        assert_eq!(
            clip_per_example(&[per_example(&[1.0]), g], 1.0),
            Err(DpError::BatchMeanClipped { index: 1 })
        );
    }

    #[test]
    fn noisy_mean_without_noise_is_the_plain_mean() {
        // grads {1, 3}, |B| = 2, sigma = 0, C = 10 -> 2
        let like = one_param(0.0);
        let grads = vec![
            GradRecord::new(vec![Tensor::scalar(1.0)], GradScope::PerExample),
            GradRecord::new(vec![Tensor::scalar(3.0)], GradScope::PerExample),
        ];
        let privacy = PrivacyParams::new(10.0, 0.0, 2, 10, 1e-5).unwrap();
        let out = noisy_mean(&grads, &like, &privacy, &GaussianNoise::new(1), 0).unwrap();
        assert_eq!(out.grad.flatten(), vec![2.0]);
        assert_eq!(out.grad.scope(), GradScope::BatchMean);
    }

    #[test]
    fn noisy_mean_rejects_unclipped_input() {
        let like = one_param(0.0);
        let grads = vec![GradRecord::new(vec![Tensor::scalar(2.0)], GradScope::PerExample)];
        let privacy = PrivacyParams::new(1.0, 1.0, 1, 10, 1e-5).unwrap();
        assert!(matches!(
            noisy_mean(&grads, &like, &privacy, &GaussianNoise::new(1), 0),
            Err(DpError::Unclipped { index: 0, .. })
        ));
    }

    #[test]
    fn negative_sigma_is_rejected() {
        assert!(PrivacyParams::new(1.0, -0.1, 1, 10, 1e-5).is_err());
        assert!(PrivacyParams::new(0.0, 1.0, 1, 10, 1e-5).is_err());
        assert!(PrivacyParams::new(1.0, 1.0, 1, 10, 1.0).is_err());
    }

    #[test]
    fn declared_variance_matches_calibration() {
        let p = PrivacyParams::new(3.0, 0.8, 16, 100, 1e-5).unwrap();
        assert!((p.mean_noise_variance() - 9.0 * 0.64 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = one_param(1.0);
        let g = GradRecord::new(vec![Tensor::scalar(0.5)], GradScope::BatchMean);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.flatten()[0] - 0.95).abs() < 1e-15);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.flatten()[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert!((p.flatten()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // m = 0.1, v = 0.5 -> m_hat = v_hat = 1 -> step of exactly lr
        let mut p = one_param(0.0);
        let cfg = AdamConfig {
            lr: 1.0,
            beta1: 0.9,
            beta2: 0.5,
            eps: 0.0,
            bias_correction: true,
        };
        let mut s = AdamState::new(&p, cfg).unwrap();
        s.step(&mut p, &GradRecord::new(vec![Tensor::scalar(1.0)], GradScope::BatchMean))
            .unwrap();
        assert!((p.flatten()[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_with_zero_gradients_stays_put() {
        for eps in [0.0, 1e-8] {
            let mut p = one_param(0.25);
            let cfg = AdamConfig {
                eps,
                ..AdamConfig::default()
            };
            let mut s = AdamState::new(&p, cfg).unwrap();
            for _ in 0..10 {
                s.step(&mut p, &GradRecord::new(vec![Tensor::scalar(0.0)], GradScope::BatchMean))
                    .unwrap();
            }
            assert_eq!(p.flatten(), vec![0.25]);
        }
    }
}
