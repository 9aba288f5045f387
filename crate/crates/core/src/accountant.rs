//! Rényi-DP accounting for the sampled Gaussian mechanism.
//!
//! For an integer order `alpha`, sampling rate `q` and noise multiplier
//! `sigma`, one step costs
//!
//! ```text
//! eps'(alpha) = 1/(alpha-1) * ln sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1) / (2 sigma^2))
//! ```
//!
//! RDP composes additively over steps, and an accumulated curve converts to
//! `(eps, delta)`-DP through `eps = eps'(alpha) - ln(delta) / (alpha - 1)`,
//! minimized over the order grid. All logarithms are natural.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("invalid accountant parameter: {0}")]
    InvalidParameter(String),
    #[error("RDP of the sampled Gaussian overflowed (q={q}, sigma={sigma}, alpha={alpha})")]
    Overflow { q: f64, sigma: f64, alpha: u32 },
    #[error("the order grid is empty")]
    EmptyGrid,
}

/// The default order grid `{2, ..., 256}`.
pub fn default_orders() -> Vec<u32> {
    (MIN_ORDER..=MAX_ORDER).collect()
}

/// `ln(n!)` for `n <= MAX_ORDER`.
fn ln_factorial(n: u32) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(MAX_ORDER as usize + 1);
        let mut acc = 0.0;
        t.push(0.0);
        for j in 1..=MAX_ORDER {
            acc += f64::from(j).ln();
            t.push(acc);
        }
        t
    });
    table[n as usize]
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn check_step_params(q: f64, sigma: f64, alpha: u32) -> Result<(), AccountantError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(AccountantError::InvalidParameter(format!("sampling rate {q} outside [0, 1]")));
    }
    if !(sigma > 0.0) || sigma.is_infinite() {
        return Err(AccountantError::InvalidParameter(format!(
            "noise multiplier must be positive and finite, got {sigma}"
        )));
    }
    if !(MIN_ORDER..=MAX_ORDER).contains(&alpha) {
        return Err(AccountantError::InvalidParameter(format!(
            "order {alpha} outside [{MIN_ORDER}, {MAX_ORDER}]"
        )));
    }
    Ok(())
}

/// `eps'(alpha)` of a single sampled-Gaussian step, evaluated as a
/// log-sum-exp over log-binomial terms. `q = 0` is accepted as the limit of
/// a mechanism that never touches the data and costs nothing.
pub fn rdp_sgm_step(q: f64, sigma: f64, alpha: u32) -> Result<f64, AccountantError> {
    check_step_params(q, sigma, alpha)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let terms: Vec<f64> = (0..=alpha)
        .map(|k| {
            let mut t = ln_binomial(alpha, k) + f64::from(k) * f64::from(k.saturating_sub(1)) / two_var;
            if k > 0 {
                t += f64::from(k) * ln_q;
            }
            if alpha > k {
                t += f64::from(alpha - k) * ln_1mq;
            }
            t
        })
        .collect();
    let (imax, &max) = terms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("alpha >= 2 gives at least three terms");
    if !max.is_finite() {
        return Err(AccountantError::Overflow { q, sigma, alpha });
    }
    // sum = exp(max) * (1 + rest); ln_1p keeps precision when rest is small.
    let rest: f64 = terms
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &t)| (t - max).exp())
        .sum();
    let eps = (max + rest.ln_1p()) / f64::from(alpha - 1);
    if !eps.is_finite() {
        return Err(AccountantError::Overflow { q, sigma, alpha });
    }
    Ok(eps.max(0.0))
}

/// A run of identical sampled-Gaussian steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    /// Single-step cost at each order of the owning curve's grid.
    per_step: Vec<f64>,
}

/// Accumulated `eps'(alpha)` over an order grid.
///
/// The curve keeps the step count per distinct `(q, sigma)` and derives the
/// totals from those counts, so the result depends only on how many steps
/// of each kind were composed, not on how the calls were split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<u32>,
    segments: Vec<Segment>,
    eps: Vec<f64>,
}

impl Default for RdpCurve {
    fn default() -> Self {
        Self::new(default_orders()).expect("default grid is valid")
    }
}

impl RdpCurve {
    /// An empty (zero-step) curve over `orders`, which must be strictly
    /// increasing integers in `[2, 256]`.
    pub fn new(orders: Vec<u32>) -> Result<Self, AccountantError> {
        if orders.iter().any(|a| !(MIN_ORDER..=MAX_ORDER).contains(a)) || orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AccountantError::InvalidParameter(format!(
                "orders must be strictly increasing within [{MIN_ORDER}, {MAX_ORDER}]"
            )));
        }
        let eps = vec![0.0; orders.len()];
        Ok(Self {
            orders,
            segments: Vec::new(),
            eps,
        })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.eps
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total number of composed steps `T`.
    pub fn steps(&self) -> u64 {
        self.segments.iter().map(|s| s.steps).sum()
    }

    pub fn epsilon_at(&self, alpha: u32) -> Option<f64> {
        self.orders.iter().position(|&a| a == alpha).map(|i| self.eps[i])
    }

    /// Adds `steps` sampled-Gaussian steps at `(q, sigma)`.
    pub fn compose(&self, steps: u64, q: f64, sigma: f64) -> Result<RdpCurve, AccountantError> {
        let mut out = self.clone();
        out.add_steps(steps, q, sigma)?;
        Ok(out)
    }

    pub fn add_steps(&mut self, steps: u64, q: f64, sigma: f64) -> Result<(), AccountantError> {
        if steps == 0 {
            return Ok(());
        }
        match self
            .segments
            .iter_mut()
            .find(|s| s.q.to_bits() == q.to_bits() && s.sigma.to_bits() == sigma.to_bits())
        {
            Some(seg) => seg.steps += steps,
            None => {
                let per_step = self
                    .orders
                    .iter()
                    .map(|&a| rdp_sgm_step(q, sigma, a))
                    .collect::<Result<Vec<_>, _>>()?;
                self.segments.push(Segment {
                    q,
                    sigma,
                    steps,
                    per_step,
                });
            }
        }
        self.recompute()
    }

    fn recompute(&mut self) -> Result<(), AccountantError> {
        for (i, e) in self.eps.iter_mut().enumerate() {
            *e = self
                .segments
                .iter()
                .map(|s| s.steps as f64 * s.per_step[i])
                .sum();
        }
        if let Some(i) = self.eps.iter().position(|e| !e.is_finite()) {
            let s = &self.segments[0];
            return Err(AccountantError::Overflow {
                q: s.q,
                sigma: s.sigma,
                alpha: self.orders[i],
            });
        }
        Ok(())
    }
}

/// An `(eps, delta)` guarantee and the order that attains it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonDelta {
    pub epsilon: f64,
    pub delta: f64,
    pub alpha_star: u32,
    /// `eps'(alpha_star)`.
    pub rdp_epsilon: f64,
}

impl EpsilonDelta {
    /// Reported when noise-free steps were taken; there is no finite bound.
    pub fn unbounded(delta: f64) -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta,
            alpha_star: 0,
            rdp_epsilon: f64::INFINITY,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.epsilon.is_finite()
    }
}

/// Minimizes `eps'(alpha) - ln(delta)/(alpha-1)` over the grid. Ties go to
/// the smallest order.
pub fn to_epsilon_delta(curve: &RdpCurve, delta: f64) -> Result<EpsilonDelta, AccountantError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::InvalidParameter(format!("delta {delta} outside (0, 1)")));
    }
    let ln_delta = delta.ln();
    let mut best: Option<EpsilonDelta> = None;
    for (&alpha, &rdp) in curve.orders.iter().zip(&curve.eps) {
        let epsilon = rdp - ln_delta / f64::from(alpha - 1);
        if best.is_none_or(|b| epsilon < b.epsilon) {
            best = Some(EpsilonDelta {
                epsilon,
                delta,
                alpha_star: alpha,
                rdp_epsilon: rdp,
            });
        }
    }
    best.ok_or(AccountantError::EmptyGrid)
}

/// `(eps, delta)` after `steps` identical steps, from scratch.
pub fn epsilon_after(steps: u64, q: f64, sigma: f64, delta: f64) -> Result<EpsilonDelta, AccountantError> {
    to_epsilon_delta(&RdpCurve::default().compose(steps, q, sigma)?, delta)
}

/// One sampled-Gaussian step to be charged to a [`PrivacyAccountant`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Charge {
    pub q: f64,
    pub sigma: f64,
}

/// Running privacy budget of a training run: an [`RdpCurve`] for noisy
/// steps plus a count of noise-free steps, any of which makes the
/// guarantee unbounded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccountant {
    curve: RdpCurve,
    noiseless_steps: u64,
}

impl PrivacyAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, charge: Charge) -> Result<(), AccountantError> {
        if charge.sigma == 0.0 {
            if !(0.0..=1.0).contains(&charge.q) {
                return Err(AccountantError::InvalidParameter(format!(
                    "sampling rate {} outside [0, 1]",
                    charge.q
                )));
            }
            self.noiseless_steps += 1;
            Ok(())
        } else {
            self.curve.add_steps(1, charge.q, charge.sigma)
        }
    }

    /// Number of charged steps, noisy or not.
    pub fn steps(&self) -> u64 {
        self.curve.steps() + self.noiseless_steps
    }

    pub fn curve(&self) -> &RdpCurve {
        &self.curve
    }

    pub fn epsilon(&self, delta: f64) -> Result<EpsilonDelta, AccountantError> {
        if self.noiseless_steps > 0 {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(AccountantError::InvalidParameter(format!("delta {delta} outside (0, 1)")));
            }
            return Ok(EpsilonDelta::unbounded(delta));
        }
        to_epsilon_delta(&self.curve, delta)
    }
}
