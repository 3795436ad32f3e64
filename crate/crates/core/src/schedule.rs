//! Diffusion noise schedules and the per-step DDPM / DDIM update math.
//!
//! Steps are numbered `1..=T`. Index `0` holds the boundary value
//! `alpha_bar[0]`. A schedule built from betas uses `alpha_bar[0] = 1 - beta_1`
//! (the "final alpha" convention of latent-diffusion samplers), which keeps the
//! last DDPM posterior std strictly positive so that every step has
//! extractable noise. [`NoiseSchedule::from_alpha_bars`] accepts an explicit
//! boundary value instead.
//!
//! Schedule arithmetic is `f64`; tensors are `f32` and every elementwise
//! update is evaluated in `f64` before rounding.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Error, Result};
use crate::math::sqrt;

/// Radicands within this distance below zero are treated as exact zeros.
const RADICAND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `beta[tau]`, index 0 unused.
    betas: Vec<f64>,
    /// `alpha_bar[tau]` for `tau` in `0..=T`.
    alpha_bars: Vec<f64>,
    /// Posterior std `sigma[tau]`, index 0 unused.
    sigmas: Vec<f64>,
    eta: f64,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<Self> {
        Self::strided(steps, steps, beta_start, beta_end, eta)
    }

    /// Linear betas over `train_steps` fine steps, sampled at `steps` evenly
    /// strided timesteps `1, 1 + k, 1 + 2k, ...` with `k = train_steps / steps`.
    /// With `train_steps == steps` this is [`Self::linear`].
    pub fn strided(
        steps: usize,
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        eta: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(config_err!("step count must be at least 1"));
        }
        if train_steps < steps {
            return Err(config_err!("train_steps {train_steps} < steps {steps}"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            ));
        }
        let fine_beta = |k: usize| {
            if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (k - 1) as f64 / (train_steps - 1) as f64
            }
        };
        let stride = train_steps / steps;
        let mut alpha_bar = 1.0;
        let mut picked = Vec::with_capacity(steps);
        let mut next = 1;
        for k in 1..=train_steps {
            alpha_bar *= 1.0 - fine_beta(k);
            if k == next && picked.len() < steps {
                picked.push(alpha_bar);
                next += stride;
            }
        }
        if stride == 1 {
            // Exact betas rather than ratios of cumulative products.
            let betas: Vec<f64> = (1..=steps).map(fine_beta).collect();
            return Self::build(picked[0], &picked, Some(&betas), eta);
        }
        Self::build(picked[0], &picked, None, eta)
    }

    /// A schedule from explicit cumulative products `alpha_bars[0..T]`
    /// (for steps `1..=T`) and the boundary value `alpha_bar_0`.
    ///
    /// Betas are recovered as `1 - alpha_bar[tau] / alpha_bar[tau - 1]` for
    /// `tau >= 2` and `1 - alpha_bar[1]` for the first step.
    pub fn from_alpha_bars(alpha_bar_0: f64, alpha_bars: &[f64], eta: f64) -> Result<Self> {
        Self::build(alpha_bar_0, alpha_bars, None, eta)
    }

    fn build(
        alpha_bar_0: f64,
        alpha_bars: &[f64],
        betas: Option<&[f64]>,
        eta: f64,
    ) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(config_err!("schedule needs at least one step"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(config_err!("eta must lie in [0, 1], got {eta}"));
        }
        if !(alpha_bar_0 > 0.0 && alpha_bar_0 <= 1.0) || alpha_bar_0 < alpha_bars[0] {
            return Err(config_err!(
                "boundary alpha_bar_0 = {alpha_bar_0} is invalid"
            ));
        }
        for (i, w) in alpha_bars.windows(2).enumerate() {
            if w[1] >= w[0] {
                return Err(Error::Schedule {
                    step: i + 2,
                    reason: format!("alpha_bar not strictly decreasing ({} -> {})", w[0], w[1]),
                });
            }
        }
        if alpha_bars.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(config_err!("alpha_bar values must lie in (0, 1)"));
        }
        let steps = alpha_bars.len();
        let mut ab = Vec::with_capacity(steps + 1);
        ab.push(alpha_bar_0);
        ab.extend_from_slice(alpha_bars);
        let mut bs = Vec::with_capacity(steps + 1);
        bs.push(0.0);
        for tau in 1..=steps {
            let b = match betas {
                Some(b) => b[tau - 1],
                None if tau == 1 => 1.0 - ab[1],
                None => 1.0 - ab[tau] / ab[tau - 1],
            };
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Schedule {
                    step: tau,
                    reason: format!("beta {b} outside (0, 1)"),
                });
            }
            bs.push(b);
        }
        let mut sigmas = Vec::with_capacity(steps + 1);
        sigmas.push(0.0);
        for tau in 1..=steps {
            let var = eta * eta * (1.0 - ab[tau - 1]) / (1.0 - ab[tau]) * bs[tau];
            sigmas.push(sqrt(var.max(0.0)));
        }
        Ok(Self {
            betas: bs,
            alpha_bars: ab,
            sigmas,
            eta,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `alpha_bar[tau]` for `tau` in `0..=T`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bars[tau]
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.betas[tau]
    }

    pub fn sigma(&self, tau: usize) -> f64 {
        self.sigmas[tau]
    }

    fn check_step(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.steps() {
            return Err(Error::OutOfBounds {
                index: tau,
                extent: self.steps() + 1,
            });
        }
        Ok(())
    }

    /// `x_tau = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps`.
    pub fn forward_noise(&self, x0: &[f32], tau: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check_step(tau)?;
        if x0.len() != eps.len() {
            return Err(shape_err!(
                "x0 has {} samples, noise has {}",
                x0.len(),
                eps.len()
            ));
        }
        let a = sqrt(self.alpha_bars[tau]);
        let b = sqrt(1.0 - self.alpha_bars[tau]);
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
            .collect())
    }

    /// Coefficients `(on x_tau, on eps)` of the posterior mean
    /// `sqrt(alpha_bar[tau-1]) P(eps) + D(eps)`, with
    /// `P = (x_tau - sqrt(1 - alpha_bar[tau]) eps) / sqrt(alpha_bar[tau])` the
    /// predicted clean sample and `D = sqrt(1 - alpha_bar[tau-1] - sigma^2) eps`
    /// the direction back towards `x_tau`.
    pub fn mu_coefficients(&self, tau: usize) -> Result<(f64, f64)> {
        self.check_step(tau)?;
        let ab = self.alpha_bars[tau];
        let ab_prev = self.alpha_bars[tau - 1];
        let s = self.sigmas[tau];
        let radicand = 1.0 - ab_prev - s * s;
        if radicand < -RADICAND_SLACK {
            return Err(Error::Schedule {
                step: tau,
                reason: format!("negative direction radicand {radicand}"),
            });
        }
        let dir = sqrt(radicand.max(0.0));
        let c_x = sqrt(ab_prev / ab);
        let c_eps = dir - sqrt(ab_prev) * sqrt(1.0 - ab) / sqrt(ab);
        Ok((c_x, c_eps))
    }

    /// Posterior mean estimate `mu_hat_tau(x_tau)` given a noise prediction.
    pub fn mu_hat(&self, x_tau: &[f32], eps_pred: &[f32], tau: usize) -> Result<Vec<f32>> {
        if x_tau.len() != eps_pred.len() {
            return Err(shape_err!(
                "x has {} samples, prediction has {}",
                x_tau.len(),
                eps_pred.len()
            ));
        }
        let (cx, ce) = self.mu_coefficients(tau)?;
        Ok(x_tau
            .iter()
            .zip(eps_pred)
            .map(|(&x, &e)| (cx * x as f64 + ce * e as f64) as f32)
            .collect())
    }

    /// One deterministic DDIM inversion step: maps `x_{tau-1}` to `x_tau`
    /// using a noise prediction evaluated at `x_{tau-1}`.
    pub fn ddim_invert_step(
        &self,
        x_prev: &[f32],
        eps_pred: &[f32],
        tau: usize,
    ) -> Result<Vec<f32>> {
        self.check_step(tau)?;
        if x_prev.len() != eps_pred.len() {
            return Err(shape_err!(
                "x has {} samples, prediction has {}",
                x_prev.len(),
                eps_pred.len()
            ));
        }
        let ab = self.alpha_bars[tau];
        let ab_prev = self.alpha_bars[tau - 1];
        let c_x = sqrt(ab / ab_prev);
        let c_eps = sqrt(1.0 - ab) - sqrt(ab) * sqrt(1.0 - ab_prev) / sqrt(ab_prev);
        Ok(x_prev
            .iter()
            .zip(eps_pred)
            .map(|(&x, &e)| (c_x * x as f64 + c_eps * e as f64) as f32)
            .collect())
    }
}

/// `z = (x_prev - mu) / sigma`: the noise that makes one DDPM step land
/// exactly on `x_prev`.
pub fn extract_noise(x_prev: &[f32], mu: &[f32], sigma: f64, step: usize) -> Result<Vec<f32>> {
    if sigma <= 0.0 {
        return Err(Error::ZeroSigma { step });
    }
    if x_prev.len() != mu.len() {
        return Err(shape_err!(
            "x has {} samples, mean has {}",
            x_prev.len(),
            mu.len()
        ));
    }
    Ok(x_prev
        .iter()
        .zip(mu)
        .map(|(&x, &m)| ((x as f64 - m as f64) / sigma) as f32)
        .collect())
}

/// `x_prev = mu + sigma z`.
pub fn ddpm_step(mu: &[f32], sigma: f64, z: &[f32]) -> Result<Vec<f32>> {
    if mu.len() != z.len() {
        return Err(shape_err!(
            "mean has {} samples, noise has {}",
            mu.len(),
            z.len()
        ));
    }
    Ok(mu
        .iter()
        .zip(z)
        .map(|(&m, &n)| (m as f64 + sigma * n as f64) as f32)
        .collect())
}
