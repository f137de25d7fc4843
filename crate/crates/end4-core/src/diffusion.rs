//! Forward noising, one-step denoising recovery, and a reference reverse step.
//!
//! The detector never iterates the reverse chain: it corrupts an image to a
//! sampled time step, asks the denoiser for the noise estimate, and recovers
//! the clean image in a single algebraic step. The iterative reverse step is
//! kept as a reference path for verification.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Schedule hyperparameters; the linear range is the common convention for
/// noise-prediction training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Precomputed per-step noise coefficients.
///
/// `alpha_bars[t]` is the cumulative product of `alphas[0..=t]`; it is
/// strictly decreasing and stays in (0, 1).
#[derive(Clone, Debug)]
pub struct NoiseSchedule<T: Real> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

/// Linearly spaced betas from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule<T: Real>(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule<T>> {
    if steps < 1 {
        return Err(Error::InvalidParameter("step count must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<T> = (0..steps)
        .map(|t| {
            let frac = if steps == 1 {
                0.0
            } else {
                t as f64 / (steps - 1) as f64
            };
            T::from_f(beta_start + (beta_end - beta_start) * frac)
        })
        .collect();
    Ok(NoiseSchedule::from_betas(betas))
}

impl<T: Real> NoiseSchedule<T> {
    fn from_betas(betas: Vec<T>) -> Self {
        let alphas: Vec<T> = betas.iter().map(|b| T::one() - *b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = T::one();
        for a in &alphas {
            prod = prod * *a;
            alpha_bars.push(prod);
        }
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        build_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::IndexOutOfRange(format!(
                "time step {t} outside schedule of {} steps",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Corrupt `x0` to step `t`: `x_t = sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps`.
    pub fn forward_noise(&self, x0: &ArrayD<T>, t: usize, eps: &ArrayD<T>) -> Result<ArrayD<T>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch(format!(
                "x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let a_bar = self.alpha_bars[t];
        let c0 = a_bar.sqrt();
        let c1 = (T::one() - a_bar).sqrt();
        let mut out = x0.clone();
        out.zip_mut_with(eps, |o, e| *o = c0 * *o + c1 * *e);
        Ok(out)
    }

    /// One-step recovery: `x0_hat = (x_t - sqrt(1-a_bar)*eps_hat) / sqrt(a_bar)`.
    pub fn one_step_denoise(
        &self,
        x_t: &ArrayD<T>,
        t: usize,
        eps_hat: &ArrayD<T>,
    ) -> Result<ArrayD<T>> {
        self.check_t(t)?;
        if x_t.shape() != eps_hat.shape() {
            return Err(Error::ShapeMismatch(format!(
                "x_t {:?} vs eps_hat {:?}",
                x_t.shape(),
                eps_hat.shape()
            )));
        }
        let a_bar = self.alpha_bars[t];
        let c1 = (T::one() - a_bar).sqrt();
        let inv = T::one() / a_bar.sqrt();
        let mut out = x_t.clone();
        out.zip_mut_with(eps_hat, |o, e| *o = (*o - c1 * *e) * inv);
        Ok(out)
    }

    /// One-step recovery recorded on a tape; gradients flow into `eps_hat`
    /// so the detection loss can train the denoiser.
    pub fn one_step_denoise_var(
        &self,
        tape: &mut Tape<T>,
        x_t: Var,
        t: usize,
        eps_hat: Var,
    ) -> Result<Var> {
        self.check_t(t)?;
        let a_bar = self.alpha_bars[t];
        let c1 = (T::one() - a_bar).sqrt();
        let inv = T::one() / a_bar.sqrt();
        let scaled = tape.scale(eps_hat, c1);
        let diff = tape.sub(x_t, scaled);
        Ok(tape.scale(diff, inv))
    }

    /// Reference reverse step from `x_t` to `x_{t-1}`.
    ///
    /// Recovers the one-step estimate of the clean image and re-noises it to
    /// the marginal of step `t-1`; the per-step alpha ratio of the reverse
    /// process is recovered from the stored cumulative products.
    pub fn ddim_reverse_step(
        &self,
        x_t: &ArrayD<T>,
        t: usize,
        eps_hat: &ArrayD<T>,
        noise: &ArrayD<T>,
    ) -> Result<ArrayD<T>> {
        self.check_t(t)?;
        if t == 0 {
            return Err(Error::IndexOutOfRange(
                "reverse step needs t >= 1; there is no step -1".into(),
            ));
        }
        if x_t.shape() != eps_hat.shape() || x_t.shape() != noise.shape() {
            return Err(Error::ShapeMismatch(
                "x_t, eps_hat, and noise must share a shape".into(),
            ));
        }
        Ok(reverse_step_with(
            x_t,
            eps_hat,
            noise,
            self.alpha_bars[t],
            self.alpha_bars[t - 1],
        ))
    }
}

/// Reverse-step arithmetic with explicit cumulative coefficients:
/// `x_prev = sqrt(a_bar_prev) * x0_hat + sqrt(1 - a_bar_prev) * noise`.
pub fn reverse_step_with<T: Real>(
    x_t: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    noise: &ArrayD<T>,
    alpha_bar_t: T,
    alpha_bar_prev: T,
) -> ArrayD<T> {
    let c1 = (T::one() - alpha_bar_t).sqrt();
    let inv = T::one() / alpha_bar_t.sqrt();
    let cp = alpha_bar_prev.sqrt();
    let cn = (T::one() - alpha_bar_prev).sqrt();
    let mut out = x_t.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_hat)
        .and(noise)
        .for_each(|o, e, n| {
            let x0_hat = (*o - c1 * *e) * inv;
            *o = cp * x0_hat + cn * *n;
        });
    out
}
