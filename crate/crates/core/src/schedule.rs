//! Noise schedule and the closed-form forward/reverse diffusion primitives.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, and index `t - 1` into
//! the stored sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Parameters of a linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Full-scale setting: 1000 steps.
    pub const FULL: ScheduleConfig = ScheduleConfig {
        steps: 1000,
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    /// Desk-scale default: 200 steps, same beta endpoints.
    pub const DESK: ScheduleConfig = ScheduleConfig {
        steps: 200,
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    /// A shorter schedule whose betas are stretched by `1000 / steps` so the
    /// terminal signal level stays comparable to the 1000-step schedule.
    pub fn rescaled(steps: usize) -> ScheduleConfig {
        let s = 1000.0 / steps as f64;
        ScheduleConfig {
            steps,
            beta_start: (1e-4 * s).min(0.5),
            beta_end: (0.02 * s).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::DESK
    }
}

/// Variance of the noise added by a reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `sigma_t^2 = beta_t`.
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`, the true posterior
    /// variance. Matters for short schedules, where `beta_t` leaves residual noise.
    #[default]
    BetaTilde,
}

/// How the reverse process turns a noise prediction into `x_{t-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerOptions {
    /// Clip the predicted clean image to `[-1, 1]` before the posterior mean.
    pub clip_x0: bool,
    pub variance: PosteriorVariance,
}

impl SamplerOptions {
    /// The bare `mu + sqrt(beta_t) * noise` step.
    pub const PLAIN: SamplerOptions = SamplerOptions {
        clip_x0: false,
        variance: PosteriorVariance::Beta,
    };
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            clip_x0: true,
            variance: PosteriorVariance::BetaTilde,
        }
    }
}

impl NoiseSchedule {
    /// Linearly interpolated betas (endpoints inclusive).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("step count must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("step count must be positive".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_diffuse(&self, x0: &ImageGrid, t: usize, eps: &ImageGrid) -> Result<ImageGrid> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// Coefficients `(1 / sqrt(alpha_t), (1 - alpha_t) / sqrt(1 - abar_t))` of
    /// the posterior mean: `mu = c0 * (x_t - c1 * eps)`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha(t);
        (1.0 / a.sqrt(), (1.0 - a) / (1.0 - self.alpha_bar(t)).sqrt())
    }

    /// `mu = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t)`.
    pub fn posterior_mean(&self, x_t: &ImageGrid, eps_pred: &ImageGrid, t: usize) -> Result<ImageGrid> {
        self.check_t(t)?;
        let (c0, c1) = self.posterior_coefficients(t);
        x_t.zip_map(eps_pred, |x, e| c0 * (x - c1 * e))
    }

    /// The epsilon implied by clipping the predicted `x0` to `[-1, 1]`, plus a
    /// flag per entry telling whether the clip was active there.
    pub fn clip_eps(&self, x_t: &ImageGrid, eps_pred: &ImageGrid, t: usize) -> Result<(ImageGrid, Vec<bool>)> {
        self.check_t(t)?;
        x_t.check_same_shape(eps_pred)?;
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut clipped = vec![false; x_t.len()];
        let data = x_t
            .data()
            .iter()
            .zip(eps_pred.data())
            .zip(clipped.iter_mut())
            .map(|((&x, &e), c)| {
                let x0 = (x - s * e) / a;
                if x0.abs() > 1.0 {
                    *c = true;
                    (x - a * x0.clamp(-1.0, 1.0)) / s
                } else {
                    e
                }
            })
            .collect();
        Ok((ImageGrid::from_vec(x_t.channels(), x_t.height(), x_t.width(), data)?, clipped))
    }

    /// Standard deviation of the reverse-step noise at `t`.
    pub fn noise_scale(&self, t: usize, variance: PosteriorVariance) -> f64 {
        match variance {
            PosteriorVariance::Beta => self.beta(t).sqrt(),
            PosteriorVariance::BetaTilde => {
                let prev = if t > 1 { self.alpha_bar(t - 1) } else { 1.0 };
                (self.beta(t) * (1.0 - prev) / (1.0 - self.alpha_bar(t))).sqrt()
            }
        }
    }

    /// `x_{t-1} = mu + scale * noise`.
    pub fn reverse_step_scaled(
        &self,
        x_t: &ImageGrid,
        eps_pred: &ImageGrid,
        t: usize,
        noise: &ImageGrid,
        scale: f64,
    ) -> Result<ImageGrid> {
        let mu = self.posterior_mean(x_t, eps_pred, t)?;
        mu.zip_map(noise, |m, n| m + scale * n)
    }

    /// `x_{t-1} = mu + sqrt(beta_t) * noise`. Callers pass zero noise at `t = 1`.
    pub fn reverse_step(
        &self,
        x_t: &ImageGrid,
        eps_pred: &ImageGrid,
        t: usize,
        noise: &ImageGrid,
    ) -> Result<ImageGrid> {
        let mu = self.posterior_mean(x_t, eps_pred, t)?;
        let s = self.beta(t).sqrt();
        mu.zip_map(noise, |m, n| m + s * n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar(v: f64) -> ImageGrid {
        ImageGrid::filled(1, 1, 1, v)
    }

    #[test]
    fn noise_scales() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        assert_eq!(s.noise_scale(1, PosteriorVariance::BetaTilde), 0.0);
        for t in 1..=10 {
            let b = s.noise_scale(t, PosteriorVariance::Beta);
            assert_eq!(b, s.beta(t).sqrt());
            assert!(s.noise_scale(t, PosteriorVariance::BetaTilde) <= b);
        }
    }

    #[test]
    fn clipped_eps_reconstructs_a_clipped_x0() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let x = ImageGrid::from_vec(1, 1, 3, vec![0.3, 2.5, -2.5]).unwrap();
        let e = ImageGrid::from_vec(1, 1, 3, vec![0.1, -0.4, 0.4]).unwrap();
        let t = 4;
        let (ec, flags) = s.clip_eps(&x, &e, t).unwrap();
        let ab = s.alpha_bar(t);
        let x0: Vec<f64> = x
            .data()
            .iter()
            .zip(ec.data())
            .map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
            .collect();
        assert_eq!(flags, vec![false, true, true]);
        assert_eq!(ec.get(0, 0, 0), 0.1);
        assert!((x0[1] - 1.0).abs() < 1e-12 && (x0[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_cumulative_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn desk_and_full_defaults_build() {
        assert_eq!(ScheduleConfig::FULL.build().unwrap().steps(), 1000);
        assert_eq!(ScheduleConfig::default().build().unwrap().steps(), 200);
        let r = ScheduleConfig::rescaled(50).build().unwrap();
        assert!(r.alpha_bar(50) < 1e-3);
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        // abar = 0.25: 0.5 * 1.0 + sqrt(0.75) * 0.5
        let out = s.forward_diffuse(&scalar(1.0), 1, &scalar(0.5)).unwrap();
        assert!((out.data()[0] - 0.9330127).abs() < 1e-6);

        let zeros = ImageGrid::zeros(1, 2, 2);
        let eps = ImageGrid::from_vec(1, 2, 2, vec![0.1, -0.2, 0.3, 1.5]).unwrap();
        let out = s.forward_diffuse(&zeros, 1, &eps).unwrap();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!((o - 0.75f64.sqrt() * e).abs() < 1e-15);
        }

        let tiny = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let out = tiny
            .forward_diffuse(&eps, 1, &ImageGrid::filled(1, 2, 2, 1.0))
            .unwrap();
        assert!(out.mean_abs_diff(&eps) < 1e-5);

        assert!(s.forward_diffuse(&zeros, 1, &scalar(0.0)).is_err());
    }

    #[test]
    fn posterior_mean_examples() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = ImageGrid::from_fn(3, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let eps = ImageGrid::from_fn(3, 4, 4, |_, _, _| rng.sample(StandardNormal));
        let x1 = s.forward_diffuse(&x0, 1, &eps).unwrap();
        let mu = s.posterior_mean(&x1, &eps, 1).unwrap();
        assert!(mu.mean_abs_diff(&x0) < 1e-12);

        let t = 7;
        let mu0 = s.posterior_mean(&x1, &ImageGrid::zeros(3, 4, 4), t).unwrap();
        for (m, x) in mu0.data().iter().zip(x1.data()) {
            assert!((m - x / s.alpha(t).sqrt()).abs() < 1e-12);
        }

        // independent re-evaluation of the closed form on a 2x2 grid
        let xt = ImageGrid::from_vec(1, 2, 2, vec![0.3, -0.7, 1.2, 0.05]).unwrap();
        let ep = ImageGrid::from_vec(1, 2, 2, vec![-1.0, 0.4, 0.9, -0.2]).unwrap();
        let mu = s.posterior_mean(&xt, &ep, 4).unwrap();
        let beta4 = 1e-3 + (0.2 - 1e-3) * 3.0 / 9.0;
        let abar4: f64 = (0..4)
            .map(|i| 1.0 - (1e-3 + (0.2 - 1e-3) * i as f64 / 9.0))
            .product();
        for i in 0..4 {
            let expect = (xt.data()[i] - beta4 / (1.0 - abar4).sqrt() * ep.data()[i])
                / (1.0 - beta4).sqrt();
            assert!((mu.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn reverse_step_examples() {
        let s = NoiseSchedule::from_betas(vec![0.01, 0.04]).unwrap();
        let xt = ImageGrid::from_vec(1, 1, 2, vec![0.5, -0.5]).unwrap();
        let ep = ImageGrid::from_vec(1, 1, 2, vec![0.2, 0.1]).unwrap();
        let mu = s.posterior_mean(&xt, &ep, 2).unwrap();
        let zero = ImageGrid::zeros(1, 1, 2);
        assert_eq!(s.reverse_step(&xt, &ep, 2, &zero).unwrap(), mu);
        let ones = ImageGrid::filled(1, 1, 2, 1.0);
        let out = s.reverse_step(&xt, &ep, 2, &ones).unwrap();
        for (o, m) in out.data().iter().zip(mu.data()) {
            assert!((o - (m + 0.2)).abs() < 1e-15);
        }
        assert!(s.reverse_step(&xt, &ImageGrid::zeros(1, 2, 1), 2, &zero).is_err());
    }

    #[test]
    fn oracle_loop_reconstructs_constant_image() {
        // Running the reverse chain with the true noise of a known x0 as the
        // epsilon predictor: eps_true(x_t) = (x_t - sqrt(abar) x0) / sqrt(1 - abar).
        let s = ScheduleConfig::DESK.build().unwrap();
        let x0 = ImageGrid::filled(3, 8, 8, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = ImageGrid::from_fn(3, 8, 8, |_, _, _| rng.sample(StandardNormal));
        for t in (1..=s.steps()).rev() {
            let ab = s.alpha_bar(t);
            let eps = x
                .zip_map(&x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .unwrap();
            let noise = if t > 1 {
                ImageGrid::from_fn(3, 8, 8, |_, _, _| rng.sample(StandardNormal))
            } else {
                ImageGrid::zeros(3, 8, 8)
            };
            x = s.reverse_step(&x, &eps, t, &noise).unwrap();
        }
        assert!(x.mean_abs_diff(&x0) < 0.05, "mae {}", x.mean_abs_diff(&x0));
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decrease(steps in 1usize..300, start in 1e-5f64..0.3, span in 0.0f64..0.6) {
            let end = (start + span).min(0.99);
            let s = NoiseSchedule::linear(steps, start, end).unwrap();
            prop_assert_eq!(s.betas().len(), steps);
            prop_assert_eq!(s.alpha_bars().len(), steps);
            let mut prev = 1.0;
            for (t, &ab) in s.alpha_bars().iter().enumerate() {
                prop_assert!(ab < prev && ab > 0.0);
                prop_assert!((ab - prev * s.alphas()[t]).abs() <= 1e-12);
                prev = ab;
            }
        }

        #[test]
        fn forward_then_posterior_at_first_step_is_identity(
            beta in 1e-4f64..0.5,
            vals in proptest::collection::vec(-1.0f64..1.0, 12),
            noise in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            let s = NoiseSchedule::from_betas(vec![beta, 0.5]).unwrap();
            let x0 = ImageGrid::from_vec(3, 2, 2, vals).unwrap();
            let eps = ImageGrid::from_vec(3, 2, 2, noise).unwrap();
            let x1 = s.forward_diffuse(&x0, 1, &eps).unwrap();
            let back = s.posterior_mean(&x1, &eps, 1).unwrap();
            prop_assert!(back.zip_map(&x0, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-6);
        }
    }
}
