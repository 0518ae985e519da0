//! Detector-guided adversarial perturbation of single denoising steps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::detector::{from_detector_space_grad, to_detector_space, Detector, IllusoryBox};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::schedule::{NoiseSchedule, SamplerOptions};

/// Timesteps on which the attack runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackWindow {
    #[default]
    All,
    /// Inclusive range `lo..=hi` of 1-based timesteps.
    Range { lo: usize, hi: usize },
}

impl AttackWindow {
    pub fn contains(&self, t: usize) -> bool {
        match *self {
            AttackWindow::All => true,
            AttackWindow::Range { lo, hi } => (lo..=hi).contains(&t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Step size, stated for a trajectory of `reference_steps` steps.
    pub alpha: f64,
    /// Shorter schedules scale the per-step size by `reference_steps / T` so
    /// the whole-trajectory budget stays the same; 0 disables scaling.
    pub reference_steps: usize,
    pub inner_iters: usize,
    pub attack_window: AttackWindow,
    /// Keep `eta` across timesteps instead of zeroing it at each step.
    pub persist_eta: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 0.003,
            reference_steps: 1000,
            inner_iters: 1,
            attack_window: AttackWindow::All,
            persist_eta: false,
        }
    }
}

impl AttackConfig {
    /// `alpha = 0` is accepted as the no-attack baseline.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.inner_iters == 0 {
            return Err(Error::InvalidArgument("inner_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-step signum size for a schedule of `steps` steps.
    pub fn step_size(&self, steps: usize) -> f64 {
        if self.reference_steps == 0 || steps == 0 {
            self.alpha
        } else {
            self.alpha * self.reference_steps as f64 / steps as f64
        }
    }
}

/// One line of the attack trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub eta_linf: f64,
    /// The detector produced no candidates, so no update happened.
    pub skipped: bool,
}

impl fmt::Display for StepTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={} before={:.6} after={:.6} eta_inf={:.6}{}",
            self.t,
            self.loss_before,
            self.loss_after,
            self.eta_linf,
            if self.skipped { " skipped" } else { "" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct AttackState {
    pub eta: ImageGrid,
    pub step_losses: Vec<StepTrace>,
}

impl AttackState {
    pub fn new(shape: (usize, usize, usize)) -> Self {
        Self {
            eta: ImageGrid::zeros(shape.0, shape.1, shape.2),
            step_losses: Vec::new(),
        }
    }

    /// Final-step illusory loss, if any step ran.
    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().map(|s| s.loss_after)
    }

    pub fn trace_lines(&self) -> String {
        self.step_losses.iter().map(|s| format!("{s}\n")).collect()
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `eta - alpha * sgn(grad)`, with `sgn(0) = 0`.
pub fn dada_update(eta: &ImageGrid, grad: &ImageGrid, alpha: f64) -> Result<ImageGrid> {
    eta.check_same_shape(grad)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("attack gradient".into()));
    }
    eta.zip_map(grad, |e, g| e - alpha * sgn(g))
}

/// Apply `eta` inside the region: `base + m_b * eta`.
fn perturb(base: &ImageGrid, eta: &ImageGrid, region: &IllusoryBox) -> ImageGrid {
    let r = region.rect();
    let mut x = base.clone();
    for c in 0..x.channels() {
        for y in r.y1..r.y2 {
            for xx in r.x1..r.x2 {
                let i = x.index(c, y, xx);
                x.data_mut()[i] += eta.data()[i];
            }
        }
    }
    x
}

/// Zero everything outside the region.
fn confine(g: &ImageGrid, region: &IllusoryBox) -> ImageGrid {
    let r = region.rect();
    ImageGrid::from_fn(g.channels(), g.height(), g.width(), |c, y, x| {
        if r.contains(x, y) {
            g.get(c, y, x)
        } else {
            0.0
        }
    })
}

/// Everything that defines one attacked denoising step.
pub struct StepContext<'a, P: NoisePredictor, D: Detector + ?Sized> {
    pub denoiser: &'a P,
    pub detector: &'a D,
    pub sched: &'a NoiseSchedule,
    pub region: &'a IllusoryBox,
    pub t: usize,
    /// Reparameterization noise, frozen for the whole step.
    pub eps_fixed: &'a ImageGrid,
    pub sampler: SamplerOptions,
}

/// Illusory loss and its gradient with respect to `eta`.
#[derive(Debug, Clone)]
pub struct AttackEval {
    pub loss: f64,
    pub grad: ImageGrid,
    pub x_prev: ImageGrid,
}

impl<P: NoisePredictor, D: Detector + ?Sized> StepContext<'_, P, D> {
    /// Returns `x_{t-1}` and, when clipping, the per-entry clip flags.
    fn emit(&self, x_in: &ImageGrid, eps: ImageGrid) -> Result<(ImageGrid, Option<Vec<bool>>)> {
        let (eps, clipped) = if self.sampler.clip_x0 {
            let (e, c) = self.sched.clip_eps(x_in, &eps, self.t)?;
            (e, Some(c))
        } else {
            (eps, None)
        };
        let scale = self.sched.noise_scale(self.t, self.sampler.variance);
        Ok((
            self.sched.reverse_step_scaled(x_in, &eps, self.t, self.eps_fixed, scale)?,
            clipped,
        ))
    }

    /// `x_{t-1}` for the composed input with `eta` applied inside the region.
    pub fn step(&self, base: &ImageGrid, eta: &ImageGrid) -> Result<ImageGrid> {
        let x_in = perturb(base, eta, self.region);
        let eps = self.denoiser.predict(&x_in, self.t);
        Ok(self.emit(&x_in, eps)?.0)
    }

    /// Illusory loss of `x_{t-1}` without gradient.
    pub fn loss(&self, base: &ImageGrid, eta: &ImageGrid) -> Result<f64> {
        let x_prev = self.step(base, eta)?;
        Ok(self
            .detector
            .illusory_loss(&to_detector_space(&x_prev), &self.region.rect(), false)?
            .value)
    }

    /// `grad_eta L_det(x_{t-1})` through the posterior mean and the detector.
    pub fn gradient(&self, base: &ImageGrid, eta: &ImageGrid) -> Result<AttackEval> {
        let x_in = perturb(base, eta, self.region);
        let (eps, tape) = self.denoiser.predict_taped(&x_in, self.t);
        let (x_prev, clipped) = self.emit(&x_in, eps)?;
        let il = self
            .detector
            .illusory_loss(&to_detector_space(&x_prev), &self.region.rect(), true)?;
        let g = from_detector_space_grad(il.grad.as_ref().expect("requested gradient"));
        // x_prev = c0 * (x_in - c1 * eps'(x_in)) + const, where eps' is the network
        // output except on clipped entries, where it is (x_in - const) / s.
        let (c0, c1) = self.sched.posterior_coefficients(self.t);
        let dx = match clipped {
            None => {
                let back = self.denoiser.pullback(&tape, &g);
                g.zip_map(&back, |a, b| c0 * (a - c1 * b))?
            }
            Some(flags) => {
                let inv_s = 1.0 / (1.0 - self.sched.alpha_bar(self.t)).sqrt();
                let mut g_net = g.clone();
                for (v, &c) in g_net.data_mut().iter_mut().zip(&flags) {
                    if c {
                        *v = 0.0;
                    }
                }
                let back = self.denoiser.pullback(&tape, &g_net);
                let mut dx = g.clone();
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    let j = back.data()[i] + if flags[i] { *v * inv_s } else { 0.0 };
                    *v = c0 * (*v - c1 * j);
                }
                dx
            }
        };
        Ok(AttackEval {
            loss: il.value,
            grad: confine(&dx, self.region),
            x_prev,
        })
    }
}

/// Gradient of the illusory loss with respect to `eta` at one step, for the
/// plain reverse step; `StepContext` covers the other sampler options.
#[allow(clippy::too_many_arguments)]
pub fn attack_gradient<P: NoisePredictor, D: Detector + ?Sized>(
    denoiser: &P,
    detector: &D,
    x_t_composed: &ImageGrid,
    eta: &ImageGrid,
    t: usize,
    sched: &NoiseSchedule,
    eps_fixed: &ImageGrid,
    region: &IllusoryBox,
) -> Result<ImageGrid> {
    let ctx = StepContext {
        denoiser,
        detector,
        sched,
        region,
        t,
        eps_fixed,
        sampler: SamplerOptions::PLAIN,
    };
    Ok(ctx.gradient(x_t_composed, eta)?.grad)
}

/// Optimize `eta` for `K` signed-gradient updates, then emit `x_{t-1}` from
/// the perturbed input using the same frozen noise.
pub fn run_attack_step<P: NoisePredictor, D: Detector + ?Sized>(
    ctx: &StepContext<'_, P, D>,
    base: &ImageGrid,
    state: &mut AttackState,
    cfg: &AttackConfig,
) -> Result<ImageGrid> {
    if !cfg.persist_eta {
        state.eta.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let region = ctx.region.rect();
    let step = cfg.step_size(ctx.sched.steps());
    let active = step > 0.0 && cfg.attack_window.contains(ctx.t);
    let mut loss_before = f64::NAN;
    let mut skipped = false;
    if active {
        for k in 0..cfg.inner_iters {
            match ctx.gradient(base, &state.eta) {
                Ok(ev) => {
                    if k == 0 {
                        loss_before = ev.loss;
                    }
                    state.eta = dada_update(&state.eta, &ev.grad, step)?;
                }
                Err(Error::NoCandidates) => {
                    log::warn!("t={}: detector has no candidates, attack step skipped", ctx.t);
                    skipped = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let x_prev = ctx.step(base, &state.eta)?;
    let loss_after = match ctx
        .detector
        .illusory_loss(&to_detector_space(&x_prev), &region, false)
    {
        Ok(l) => l.value,
        Err(Error::NoCandidates) => f64::NAN,
        Err(e) => return Err(e),
    };
    if !active || skipped {
        loss_before = loss_after;
    }
    if !x_prev.is_finite() {
        return Err(Error::NonFinite(format!("sample at t={}", ctx.t)));
    }
    state.step_losses.push(StepTrace {
        t: ctx.t,
        loss_before,
        loss_after,
        eta_linf: state.eta.max_abs(),
        skipped,
    });
    Ok(x_prev)
}
