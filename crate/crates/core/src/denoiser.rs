//! Background-only denoiser: a small U-shaped epsilon predictor trained with
//! a noise-matching loss that ignores pixels inside ground-truth boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask, Rect};
use crate::nn::{self, Adam, Conv2d, ConvCache, Dense, ParamBuilder};
use crate::par::{self, Execution};
use crate::rng;
use crate::schedule::{NoiseSchedule, SamplerOptions};

/// Rasterize the union of half-open boxes into a binary mask.
pub fn mask_from_boxes(boxes: &[Rect], height: usize, width: usize) -> Result<Mask> {
    let mut mask = Mask::zeros(height, width);
    for b in boxes {
        b.validate(width, height)?;
        for y in b.y1..b.y2 {
            for x in b.x1..b.x2 {
                mask.set(y, x, true);
            }
        }
    }
    Ok(mask)
}

/// How the masked squared residual is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Divide by every element, masked or not.
    #[default]
    AllElements,
    /// Divide by the number of unmasked elements only.
    BackgroundElements,
}

fn masked_residual_denominator(mask: &Mask, channels: usize, norm: LossNormalization) -> f64 {
    match norm {
        LossNormalization::AllElements => (channels * mask.height() * mask.width()) as f64,
        LossNormalization::BackgroundElements => {
            let bg = mask.height() * mask.width() - mask.count_ones();
            (channels * bg).max(1) as f64
        }
    }
}

/// Squared epsilon residual with ground-truth pixels zeroed out.
pub fn regional_noise_matching_loss(
    eps_true: &ImageGrid,
    eps_pred: &ImageGrid,
    gtb_mask: &Mask,
    norm: LossNormalization,
) -> Result<f64> {
    Ok(regional_loss_and_grad(eps_true, eps_pred, gtb_mask, norm)?.0)
}

/// Loss plus its gradient with respect to `eps_pred`.
pub fn regional_loss_and_grad(
    eps_true: &ImageGrid,
    eps_pred: &ImageGrid,
    gtb_mask: &Mask,
    norm: LossNormalization,
) -> Result<(f64, ImageGrid)> {
    eps_true.check_same_shape(eps_pred)?;
    if (gtb_mask.height(), gtb_mask.width()) != (eps_true.height(), eps_true.width()) {
        return Err(Error::ShapeMismatch {
            expected: eps_true.shape(),
            got: (1, gtb_mask.height(), gtb_mask.width()),
        });
    }
    let denom = masked_residual_denominator(gtb_mask, eps_true.channels(), norm);
    let plane = eps_true.plane_len();
    let mut grad = ImageGrid::zeros(eps_true.channels(), eps_true.height(), eps_true.width());
    let mut sum = 0.0;
    for c in 0..eps_true.channels() {
        let et = eps_true.plane(c);
        let ep = eps_pred.plane(c);
        let g = grad.plane_mut(c);
        for i in 0..plane {
            if gtb_mask.data()[i] == 0 {
                let r = et[i] - ep[i];
                sum += r * r;
                g[i] = -2.0 * r / denom;
            }
        }
    }
    Ok((sum / denom, grad))
}

/// Architecture of the U-shaped denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserArch {
    pub channels: usize,
    pub base_width: usize,
    pub temb_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            channels: 3,
            base_width: 32,
            temb_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    temb: Dense,
    skip: Option<Conv2d>,
}

struct ResCache {
    x: ImageGrid,
    h: ImageGrid,
    c1: ConvCache,
    c2: ConvCache,
    skip: Option<ConvCache>,
}

impl ResBlock {
    fn new<R: rand::Rng>(pb: &mut ParamBuilder<'_, R>, cin: usize, cout: usize, temb_dim: usize) -> Self {
        Self {
            conv1: Conv2d::new(pb, cin, cout, 3, 1),
            conv2: Conv2d::with_gain(pb, cout, cout, 3, 1, 0.5),
            temb: Dense::new(pb, temb_dim, cout),
            skip: (cin != cout).then(|| Conv2d::new(pb, cin, cout, 1, 1)),
        }
    }

    fn forward(&self, p: &[f64], x: &ImageGrid, temb: &[f64]) -> (ImageGrid, ResCache) {
        let (mut h, c1) = self.conv1.forward(p, &nn::silu(x));
        let tb = self.temb.forward(p, temb);
        for (c, b) in tb.iter().enumerate() {
            h.plane_mut(c).iter_mut().for_each(|v| *v += b);
        }
        let (mut out, c2) = self.conv2.forward(p, &nn::silu(&h));
        let skip = match &self.skip {
            Some(s) => {
                let (sx, sc) = s.forward(p, x);
                out.add_assign(&sx);
                Some(sc)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        (
            out,
            ResCache {
                x: x.clone(),
                h,
                c1,
                c2,
                skip,
            },
        )
    }

    /// Returns the input gradient; accumulates into `dtemb` when training.
    fn backward(
        &self,
        p: &[f64],
        cache: &ResCache,
        dout: &ImageGrid,
        mut grads: Option<&mut [f64]>,
        temb: &[f64],
        dtemb: &mut [f64],
    ) -> ImageGrid {
        let da2 = self
            .conv2
            .backward(p, &cache.c2, dout, grads.as_deref_mut(), true)
            .expect("dx");
        let dh = nn::silu_backward(&cache.h, &da2);
        if let Some(g) = grads.as_deref_mut() {
            let dtb: Vec<f64> = (0..dh.channels())
                .map(|c| dh.plane(c).iter().sum())
                .collect();
            let d = self.temb.backward(p, temb, &dtb, g);
            dtemb.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        let da1 = self
            .conv1
            .backward(p, &cache.c1, &dh, grads.as_deref_mut(), true)
            .expect("dx");
        let mut dx = nn::silu_backward(&cache.x, &da1);
        match (&self.skip, &cache.skip) {
            (Some(s), Some(sc)) => {
                let d = s.backward(p, sc, dout, grads, true).expect("dx");
                dx.add_assign(&d);
            }
            _ => dx.add_assign(dout),
        }
        dx
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UNetLayout {
    temb1: Dense,
    temb2: Dense,
    input: Conv2d,
    down1: ResBlock,
    down2: ResBlock,
    mid: ResBlock,
    up2: ResBlock,
    up1: ResBlock,
    output: Conv2d,
}

/// Intermediate state of one forward pass, enough for a backward pass.
pub struct DenoiserTape {
    temb_pre: Vec<f64>,
    temb_act: Vec<f64>,
    temb0: Vec<f64>,
    c_in: ConvCache,
    r_d1: ResCache,
    r_d2: ResCache,
    r_mid: ResCache,
    r_u2: ResCache,
    r_u1: ResCache,
    out_pre: ImageGrid,
    c_out: ConvCache,
    skip_widths: (usize, usize),
}

/// An epsilon-prediction network.
pub trait NoisePredictor: Send + Sync {
    type Tape;

    fn predict(&self, x: &ImageGrid, t: usize) -> ImageGrid;

    fn predict_taped(&self, x: &ImageGrid, t: usize) -> (ImageGrid, Self::Tape);

    /// Vector-Jacobian product of the prediction with respect to its input.
    fn pullback(&self, tape: &Self::Tape, d_eps: &ImageGrid) -> ImageGrid;
}

/// The U-shaped denoiser: three resolutions, residual blocks, skip
/// concatenation and a sinusoidal timestep embedding.
#[derive(Debug, Clone)]
pub struct Denoiser {
    arch: DenoiserArch,
    layout: UNetLayout,
    params: Vec<f64>,
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, seed: u64) -> Self {
        let mut r = rng::stream(&[seed, 0xde_01]);
        let mut pb = ParamBuilder::new(&mut r);
        let (c, w, e) = (arch.channels, arch.base_width, arch.temb_dim);
        let layout = UNetLayout {
            temb1: Dense::new(&mut pb, e, e),
            temb2: Dense::new(&mut pb, e, e),
            input: Conv2d::new(&mut pb, c, w, 3, 1),
            down1: ResBlock::new(&mut pb, w, w, e),
            down2: ResBlock::new(&mut pb, w, 2 * w, e),
            mid: ResBlock::new(&mut pb, 2 * w, 2 * w, e),
            up2: ResBlock::new(&mut pb, 4 * w, 2 * w, e),
            up1: ResBlock::new(&mut pb, 3 * w, w, e),
            output: Conv2d::with_gain(&mut pb, w, c, 3, 1, 0.0),
        };
        Self {
            arch,
            layout,
            params: pb.finish(),
        }
    }

    pub fn from_params(arch: DenoiserArch, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(arch, 0);
        if params.len() != m.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} denoiser parameters, found {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn arch(&self) -> DenoiserArch {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &ImageGrid) {
        assert_eq!(x.channels(), self.arch.channels, "denoiser channel count");
        assert!(
            x.height() % 4 == 0 && x.width() % 4 == 0,
            "denoiser input sides must be multiples of 4"
        );
    }

    fn forward(&self, x: &ImageGrid, t: usize) -> (ImageGrid, DenoiserTape) {
        self.check_input(x);
        let p = &self.params;
        let l = &self.layout;
        let temb0 = nn::timestep_embedding(t, self.arch.temb_dim);
        let temb_pre = l.temb1.forward(p, &temb0);
        let temb_act = l.temb2.forward(p, &nn::silu_vec(&temb_pre));
        let temb = nn::silu_vec(&temb_act);

        let (h0, c_in) = l.input.forward(p, x);
        let (s1, r_d1) = l.down1.forward(p, &h0, &temb);
        let (s2, r_d2) = l.down2.forward(p, &nn::avg_pool2(&s1), &temb);
        let (m, r_mid) = l.mid.forward(p, &nn::avg_pool2(&s2), &temb);
        let (u2, r_u2) = l.up2.forward(p, &nn::upsample2(&m).concat_channels(&s2), &temb);
        let (u1, r_u1) = l.up1.forward(p, &nn::upsample2(&u2).concat_channels(&s1), &temb);
        let out_pre = u1;
        let (eps, c_out) = l.output.forward(p, &nn::silu(&out_pre));
        (
            eps,
            DenoiserTape {
                temb_pre,
                temb_act,
                temb0,
                c_in,
                r_d1,
                r_d2,
                r_mid,
                r_u2,
                r_u1,
                out_pre,
                c_out,
                skip_widths: (s1.channels(), s2.channels()),
            },
        )
    }

    /// Backward pass. Parameter gradients accumulate into `grads` when given;
    /// the input gradient is returned when `need_dx`.
    fn backward(
        &self,
        tape: &DenoiserTape,
        d_eps: &ImageGrid,
        mut grads: Option<&mut [f64]>,
        need_dx: bool,
    ) -> Option<ImageGrid> {
        let p = &self.params;
        let l = &self.layout;
        let temb = nn::silu_vec(&tape.temb_act);
        let mut dtemb = vec![0.0; temb.len()];
        let (w1, w2) = tape.skip_widths;

        let d = l
            .output
            .backward(p, &tape.c_out, d_eps, grads.as_deref_mut(), true)
            .expect("dx");
        let du1 = nn::silu_backward(&tape.out_pre, &d);
        let d = l.up1.backward(p, &tape.r_u1, &du1, grads.as_deref_mut(), &temb, &mut dtemb);
        let u2_ch = d.channels() - w1;
        let (d_up, mut ds1) = d.split_channels(u2_ch);
        let du2 = nn::upsample2_backward(&d_up);
        let d = l.up2.backward(p, &tape.r_u2, &du2, grads.as_deref_mut(), &temb, &mut dtemb);
        let m_ch = d.channels() - w2;
        let (d_up, mut ds2) = d.split_channels(m_ch);
        let dm = nn::upsample2_backward(&d_up);
        let d = l.mid.backward(p, &tape.r_mid, &dm, grads.as_deref_mut(), &temb, &mut dtemb);
        ds2.add_assign(&nn::avg_pool2_backward(&d));
        let d = l.down2.backward(p, &tape.r_d2, &ds2, grads.as_deref_mut(), &temb, &mut dtemb);
        ds1.add_assign(&nn::avg_pool2_backward(&d));
        let dh0 = l.down1.backward(p, &tape.r_d1, &ds1, grads.as_deref_mut(), &temb, &mut dtemb);
        let dx = l.input.backward(p, &tape.c_in, &dh0, grads.as_deref_mut(), need_dx);

        if let Some(g) = grads {
            let d_act = nn::silu_vec_backward(&tape.temb_act, &dtemb);
            let a1 = nn::silu_vec(&tape.temb_pre);
            let d_a1 = l.temb2.backward(p, &a1, &d_act, g);
            let d_pre = nn::silu_vec_backward(&tape.temb_pre, &d_a1);
            l.temb1.backward(p, &tape.temb0, &d_pre, g);
        }
        dx
    }

    /// Regional noise-matching loss of one sample and its parameter gradient.
    pub fn sample_loss_grad(
        &self,
        x0: &ImageGrid,
        mask: &Mask,
        t: usize,
        eps: &ImageGrid,
        sched: &NoiseSchedule,
        norm: LossNormalization,
    ) -> Result<(f64, Vec<f64>)> {
        let x_t = sched.forward_diffuse(x0, t, eps)?;
        let (pred, tape) = self.forward(&x_t, t);
        let (loss, d_pred) = regional_loss_and_grad(eps, &pred, mask, norm)?;
        let mut grads = vec![0.0; self.params.len()];
        if mask.count_ones() < mask.height() * mask.width() {
            self.backward(&tape, &d_pred, Some(&mut grads), false);
        }
        Ok((loss, grads))
    }
}

impl NoisePredictor for Denoiser {
    type Tape = DenoiserTape;

    fn predict(&self, x: &ImageGrid, t: usize) -> ImageGrid {
        self.forward(x, t).0
    }

    fn predict_taped(&self, x: &ImageGrid, t: usize) -> (ImageGrid, DenoiserTape) {
        self.forward(x, t)
    }

    fn pullback(&self, tape: &DenoiserTape, d_eps: &ImageGrid) -> ImageGrid {
        self.backward(tape, d_eps, None, true).expect("dx")
    }
}

/// One training image with its ground-truth box mask.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Diffusion-space image in `[-1, 1]`.
    pub image: ImageGrid,
    pub gtb_mask: Mask,
}

impl TrainingSample {
    pub fn new(image: ImageGrid, gtb_mask: Mask) -> Result<Self> {
        if (gtb_mask.height(), gtb_mask.width()) != (image.height(), image.width()) {
            return Err(Error::ShapeMismatch {
                expected: image.shape(),
                got: (1, gtb_mask.height(), gtb_mask.width()),
            });
        }
        Ok(Self { image, gtb_mask })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub normalization: LossNormalization,
    /// Replace every mask with zeros, i.e. train a plain DDPM.
    pub ignore_masks: bool,
    /// Decay of the weight moving average that becomes the final model;
    /// 0 keeps the raw weights.
    pub ema_decay: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            normalization: LossNormalization::AllElements,
            ignore_masks: false,
            ema_decay: 0.999,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

/// Per-iteration mean batch loss.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean of the first / last `window` entries.
    pub fn head_tail_means(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let head = self.losses.iter().take(w).sum::<f64>() / w as f64;
        let tail = self.losses.iter().rev().take(w).sum::<f64>() / w as f64;
        (head, tail)
    }
}

/// Train a fresh denoiser.
pub fn train_bg_denoiser(
    dataset: &[TrainingSample],
    sched: &NoiseSchedule,
    arch: DenoiserArch,
    cfg: &DenoiserTrainConfig,
) -> Result<(Denoiser, TrainLog)> {
    let mut model = Denoiser::new(arch, cfg.seed);
    let log = continue_training(&mut model, dataset, sched, cfg, 0)?;
    Ok((model, log))
}

/// Run `cfg.iterations` more iterations, numbering them from `start_iter`.
pub fn continue_training(
    model: &mut Denoiser,
    dataset: &[TrainingSample],
    sched: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    start_iter: usize,
) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let n_params = model.params.len();
    let mut opt = Adam::new(n_params, cfg.learning_rate);
    let mut log = TrainLog::default();
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::InvalidArgument("ema_decay must be in [0, 1)".into()));
    }
    let mut ema = model.params.clone();
    let zero_mask = Mask::zeros(dataset[0].image.height(), dataset[0].image.width());
    for it in start_iter..start_iter + cfg.iterations {
        let results = cfg.execution.map_range(cfg.batch_size, |b| {
            use rand::Rng;
            let mut r = rng::stream(&[cfg.seed, it as u64, b as u64, 0xb9]);
            let s = &dataset[r.gen_range(0..dataset.len())];
            let t = r.gen_range(1..=sched.steps());
            let (c, h, w) = s.image.shape();
            let eps = rng::gaussian_grid(&mut r, c, h, w);
            let mask = if cfg.ignore_masks { &zero_mask } else { &s.gtb_mask };
            model.sample_loss_grad(&s.image, mask, t, &eps, sched, cfg.normalization)
        });
        let mut losses = Vec::with_capacity(cfg.batch_size);
        let mut grads = Vec::with_capacity(cfg.batch_size);
        for r in results {
            let (l, g) = r?;
            losses.push(l);
            grads.push(g);
        }
        let loss = losses.iter().sum::<f64>() / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("denoiser loss at iteration {it}")));
        }
        let mut g = par::sum_in_order(grads, n_params);
        let inv = 1.0 / cfg.batch_size as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        opt.update(&mut model.params, &g);
        let k = (it - start_iter) as f64;
        let w = 1.0 - cfg.ema_decay.min((1.0 + k) / (10.0 + k));
        ema.iter_mut().zip(&model.params).for_each(|(e, p)| *e += w * (p - *e));
        log.losses.push(loss);
        if it % 250 == 0 {
            log::debug!("denoiser iter {it}: loss {loss:.5}");
        }
    }
    if cfg.ema_decay > 0.0 {
        model.params = ema;
    }
    Ok(log)
}

/// One ancestral step `x_t -> x_{t-1}`.
pub fn denoise_step<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    x: &ImageGrid,
    t: usize,
    noise: &ImageGrid,
    opts: SamplerOptions,
) -> Result<ImageGrid> {
    let mut eps = model.predict(x, t);
    if opts.clip_x0 {
        eps = sched.clip_eps(x, &eps, t)?.0;
    }
    sched.reverse_step_scaled(x, &eps, t, noise, sched.noise_scale(t, opts.variance))
}

/// Plain ancestral sampling from pure noise (no region, no attack).
pub fn sample_unconditional<P: NoisePredictor>(
    model: &P,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
    seed: u64,
    opts: SamplerOptions,
) -> Result<ImageGrid> {
    let mut x = initial_noise(seed, shape);
    for t in (1..=sched.steps()).rev() {
        x = denoise_step(model, sched, &x, t, &step_noise(seed, t, shape), opts)?;
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("unconditional sample".into()));
    }
    Ok(x)
}

/// Starting sample `x_T` of a trajectory keyed by `seed`.
pub fn initial_noise(seed: u64, shape: (usize, usize, usize)) -> ImageGrid {
    let (c, h, w) = shape;
    rng::gaussian_grid(&mut rng::stream(&[seed, 0x1417]), c, h, w)
}

/// Reparameterization noise for step `t` of a trajectory keyed by `seed`;
/// zero at the final step.
pub fn step_noise(seed: u64, t: usize, shape: (usize, usize, usize)) -> ImageGrid {
    let (c, h, w) = shape;
    if t <= 1 {
        return ImageGrid::zeros(c, h, w);
    }
    rng::gaussian_grid(&mut rng::stream(&[seed, t as u64, 0x5eb]), c, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> DenoiserArch {
        DenoiserArch {
            channels: 3,
            base_width: 4,
            temb_dim: 8,
        }
    }

    #[test]
    fn mask_examples() {
        let m = mask_from_boxes(&[], 4, 4).unwrap();
        assert_eq!(m.count_ones(), 0);
        let m = mask_from_boxes(&[Rect::new(0, 0, 4, 4)], 4, 4).unwrap();
        assert_eq!(m.count_ones(), 16);
        let m = mask_from_boxes(&[Rect::new(1, 1, 3, 3)], 4, 4).unwrap();
        assert_eq!(m.count_ones(), 4);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert_eq!(m.get(y, x), 1);
        }
        assert!(mask_from_boxes(&[Rect::new(2, 1, 2, 3)], 4, 4).is_err());
        assert!(mask_from_boxes(&[Rect::new(0, 0, 5, 3)], 4, 4).is_err());
    }

    #[test]
    fn loss_examples() {
        let et = ImageGrid::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zeros = ImageGrid::zeros(1, 2, 2);
        let m = Mask::from_vec(2, 2, vec![1, 0, 0, 0]).unwrap();
        let l = regional_noise_matching_loss(&et, &zeros, &m, LossNormalization::AllElements).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        let l = regional_noise_matching_loss(&et, &zeros, &m, LossNormalization::BackgroundElements)
            .unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
        let ones = Mask::ones(2, 2);
        assert_eq!(
            regional_noise_matching_loss(&et, &zeros, &ones, LossNormalization::AllElements).unwrap(),
            0.0
        );
        assert_eq!(
            regional_noise_matching_loss(&et, &et, &m, LossNormalization::AllElements).unwrap(),
            0.0
        );
        assert!(Mask::from_vec(2, 2, vec![0, 2, 0, 0]).is_err());
    }

    #[test]
    fn loss_gradient_vanishes_inside_mask() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let et = rng::gaussian_grid(&mut r, 3, 5, 5);
        let ep = rng::gaussian_grid(&mut r, 3, 5, 5);
        let m = mask_from_boxes(&[Rect::new(1, 1, 4, 3)], 5, 5).unwrap();
        let (_, g) = regional_loss_and_grad(&et, &ep, &m, LossNormalization::AllElements).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..5 {
                    if m.get(y, x) == 1 {
                        assert_eq!(g.get(c, y, x), 0.0);
                    } else {
                        assert_ne!(g.get(c, y, x), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn denoiser_input_gradient_matches_finite_differences() {
        let model = {
            let mut m = Denoiser::new(tiny_arch(), 3);
            // perturb the zero-initialized output layer so the map is non-trivial
            let mut r = ChaCha8Rng::seed_from_u64(4);
            for p in m.params_mut().iter_mut() {
                if *p == 0.0 {
                    *p = r.gen_range(-0.1..0.1);
                }
            }
            m
        };
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = rng::gaussian_grid(&mut r, 3, 8, 8);
        let probe = rng::gaussian_grid(&mut r, 3, 8, 8);
        let t = 17;
        let f = |x: &ImageGrid| -> f64 {
            model
                .predict(x, t)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, tape) = model.predict_taped(&x, t);
        let g = model.pullback(&tape, &probe);
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-5;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-5;
            let fd = (f(&xp) - f(&xm)) / 2e-5;
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn denoiser_parameter_gradient_matches_finite_differences() {
        let mut model = Denoiser::new(tiny_arch(), 8);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        for p in model.params_mut().iter_mut() {
            if *p == 0.0 {
                *p = r.gen_range(-0.1..0.1);
            }
        }
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let x0 = rng::gaussian_grid(&mut r, 3, 8, 8).map(|v| v.tanh());
        let eps = rng::gaussian_grid(&mut r, 3, 8, 8);
        let mask = mask_from_boxes(&[Rect::new(2, 2, 5, 6)], 8, 8).unwrap();
        let norm = LossNormalization::AllElements;
        let (_, grads) = model.sample_loss_grad(&x0, &mask, 9, &eps, &sched, norm).unwrap();
        let n = model.params().len();
        for i in (0..n).step_by(n / 40) {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + 1e-6;
            let lp = model.sample_loss_grad(&x0, &mask, 9, &eps, &sched, norm).unwrap().0;
            model.params_mut()[i] = orig - 1e-6;
            let lm = model.sample_loss_grad(&x0, &mask, 9, &eps, &sched, norm).unwrap().0;
            model.params_mut()[i] = orig;
            let fd = (lp - lm) / 2e-6;
            assert!((fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn all_ones_masks_freeze_training() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<_> = (0..3)
            .map(|_| TrainingSample::new(rng::gaussian_grid(&mut r, 3, 8, 8), Mask::ones(8, 8)).unwrap())
            .collect();
        let cfg = DenoiserTrainConfig {
            iterations: 5,
            batch_size: 2,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let before = Denoiser::new(tiny_arch(), cfg.seed);
        let (after, log) = train_bg_denoiser(&data, &sched, tiny_arch(), &cfg).unwrap();
        assert_eq!(before.params(), after.params());
        assert!(log.losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn rejects_empty_dataset() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        assert!(train_bg_denoiser(&[], &sched, tiny_arch(), &Default::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_is_blind_to_masked_pixels(seed in any::<u64>(), bx in 0usize..5, by in 0usize..5) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let et = rng::gaussian_grid(&mut r, 2, 6, 6);
            let ep = rng::gaussian_grid(&mut r, 2, 6, 6);
            let m = mask_from_boxes(&[Rect::new(bx, by, bx + 2, by + 1)], 6, 6).unwrap();
            let base = regional_noise_matching_loss(&et, &ep, &m, LossNormalization::AllElements).unwrap();
            prop_assert!(base >= 0.0);
            let mut ep2 = ep.clone();
            let mut et2 = et.clone();
            for c in 0..2 {
                ep2.set(c, by, bx, r.gen_range(-9.0..9.0));
                et2.set(c, by, bx + 1, r.gen_range(-9.0..9.0));
            }
            let moved = regional_noise_matching_loss(&et2, &ep2, &m, LossNormalization::AllElements).unwrap();
            prop_assert_eq!(base.to_bits(), moved.to_bits());
        }
    }
}
