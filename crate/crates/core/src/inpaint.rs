//! Attack-and-inpaint synthesis of negative samples inside a chosen region.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack_step, AttackConfig, AttackState, StepContext, StepTrace};
use crate::data::{Fold, FoldSplit, RgbImage};
use crate::denoiser::{initial_noise, step_noise, NoisePredictor};
use crate::detector::{Detection, Detector, IllusoryBox};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask, Rect};
use crate::par::Execution;
use crate::rng;
use crate::schedule::{NoiseSchedule, SamplerOptions};

/// `(1 - m_b) * x_t_real + m_b * (x_t + eta)`, selected per pixel.
pub fn compose_step_input(x_t_real: &ImageGrid, x_t: &ImageGrid, eta: &ImageGrid, m_b: &Mask) -> Result<ImageGrid> {
    x_t_real.check_same_shape(x_t)?;
    x_t_real.check_same_shape(eta)?;
    if (m_b.height(), m_b.width()) != (x_t.height(), x_t.width()) {
        return Err(Error::ShapeMismatch {
            expected: x_t.shape(),
            got: (x_t.channels(), m_b.height(), m_b.width()),
        });
    }
    Ok(ImageGrid::from_fn(x_t.channels(), x_t.height(), x_t.width(), |c, y, x| {
        if m_b.get(y, x) == 1 {
            x_t.get(c, y, x) + eta.get(c, y, x)
        } else {
            x_t_real.get(c, y, x)
        }
    }))
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub region: IllusoryBox,
    pub attack: AttackConfig,
    pub seed: u64,
    /// Copy the source back outside the region after the last step.
    pub final_paste: bool,
    pub sampler: SamplerOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMeta {
    pub source_id: String,
    #[serde(rename = "box")]
    pub region: [usize; 4],
    pub alpha: f64,
    pub seed: u64,
    pub final_l_det: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisRecord {
    /// Diffusion-space output `x_0`.
    pub output: ImageGrid,
    pub source_id: String,
    pub region: Rect,
    pub alpha: f64,
    pub seed: u64,
    pub trace: Vec<StepTrace>,
    /// Post-hoc detections on the quantized output.
    pub verdict: Vec<Detection>,
    /// Fold whose data trained the denoiser that produced this record.
    pub generator_fold: Option<Fold>,
}

impl SynthesisRecord {
    pub fn image(&self) -> RgbImage {
        RgbImage::from_diffusion_grid(&self.output)
    }

    pub fn final_l_det(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |s| s.loss_after)
    }

    pub fn meta(&self) -> SynthesisMeta {
        SynthesisMeta {
            source_id: self.source_id.clone(),
            region: self.region.to_array(),
            alpha: self.alpha,
            seed: self.seed,
            final_l_det: self.final_l_det(),
        }
    }
}

/// Run the full reverse trajectory with the region attacked and inpainted and
/// the rest following the source's re-noised trajectory.
pub fn synthesize_false_positive<P: NoisePredictor, D: Detector + ?Sized>(
    x_real: &ImageGrid,
    source_id: &str,
    cfg: &SynthesisConfig,
    denoiser: &P,
    detector: &D,
    sched: &NoiseSchedule,
) -> Result<SynthesisRecord> {
    cfg.attack.validate()?;
    let shape = x_real.shape();
    let rect = cfg.region.rect();
    if rect.area() == 0 || (cfg.region.mask().height(), cfg.region.mask().width()) != (shape.1, shape.2) {
        return Err(Error::InvalidBox {
            rect: rect.to_array().map(|v| v as i64),
            width: shape.2,
            height: shape.1,
        });
    }
    let m_b = cfg.region.mask();
    let zeros = ImageGrid::zeros(shape.0, shape.1, shape.2);
    let mut state = AttackState::new(shape);
    let mut x = initial_noise(cfg.seed, shape);
    for t in (1..=sched.steps()).rev() {
        let real_noise = rng::gaussian_grid(&mut rng::stream(&[cfg.seed, t as u64, 0x2ea1]), shape.0, shape.1, shape.2);
        let x_t_real = sched.forward_diffuse(x_real, t, &real_noise)?;
        let base = compose_step_input(&x_t_real, &x, &zeros, m_b)?;
        let eps_fixed = step_noise(cfg.seed, t, shape);
        let ctx = StepContext {
            denoiser,
            detector,
            sched,
            region: &cfg.region,
            t,
            eps_fixed: &eps_fixed,
            sampler: cfg.sampler,
        };
        x = run_attack_step(&ctx, &base, &mut state, &cfg.attack)?;
    }
    if cfg.final_paste {
        x = compose_step_input(x_real, &x, &zeros, m_b)?;
    }
    let quantized = RgbImage::from_diffusion_grid(&x).to_unit_grid();
    Ok(SynthesisRecord {
        verdict: detector.predict(&quantized),
        output: x,
        source_id: source_id.to_string(),
        region: rect,
        alpha: cfg.attack.alpha,
        seed: cfg.seed,
        trace: state.step_losses,
        generator_fold: None,
    })
}

/// Random region sampler: each side uniform in `[min_frac, max_frac]` of the
/// image side, rejection-sampled to zero overlap with ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionSampler {
    pub min_frac: f64,
    pub max_frac: f64,
    pub max_tries: usize,
}

impl Default for RegionSampler {
    fn default() -> Self {
        Self {
            min_frac: 0.15,
            max_frac: 0.40,
            max_tries: 100,
        }
    }
}

fn intersects(a: &Rect, b: &Rect) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

impl RegionSampler {
    pub fn sample<R: Rng>(&self, r: &mut R, height: usize, width: usize, gts: &[Rect]) -> Option<Rect> {
        let side = |r: &mut R, n: usize| {
            let lo = ((self.min_frac * n as f64).round() as usize).max(1);
            let hi = ((self.max_frac * n as f64).round() as usize).clamp(lo, n);
            r.gen_range(lo..=hi)
        };
        for _ in 0..self.max_tries {
            let w = side(r, width);
            let h = side(r, height);
            let x1 = r.gen_range(0..=width - w);
            let y1 = r.gen_range(0..=height - h);
            let cand = Rect::new(x1, y1, x1 + w, y1 + h);
            if !gts.iter().any(|g| intersects(g, &cand)) {
                return Some(cand);
            }
        }
        None
    }
}

/// One image queued for synthesis.
#[derive(Debug, Clone, Copy)]
pub struct SynthesisJob<'a> {
    pub id: &'a str,
    /// Diffusion-space source.
    pub image: &'a ImageGrid,
    pub gt: &'a [Rect],
    /// Explicit region; sampled when absent.
    pub region: Option<Rect>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchConfig {
    pub attack: AttackConfig,
    pub sampler: RegionSampler,
    pub seed: u64,
    pub final_paste: bool,
    pub sampling: SamplerOptions,
    pub execution: Execution,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            sampler: RegionSampler::default(),
            seed: 0,
            final_paste: true,
            sampling: SamplerOptions::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchResult {
    pub records: Vec<SynthesisRecord>,
    pub failures: Vec<SynthesisFailure>,
}

impl BatchResult {
    pub fn attempted(&self) -> usize {
        self.records.len() + self.failures.len()
    }
}

/// Per-image seed, independent of processing order.
pub fn job_seed(global: u64, id: &str) -> u64 {
    rng::derive_seed(&[global, rng::id_key(id)])
}

fn run_job<P: NoisePredictor, D: Detector + ?Sized>(
    job: &SynthesisJob<'_>,
    cfg: &BatchConfig,
    denoiser: &P,
    detector: &D,
    sched: &NoiseSchedule,
) -> std::result::Result<SynthesisRecord, String> {
    let seed = job_seed(cfg.seed, job.id);
    let (h, w) = (job.image.height(), job.image.width());
    let rect = match job.region {
        Some(r) => r,
        None => cfg
            .sampler
            .sample(&mut rng::stream(&[seed, 0x7e91]), h, w, job.gt)
            .ok_or_else(|| format!("no region disjoint from ground truth after {} tries", cfg.sampler.max_tries))?,
    };
    if job.gt.iter().any(|g| intersects(g, &rect)) {
        return Err(format!("region {:?} overlaps ground truth", rect.to_array()));
    }
    let region = IllusoryBox::new(rect, h, w).map_err(|e| e.to_string())?;
    let scfg = SynthesisConfig {
        region,
        attack: cfg.attack,
        seed,
        final_paste: cfg.final_paste,
        sampler: cfg.sampling,
    };
    synthesize_false_positive(job.image, job.id, &scfg, denoiser, detector, sched).map_err(|e| e.to_string())
}

/// Synthesize one record per job; per-item failures are logged and returned.
pub fn batch_synthesize<P: NoisePredictor, D: Detector + ?Sized>(
    jobs: &[SynthesisJob<'_>],
    cfg: &BatchConfig,
    denoiser: &P,
    detector: &D,
    sched: &NoiseSchedule,
) -> BatchResult {
    let outcomes = cfg
        .execution
        .map(jobs, |_, job| run_job(job, cfg, denoiser, detector, sched));
    let mut out = BatchResult::default();
    for (job, o) in jobs.iter().zip(outcomes) {
        match o {
            Ok(r) => out.records.push(r),
            Err(reason) => {
                log::warn!("synthesis of {} skipped: {reason}", job.id);
                out.failures.push(SynthesisFailure {
                    id: job.id.to_string(),
                    reason,
                });
            }
        }
    }
    out
}

/// Denoisers from the two-fold protocol, keyed by the fold they trained on.
pub struct FoldModels<'a, P> {
    pub trained_on_a: &'a P,
    pub trained_on_b: &'a P,
}

/// Two-fold cross-augmentation: each job is synthesized by the denoiser
/// trained on the other fold. Jobs outside the split are failures.
pub fn cross_fold_synthesize<P: NoisePredictor, D: Detector + ?Sized>(
    jobs: &[SynthesisJob<'_>],
    split: &FoldSplit,
    models: &FoldModels<'_, P>,
    cfg: &BatchConfig,
    detector: &D,
    sched: &NoiseSchedule,
) -> BatchResult {
    let mut by_fold: BTreeMap<Fold, Vec<(usize, SynthesisJob<'_>)>> = BTreeMap::new();
    let mut failures = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        match split.fold_of(job.id) {
            Some(f) => by_fold.entry(f).or_default().push((i, *job)),
            None => failures.push((
                i,
                SynthesisFailure {
                    id: job.id.to_string(),
                    reason: "image belongs to neither fold".into(),
                },
            )),
        }
    }
    let mut records: Vec<(usize, SynthesisRecord)> = Vec::new();
    for (fold, items) in by_fold {
        let generator = fold.other();
        let model = match generator {
            Fold::A => models.trained_on_a,
            Fold::B => models.trained_on_b,
        };
        let js: Vec<SynthesisJob<'_>> = items.iter().map(|(_, j)| *j).collect();
        let res = batch_synthesize(&js, cfg, model, detector, sched);
        let mut rec_iter = res.records.into_iter();
        let failed: std::collections::HashSet<String> = res.failures.iter().map(|f| f.id.clone()).collect();
        for (idx, j) in &items {
            if !failed.contains(j.id) {
                let mut r = rec_iter.next().expect("record per success");
                r.generator_fold = Some(generator);
                records.push((*idx, r));
            }
        }
        for f in res.failures {
            let idx = items.iter().find(|(_, j)| j.id == f.id).map_or(usize::MAX, |(i, _)| *i);
            failures.push((idx, f));
        }
    }
    records.sort_by_key(|(i, _)| *i);
    failures.sort_by_key(|(i, _)| *i);
    BatchResult {
        records: records.into_iter().map(|(_, r)| r).collect(),
        failures: failures.into_iter().map(|(_, f)| f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{sample_unconditional, Denoiser, DenoiserArch};
    use crate::detector::{ToyDetector, ToyDetectorArch};
    use crate::schedule::ScheduleConfig;

    fn models() -> (Denoiser, ToyDetector, NoiseSchedule) {
        let mut den = Denoiser::new(
            DenoiserArch {
                channels: 3,
                base_width: 4,
                temb_dim: 8,
            },
            1,
        );
        let mut r = rng::stream(&[4]);
        for p in den.params_mut() {
            *p += 0.03 * r.gen_range(-1.0..1.0);
        }
        let mut arch = ToyDetectorArch::for_size(16);
        arch.width = 4;
        (den, ToyDetector::new(arch, 2), ScheduleConfig::rescaled(8).build().unwrap())
    }

    fn source() -> ImageGrid {
        let img = RgbImage {
            width: 16,
            height: 16,
            data: (0..16 * 16 * 3).map(|i| (i * 37 % 251) as u8).collect(),
        };
        img.to_diffusion_grid()
    }

    #[test]
    fn compose_examples() {
        let real = ImageGrid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gen = ImageGrid::from_vec(1, 2, 2, vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let eta = ImageGrid::from_vec(1, 2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let zero = ImageGrid::zeros(1, 2, 2);
        assert_eq!(compose_step_input(&real, &gen, &eta, &Mask::zeros(2, 2)).unwrap(), real);
        assert_eq!(compose_step_input(&real, &gen, &zero, &Mask::ones(2, 2)).unwrap(), gen);
        let m = Mask::from_vec(2, 2, vec![1, 0, 0, 1]).unwrap();
        let out = compose_step_input(&real, &gen, &eta, &m).unwrap();
        assert_eq!(out.data(), &[10.5, 2.0, 3.0, 40.5]);
        assert!(compose_step_input(&real, &gen, &eta, &Mask::zeros(3, 2)).is_err());
    }

    #[test]
    fn context_is_preserved_and_runs_are_deterministic() {
        let (den, det, sched) = models();
        let x = source();
        let rect = Rect::new(3, 4, 9, 12);
        for alpha in [0.0, 0.003] {
            let cfg = SynthesisConfig {
                region: IllusoryBox::new(rect, 16, 16).unwrap(),
                attack: AttackConfig {
                    alpha,
                    ..Default::default()
                },
                seed: 5,
                final_paste: true,
                sampler: SamplerOptions::default(),
            };
            let rec = synthesize_false_positive(&x, "s", &cfg, &den, &det, &sched).unwrap();
            for c in 0..3 {
                for y in 0..16 {
                    for xx in 0..16 {
                        if !rect.contains(xx, y) {
                            assert_eq!(rec.output.get(c, y, xx).to_bits(), x.get(c, y, xx).to_bits());
                        }
                    }
                }
            }
            assert_eq!(rec.trace.len(), 8);
            let again = synthesize_false_positive(&x, "s", &cfg, &den, &det, &sched).unwrap();
            assert_eq!(rec.output, again.output);
            let meta = serde_json::to_value(rec.meta()).unwrap();
            assert_eq!(meta["box"], serde_json::json!([3, 4, 9, 12]));
        }
    }

    #[test]
    fn full_mask_without_attack_is_unconditional_sampling() {
        let (den, det, sched) = models();
        let cfg = SynthesisConfig {
            region: IllusoryBox::new(Rect::new(0, 0, 16, 16), 16, 16).unwrap(),
            attack: AttackConfig {
                alpha: 0.0,
                ..Default::default()
            },
            seed: 13,
            final_paste: true,
            sampler: SamplerOptions::default(),
        };
        for opts in [SamplerOptions::PLAIN, SamplerOptions::default()] {
            let cfg = SynthesisConfig {
                sampler: opts,
                ..cfg.clone()
            };
            let rec = synthesize_false_positive(&source(), "s", &cfg, &den, &det, &sched).unwrap();
            let plain = sample_unconditional(&den, &sched, (3, 16, 16), 13, opts).unwrap();
            assert_eq!(rec.output, plain);
        }
    }

    #[test]
    fn sampler_respects_ground_truth() {
        let s = RegionSampler::default();
        let gts = [Rect::new(0, 0, 20, 20), Rect::new(40, 40, 64, 64)];
        let mut r = rng::stream(&[1]);
        for _ in 0..200 {
            let b = s.sample(&mut r, 64, 64, &gts).unwrap();
            assert!(gts.iter().all(|g| !intersects(g, &b)));
            assert!((10..=26).contains(&b.width()) && (10..=26).contains(&b.height()));
            b.validate(64, 64).unwrap();
        }
        assert!(s.sample(&mut r, 16, 16, &[Rect::new(0, 0, 16, 16)]).is_none());
    }

    #[test]
    fn batch_accounting_and_order_independence() {
        let (den, det, sched) = models();
        let x = source();
        let full = [Rect::new(0, 0, 16, 16)];
        let jobs = vec![
            SynthesisJob { id: "a", image: &x, gt: &[], region: None },
            SynthesisJob { id: "b", image: &x, gt: &full, region: None },
            SynthesisJob { id: "c", image: &x, gt: &[], region: Some(Rect::new(2, 2, 6, 6)) },
        ];
        let cfg = BatchConfig {
            seed: 3,
            ..Default::default()
        };
        let res = batch_synthesize(&jobs, &cfg, &den, &det, &sched);
        assert_eq!(res.attempted(), 3);
        assert_eq!(res.failures.len(), 1);
        assert_eq!(res.failures[0].id, "b");
        let seq = batch_synthesize(
            &jobs,
            &BatchConfig {
                execution: Execution::Sequential,
                ..cfg
            },
            &den,
            &det,
            &sched,
        );
        let solo = batch_synthesize(&jobs[2..], &cfg, &den, &det, &sched);
        assert_eq!(res.records[1].output, seq.records[1].output);
        assert_eq!(res.records[1].output, solo.records[0].output);
    }

    #[test]
    fn cross_fold_uses_the_other_model() {
        let (den_a, det, sched) = models();
        let mut den_b = den_a.clone();
        den_b.params_mut()[0] += 1.0;
        let x = source();
        let ids: Vec<String> = (0..4).map(|i| format!("i{i}")).collect();
        let split = FoldSplit {
            fold_a: ids[..2].to_vec(),
            fold_b: ids[2..].to_vec(),
        };
        let jobs: Vec<SynthesisJob<'_>> = ids
            .iter()
            .map(|id| SynthesisJob { id, image: &x, gt: &[], region: None })
            .chain(std::iter::once(SynthesisJob { id: "stray", image: &x, gt: &[], region: None }))
            .collect();
        let cfg = BatchConfig::default();
        let res = cross_fold_synthesize(
            &jobs,
            &split,
            &FoldModels {
                trained_on_a: &den_a,
                trained_on_b: &den_b,
            },
            &cfg,
            &det,
            &sched,
        );
        assert_eq!(res.records.len(), 4);
        assert_eq!(res.failures.len(), 1);
        for r in &res.records {
            let own = split.fold_of(&r.source_id).unwrap();
            assert_eq!(r.generator_fold, Some(own.other()));
        }
        let direct = batch_synthesize(&jobs[..1], &cfg, &den_b, &det, &sched);
        assert_eq!(res.records[0].output, direct.records[0].output);
    }
}
