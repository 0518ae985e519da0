//! Toy-benchmark workflows: dataset, two-fold denoisers, detector training,
//! negative synthesis, alpha sweeps and retraining studies.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{
    generate_toy_dataset, load_dataset, save_dataset, select, split_dir, train_val_test_split, two_fold_split,
    AnnotatedImage, DatasetMeta, Fold, FoldSplit, ToySpec,
};
use crate::denoiser::{
    mask_from_boxes, sample_unconditional, train_bg_denoiser, Denoiser, DenoiserArch, DenoiserTrainConfig,
    TrainingSample,
};
use crate::detector::{train_detector, Detection, Detector, DetectorTrainConfig, ToyDetector, ToyDetectorArch};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Rect};
use crate::inpaint::{
    batch_synthesize, cross_fold_synthesize, BatchConfig, BatchResult, FoldModels, SynthesisJob, SynthesisMeta,
};
use crate::metrics::{compute_fid, evaluate_detections, fpgr_from_hits, is_false_positive_hit, EvalReport, FpgrRegion};
use crate::par::Execution;
use crate::rng;
use crate::schedule::{SamplerOptions, ScheduleConfig};

/// Everything that defines a toy-benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub n_images: usize,
    pub data_seed: u64,
    pub toy: ToySpec,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerOptions,
    pub denoiser_arch: DenoiserArch,
    pub denoiser_train: DenoiserTrainConfig,
    pub detector_width: usize,
    pub detector_train: DetectorTrainConfig,
    /// IoU for matching detections to ground truth.
    pub iou_thresh: f64,
    /// Detections below this score are ignored by every metric.
    pub score_thresh: f64,
    pub fpgr_region: FpgrRegion,
    pub execution: Execution,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_images: 600,
            data_seed: 1,
            toy: ToySpec {
                size: 32,
                ..ToySpec::default()
            },
            schedule: ScheduleConfig::rescaled(50),
            sampler: SamplerOptions::default(),
            denoiser_arch: DenoiserArch {
                channels: 3,
                base_width: 8,
                temb_dim: 32,
            },
            denoiser_train: DenoiserTrainConfig {
                iterations: 6000,
                learning_rate: 1e-3,
                seed: 1,
                ..DenoiserTrainConfig::default()
            },
            detector_width: 8,
            detector_train: DetectorTrainConfig::default(),
            iou_thresh: 0.5,
            score_thresh: 0.5,
            fpgr_region: FpgrRegion::default(),
            execution: Execution::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn detector_arch(&self) -> ToyDetectorArch {
        ToyDetectorArch {
            width: self.detector_width,
            score_thresh: self.score_thresh,
            ..ToyDetectorArch::for_size(self.toy.size)
        }
    }
}

/// A dataset with its 8:1:1 split and the two-fold split of the training part.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub items: Vec<AnnotatedImage>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub folds: FoldSplit,
}

impl Benchmark {
    pub fn generate(cfg: &BenchmarkConfig) -> Result<Self> {
        Self::from_items(generate_toy_dataset(cfg.n_images, cfg.data_seed, &cfg.toy)?, cfg.data_seed)
    }

    pub fn from_items(items: Vec<AnnotatedImage>, seed: u64) -> Result<Self> {
        let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
        let (train_ids, val_ids, test_ids) = train_val_test_split(&ids, seed)?;
        let folds = two_fold_split(&train_ids, seed)?;
        Ok(Self {
            items,
            train_ids,
            val_ids,
            test_ids,
            folds,
        })
    }

    pub fn train(&self) -> Vec<&AnnotatedImage> {
        select(&self.items, &self.train_ids)
    }

    pub fn test(&self) -> Vec<&AnnotatedImage> {
        select(&self.items, &self.test_ids)
    }

    pub fn fold(&self, fold: Fold) -> Vec<&AnnotatedImage> {
        select(&self.items, self.folds.ids(fold))
    }
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Write `root/{train,val,test}/`, `root/folds.json` and, if given, `root/meta.json`.
pub fn save_benchmark(root: &Path, bench: &Benchmark, meta: Option<&DatasetMeta>) -> Result<()> {
    for (name, ids) in SPLITS.iter().zip([&bench.train_ids, &bench.val_ids, &bench.test_ids]) {
        let items: Vec<AnnotatedImage> = select(&bench.items, ids).into_iter().cloned().collect();
        save_dataset(&split_dir(root, name), &items, None)?;
    }
    fs::write(root.join("folds.json"), serde_json::to_string_pretty(&bench.folds)? + "\n")?;
    if let Some(m) = meta {
        fs::write(root.join("meta.json"), serde_json::to_string_pretty(m)? + "\n")?;
    }
    Ok(())
}

pub fn load_benchmark(root: &Path) -> Result<Benchmark> {
    let mut items = Vec::new();
    let mut ids: Vec<Vec<String>> = Vec::new();
    for name in SPLITS {
        let dir = split_dir(root, name);
        if !dir.join("annotations.txt").is_file() {
            return Err(Error::MissingImage(dir.join("annotations.txt")));
        }
        let part = load_dataset(&dir)?;
        ids.push(part.iter().map(|i| i.id.clone()).collect());
        items.extend(part);
    }
    let folds_path = root.join("folds.json");
    let text = fs::read_to_string(&folds_path).map_err(|e| Error::Annotation {
        path: folds_path.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    let folds: FoldSplit = serde_json::from_str(&text)?;
    let test_ids = ids.pop().unwrap_or_default();
    let val_ids = ids.pop().unwrap_or_default();
    let train_ids = ids.pop().unwrap_or_default();
    if let Some(id) = folds.fold_a.iter().chain(&folds.fold_b).find(|id| !train_ids.contains(id)) {
        return Err(Error::InvalidArgument(format!("fold id {id} is not in the training split")));
    }
    Ok(Benchmark {
        items,
        train_ids,
        val_ids,
        test_ids,
        folds,
    })
}

/// Write synthesized images, annotated with their sources' boxes, plus `records.jsonl`.
pub fn save_synthesis(dir: &Path, batch: &BatchResult, sources: &[&AnnotatedImage]) -> Result<()> {
    let items: Vec<AnnotatedImage> = batch
        .records
        .iter()
        .map(|r| {
            let boxes = sources
                .iter()
                .find(|s| s.id == r.source_id)
                .map(|s| s.boxes.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("no source image {}", r.source_id)))?;
            Ok(AnnotatedImage {
                id: r.source_id.clone(),
                image: r.image(),
                boxes,
            })
        })
        .collect::<Result<_>>()?;
    save_dataset(dir, &items, None)?;
    let mut lines = String::new();
    for r in &batch.records {
        lines.push_str(&serde_json::to_string(&SavedRecord {
            meta: r.meta(),
            generator_fold: r.generator_fold,
        })?);
        lines.push('\n');
    }
    fs::write(dir.join("records.jsonl"), lines)?;
    let mut fails = String::new();
    for f in &batch.failures {
        fails.push_str(&format!("{}\t{}\n", f.id, f.reason));
    }
    fs::write(dir.join("failures.txt"), fails)?;
    Ok(())
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedRecord {
    #[serde(flatten)]
    pub meta: SynthesisMeta,
    pub generator_fold: Option<Fold>,
}

/// Synthesized images with their metadata, in `records.jsonl` order.
pub fn load_synthesis(dir: &Path) -> Result<Vec<(SavedRecord, AnnotatedImage)>> {
    let path = dir.join("records.jsonl");
    let text = fs::read_to_string(&path)?;
    let mut images: BTreeMap<String, AnnotatedImage> =
        load_dataset(dir)?.into_iter().map(|i| (i.id.clone(), i)).collect();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: SavedRecord = serde_json::from_str(l).map_err(|e| Error::Annotation {
                path: path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let img = images
                .remove(&rec.meta.source_id)
                .ok_or_else(|| Error::MissingImage(dir.join("images").join(&rec.meta.source_id)))?;
            Ok((rec, img))
        })
        .collect()
}

/// `[0, 1]` images paired with their boxes, as the detector trainer expects.
pub fn detector_set(items: &[&AnnotatedImage]) -> Vec<(ImageGrid, Vec<Rect>)> {
    items.iter().map(|i| (i.image.to_unit_grid(), i.boxes.clone())).collect()
}

pub fn denoiser_set(items: &[&AnnotatedImage]) -> Result<Vec<TrainingSample>> {
    items
        .iter()
        .map(|i| {
            let m = mask_from_boxes(&i.boxes, i.image.height as usize, i.image.width as usize)?;
            TrainingSample::new(i.image.to_diffusion_grid(), m)
        })
        .collect()
}

pub fn train_denoiser_on(cfg: &BenchmarkConfig, items: &[&AnnotatedImage], ignore_masks: bool) -> Result<Denoiser> {
    let sched = cfg.schedule.build()?;
    let tcfg = DenoiserTrainConfig {
        ignore_masks,
        execution: cfg.execution,
        ..cfg.denoiser_train.clone()
    };
    let (model, log) = train_bg_denoiser(&denoiser_set(items)?, &sched, cfg.denoiser_arch, &tcfg)?;
    let (head, tail) = log.head_tail_means(100);
    log::info!("denoiser trained on {} images: loss {head:.4} -> {tail:.4}", items.len());
    Ok(model)
}

/// Background denoisers trained on fold A and on fold B.
pub fn train_fold_denoisers(cfg: &BenchmarkConfig, bench: &Benchmark) -> Result<(Denoiser, Denoiser)> {
    let a = train_denoiser_on(cfg, &bench.fold(Fold::A), false)?;
    let b = train_denoiser_on(cfg, &bench.fold(Fold::B), false)?;
    Ok((a, b))
}

pub fn train_detector_on(cfg: &BenchmarkConfig, set: &[(ImageGrid, Vec<Rect>)], seed: u64) -> Result<ToyDetector> {
    let tcfg = DetectorTrainConfig {
        seed,
        execution: cfg.execution,
        ..cfg.detector_train.clone()
    };
    let (det, log) = train_detector(set, cfg.detector_arch(), &tcfg)?;
    if log.epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("detector training loss".into()));
    }
    Ok(det)
}

pub fn evaluate_on<D: Detector + ?Sized>(cfg: &BenchmarkConfig, det: &D, items: &[&AnnotatedImage]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let preds: Vec<Vec<Detection>> = cfg.execution.map(items, |_, i| det.predict(&i.image.to_unit_grid()));
    let gts: Vec<Vec<Rect>> = items.iter().map(|i| i.boxes.clone()).collect();
    evaluate_detections(&preds, &gts, cfg.iou_thresh, cfg.score_thresh)
}

/// Synthesis jobs borrow their images, so the grids live here.
pub struct JobInputs<'a> {
    items: Vec<&'a AnnotatedImage>,
    grids: Vec<ImageGrid>,
}

impl<'a> JobInputs<'a> {
    pub fn new(items: &[&'a AnnotatedImage]) -> Self {
        Self {
            items: items.to_vec(),
            grids: items.iter().map(|i| i.image.to_diffusion_grid()).collect(),
        }
    }

    pub fn jobs(&self) -> Vec<SynthesisJob<'_>> {
        self.items
            .iter()
            .zip(&self.grids)
            .map(|(i, g)| SynthesisJob {
                id: &i.id,
                image: g,
                gt: &i.boxes,
                region: None,
            })
            .collect()
    }
}

fn batch_config(cfg: &BenchmarkConfig, alpha: f64, seed: u64) -> BatchConfig {
    BatchConfig {
        attack: AttackConfig {
            alpha,
            ..AttackConfig::default()
        },
        seed,
        sampling: cfg.sampler,
        execution: cfg.execution,
        ..BatchConfig::default()
    }
}

/// Cross-fold synthesis of one negative per training image.
pub fn synthesize_negatives(
    cfg: &BenchmarkConfig,
    bench: &Benchmark,
    models: (&Denoiser, &Denoiser),
    detector: &ToyDetector,
    alpha: f64,
    seed: u64,
) -> Result<BatchResult> {
    let inputs = JobInputs::new(&bench.train());
    let sched = cfg.schedule.build()?;
    let fm = FoldModels {
        trained_on_a: models.0,
        trained_on_b: models.1,
    };
    Ok(cross_fold_synthesize(
        &inputs.jobs(),
        &bench.folds,
        &fm,
        &batch_config(cfg, alpha, seed),
        detector,
        &sched,
    ))
}

/// FID and FPGR of one synthesized batch against its sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisScore {
    pub alpha: f64,
    pub seed: u64,
    pub fid: f64,
    pub fpgr: f64,
}

pub fn score_batch<D: Detector + ?Sized>(
    cfg: &BenchmarkConfig,
    detector: &D,
    real: &[&AnnotatedImage],
    batch: &BatchResult,
    alpha: f64,
    seed: u64,
) -> Result<SynthesisScore> {
    let hits: Vec<bool> = batch
        .records
        .iter()
        .map(|r| is_false_positive_hit(&r.verdict, &r.region, cfg.score_thresh, cfg.fpgr_region))
        .collect();
    let real_f: Vec<Vec<f64>> = cfg.execution.map(real, |_, i| detector.features(&i.image.to_unit_grid()));
    let syn_f: Vec<Vec<f64>> = cfg
        .execution
        .map(&batch.records, |_, r| detector.features(&r.image().to_unit_grid()));
    Ok(SynthesisScore {
        alpha,
        seed,
        fid: compute_fid(&real_f, &syn_f)?,
        fpgr: fpgr_from_hits(&hits)?,
    })
}

/// Synthesize from `items` with one denoiser at every `(alpha, seed)` pair.
pub fn sweep_alpha<D: Detector + ?Sized>(
    cfg: &BenchmarkConfig,
    denoiser: &Denoiser,
    detector: &D,
    items: &[&AnnotatedImage],
    alphas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SynthesisScore>> {
    let sched = cfg.schedule.build()?;
    let inputs = JobInputs::new(items);
    let jobs = inputs.jobs();
    let mut out = Vec::new();
    for &seed in seeds {
        for &alpha in alphas {
            let res = batch_synthesize(&jobs, &batch_config(cfg, alpha, seed), denoiser, detector, &sched);
            let s = score_batch(cfg, detector, items, &res, alpha, seed)?;
            log::info!("alpha {alpha} seed {seed}: fid {:.4} fpgr {:.3}", s.fid, s.fpgr);
            out.push(s);
        }
    }
    Ok(out)
}

/// `set` followed by `extra`.
pub fn augmented_set(set: &[(ImageGrid, Vec<Rect>)], extra: &[(ImageGrid, Vec<Rect>)]) -> Vec<(ImageGrid, Vec<Rect>)> {
    set.iter().chain(extra).cloned().collect()
}

/// Synthesized images as detector training examples. Each keeps the boxes of
/// its source image: only the attacked region, which avoids them, was redrawn.
pub fn synthesized_examples(batch: &BatchResult, sources: &[&AnnotatedImage]) -> Result<Vec<(ImageGrid, Vec<Rect>)>> {
    batch
        .records
        .iter()
        .map(|r| {
            let src = sources
                .iter()
                .find(|s| s.id == r.source_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no source image {}", r.source_id)))?;
            Ok((r.image().to_unit_grid(), src.boxes.clone()))
        })
        .collect()
}

/// Diffusion-space images as box-free detector training examples.
pub fn negative_examples(grids: &[ImageGrid]) -> Vec<(ImageGrid, Vec<Rect>)> {
    grids
        .iter()
        .map(|g| (crate::detector::to_detector_space(g), Vec::new()))
        .collect()
}

/// Unconditional samples, seeded per index.
pub fn ddpm_samples(
    cfg: &BenchmarkConfig,
    model: &Denoiser,
    n: usize,
    seed: u64,
) -> Result<Vec<ImageGrid>> {
    let sched = cfg.schedule.build()?;
    let shape = (3, cfg.toy.size, cfg.toy.size);
    let out: Vec<Result<ImageGrid>> = cfg.execution.map_range(n, |i| {
        let s = sample_unconditional(model, &sched, shape, rng::derive_seed(&[seed, i as u64, 0xdd]), cfg.sampler)?;
        Ok(crate::data::RgbImage::from_diffusion_grid(&s).to_diffusion_grid())
    });
    out.into_iter().collect()
}

/// One row of a retraining comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainRow {
    pub label: String,
    pub seed: u64,
    pub train_size: usize,
    pub report: EvalReport,
}

/// Train on `set` with `seed` and evaluate on the test split.
pub fn retrain_and_evaluate(
    cfg: &BenchmarkConfig,
    bench: &Benchmark,
    set: &[(ImageGrid, Vec<Rect>)],
    label: &str,
    seed: u64,
) -> Result<(ToyDetector, RetrainRow)> {
    let det = train_detector_on(cfg, set, seed)?;
    let report = evaluate_on(cfg, &det, &bench.test())?;
    log::info!(
        "{label} seed {seed}: P {:.3} R {:.3} F1 {:.3}",
        report.precision,
        report.recall,
        report.f1
    );
    Ok((
        det,
        RetrainRow {
            label: label.to_string(),
            seed,
            train_size: set.len(),
            report,
        },
    ))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
