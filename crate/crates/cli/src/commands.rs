use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dada_core::checkpoint::{self, Checkpoint, DENOISER_KIND, DETECTOR_KIND};
use dada_core::data::{dataset_dir_is_nonempty, parse_annotations, AnnotatedImage, DatasetMeta, Fold};
use dada_core::denoiser::{continue_training, Denoiser, DenoiserArch, DenoiserTrainConfig};
use dada_core::detector::{train_detector, Detector, DetectorTrainConfig, ToyDetector, ToyDetectorArch};
use dada_core::experiment::{
    augmented_set, denoiser_set, detector_set, evaluate_on, load_benchmark, load_synthesis, synthesized_examples,
    retrain_and_evaluate, save_benchmark, save_synthesis, score_batch, Benchmark, RetrainRow,
};
use dada_core::inpaint::{batch_synthesize, BatchConfig, BatchResult, SynthesisJob};
use dada_core::metrics::{compute_fid, fpgr_from_hits, is_false_positive_hit, EvalReport};
use dada_core::schedule::ScheduleConfig;
use dada_core::Rect;
use serde::Serialize;

use crate::config::{Paths, RunConfig};
use crate::error::Failure;
use crate::{Command, Evaluate, FoldArg, GenData, Metric, Retrain, Split, SweepAlpha, Synthesize, TrainDenoiser, TrainDetector};

type Res<T> = Result<T, Failure>;

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Fold command-line values into the config (flag beats file beats default).
pub fn apply_flags(cfg: &mut RunConfig, cmd: &Command) {
    let b = &mut cfg.benchmark;
    let set_data = |paths: &mut Paths, d: &Option<PathBuf>| {
        if let Some(d) = d {
            paths.data = absolute(d);
        }
    };
    match cmd {
        Command::GenData(a) => {
            if let Some(n) = a.n {
                b.n_images = n;
            }
            if let Some(s) = a.seed {
                b.data_seed = s;
            }
            if let Some(s) = a.size {
                b.toy.size = s;
            }
            if let Some(o) = &a.out {
                cfg.paths.data = absolute(o);
            }
        }
        Command::TrainDenoiser(a) => {
            set_data(&mut cfg.paths, &a.data);
            if let Some(v) = a.iters {
                b.denoiser_train.iterations = v;
            }
            if let Some(v) = a.lr {
                b.denoiser_train.learning_rate = v;
            }
            if let Some(v) = a.batch {
                b.denoiser_train.batch_size = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(o) = &a.out {
                cfg.paths.checkpoints = absolute(o);
            }
        }
        Command::TrainDetector(a) => {
            set_data(&mut cfg.paths, &a.data);
            if let Some(v) = a.epochs {
                b.detector_train.epochs = v;
            }
            if let Some(v) = a.lr {
                b.detector_train.learning_rate = v;
            }
            if let Some(v) = a.width {
                b.detector_width = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(o) = &a.out {
                cfg.paths.checkpoints = absolute(o);
            }
        }
        Command::Synthesize(a) => {
            set_data(&mut cfg.paths, &a.data);
            if let Some(v) = a.alpha {
                cfg.attack.alpha = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
        }
        Command::Evaluate(a) => set_data(&mut cfg.paths, &a.data),
        Command::SweepAlpha(a) => {
            set_data(&mut cfg.paths, &a.data);
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
        }
        Command::Retrain(a) => {
            set_data(&mut cfg.paths, &a.data);
            if let Some(v) = a.epochs {
                b.detector_train.epochs = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
        }
    }
}

pub fn dispatch(cfg: &RunConfig, paths: &Paths, cmd: Command) -> Res<()> {
    match cmd {
        Command::GenData(a) => gen_data(cfg, paths, a),
        Command::TrainDenoiser(a) => train_denoiser_cmd(cfg, paths, a),
        Command::TrainDetector(a) => train_detector_cmd(cfg, paths, a),
        Command::Synthesize(a) => synthesize_cmd(cfg, paths, a),
        Command::Evaluate(a) => evaluate_cmd(cfg, paths, a),
        Command::SweepAlpha(a) => sweep_alpha_cmd(cfg, paths, a),
        Command::Retrain(a) => retrain_cmd(cfg, paths, a),
    }
}

fn prepare_output_dir(dir: &Path, force: bool) -> Res<()> {
    if dataset_dir_is_nonempty(dir) {
        if !force {
            return Err(Failure::usage(format!(
                "{} exists and is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_bench(paths: &Paths) -> Res<Benchmark> {
    if !paths.data.is_dir() {
        return Err(Failure::data(format!("dataset {} not found; run gen-data first", paths.data.display())));
    }
    Ok(load_benchmark(&paths.data)?)
}

fn fold_name(f: Option<Fold>) -> &'static str {
    match f {
        Some(Fold::A) => "a",
        Some(Fold::B) => "b",
        None => "full",
    }
}

fn gen_data(cfg: &RunConfig, _paths: &Paths, a: GenData) -> Res<()> {
    let Some(out) = a.out else {
        return Err(Failure::usage("gen-data needs --out"));
    };
    prepare_output_dir(&out, a.force)?;
    let bench = Benchmark::generate(&cfg.benchmark)?;
    let meta = DatasetMeta {
        seed: cfg.benchmark.data_seed,
        spec: cfg.benchmark.toy.clone(),
    };
    save_benchmark(&out, &bench, Some(&meta))?;
    println!(
        "wrote {} images to {}: train {} (fold a {}, fold b {}), val {}, test {}",
        bench.items.len(),
        out.display(),
        bench.train_ids.len(),
        bench.folds.fold_a.len(),
        bench.folds.fold_b.len(),
        bench.val_ids.len(),
        bench.test_ids.len()
    );
    Ok(())
}

fn write_loss_csv(path: &Path, header: &str, start: usize, losses: &[f64]) -> Res<()> {
    let mut s = format!("{header}\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", start + i + 1));
    }
    fs::write(path, s)?;
    Ok(())
}

fn train_denoiser_cmd(cfg: &RunConfig, paths: &Paths, a: TrainDenoiser) -> Res<()> {
    let iters = cfg.benchmark.denoiser_train.iterations;
    if iters == 0 {
        return Err(Failure::usage("--iters must be at least 1"));
    }
    let bench = load_bench(paths)?;
    let targets: Vec<(&str, Option<Fold>, Vec<&AnnotatedImage>)> = if a.plain {
        vec![("ddpm", None, bench.train())]
    } else {
        let folds = match a.fold {
            FoldArg::A => vec![Fold::A],
            FoldArg::B => vec![Fold::B],
            FoldArg::All => vec![Fold::A, Fold::B],
        };
        folds
            .into_iter()
            .map(|f| (if f == Fold::A { "denoiser_a" } else { "denoiser_b" }, Some(f), bench.fold(f)))
            .collect()
    };
    if a.resume.is_some() && targets.len() != 1 {
        return Err(Failure::usage("--resume needs --fold a, --fold b or --plain"));
    }
    fs::create_dir_all(&paths.checkpoints)?;
    for (name, fold, items) in targets {
        let tcfg = DenoiserTrainConfig {
            ignore_masks: a.plain,
            seed: cfg.seed,
            execution: cfg.benchmark.execution,
            ..cfg.benchmark.denoiser_train.clone()
        };
        let (mut model, schedule, start) = match &a.resume {
            Some(path) => {
                let ck = Checkpoint::<DenoiserArch>::load(path, DENOISER_KIND)?;
                if ck.fold != fold {
                    return Err(Failure::usage(format!(
                        "checkpoint was trained on fold {}, not {}",
                        fold_name(ck.fold),
                        fold_name(fold)
                    )));
                }
                (ck.to_model()?, ck.schedule.unwrap_or(cfg.benchmark.schedule), ck.iterations)
            }
            None => (
                Denoiser::new(cfg.benchmark.denoiser_arch, cfg.seed),
                cfg.benchmark.schedule,
                0,
            ),
        };
        let sched = schedule.build()?;
        let log = continue_training(&mut model, &denoiser_set(&items)?, &sched, &tcfg, start)?;
        let path = paths.checkpoints.join(format!("{name}.json"));
        checkpoint::denoiser_checkpoint(&model, schedule, start + iters, fold).save(&path)?;
        write_loss_csv(
            &paths.checkpoints.join(format!("{name}_loss.csv")),
            "iteration,loss",
            start,
            &log.losses,
        )?;
        let (head, tail) = log.head_tail_means(100);
        println!(
            "{name}: {} images, iterations {}..{}, loss {head:.4} -> {tail:.4}, saved {}",
            items.len(),
            start + 1,
            start + iters,
            path.display()
        );
    }
    Ok(())
}

fn train_detector_cmd(cfg: &RunConfig, paths: &Paths, a: TrainDetector) -> Res<()> {
    if cfg.benchmark.detector_train.epochs == 0 {
        return Err(Failure::usage("--epochs must be at least 1"));
    }
    let bench = load_bench(paths)?;
    let (name, fold, items) = match a.fold {
        FoldArg::A => ("detector_a", Some(Fold::A), bench.fold(Fold::A)),
        FoldArg::B => ("detector_b", Some(Fold::B), bench.fold(Fold::B)),
        FoldArg::All => ("detector", None, bench.train()),
    };
    let tcfg = DetectorTrainConfig {
        seed: cfg.seed,
        execution: cfg.benchmark.execution,
        ..cfg.benchmark.detector_train.clone()
    };
    let (det, log) = train_detector(&detector_set(&items), cfg.benchmark.detector_arch(), &tcfg)?;
    if log.epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(dada_core::Error::NonFinite("detector training loss".into()).into());
    }
    fs::create_dir_all(&paths.checkpoints)?;
    let path = paths.checkpoints.join(format!("{name}.json"));
    checkpoint::detector_checkpoint(&det, tcfg.epochs, fold).save(&path)?;
    write_loss_csv(&paths.checkpoints.join(format!("{name}_loss.csv")), "epoch,loss", 0, &log.epoch_losses)?;
    println!("{name}: {} images, {} epochs, saved {}", items.len(), tcfg.epochs, path.display());
    let report = evaluate_on(&cfg.benchmark, &det, &bench.test())?;
    print_prf(&[("test".into(), None, &report)]);
    Ok(())
}

fn load_detector(path: &Path) -> Res<ToyDetector> {
    Ok(Checkpoint::<ToyDetectorArch>::load(path, DETECTOR_KIND)?.to_model()?)
}

struct LoadedDenoiser {
    path: PathBuf,
    fold: Option<Fold>,
    schedule: Option<ScheduleConfig>,
    model: Denoiser,
}

fn load_denoisers(paths: &Paths, given: &[PathBuf]) -> Res<Vec<LoadedDenoiser>> {
    let list: Vec<PathBuf> = if given.is_empty() {
        ["denoiser_a.json", "denoiser_b.json"]
            .iter()
            .map(|n| paths.checkpoints.join(n))
            .filter(|p| p.is_file())
            .collect()
    } else {
        given.to_vec()
    };
    if list.is_empty() {
        return Err(Failure::data(format!(
            "no denoiser checkpoints in {}; run train-denoiser first",
            paths.checkpoints.display()
        )));
    }
    list.into_iter()
        .map(|path| {
            let ck = Checkpoint::<DenoiserArch>::load(&path, DENOISER_KIND)?;
            Ok(LoadedDenoiser {
                model: ck.to_model()?,
                fold: ck.fold,
                schedule: ck.schedule,
                path,
            })
        })
        .collect()
}

/// Pick the denoiser for images of `fold`: one trained on the other fold, or
/// with `allow_same_fold` any model at all.
fn pick_denoiser(models: &[LoadedDenoiser], fold: Fold, allow_same_fold: bool) -> Res<&LoadedDenoiser> {
    if let Some(m) = models.iter().find(|m| m.fold == Some(fold.other())) {
        return Ok(m);
    }
    if allow_same_fold {
        if let Some(m) = models.first() {
            log::warn!("fold {} images use {}, which saw them in training", fold_name(Some(fold)), m.path.display());
            return Ok(m);
        }
    }
    Err(Failure::usage(format!(
        "no denoiser trained on fold {} for fold {} images; refusing to reuse training data without --allow-same-fold",
        fold_name(Some(fold.other())),
        fold_name(Some(fold))
    )))
}

fn read_regions(path: &Path) -> Res<BTreeMap<String, Rect>> {
    let text = fs::read_to_string(path)?;
    let parsed = parse_annotations(path, &text)?;
    Ok(parsed
        .into_iter()
        .filter_map(|(id, v)| v.first().map(|(_, r)| (id, *r)))
        .collect())
}

struct SynthesisRequest<'a> {
    items: Vec<&'a AnnotatedImage>,
    regions: BTreeMap<String, Rect>,
    alpha: f64,
    allow_same_fold: bool,
}

/// Cross-fold synthesis over training images, records in input order.
fn run_synthesis(
    cfg: &RunConfig,
    bench: &Benchmark,
    models: &[LoadedDenoiser],
    det: &ToyDetector,
    req: &SynthesisRequest<'_>,
) -> Res<BatchResult> {
    let grids: Vec<_> = req.items.iter().map(|i| i.image.to_diffusion_grid()).collect();
    let mut by_fold: BTreeMap<Fold, Vec<SynthesisJob<'_>>> = BTreeMap::new();
    for (item, g) in req.items.iter().zip(&grids) {
        let fold = bench
            .folds
            .fold_of(&item.id)
            .ok_or_else(|| Failure::data(format!("{} is not a training image", item.id)))?;
        by_fold.entry(fold).or_default().push(SynthesisJob {
            id: &item.id,
            image: g,
            gt: &item.boxes,
            region: req.regions.get(&item.id).copied(),
        });
    }
    let bcfg = BatchConfig {
        attack: dada_core::attack::AttackConfig {
            alpha: req.alpha,
            ..cfg.attack
        },
        seed: cfg.seed,
        sampling: cfg.benchmark.sampler,
        execution: cfg.benchmark.execution,
        ..BatchConfig::default()
    };
    let mut records = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for (fold, jobs) in &by_fold {
        let m = pick_denoiser(models, *fold, req.allow_same_fold)?;
        let schedule = m.schedule.unwrap_or(cfg.benchmark.schedule);
        let res = batch_synthesize(jobs, &bcfg, &m.model, det, &schedule.build()?);
        for mut r in res.records {
            r.generator_fold = m.fold;
            records.insert(r.source_id.clone(), r);
        }
        for f in res.failures {
            failures.insert(f.id.clone(), f);
        }
    }
    let mut out = BatchResult::default();
    for item in &req.items {
        if let Some(r) = records.remove(&item.id) {
            out.records.push(r);
        }
        if let Some(f) = failures.remove(&item.id) {
            out.failures.push(f);
        }
    }
    Ok(out)
}

fn fold_items(bench: &Benchmark, fold: FoldArg) -> Vec<&AnnotatedImage> {
    match fold {
        FoldArg::A => bench.fold(Fold::A),
        FoldArg::B => bench.fold(Fold::B),
        FoldArg::All => bench.train(),
    }
}

fn synthesize_cmd(cfg: &RunConfig, paths: &Paths, a: Synthesize) -> Res<()> {
    if !(cfg.attack.alpha >= 0.0 && cfg.attack.alpha.is_finite()) {
        return Err(Failure::usage("--alpha must be a non-negative number"));
    }
    let bench = load_bench(paths)?;
    let det = load_detector(&a.detector.unwrap_or_else(|| paths.checkpoints.join("detector.json")))?;
    let models = load_denoisers(paths, &a.denoisers)?;
    let regions = match &a.region_file {
        Some(p) => read_regions(p)?,
        None => BTreeMap::new(),
    };
    let req = SynthesisRequest {
        items: fold_items(&bench, a.fold),
        regions,
        alpha: cfg.attack.alpha,
        allow_same_fold: a.allow_same_fold,
    };
    let folds: std::collections::BTreeSet<Fold> =
        req.items.iter().filter_map(|i| bench.folds.fold_of(&i.id)).collect();
    for f in folds {
        pick_denoiser(&models, f, req.allow_same_fold)?;
    }
    let out = a
        .out
        .unwrap_or_else(|| paths.output.join(format!("synth_alpha{}_seed{}", cfg.attack.alpha, cfg.seed)));
    prepare_output_dir(&out, a.force)?;
    let res = run_synthesis(cfg, &bench, &models, &det, &req)?;
    save_synthesis(&out, &res, &req.items)?;
    println!(
        "synthesized {} of {} images (alpha {}, seed {}, {} failures) -> {}",
        res.records.len(),
        res.attempted(),
        cfg.attack.alpha,
        cfg.seed,
        res.failures.len(),
        out.display()
    );
    Ok(())
}

fn print_prf(rows: &[(String, Option<usize>, &EvalReport)]) {
    println!("{:<12} {:>7} {:>9} {:>9} {:>9}", "model", "train", "precision", "recall", "f1");
    for (name, n, r) in rows {
        let n = n.map_or("-".to_string(), |n| n.to_string());
        println!("{name:<12} {n:>7} {:>9.3} {:>9.3} {:>9.3}", r.precision, r.recall, r.f1);
    }
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fpgr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthesized: Option<usize>,
}

fn evaluate_cmd(cfg: &RunConfig, paths: &Paths, a: Evaluate) -> Res<()> {
    let bench = load_bench(paths)?;
    let det = load_detector(&a.detector.unwrap_or_else(|| paths.checkpoints.join("detector.json")))?;
    let mut out = EvalOutput {
        report: None,
        fpgr: None,
        fid: None,
        synthesized: None,
    };
    if matches!(a.metric, Metric::Prf | Metric::All) {
        let ids = match a.split {
            Split::Train => &bench.train_ids,
            Split::Val => &bench.val_ids,
            Split::Test => &bench.test_ids,
        };
        if ids.is_empty() {
            return Err(Failure::data("the evaluation split is empty"));
        }
        let items = dada_core::data::select(&bench.items, ids);
        let report = evaluate_on(&cfg.benchmark, &det, &items)?;
        print_prf(&[(format!("{:?}", a.split).to_lowercase(), None, &report)]);
        out.report = Some(report);
    }
    let wants_synth = matches!(a.metric, Metric::Fpgr | Metric::Fid) || (a.metric == Metric::All && a.synth.is_some());
    if wants_synth {
        let dir = a.synth.ok_or_else(|| Failure::usage("--metric fpgr/fid needs --synth"))?;
        let recs = load_synthesis(&dir)?;
        if recs.is_empty() {
            return Err(Failure::data(format!("no synthesized records in {}", dir.display())));
        }
        let b = &cfg.benchmark;
        let hits: Vec<bool> = b.execution.map(&recs, |_, (rec, item)| {
            let [x1, y1, x2, y2] = rec.meta.region;
            let dets = det.predict(&item.image.to_unit_grid());
            is_false_positive_hit(&dets, &Rect::new(x1, y1, x2, y2), b.score_thresh, b.fpgr_region)
        });
        let fpgr = fpgr_from_hits(&hits)?;
        println!("fpgr {fpgr:.4} ({} of {})", hits.iter().filter(|&&h| h).count(), hits.len());
        out.fpgr = Some(fpgr);
        out.synthesized = Some(recs.len());
        if matches!(a.metric, Metric::Fid | Metric::All) {
            let sources: Vec<&AnnotatedImage> = recs
                .iter()
                .map(|(rec, _)| {
                    bench
                        .items
                        .iter()
                        .find(|i| i.id == rec.meta.source_id)
                        .ok_or_else(|| Failure::data(format!("source image {} not in dataset", rec.meta.source_id)))
                })
                .collect::<Res<_>>()?;
            let real: Vec<Vec<f64>> = b.execution.map(&sources, |_, i| det.features(&i.image.to_unit_grid()));
            let syn: Vec<Vec<f64>> = b.execution.map(&recs, |_, (_, item)| det.features(&item.image.to_unit_grid()));
            let fid = compute_fid(&real, &syn)?;
            println!("fid {fid:.6}");
            out.fid = Some(fid);
        }
    }
    if let Some(p) = a.json {
        fs::write(&p, serde_json::to_string_pretty(&out)? + "\n")?;
    }
    Ok(())
}

fn sweep_alpha_cmd(cfg: &RunConfig, paths: &Paths, a: SweepAlpha) -> Res<()> {
    if a.alphas.is_empty() || a.alphas.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(Failure::usage("--alphas must be non-negative numbers"));
    }
    let bench = load_bench(paths)?;
    let det = load_detector(&a.detector.unwrap_or_else(|| paths.checkpoints.join("detector.json")))?;
    let models = load_denoisers(paths, &a.denoisers)?;
    let mut items = bench.train();
    if let Some(n) = a.limit {
        items.truncate(n);
    }
    let base_set = detector_set(&bench.train());
    let mut csv = String::from("alpha,fid,fpgr,f1\n");
    println!("{:>7} {:>10} {:>7} {:>7}", "alpha", "fid", "fpgr", "f1");
    for &alpha in &a.alphas {
        let req = SynthesisRequest {
            items: items.clone(),
            regions: BTreeMap::new(),
            alpha,
            allow_same_fold: false,
        };
        let res = run_synthesis(cfg, &bench, &models, &det, &req)?;
        let score = score_batch(&cfg.benchmark, &det, &items, &res, alpha, cfg.seed)?;
        let f1 = if a.retrain {
            let aug = augmented_set(&base_set, &synthesized_examples(&res, &bench.train())?);
            let (_, row) = retrain_and_evaluate(&cfg.benchmark, &bench, &aug, "augmented", cfg.seed)?;
            Some(row.report.f1)
        } else {
            None
        };
        let f1s = f1.map_or(String::new(), |v| format!("{v:.6}"));
        csv.push_str(&format!("{alpha},{:.6},{:.6},{f1s}\n", score.fid, score.fpgr));
        println!(
            "{alpha:>7} {:>10.4} {:>7.3} {:>7}",
            score.fid,
            score.fpgr,
            f1.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
    }
    let out = a.out.unwrap_or_else(|| paths.output.join("sweep_alpha.csv"));
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct RetrainReport {
    rows: Vec<RetrainRow>,
}

fn retrain_cmd(cfg: &RunConfig, paths: &Paths, a: Retrain) -> Res<()> {
    if cfg.benchmark.detector_train.epochs == 0 {
        return Err(Failure::usage("--epochs must be at least 1"));
    }
    let bench = load_bench(paths)?;
    let synth = a.synth.ok_or_else(|| Failure::usage("retrain needs --synth"))?;
    let extra: Vec<_> = load_synthesis(&synth)?
        .into_iter()
        .map(|(_, item)| (item.image.to_unit_grid(), item.boxes))
        .collect();
    let base_set = detector_set(&bench.train());
    let out = a.out.unwrap_or_else(|| paths.output.join("retrain"));
    fs::create_dir_all(&out)?;
    let baseline = match &a.detector {
        Some(p) => {
            let det = load_detector(p)?;
            RetrainRow {
                label: "baseline".into(),
                seed: cfg.seed,
                train_size: base_set.len(),
                report: evaluate_on(&cfg.benchmark, &det, &bench.test())?,
            }
        }
        None => {
            let (det, row) = retrain_and_evaluate(&cfg.benchmark, &bench, &base_set, "baseline", cfg.seed)?;
            let epochs = cfg.benchmark.detector_train.epochs;
            checkpoint::detector_checkpoint(&det, epochs, None).save(&out.join("detector_baseline.json"))?;
            row
        }
    };
    let aug = augmented_set(&base_set, &extra);
    let (det, augmented) = retrain_and_evaluate(&cfg.benchmark, &bench, &aug, "augmented", cfg.seed)?;
    checkpoint::detector_checkpoint(&det, cfg.benchmark.detector_train.epochs, None)
        .save(&out.join("detector_augmented.json"))?;
    print_prf(&[
        ("baseline".into(), Some(baseline.train_size), &baseline.report),
        ("augmented".into(), Some(augmented.train_size), &augmented.report),
    ]);
    let report = RetrainReport {
        rows: vec![baseline, augmented],
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("wrote {}", out.join("report.json").display());
    Ok(())
}
