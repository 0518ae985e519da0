//! Detection metrics, FID and the false-positive generation rate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, Detector};
use crate::error::{Error, Result};
use crate::grid::{BoxF, ImageGrid, Rect};

pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_image: Vec<ImageCounts>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl EvalReport {
    pub fn from_counts(per_image: Vec<ImageCounts>) -> Self {
        let tp = per_image.iter().map(|c| c.tp).sum();
        let fp = per_image.iter().map(|c| c.fp).sum();
        let fn_ = per_image.iter().map(|c| c.fn_).sum();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1_score(precision, recall),
            per_image,
        }
    }
}

/// Greedy matching per image: predictions in descending score order each
/// take the unmatched ground truth with the highest IoU at or above
/// `iou_thresh`. Predictions below `score_thresh` are ignored.
pub fn evaluate_detections(
    preds: &[Vec<Detection>],
    gts: &[Vec<Rect>],
    iou_thresh: f64,
    score_thresh: f64,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let mut kept: Vec<&Detection> = p.iter().filter(|d| d.score >= score_thresh).collect();
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut matched = vec![false; g.len()];
            let mut tp = 0;
            for d in &kept {
                let mut best: Option<(usize, f64)> = None;
                for (j, gt) in g.iter().enumerate() {
                    if matched[j] {
                        continue;
                    }
                    let o = iou(&d.bbox, &gt.to_box());
                    if o >= iou_thresh && best.map_or(true, |(_, bo)| o > bo) {
                        best = Some((j, o));
                    }
                }
                if let Some((j, _)) = best {
                    matched[j] = true;
                    tp += 1;
                }
            }
            ImageCounts {
                tp,
                fp: kept.len() - tp,
                fn_: g.len() - tp,
            }
        })
        .collect();
    Ok(EvalReport::from_counts(per_image))
}

/// Which detections count toward the false-positive generation rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FpgrRegion {
    /// Only detections overlapping the attacked region with IoU >= `min_iou`.
    Anchored { min_iou: f64 },
    /// Any detection in the image.
    ImageWide,
}

impl Default for FpgrRegion {
    fn default() -> Self {
        FpgrRegion::Anchored { min_iou: 0.3 }
    }
}

/// Does this set of detections count as a generated false positive?
pub fn is_false_positive_hit(dets: &[Detection], region: &Rect, score_thresh: f64, mode: FpgrRegion) -> bool {
    let rb = region.to_box();
    dets.iter().any(|d| {
        d.score >= score_thresh
            && match mode {
                FpgrRegion::Anchored { min_iou } => iou(&d.bbox, &rb) >= min_iou,
                FpgrRegion::ImageWide => true,
            }
    })
}

/// Fraction of hits over a non-empty list of per-image outcomes.
pub fn fpgr_from_hits(hits: &[bool]) -> Result<f64> {
    if hits.is_empty() {
        return Err(Error::InvalidArgument("no synthesized images to score".into()));
    }
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Run the detector on each `(diffusion-space image, attacked region)` pair.
pub fn compute_fpgr<D: Detector + ?Sized>(
    detector: &D,
    samples: &[(&ImageGrid, Rect)],
    score_thresh: f64,
    mode: FpgrRegion,
) -> Result<f64> {
    let hits: Vec<bool> = samples
        .iter()
        .map(|(img, r)| {
            let dets = detector.predict(&crate::detector::to_detector_space(img));
            is_false_positive_hit(&dets, r, score_thresh, mode)
        })
        .collect();
    fpgr_from_hits(&hits)
}

fn mean_and_cov(xs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len();
    let d = xs[0].len();
    let mut mean = DVector::zeros(d);
    for x in xs {
        mean += DVector::from_column_slice(x);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = DVector::from_column_slice(x) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The cross term uses `tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`, which equals
/// `tr((S_a S_b)^(1/2))` and only needs symmetric eigendecompositions.
pub fn compute_fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    if features_a.len() < 2 || features_b.len() < 2 {
        return Err(Error::InvalidArgument("FID needs at least two samples per set".into()));
    }
    let d = features_a[0].len();
    if features_a.iter().chain(features_b).any(|f| f.len() != d) {
        return Err(Error::InvalidArgument("feature dimension mismatch".into()));
    }
    let (mu_a, s_a) = mean_and_cov(features_a);
    let (mu_b, s_b) = mean_and_cov(features_b);
    let diff = (&mu_a - &mu_b).norm_squared();
    let ra = psd_sqrt(&s_a);
    let cross = psd_sqrt(&(&ra * &s_b * &ra)).trace();
    Ok((diff + s_a.trace() + s_b.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            bbox: BoxF::new(x1, y1, x2, y2),
            score,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoxF::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoxF::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BoxF::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn f1_from_table_row() {
        let f1 = f1_score(0.941, 0.940);
        assert!((f1 - 0.9405).abs() < 1e-3);
        assert!((f1 - 2.0 * 0.941 * 0.940 / 1.881).abs() < 1e-12);
    }

    #[test]
    fn evaluation_examples() {
        let r = evaluate_detections(&[vec![]], &[vec![]], 0.5, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 0));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        let gts = vec![vec![Rect::new(0, 0, 4, 4)], vec![Rect::new(2, 2, 8, 8), Rect::new(10, 10, 14, 14)]];
        let preds = vec![
            vec![det(0.0, 0.0, 4.0, 4.0, 0.9)],
            vec![det(2.0, 2.0, 8.0, 8.0, 0.8), det(10.0, 10.0, 14.0, 14.0, 0.7)],
        ];
        let r = evaluate_detections(&preds, &gts, 0.5, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        // duplicate prediction -> one FP; low score ignored; miss -> FN
        let preds = vec![
            vec![det(0.0, 0.0, 4.0, 4.0, 0.9), det(0.0, 0.0, 4.0, 4.2, 0.8), det(0.0, 0.0, 4.0, 4.0, 0.3)],
            vec![det(20.0, 20.0, 24.0, 24.0, 0.9)],
        ];
        let r = evaluate_detections(&preds, &gts, 0.5, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 2, 2));
        assert_eq!(r.per_image[0], ImageCounts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn fpgr_accounting() {
        let hits: Vec<bool> = (0..1000).map(|i| i < 885).collect();
        assert_eq!(fpgr_from_hits(&hits).unwrap(), 0.885);
        assert_eq!(fpgr_from_hits(&[false; 7]).unwrap(), 0.0);
        assert_eq!(fpgr_from_hits(&[true; 7]).unwrap(), 1.0);
        assert!(fpgr_from_hits(&[]).is_err());

        let region = Rect::new(10, 10, 20, 20);
        let inside = [det(11.0, 11.0, 19.0, 19.0, 0.9)];
        let elsewhere = [det(0.0, 0.0, 5.0, 5.0, 0.9)];
        let anchored = FpgrRegion::default();
        assert!(is_false_positive_hit(&inside, &region, 0.5, anchored));
        assert!(!is_false_positive_hit(&elsewhere, &region, 0.5, anchored));
        assert!(is_false_positive_hit(&elsewhere, &region, 0.5, FpgrRegion::ImageWide));
        assert!(!is_false_positive_hit(&[det(11.0, 11.0, 19.0, 19.0, 0.4)], &region, 0.5, anchored));
    }

    #[test]
    fn fid_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        assert!(compute_fid(&a, &a).unwrap().abs() < 1e-6);

        // 1-D, identical spread, shifted by d: FID = d^2
        let base: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.1]).collect();
        let shifted: Vec<Vec<f64>> = base.iter().map(|v| vec![v[0] + 1.5]).collect();
        assert!((compute_fid(&base, &shifted).unwrap() - 2.25).abs() < 1e-9);

        assert!(compute_fid(&a[..1], &a).is_err());
        assert!(compute_fid(&a, &[vec![0.0; 3], vec![1.0; 3]]).is_err());
    }

    #[test]
    fn fid_diagonal_closed_form() {
        // samples on +/- s_k along each axis give mean m and variance exactly
        // s_k^2 * n / (n - 1) with no cross covariance
        let build = |m: [f64; 2], s: [f64; 2]| -> Vec<Vec<f64>> {
            let mut v = Vec::new();
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    v.push(vec![m[0] + sx * s[0], m[1] + sy * s[1]]);
                }
            }
            v
        };
        let a = build([0.5, -1.0], [1.0, 2.0]);
        let b = build([1.5, 0.0], [3.0, 0.5]);
        let k = 4.0 / 3.0;
        let va: [f64; 2] = [1.0 * k, 4.0 * k];
        let vb = [9.0 * k, 0.25 * k];
        let expected = (1.0f64 + 1.0)
            + (0..2)
                .map(|i| va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt())
                .sum::<f64>();
        assert!((compute_fid(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn fid_is_symmetric(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..9).map(|_| (0..3).map(|_| r.gen_range(-2.0..1.0)).collect()).collect();
            let ab = compute_fid(&a, &b).unwrap();
            let ba = compute_fid(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn evaluation_conserves_counts(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for _ in 0..5 {
                let g: Vec<Rect> = (0..r.gen_range(0..3)).map(|_| {
                    let x = r.gen_range(0..20); let y = r.gen_range(0..20);
                    Rect::new(x, y, x + r.gen_range(2..8), y + r.gen_range(2..8))
                }).collect();
                let p: Vec<Detection> = (0..r.gen_range(0..4)).map(|_| {
                    let x = r.gen_range(0.0..20.0); let y = r.gen_range(0.0..20.0);
                    det(x, y, x + 5.0, y + 5.0, r.gen_range(0.0..1.0))
                }).collect();
                gts.push(g);
                preds.push(p);
            }
            let rep = evaluate_detections(&preds, &gts, 0.5, 0.5).unwrap();
            let n_gt: usize = gts.iter().map(|g| g.len()).sum();
            let n_above: usize = preds.iter().flatten().filter(|d| d.score >= 0.5).count();
            prop_assert_eq!(rep.tp + rep.fn_, n_gt);
            prop_assert_eq!(rep.tp + rep.fp, n_above);
            prop_assert!((0.0..=1.0).contains(&rep.f1));
        }

        #[test]
        fn silent_records_never_raise_fpgr(hits in proptest::collection::vec(any::<bool>(), 1..50)) {
            let before = fpgr_from_hits(&hits).unwrap();
            let mut more = hits.clone();
            more.push(false);
            prop_assert!(fpgr_from_hits(&more).unwrap() <= before);
        }
    }
}
