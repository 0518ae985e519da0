//! Detector abstraction, the illusory-box detection loss and assignment.

mod hungarian;
mod toy;

pub use hungarian::{hungarian_assign, AssignmentResult};
pub use toy::{train_detector, DetectorTrainConfig, DetectorTrainLog, ToyDetector, ToyDetectorArch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoxF, ImageGrid, Mask, Rect};
use crate::metrics::iou;

/// One scored box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxF,
    pub score: f64,
}

/// A user-chosen target region treated as a ground-truth polyp box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IllusoryBox {
    rect: Rect,
    mask: Mask,
}

impl IllusoryBox {
    pub fn new(rect: Rect, height: usize, width: usize) -> Result<Self> {
        let mask = crate::denoiser::mask_from_boxes(&[rect], height, width)?;
        Ok(Self { rect, mask })
    }

    pub fn rect(&self) -> Rect {
        self.rect
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }
}

/// Localization loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocLoss {
    #[default]
    Giou,
    /// Sum of absolute corner differences, divided by `scale`.
    L1,
}

/// How a prediction is paired with the illusory box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentRule {
    /// Highest IoU with the target, then highest score, then lowest index.
    #[default]
    BestIou,
    /// Set-prediction matching cost `-score + (1 - GIoU)` solved with the
    /// Hungarian algorithm.
    Hungarian,
}

/// `1 - GIoU(pred, target)` and its gradient with respect to the corners
/// of `pred`, ordered `[x1, y1, x2, y2]`.
pub fn giou_loss_grad(pred: &BoxF, target: &BoxF) -> (f64, [f64; 4]) {
    let (a, b) = (pred, target);
    let aw = a.x2 - a.x1;
    let ah = a.y2 - a.y1;
    let area_a = aw * ah;
    let area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
    // d(area_a)/d[x1, y1, x2, y2]
    let d_area_a = [-ah, -aw, ah, aw];

    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    let (inter, d_inter) = if iw > 0.0 && ih > 0.0 {
        let d_iw = [
            if a.x1 > b.x1 { -1.0 } else { 0.0 },
            0.0,
            if a.x2 < b.x2 { 1.0 } else { 0.0 },
            0.0,
        ];
        let d_ih = [
            0.0,
            if a.y1 > b.y1 { -1.0 } else { 0.0 },
            0.0,
            if a.y2 < b.y2 { 1.0 } else { 0.0 },
        ];
        (
            iw * ih,
            std::array::from_fn(|k| d_iw[k] * ih + iw * d_ih[k]),
        )
    } else {
        (0.0, [0.0; 4])
    };
    let union = area_a + area_b - inter;
    let d_union: [f64; 4] = std::array::from_fn(|k| d_area_a[k] - d_inter[k]);

    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let d_cw = [
        if a.x1 < b.x1 { -1.0 } else { 0.0 },
        0.0,
        if a.x2 > b.x2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_ch = [
        0.0,
        if a.y1 < b.y1 { -1.0 } else { 0.0 },
        0.0,
        if a.y2 > b.y2 { 1.0 } else { 0.0 },
    ];
    let hull = cw * ch;
    let d_hull: [f64; 4] = std::array::from_fn(|k| d_cw[k] * ch + cw * d_ch[k]);

    let iou = inter / union;
    let giou = iou - (hull - union) / hull;
    let grad = std::array::from_fn(|k| {
        let d_iou = d_inter[k] / union - inter * d_union[k] / (union * union);
        // (hull - union) / hull = 1 - union / hull
        let d_pen = -(d_union[k] / hull - union * d_hull[k] / (hull * hull));
        -(d_iou - d_pen)
    });
    (1.0 - giou, grad)
}

pub fn l1_loss_grad(pred: &BoxF, target: &BoxF, scale: f64) -> (f64, [f64; 4]) {
    let p = [pred.x1, pred.y1, pred.x2, pred.y2];
    let t = [target.x1, target.y1, target.x2, target.y2];
    let mut loss = 0.0;
    let grad = std::array::from_fn(|k| {
        let d = p[k] - t[k];
        loss += d.abs() / scale;
        d.signum() * (d != 0.0) as i32 as f64 / scale
    });
    (loss, grad)
}

/// Binary cross-entropy toward label 1 from a logit, and its derivative.
pub fn bce_positive(logit: f64) -> (f64, f64) {
    (softplus(-logit), sigmoid(logit) - 1.0)
}

/// Binary cross-entropy toward label 0 from a logit, and its derivative.
pub fn bce_negative(logit: f64) -> (f64, f64) {
    (softplus(logit), sigmoid(logit))
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pick the candidate that answers for the illusory box.
pub fn assign_illusory(candidates: &[Detection], target: &Rect, rule: AssignmentRule) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let tb = target.to_box();
    match rule {
        AssignmentRule::BestIou => {
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in candidates.iter().enumerate() {
                let o = iou(&c.bbox, &tb);
                let better = match best {
                    None => true,
                    Some((j, bo)) => o > bo || (o == bo && c.score > candidates[j].score),
                };
                if better {
                    best = Some((i, o));
                }
            }
            let (i, o) = best.expect("non-empty");
            if o > 0.0 {
                return Ok(i);
            }
            // nothing overlaps the region: fall back to the top-scoring prediction
            let mut top = 0;
            for (i, c) in candidates.iter().enumerate() {
                if c.score > candidates[top].score {
                    top = i;
                }
            }
            Ok(top)
        }
        AssignmentRule::Hungarian => {
            let row: Vec<f64> = candidates
                .iter()
                .map(|c| -c.score + giou_loss_grad(&c.bbox, &tb).0)
                .collect();
            Ok(hungarian_assign(&[row])?.mapping[0])
        }
    }
}

/// Result of the illusory detection loss.
#[derive(Debug, Clone)]
pub struct IllusoryLoss {
    pub value: f64,
    pub cls: f64,
    pub loc: f64,
    /// Index of the assigned candidate.
    pub assigned: usize,
    /// Gradient with respect to the detector input, when requested.
    pub grad: Option<ImageGrid>,
}

/// A differentiable single-class box detector consuming `[0, 1]` images.
pub trait Detector: Send + Sync {
    /// Expected input `(channels, height, width)`.
    fn input_shape(&self) -> (usize, usize, usize);

    /// Every raw dense prediction, before thresholding.
    fn candidates(&self, image: &ImageGrid) -> Vec<Detection>;

    /// Thresholded, non-maximum-suppressed detections.
    fn predict(&self, image: &ImageGrid) -> Vec<Detection>;

    /// Training loss against ground-truth boxes.
    fn loss_for_targets(&self, image: &ImageGrid, targets: &[Rect]) -> f64;

    /// Classification toward 1 plus localization toward `target` for the
    /// assigned candidate, optionally with its input gradient.
    fn illusory_loss(&self, image: &ImageGrid, target: &Rect, need_grad: bool) -> Result<IllusoryLoss>;

    /// Pooled penultimate-layer activations.
    fn features(&self, image: &ImageGrid) -> Vec<f64>;

    fn params(&self) -> &[f64];
}

/// Illusory loss on a diffusion-space image.
pub fn detection_loss_illusory<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageGrid,
    target: &IllusoryBox,
) -> Result<f64> {
    Ok(detector
        .illusory_loss(&to_detector_space(image), &target.rect(), false)?
        .value)
}

/// Greedy non-maximum suppression over score-sorted detections.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            keep.push(d);
        }
    }
    keep
}

/// Map a diffusion-space image to detector space: `(x + 1) / 2`. Not clamped,
/// so noisy intermediate samples keep an exact gradient.
pub fn to_detector_space(x: &ImageGrid) -> ImageGrid {
    x.map(|v| (v + 1.0) * 0.5)
}

/// Pull a detector-space gradient back to diffusion space.
pub fn from_detector_space_grad(g: &ImageGrid) -> ImageGrid {
    g.map(|v| 0.5 * v)
}
