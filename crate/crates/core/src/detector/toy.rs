//! A small dense single-stage detector.
//!
//! Four 3x3 convolutions (two of them stride 2) produce a grid with one cell
//! per `stride x stride` patch. Each cell predicts an objectness logit, a
//! center offset inside the cell (sigmoid) and log width/height relative to
//! a fixed anchor. Training assigns each ground truth to the cell holding
//! its center.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    assign_illusory, bce_negative, bce_positive, giou_loss_grad, l1_loss_grad, nms, sigmoid,
    AssignmentRule, Detection, Detector, IllusoryLoss, LocLoss,
};
use crate::error::{Error, Result};
use crate::grid::{BoxF, ImageGrid, Rect};
use crate::nn::{self, Adam, Conv2d, ConvCache, ParamBuilder};
use crate::par::{self, Execution};
use crate::rng;

const OUT: usize = 5;
const STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorArch {
    pub image_size: usize,
    pub width: usize,
    /// Anchor side length in pixels.
    pub anchor: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub loc_loss: LocLoss,
    pub assignment: AssignmentRule,
}

impl ToyDetectorArch {
    pub fn for_size(image_size: usize) -> Self {
        Self {
            image_size,
            width: 16,
            anchor: image_size as f64 / 4.0,
            score_thresh: 0.5,
            nms_iou: 0.5,
            loc_loss: LocLoss::Giou,
            assignment: AssignmentRule::BestIou,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / STRIDE
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layers {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    head: Conv2d,
}

struct Tape {
    caches: [ConvCache; 5],
    pre: [ImageGrid; 4],
    out: ImageGrid,
}

#[derive(Debug, Clone)]
pub struct ToyDetector {
    arch: ToyDetectorArch,
    layers: Layers,
    params: Vec<f64>,
}

impl ToyDetector {
    pub fn new(arch: ToyDetectorArch, seed: u64) -> Self {
        assert!(arch.image_size % STRIDE == 0, "image size must be a multiple of 4");
        let mut r = rng::stream(&[seed, 0xde7]);
        let mut pb = ParamBuilder::new(&mut r);
        let w = arch.width;
        let layers = Layers {
            c1: Conv2d::new(&mut pb, 3, w, 3, 1),
            c2: Conv2d::new(&mut pb, w, 2 * w, 3, 2),
            c3: Conv2d::new(&mut pb, 2 * w, 2 * w, 3, 2),
            c4: Conv2d::new(&mut pb, 2 * w, 2 * w, 3, 1),
            head: Conv2d::with_gain(&mut pb, 2 * w, OUT, 1, 1, 0.1),
        };
        let mut params = pb.finish();
        // start with low objectness everywhere
        let head_bias = params.len() - OUT;
        params[head_bias] = -4.0;
        Self {
            arch,
            layers,
            params,
        }
    }

    pub fn from_params(arch: ToyDetectorArch, params: Vec<f64>) -> Result<Self> {
        let mut d = Self::new(arch, 0);
        if params.len() != d.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} detector parameters, found {}",
                d.params.len(),
                params.len()
            )));
        }
        d.params = params;
        Ok(d)
    }

    pub fn arch(&self) -> ToyDetectorArch {
        self.arch
    }

    pub fn set_arch_thresholds(&mut self, score_thresh: f64, nms_iou: f64) {
        self.arch.score_thresh = score_thresh;
        self.arch.nms_iou = nms_iou;
    }

    fn forward(&self, x: &ImageGrid) -> Tape {
        assert_eq!(
            x.shape(),
            (3, self.arch.image_size, self.arch.image_size),
            "detector input shape"
        );
        let p = &self.params;
        let l = &self.layers;
        let (z1, k1) = l.c1.forward(p, x);
        let (z2, k2) = l.c2.forward(p, &nn::silu(&z1));
        let (z3, k3) = l.c3.forward(p, &nn::silu(&z2));
        let (z4, k4) = l.c4.forward(p, &nn::silu(&z3));
        let (out, k5) = l.head.forward(p, &nn::silu(&z4));
        Tape {
            caches: [k1, k2, k3, k4, k5],
            pre: [z1, z2, z3, z4],
            out,
        }
    }

    fn backward(&self, tape: &Tape, d_out: &ImageGrid, mut grads: Option<&mut [f64]>, need_dx: bool) -> Option<ImageGrid> {
        let p = &self.params;
        let l = &self.layers;
        let convs = [&l.c1, &l.c2, &l.c3, &l.c4];
        let mut d = l
            .head
            .backward(p, &tape.caches[4], d_out, grads.as_deref_mut(), true)
            .expect("dx");
        for k in (0..4).rev() {
            let dz = nn::silu_backward(&tape.pre[k], &d);
            let want_dx = k > 0 || need_dx;
            match convs[k].backward(p, &tape.caches[k], &dz, grads.as_deref_mut(), want_dx) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }

    /// Raw head outputs of one cell: `[logit, ox, oy, lw, lh]`.
    fn cell(out: &ImageGrid, gy: usize, gx: usize) -> [f64; OUT] {
        std::array::from_fn(|k| out.get(k, gy, gx))
    }

    fn decode(&self, raw: &[f64; OUT], gy: usize, gx: usize) -> BoxF {
        let s = STRIDE as f64;
        let cx = (gx as f64 + sigmoid(raw[1])) * s;
        let cy = (gy as f64 + sigmoid(raw[2])) * s;
        let w = self.arch.anchor * raw[3].clamp(-4.0, 4.0).exp();
        let h = self.arch.anchor * raw[4].clamp(-4.0, 4.0).exp();
        BoxF::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    /// Localization loss for one cell and its gradient with respect to the
    /// cell's raw `[ox, oy, lw, lh]`.
    fn loc_term(&self, raw: &[f64; OUT], gy: usize, gx: usize, target: &BoxF) -> (f64, [f64; 4]) {
        let pred = self.decode(raw, gy, gx);
        let (loss, g) = match self.arch.loc_loss {
            LocLoss::Giou => giou_loss_grad(&pred, target),
            LocLoss::L1 => l1_loss_grad(&pred, target, self.arch.image_size as f64),
        };
        let s = STRIDE as f64;
        let d_cx = g[0] + g[2];
        let d_cy = g[1] + g[3];
        let d_w = 0.5 * (g[2] - g[0]);
        let d_h = 0.5 * (g[3] - g[1]);
        let sx = sigmoid(raw[1]);
        let sy = sigmoid(raw[2]);
        let w = pred.x2 - pred.x1;
        let h = pred.y2 - pred.y1;
        let clamp_gate = |v: f64| if (-4.0..=4.0).contains(&v) { 1.0 } else { 0.0 };
        (
            loss,
            [
                d_cx * s * sx * (1.0 - sx),
                d_cy * s * sy * (1.0 - sy),
                d_w * w * clamp_gate(raw[3]),
                d_h * h * clamp_gate(raw[4]),
            ],
        )
    }

    fn candidates_from(&self, out: &ImageGrid) -> Vec<Detection> {
        let g = self.arch.grid();
        let mut v = Vec::with_capacity(g * g);
        for gy in 0..g {
            for gx in 0..g {
                let raw = Self::cell(out, gy, gx);
                v.push(Detection {
                    bbox: self.decode(&raw, gy, gx),
                    score: sigmoid(raw[0]),
                });
            }
        }
        v
    }

    /// Cell index responsible for each target (first target wins a cell).
    fn responsible_cells(&self, targets: &[Rect]) -> Vec<(usize, Rect)> {
        let g = self.arch.grid();
        let mut taken: Vec<(usize, Rect)> = Vec::new();
        for t in targets {
            let (cx, cy) = t.to_box().center();
            let gx = ((cx / STRIDE as f64) as usize).min(g - 1);
            let gy = ((cy / STRIDE as f64) as usize).min(g - 1);
            let idx = gy * g + gx;
            if !taken.iter().any(|(i, _)| *i == idx) {
                taken.push((idx, *t));
            }
        }
        taken
    }

    /// Training loss and head-output gradient for one image.
    fn target_loss(&self, out: &ImageGrid, targets: &[Rect]) -> (f64, ImageGrid) {
        let g = self.arch.grid();
        let pos = self.responsible_cells(targets);
        let mut d = ImageGrid::zeros(OUT, g, g);
        let mut loss = 0.0;
        for gy in 0..g {
            for gx in 0..g {
                let idx = gy * g + gx;
                let raw = Self::cell(out, gy, gx);
                if let Some((_, t)) = pos.iter().find(|(i, _)| *i == idx) {
                    let (l, dl) = bce_positive(raw[0]);
                    let (ll, dloc) = self.loc_term(&raw, gy, gx, &t.to_box());
                    loss += l + ll;
                    d.set(0, gy, gx, dl);
                    for k in 0..4 {
                        d.set(k + 1, gy, gx, dloc[k]);
                    }
                } else {
                    let (l, dl) = bce_negative(raw[0]);
                    loss += NEG_WEIGHT * l;
                    d.set(0, gy, gx, NEG_WEIGHT * dl);
                }
            }
        }
        (loss, d)
    }

    fn sample_loss_grad(&self, image: &ImageGrid, targets: &[Rect]) -> (f64, Vec<f64>) {
        let tape = self.forward(image);
        let (loss, d) = self.target_loss(&tape.out, targets);
        let mut grads = vec![0.0; self.params.len()];
        self.backward(&tape, &d, Some(&mut grads), false);
        (loss, grads)
    }
}

const NEG_WEIGHT: f64 = 0.5;

impl Detector for ToyDetector {
    fn input_shape(&self) -> (usize, usize, usize) {
        (3, self.arch.image_size, self.arch.image_size)
    }

    fn candidates(&self, image: &ImageGrid) -> Vec<Detection> {
        self.candidates_from(&self.forward(image).out)
    }

    fn predict(&self, image: &ImageGrid) -> Vec<Detection> {
        let s = self.arch.image_size as f64;
        let above: Vec<Detection> = self
            .candidates(image)
            .into_iter()
            .filter(|d| d.score >= self.arch.score_thresh)
            .map(|d| Detection {
                bbox: BoxF::new(
                    d.bbox.x1.clamp(0.0, s),
                    d.bbox.y1.clamp(0.0, s),
                    d.bbox.x2.clamp(0.0, s),
                    d.bbox.y2.clamp(0.0, s),
                ),
                score: d.score,
            })
            .filter(|d| d.bbox.x2 > d.bbox.x1 && d.bbox.y2 > d.bbox.y1)
            .collect();
        nms(above, self.arch.nms_iou)
    }

    fn loss_for_targets(&self, image: &ImageGrid, targets: &[Rect]) -> f64 {
        self.target_loss(&self.forward(image).out, targets).0
    }

    fn illusory_loss(&self, image: &ImageGrid, target: &Rect, need_grad: bool) -> Result<IllusoryLoss> {
        let tape = self.forward(image);
        let cands = self.candidates_from(&tape.out);
        let assigned = assign_illusory(&cands, target, self.arch.assignment)?;
        let g = self.arch.grid();
        let (gy, gx) = (assigned / g, assigned % g);
        let raw = Self::cell(&tape.out, gy, gx);
        let (cls, d_cls) = bce_positive(raw[0]);
        let (loc, d_loc) = self.loc_term(&raw, gy, gx, &target.to_box());
        let grad = if need_grad {
            let mut d = ImageGrid::zeros(OUT, g, g);
            d.set(0, gy, gx, d_cls);
            for k in 0..4 {
                d.set(k + 1, gy, gx, d_loc[k]);
            }
            self.backward(&tape, &d, None, true)
        } else {
            None
        };
        Ok(IllusoryLoss {
            value: cls + loc,
            cls,
            loc,
            assigned,
            grad,
        })
    }

    fn features(&self, image: &ImageGrid) -> Vec<f64> {
        let tape = self.forward(image);
        nn::global_avg_pool(&nn::silu(&tape.pre[3]))
    }

    fn params(&self) -> &[f64] {
        &self.params
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hflip: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            hflip: true,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DetectorTrainLog {
    /// Mean per-image loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn hflip(image: &ImageGrid, boxes: &[Rect]) -> (ImageGrid, Vec<Rect>) {
    let (c, h, w) = image.shape();
    let img = ImageGrid::from_fn(c, h, w, |ci, y, x| image.get(ci, y, w - 1 - x));
    let b = boxes
        .iter()
        .map(|r| Rect::new(w - r.x2, r.y1, w - r.x1, r.y2))
        .collect();
    (img, b)
}

/// Train a toy detector on `[0, 1]` images with ground-truth boxes.
/// Images with no boxes act as pure negatives.
pub fn train_detector(
    dataset: &[(ImageGrid, Vec<Rect>)],
    arch: ToyDetectorArch,
    cfg: &DetectorTrainConfig,
) -> Result<(ToyDetector, DetectorTrainLog)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty detector training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut det = ToyDetector::new(arch, cfg.seed);
    let n_params = det.params.len();
    let mut opt = Adam::new(n_params, cfg.learning_rate);
    let mut log = DetectorTrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(&[cfg.seed, epoch as u64, 0x5f]));
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = cfg.execution.map(batch, |k, &i| {
                let (img, boxes) = &dataset[i];
                let flip = cfg.hflip && rng::derive_seed(&[cfg.seed, epoch as u64, bi as u64, k as u64]) & 1 == 1;
                if flip {
                    let (fi, fb) = hflip(img, boxes);
                    det.sample_loss_grad(&fi, &fb)
                } else {
                    det.sample_loss_grad(img, boxes)
                }
            });
            let mut losses = 0.0;
            let mut grads = Vec::with_capacity(batch.len());
            for (l, g) in results {
                losses += l;
                grads.push(g);
            }
            if !losses.is_finite() {
                return Err(Error::NonFinite(format!("detector loss in epoch {epoch}")));
            }
            epoch_loss += losses;
            let mut g = par::sum_in_order(grads, n_params);
            let inv = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|v| *v *= inv);
            opt.update(&mut det.params, &g);
        }
        log.epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok((det, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ToyDetectorArch {
        ToyDetectorArch {
            width: 4,
            ..ToyDetectorArch::for_size(16)
        }
    }

    fn random_image(seed: u64) -> ImageGrid {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(3, 16, 16, |_, _, _| r.gen_range(0.0..1.0))
    }

    #[test]
    fn illusory_input_gradient_matches_finite_differences() {
        let det = ToyDetector::new(arch(), 1);
        let img = random_image(2);
        let target = Rect::new(3, 4, 10, 12);
        let res = det.illusory_loss(&img, &target, true).unwrap();
        let g = res.grad.unwrap();
        let mut agree = 0;
        let mut total = 0;
        for i in 0..img.len() {
            let mut p = img.clone();
            p.data_mut()[i] += 1e-5;
            let mut m = img.clone();
            m.data_mut()[i] -= 1e-5;
            // hold the assignment fixed: it is a discrete choice
            let lp = det.illusory_loss(&p, &target, false).unwrap();
            let lm = det.illusory_loss(&m, &target, false).unwrap();
            if lp.assigned != res.assigned || lm.assigned != res.assigned {
                continue;
            }
            let fd = (lp.value - lm.value) / 2e-5;
            assert!((fd - g.data()[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g.data()[i]);
            if g.data()[i].abs() > 1e-6 {
                total += 1;
                agree += (fd.signum() == g.data()[i].signum()) as usize;
            }
        }
        assert!(total > 0 && agree == total);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut det = ToyDetector::new(arch(), 4);
        let img = random_image(5);
        let targets = [Rect::new(2, 2, 9, 8)];
        let (_, grads) = det.sample_loss_grad(&img, &targets);
        let n = det.params.len();
        for i in (0..n).step_by(n / 50) {
            let orig = det.params[i];
            det.params[i] = orig + 1e-6;
            let lp = det.loss_for_targets(&img, &targets);
            det.params[i] = orig - 1e-6;
            let lm = det.loss_for_targets(&img, &targets);
            det.params[i] = orig;
            let fd = (lp - lm) / 2e-6;
            assert!((fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn illusory_loss_leaves_parameters_untouched() {
        let det = ToyDetector::new(arch(), 7);
        let before = det.params().to_vec();
        for s in 0..5 {
            det.illusory_loss(&random_image(s), &Rect::new(0, 0, 8, 8), true).unwrap();
        }
        assert_eq!(before, det.params());
    }

    #[test]
    fn learns_a_bright_square_and_negatives_train() {
        let mut data = Vec::new();
        for i in 0..24u64 {
            let mut img = random_image(100 + i).map(|v| 0.2 * v);
            if i % 3 == 0 {
                data.push((img, vec![]));
                continue;
            }
            let x = (i as usize * 5) % 9;
            let y = (i as usize * 3) % 9;
            for c in 0..3 {
                for yy in y..y + 6 {
                    for xx in x..x + 6 {
                        img.set(c, yy, xx, if c == 0 { 0.9 } else { 0.3 });
                    }
                }
            }
            data.push((img, vec![Rect::new(x, y, x + 6, y + 6)]));
        }
        let cfg = DetectorTrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 5e-3,
            ..Default::default()
        };
        let (det, log) = train_detector(&data, arch(), &cfg).unwrap();
        assert!(log.epoch_losses.last().unwrap() < &(0.5 * log.epoch_losses[0]));
        let (det2, _) = train_detector(&data, arch(), &cfg).unwrap();
        assert_eq!(det.params(), det2.params());
        let hits = data
            .iter()
            .filter(|(img, b)| !b.is_empty() && !det.predict(img).is_empty())
            .count();
        assert!(hits >= 12, "hits {hits}");
    }

    #[test]
    fn flip_mirrors_boxes() {
        let img = random_image(1);
        let (f, b) = hflip(&img, &[Rect::new(1, 2, 5, 6)]);
        assert_eq!(b, vec![Rect::new(11, 2, 15, 6)]);
        assert_eq!(f.get(0, 3, 0), img.get(0, 3, 15));
    }
}
