//! Annotated image datasets: toy generation, on-disk layout and splits.
//!
//! A dataset directory holds `images/*.png`, `annotations.txt` with one
//! `filename x1 y1 x2 y2` line per box (integer pixels, half-open), and an
//! optional `meta.json`. Images without annotation lines are negatives.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Rect};
use crate::rng;

/// 8-bit RGB pixels, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// Values in `[0, 1]`.
    pub fn to_unit_grid(&self) -> ImageGrid {
        ImageGrid::from_fn(3, self.height, self.width, |c, y, x| {
            self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
        })
    }

    /// Values in `[-1, 1]`.
    pub fn to_diffusion_grid(&self) -> ImageGrid {
        ImageGrid::from_fn(3, self.height, self.width, |c, y, x| {
            self.data[(y * self.width + x) * 3 + c] as f64 / 127.5 - 1.0
        })
    }

    pub fn from_unit_grid(g: &ImageGrid) -> Self {
        Self::quantize(g, |v| v)
    }

    pub fn from_diffusion_grid(g: &ImageGrid) -> Self {
        Self::quantize(g, |v| (v + 1.0) * 0.5)
    }

    fn quantize(g: &ImageGrid, to_unit: impl Fn(f64) -> f64) -> Self {
        assert_eq!(g.channels(), 3, "RGB grid expected");
        let (h, w) = (g.height(), g.width());
        let mut data = vec![0u8; h * w * 3];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = (to_unit(g.get(c, y, x)).clamp(0.0, 1.0) * 255.0).round();
                    data[(y * w + x) * 3 + c] = v as u8;
                }
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Codec(e.to_string()))?;
        w.write_image_data(&self.data)
            .map_err(|e| Error::Codec(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|_| Error::MissingImage(path.to_path_buf()))?;
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Codec(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Codec(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match info.color_type {
            png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
            png::ColorType::Rgba => buf[..w * h * 4]
                .chunks(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => buf[..w * h * 2]
                .chunks(2)
                .flat_map(|p| [p[0], p[0], p[0]])
                .collect(),
            other => return Err(Error::Codec(format!("unsupported PNG color type {other:?}"))),
        };
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedImage {
    /// File name, e.g. `img_0003.png`.
    pub id: String,
    pub image: RgbImage,
    pub boxes: Vec<Rect>,
}

/// Toy dataset generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub size: usize,
    /// Fraction of images without any pseudo-polyp.
    pub negative_fraction: f64,
    pub max_polyps: usize,
    pub max_distractors: usize,
    /// Polyp radius range as a fraction of the image side.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Probability that a distractor is a partly polyp-tinted patch.
    pub hard_negative_prob: f64,
    /// Pseudo-polyp opacity is uniform in `[polyp_opacity_min, 1]`.
    pub polyp_opacity_min: f64,
    /// Probability that a pseudo-polyp shows a specular dot.
    pub specular_prob: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            size: 64,
            negative_fraction: 0.2,
            max_polyps: 2,
            max_distractors: 3,
            radius_min: 0.08,
            radius_max: 0.17,
            hard_negative_prob: 0.5,
            polyp_opacity_min: 0.5,
            specular_prob: 0.8,
        }
    }
}

/// Pseudo-polyp base color; the hue signature the background never has.
pub const POLYP_RGB: [f64; 3] = [0.92, 0.62, 0.12];

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let p = &mut self.px[y * self.size + x];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn into_image(self) -> RgbImage {
        let data = self
            .px
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        RgbImage {
            width: self.size,
            height: self.size,
            data,
        }
    }
}

fn smooth_noise<R: Rng>(r: &mut R, size: usize, cells: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / size as f64 * cells as f64;
            let fy = y as f64 / size as f64 * cells as f64;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
            let at = |i: usize, j: usize| g[j * (cells + 1) + i];
            let top = at(ix, iy) * (1.0 - sx) + at(ix + 1, iy) * sx;
            let bot = at(ix, iy + 1) * (1.0 - sx) + at(ix + 1, iy + 1) * sx;
            out[y * size + x] = top * (1.0 - sy) + bot * sy;
        }
    }
    out
}

fn background<R: Rng>(r: &mut R, size: usize) -> Canvas {
    let n1 = smooth_noise(r, size, 3);
    let n2 = smooth_noise(r, size, 7);
    let tint = [r.gen_range(0.68..0.80), r.gen_range(0.36..0.46), r.gen_range(0.36..0.46)];
    let (vx, vy) = (r.gen_range(0.35..0.65), r.gen_range(0.35..0.65));
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let dx = (x as f64 + 0.5) / size as f64 - vx;
            let dy = (y as f64 + 0.5) / size as f64 - vy;
            let vignette = 1.0 - 0.9 * (dx * dx + dy * dy);
            let shade = vignette * (1.0 + 0.12 * n1[i] + 0.05 * n2[i]);
            px.push([tint[0] * shade, tint[1] * shade, tint[2] * shade * (1.0 + 0.05 * n2[i])]);
        }
    }
    Canvas { size, px }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn bbox(&self, size: usize) -> Rect {
        let x1 = (self.cx - self.rx).floor().max(0.0) as usize;
        let y1 = (self.cy - self.ry).floor().max(0.0) as usize;
        let x2 = ((self.cx + self.rx).ceil() as usize).min(size);
        let y2 = ((self.cy + self.ry).ceil() as usize).min(size);
        Rect::new(x1, y1, x2, y2)
    }

    /// Normalized radial distance of a pixel center.
    fn dist(&self, x: usize, y: usize) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        (dx * dx + dy * dy).sqrt()
    }

    fn paint(&self, canvas: &mut Canvas, color: [f64; 3], edge: f64, specular: bool) {
        self.paint_with(canvas, color, edge, 1.0, specular)
    }

    fn paint_with(&self, canvas: &mut Canvas, color: [f64; 3], edge: f64, opacity: f64, specular: bool) {
        let b = self.bbox(canvas.size);
        for y in b.y1..b.y2 {
            for x in b.x1..b.x2 {
                let d = self.dist(x, y);
                if d >= 1.0 {
                    continue;
                }
                let alpha = opacity * ((1.0 - d) / edge).min(1.0);
                let shade = 1.05 - 0.25 * d * d;
                canvas.blend(x, y, color.map(|c| c * shade), alpha);
            }
        }
        if specular {
            let spot = Ellipse {
                cx: self.cx - 0.3 * self.rx,
                cy: self.cy - 0.3 * self.ry,
                rx: (0.28 * self.rx).max(0.8),
                ry: (0.28 * self.ry).max(0.8),
            };
            let sb = spot.bbox(canvas.size);
            for y in sb.y1..sb.y2 {
                for x in sb.x1..sb.x2 {
                    let d = spot.dist(x, y);
                    if d < 1.0 {
                        canvas.blend(x, y, [1.0, 0.97, 0.92], 0.85 * (1.0 - d * d));
                    }
                }
            }
        }
    }
}

fn random_ellipse<R: Rng>(r: &mut R, spec: &ToySpec) -> Ellipse {
    let s = spec.size as f64;
    let rx = r.gen_range(spec.radius_min..spec.radius_max) * s;
    let ry = (rx * r.gen_range(0.75..1.3)).clamp(spec.radius_min * s, spec.radius_max * s * 1.2);
    Ellipse {
        cx: r.gen_range(rx + 1.0..s - rx - 1.0),
        cy: r.gen_range(ry + 1.0..s - ry - 1.0),
        rx,
        ry,
    }
}

fn overlaps(a: &Rect, b: &Rect) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

fn tinted_patch<R: Rng>(r: &mut R, canvas: &mut Canvas, e: &Ellipse) {
    let mix = r.gen_range(0.3..0.65);
    let (k, phase, wobble) = (r.gen_range(2..5) as f64, r.gen_range(0.0..6.3), r.gen_range(0.1..0.3));
    let b = e.bbox(canvas.size);
    for y in b.y1..b.y2 {
        for x in b.x1..b.x2 {
            let (dx, dy) = (x as f64 + 0.5 - e.cx, y as f64 + 0.5 - e.cy);
            let limit = 1.0 - wobble * (0.5 + 0.5 * (k * dy.atan2(dx) + phase).sin());
            let d = e.dist(x, y) / limit;
            if d < 1.0 {
                let bg = canvas.px[y * canvas.size + x];
                let col = [0, 1, 2].map(|c| bg[c] * (1.0 - mix) + POLYP_RGB[c] * mix);
                canvas.blend(x, y, col, ((1.0 - d) / 0.5).min(1.0));
            }
        }
    }
}

/// Distractors share the pseudo-polyps' geometry but never their full hue
/// signature (hue, specular dot and sharp rim together).
fn paint_distractor<R: Rng>(r: &mut R, canvas: &mut Canvas, spec: &ToySpec) -> Rect {
    let e = random_ellipse(r, spec);
    if r.gen_bool(spec.hard_negative_prob.clamp(0.0, 1.0)) {
        tinted_patch(r, canvas, &e);
        return e.bbox(canvas.size);
    }
    match r.gen_range(0..4) {
        // dark lumen
        0 => e.paint(canvas, [0.22, 0.08, 0.08], 0.6, false),
        // reddish bump with a highlight
        1 => e.paint(canvas, [0.80, 0.30, 0.34], 0.4, true),
        // bare specular highlight
        2 => {
            let spot = Ellipse {
                rx: (0.35 * e.rx).max(1.0),
                ry: (0.35 * e.ry).max(1.0),
                ..e
            };
            spot.paint(canvas, [1.0, 0.96, 0.92], 0.8, false);
        }
        // fold: thin dark arc
        _ => {
            let size = canvas.size;
            let thick = r.gen_range(0.8..1.6);
            let b = e.bbox(size);
            for y in b.y1..b.y2 {
                for x in b.x1..b.x2 {
                    let d = e.dist(x, y);
                    let along = (y as f64 + 0.5) < e.cy;
                    let ring = (1.0 - (d - 0.85).abs() * e.rx / thick).max(0.0);
                    if along && ring > 0.0 {
                        canvas.blend(x, y, [0.35, 0.14, 0.14], 0.7 * ring);
                    }
                }
            }
        }
    }
    e.bbox(canvas.size)
}

/// Generate `n` annotated toy images, deterministically per seed.
pub fn generate_toy_dataset(n: usize, seed: u64, spec: &ToySpec) -> Result<Vec<AnnotatedImage>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    if spec.size < 16 || spec.radius_min <= 0.0 || spec.radius_min >= spec.radius_max || spec.radius_max >= 0.4 {
        return Err(Error::InvalidArgument("unusable toy spec".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut r = rng::stream(&[seed, i as u64, 0xda7a]);
            let mut canvas = background(&mut r, spec.size);
            let negative = r.gen_bool(spec.negative_fraction.clamp(0.0, 1.0));
            let n_dis = r.gen_range(0..=spec.max_distractors);
            let mut occupied: Vec<Rect> = Vec::new();
            for _ in 0..n_dis {
                occupied.push(paint_distractor(&mut r, &mut canvas, spec));
            }
            let mut boxes = Vec::new();
            if !negative && spec.max_polyps > 0 {
                let want = r.gen_range(1..=spec.max_polyps);
                let mut tries = 0;
                while boxes.len() < want && tries < 50 {
                    tries += 1;
                    let e = random_ellipse(&mut r, spec);
                    let b = e.bbox(spec.size);
                    if boxes.iter().any(|o| overlaps(o, &b)) {
                        continue;
                    }
                    let tint = r.gen_range(0.9..1.05);
                    let opacity = r.gen_range(spec.polyp_opacity_min.min(1.0)..=1.0);
                    let specular = r.gen_bool(spec.specular_prob.clamp(0.0, 1.0));
                    e.paint_with(&mut canvas, POLYP_RGB.map(|c| (c * tint).min(1.0)), 0.35, opacity, specular);
                    boxes.push(b);
                }
            }
            AnnotatedImage {
                id: format!("img_{i:04}.png"),
                image: canvas.into_image(),
                boxes,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub spec: ToySpec,
}

pub fn save_dataset(root: &Path, items: &[AnnotatedImage], meta: Option<&DatasetMeta>) -> Result<()> {
    let img_dir = root.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut ann = String::new();
    for it in items {
        it.image.save_png(&img_dir.join(&it.id))?;
        for b in &it.boxes {
            ann.push_str(&format!("{} {} {} {} {}\n", it.id, b.x1, b.y1, b.x2, b.y2));
        }
    }
    fs::write(root.join("annotations.txt"), ann)?;
    if let Some(m) = meta {
        let mut f = BufWriter::new(fs::File::create(root.join("meta.json"))?);
        serde_json::to_writer_pretty(&mut f, m)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse an annotation file into per-image box lists (validated against
/// image sizes later).
pub fn parse_annotations(path: &Path, text: &str) -> Result<BTreeMap<String, Vec<(usize, Rect)>>> {
    let mut out: BTreeMap<String, Vec<(usize, Rect)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Annotation {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected `filename x1 y1 x2 y2`, got {} fields", fields.len())));
        }
        let mut v = [0usize; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f
                .parse()
                .map_err(|_| err(format!("`{f}` is not a non-negative integer")))?;
        }
        out.entry(fields[0].to_string())
            .or_default()
            .push((lineno, Rect::new(v[0], v[1], v[2], v[3])));
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<Vec<AnnotatedImage>> {
    let ann_path = root.join("annotations.txt");
    let text = fs::read_to_string(&ann_path)?;
    let ann = parse_annotations(&ann_path, &text)?;
    let img_dir = root.join("images");
    let mut names: Vec<String> = fs::read_dir(&img_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    for name in ann.keys() {
        if !names.contains(name) {
            return Err(Error::MissingImage(img_dir.join(name)));
        }
    }
    names
        .into_iter()
        .map(|name| {
            let image = RgbImage::load_png(&img_dir.join(&name))?;
            let mut boxes = Vec::new();
            for (lineno, b) in ann.get(&name).into_iter().flatten() {
                b.validate(image.width, image.height).map_err(|e| Error::Annotation {
                    path: ann_path.clone(),
                    line: *lineno,
                    msg: e.to_string(),
                })?;
                boxes.push(*b);
            }
            Ok(AnnotatedImage {
                id: name,
                image,
                boxes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_a: Vec<String>,
    pub fold_b: Vec<String>,
}

impl FoldSplit {
    /// Which fold an id belongs to.
    pub fn fold_of(&self, id: &str) -> Option<Fold> {
        if self.fold_a.iter().any(|x| x == id) {
            Some(Fold::A)
        } else if self.fold_b.iter().any(|x| x == id) {
            Some(Fold::B)
        } else {
            None
        }
    }

    pub fn ids(&self, fold: Fold) -> &[String] {
        match fold {
            Fold::A => &self.fold_a,
            Fold::B => &self.fold_b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    A,
    B,
}

impl Fold {
    pub fn other(self) -> Fold {
        match self {
            Fold::A => Fold::B,
            Fold::B => Fold::A,
        }
    }
}

fn shuffled(ids: &[String], seed: u64, tag: u64) -> Vec<String> {
    let mut v = ids.to_vec();
    v.shuffle(&mut rng::stream(&[seed, tag]));
    v
}

/// Deterministic shuffled halving; fold A takes the extra id when odd.
pub fn two_fold_split(ids: &[String], seed: u64) -> Result<FoldSplit> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument("two-fold split needs at least 2 ids".into()));
    }
    let mut v = shuffled(ids, seed, 0xf01d);
    let fold_b = v.split_off(ids.len().div_ceil(2));
    Ok(FoldSplit { fold_a: v, fold_b })
}

/// Deterministic 8:1:1 partition into (train, val, test), each sorted by id.
pub fn train_val_test_split(ids: &[String], seed: u64) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    if ids.len() < 10 {
        return Err(Error::InvalidArgument("8:1:1 split needs at least 10 ids".into()));
    }
    let v = shuffled(ids, seed, 0x811);
    let n_val = ids.len() / 10;
    let n_test = ids.len() / 10;
    let n_train = ids.len() - n_val - n_test;
    let part = |s: &[String]| {
        let mut p = s.to_vec();
        p.sort();
        p
    };
    Ok((
        part(&v[..n_train]),
        part(&v[n_train..n_train + n_val]),
        part(&v[n_train + n_val..]),
    ))
}

/// Select items whose id appears in `ids`, keeping `ids` order.
pub fn select<'a>(items: &'a [AnnotatedImage], ids: &[String]) -> Vec<&'a AnnotatedImage> {
    let by_id: BTreeMap<&str, &AnnotatedImage> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect()
}

pub fn dataset_dir_is_nonempty(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    fn small_spec() -> ToySpec {
        ToySpec {
            size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_dataset(10, 7, &small_spec()).unwrap();
        let b = generate_toy_dataset(10, 7, &small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_dataset(10, 8, &small_spec()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boxes_tightly_contain_polyp_hue() {
        let spec = ToySpec {
            polyp_opacity_min: 1.0,
            ..small_spec()
        };
        let items = generate_toy_dataset(40, 3, &spec).unwrap();
        for it in &items {
            let g = it.image.to_unit_grid();
            for b in &it.boxes {
                b.validate(32, 32).unwrap();
                // polyp-colored pixels appear inside the box, and the box is at most
                // one pixel larger than the painted ellipse on each side
                let hue_px: Vec<(usize, usize)> = (b.y1..b.y2)
                    .flat_map(|y| (b.x1..b.x2).map(move |x| (y, x)))
                    .filter(|&(y, x)| g.get(1, y, x) > 0.5 && g.get(2, y, x) < 0.3)
                    .collect();
                assert!(!hue_px.is_empty(), "{} {:?}", it.id, b);
                let minx = hue_px.iter().map(|p| p.1).min().unwrap();
                let maxx = hue_px.iter().map(|p| p.1).max().unwrap();
                assert!(minx <= b.x1 + 2 && maxx + 3 >= b.x2, "{:?} {minx} {maxx}", b);
            }
        }
    }

    #[test]
    fn negative_fraction_knob() {
        let n = 2000;
        let items = generate_toy_dataset(n, 1, &small_spec()).unwrap();
        let neg = items.iter().filter(|i| i.boxes.is_empty()).count() as f64 / n as f64;
        // binomial sd at p = 0.2, n = 2000 is ~0.009
        assert!((neg - 0.2).abs() < 0.04, "{neg}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = generate_toy_dataset(6, 2, &small_spec()).unwrap();
        save_dataset(dir.path(), &items, Some(&DatasetMeta { seed: 2, spec: small_spec() })).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(items, back);
    }

    #[test]
    fn annotation_parsing() {
        let p = Path::new("annotations.txt");
        let m = parse_annotations(p, "img_003.png 12 20 44 61\n\n").unwrap();
        assert_eq!(m["img_003.png"], vec![(1, Rect::new(12, 20, 44, 61))]);
        let e = parse_annotations(p, "a.png 1 2 3 4\nb.png 1 2 x 4\n").unwrap_err();
        assert!(matches!(e, Error::Annotation { line: 2, .. }), "{e}");
        assert!(parse_annotations(p, "a.png 1 2 3\n").is_err());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let items = generate_toy_dataset(2, 2, &small_spec()).unwrap();
        save_dataset(dir.path(), &items, None).unwrap();
        // image listed with zero boxes loads as a negative
        fs::write(dir.path().join("annotations.txt"), "").unwrap();
        assert!(load_dataset(dir.path()).unwrap().iter().all(|i| i.boxes.is_empty()));
        fs::write(dir.path().join("annotations.txt"), "img_0000.png 1 1 5 5\nimg_0001.png 20 20 40 30\n").unwrap();
        let e = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(e, Error::Annotation { line: 2, .. }), "{e}");
        fs::write(dir.path().join("annotations.txt"), "nope.png 1 1 5 5\n").unwrap();
        assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::MissingImage(_)));
    }

    #[test]
    fn split_examples() {
        let s = two_fold_split(&ids(10), 1).unwrap();
        assert_eq!((s.fold_a.len(), s.fold_b.len()), (5, 5));
        let s = two_fold_split(&ids(11), 1).unwrap();
        assert_eq!((s.fold_a.len(), s.fold_b.len()), (6, 5));
        assert_eq!(two_fold_split(&ids(11), 1).unwrap(), s);
        assert!(two_fold_split(&ids(1), 1).is_err());

        let (a, b, c) = train_val_test_split(&ids(100), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let (a, b, c) = train_val_test_split(&ids(1000), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (800, 100, 100));
        let (a, b, c) = train_val_test_split(&ids(600), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (480, 60, 60));
        assert!(train_val_test_split(&ids(9), 3).is_err());
    }

    #[test]
    fn grid_conversions_are_lossless_for_u8() {
        let items = generate_toy_dataset(1, 5, &small_spec()).unwrap();
        let img = &items[0].image;
        assert_eq!(&RgbImage::from_unit_grid(&img.to_unit_grid()), img);
        assert_eq!(&RgbImage::from_diffusion_grid(&img.to_diffusion_grid()), img);
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_exhaustive(n in 10usize..200, seed in any::<u64>()) {
            let all = ids(n);
            let (a, b, c) = train_val_test_split(&all, seed).unwrap();
            let mut joined: Vec<String> = a.iter().chain(&b).chain(&c).cloned().collect();
            joined.sort();
            let mut sorted = all.clone();
            sorted.sort();
            prop_assert_eq!(joined, sorted.clone());
            let f = two_fold_split(&all, seed).unwrap();
            prop_assert!(f.fold_a.len().abs_diff(f.fold_b.len()) <= 1);
            let mut both: Vec<String> = f.fold_a.iter().chain(&f.fold_b).cloned().collect();
            both.sort();
            prop_assert_eq!(both, sorted);
        }
    }
}
