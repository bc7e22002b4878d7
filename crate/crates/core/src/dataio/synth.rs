use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Rectangle = 0,
    Ellipse = 1,
    Triangle = 2,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Rectangle, ShapeClass::Ellipse, ShapeClass::Triangle];
    pub const NAMES: [&'static str; 3] = ["rectangle", "ellipse", "triangle"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_short_side: f64,
    pub max_short_side: f64,
    /// Fraction of images that receive one object covering more than
    /// `large_area_fraction` of the frame.
    pub large_quota: f64,
    pub large_area_fraction: f64,
    pub max_pairwise_iou: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 128,
            height: 128,
            min_objects: 1,
            max_objects: 4,
            min_short_side: 8.0,
            max_short_side: 96.0,
            large_quota: 0.1,
            large_area_fraction: 0.3,
            max_pairwise_iou: 0.3,
            noise_amplitude: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("synth.{key}"), msg));
        if self.width == 0 || !self.width.is_multiple_of(64) {
            return bad("width", "must be a positive multiple of 64");
        }
        if self.height == 0 || !self.height.is_multiple_of(64) {
            return bad("height", "must be a positive multiple of 64");
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return bad("max_objects", "need 1 <= min_objects <= max_objects");
        }
        if !(self.min_short_side >= 2.0 && self.max_short_side >= self.min_short_side) {
            return bad("min_short_side", "need 2 <= min_short_side <= max_short_side");
        }
        if self.max_short_side > self.width.min(self.height) as f64 - 4.0 {
            return bad("max_short_side", "objects must fit inside the image");
        }
        if !(0.0..=1.0).contains(&self.large_quota) {
            return bad("large_quota", "must lie in [0, 1]");
        }
        if !(self.large_area_fraction > 0.0 && self.large_area_fraction < 0.6) {
            return bad("large_area_fraction", "must lie in (0, 0.6)");
        }
        if !(0.0..=1.0).contains(&self.max_pairwise_iou) {
            return bad("max_pairwise_iou", "must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return bad("noise_amplitude", "must lie in [0, 0.5]");
        }
        Ok(())
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;
const MIN_COLOR_DISTANCE: f64 = 0.35;
/// Largest share of the smaller of two boxes the other may overlap, so a
/// small shape is never hidden under a big one.
const MAX_COVERED_FRACTION: f64 = 0.5;

/// Generate `count` records; record `k` depends only on `(cfg, k)`.
pub fn generate(cfg: &SynthConfig, count: usize) -> Result<Vec<DatasetRecord>> {
    if count == 0 {
        return Err(Error::contract("generate needs count >= 1"));
    }
    cfg.validate()?;
    (0..count).map(|k| generate_record(cfg, k)).collect()
}

pub fn generate_record(cfg: &SynthConfig, index: usize) -> Result<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (w, h) = (cfg.width, cfg.height);
    let image_area = (w * h) as f64;

    let background: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut pixels = vec![0f32; 3 * w * h];
    for (c, plane) in pixels.chunks_mut(w * h).enumerate() {
        for v in plane.iter_mut() {
            let noise = rng.gen_range(-1.0..=1.0) * cfg.noise_amplitude;
            *v = (background[c] + noise).clamp(0.0, 1.0) as f32;
        }
    }

    let wants_large = rng.gen_bool(cfg.large_quota);
    let n_objects = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut colors: Vec<[f64; 3]> = vec![background];
    let mut gts: Vec<(BBox, usize)> = Vec::new();

    for k in 0..n_objects {
        let large = wants_large && k == 0;
        let Some((rect, class)) = place(cfg, &mut rng, large, &gts, image_area) else {
            continue;
        };
        let Some(color) = pick_color(&mut rng, &colors) else {
            continue;
        };
        let mask = rasterize(class, rect, &mut rng);
        let Some(tight) = tight_box(&mask, rect) else {
            continue;
        };
        if tight.short_side() < super::MIN_BOX_SIDE {
            continue;
        }
        let (x0, y0, rw, _) = rect;
        for (idx, &inside) in mask.iter().enumerate() {
            if !inside {
                continue;
            }
            let (px, py) = (x0 + idx % rw, y0 + idx / rw);
            for c in 0..3 {
                let shade = rng.gen_range(-0.5..=0.5) * cfg.noise_amplitude * 0.5;
                pixels[(c * h + py) * w + px] = (color[c] + shade).clamp(0.0, 1.0) as f32;
            }
        }
        colors.push(color);
        gts.push((tight, class as usize));
    }

    let rec = DatasetRecord {
        image: Tensor::new(vec![3, h, w], pixels)?,
        gts,
        id: format!("{:06}", index),
    };
    rec.validate()?;
    Ok(rec)
}

type Rect = (usize, usize, usize, usize);

fn place(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    large: bool,
    placed: &[(BBox, usize)],
    image_area: f64,
) -> Option<(Rect, ShapeClass)> {
    let (w, h) = (cfg.width, cfg.height);
    let max_long = (w.min(h) - 4) as f64;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let class = ShapeClass::ALL[rng.gen_range(0..3)];
        let (short, long) = if large {
            let min_short = (cfg.large_area_fraction * image_area * 1.05).sqrt().min(cfg.max_short_side);
            let short = rng.gen_range(min_short..=cfg.max_short_side);
            (short, rng.gen_range(short..=(short * 1.4).min(max_long).max(short)))
        } else {
            let lo = cfg.min_short_side.ln();
            let hi = cfg.max_short_side.ln();
            let short = rng.gen_range(lo..=hi).exp();
            (short, (short * rng.gen_range(1.0..=2.0)).min(max_long))
        };
        let (bw, bh) = if rng.gen_bool(0.5) { (short, long) } else { (long, short) };
        let (bw, bh) = (bw.round() as usize, bh.round() as usize);
        if bw < 2 || bh < 2 || bw >= w || bh >= h {
            continue;
        }
        let fraction = (bw * bh) as f64 / image_area;
        if large != (fraction > cfg.large_area_fraction) {
            continue;
        }
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        let candidate = BBox::image(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64).ok()?;
        let clear = placed.iter().all(|(b, _)| {
            iou(b, &candidate).is_ok_and(|o| o <= cfg.max_pairwise_iou)
                && covered_fraction(b, &candidate) <= MAX_COVERED_FRACTION
        });
        if clear {
            return Some(((x0, y0, bw, bh), class));
        }
    }
    None
}

fn covered_fraction(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih / a.area().min(b.area())
}

fn pick_color(rng: &mut ChaCha8Rng, taken: &[[f64; 3]]) -> Option<[f64; 3]> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let far = taken.iter().all(|t| {
            let d: f64 = t.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            d.sqrt() >= MIN_COLOR_DISTANCE
        });
        if far {
            return Some(c);
        }
    }
    None
}

/// Row-major mask over the rect; pixel centres are tested against the shape.
fn rasterize(class: ShapeClass, (_, _, w, h): Rect, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (wf, hf) = (w as f64, h as f64);
    let apex = rng.gen_range(0.0..=wf);
    let upward = rng.gen_bool(0.5);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            mask[y * w + x] = match class {
                ShapeClass::Rectangle => true,
                ShapeClass::Ellipse => {
                    let (dx, dy) = ((px - wf / 2.0) / (wf / 2.0), (py - hf / 2.0) / (hf / 2.0));
                    dx * dx + dy * dy <= 1.0
                }
                ShapeClass::Triangle => {
                    // apex on one horizontal edge, base spanning the other
                    let t = if upward { py / hf } else { 1.0 - py / hf };
                    let left = apex * (1.0 - t);
                    let right = apex + (wf - apex) * t;
                    px >= left && px <= right
                }
            };
        }
    }
    mask
}

fn tight_box(mask: &[bool], (x0, y0, w, _): Rect) -> Option<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (idx % w, idx / w);
        bounds = Some(match bounds {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }
    let (a, b, c, d) = bounds?;
    BBox::image((x0 + a) as f64, (y0 + b) as f64, (x0 + c + 1) as f64, (y0 + d + 1) as f64).ok()
}
