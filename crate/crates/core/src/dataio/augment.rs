//! SSD-style augmentation: random expansion, random crop, horizontal flip and
//! photometric jitter, followed by a nearest-neighbour resize back to the
//! training resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetRecord, MIN_BOX_SIDE};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub expand_prob: f64,
    pub max_expand: f64,
    /// Probability of attempting a random crop.
    pub crop_prob: f64,
    pub min_crop_area: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast_low: f64,
    pub contrast_high: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            expand_prob: 0.3,
            max_expand: 2.0,
            crop_prob: 0.5,
            min_crop_area: 0.3,
            flip_prob: 0.5,
            brightness: 0.2,
            contrast_low: 0.8,
            contrast_high: 1.25,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("augment.{key}"), msg));
        for (key, p) in [("expand_prob", self.expand_prob), ("crop_prob", self.crop_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(key, "probability must lie in [0, 1]");
            }
        }
        if !(self.max_expand >= 1.0) {
            return bad("max_expand", "must be at least 1");
        }
        if !(self.min_crop_area > 0.0 && self.min_crop_area <= 1.0) {
            return bad("min_crop_area", "must lie in (0, 1]");
        }
        if !(self.brightness >= 0.0) {
            return bad("brightness", "must be non-negative");
        }
        if !(self.contrast_low > 0.0 && self.contrast_high >= self.contrast_low) {
            return bad("contrast_low", "need 0 < contrast_low <= contrast_high");
        }
        Ok(())
    }
}

const CROP_ATTEMPTS: usize = 50;

/// Full augmentation pipeline; the output has the input's resolution.
pub fn augment<R: Rng>(rec: &DatasetRecord, cfg: &AugmentConfig, rng: &mut R) -> Result<DatasetRecord> {
    if !cfg.enabled {
        return Ok(rec.clone());
    }
    let (out_w, out_h) = (rec.width(), rec.height());
    let mut cur = rec.clone();
    if rng.gen_bool(cfg.expand_prob) {
        let ratio = rng.gen_range(1.0..=cfg.max_expand);
        let cw = ((out_w as f64) * ratio).round() as usize;
        let ch = ((out_h as f64) * ratio).round() as usize;
        let left = rng.gen_range(0..=cw - out_w);
        let top = rng.gen_range(0..=ch - out_h);
        cur = expand(&cur, cw, ch, left, top)?;
    }
    if rng.gen_bool(cfg.crop_prob) || cur.width() != out_w || cur.height() != out_h {
        let mut found = None;
        for _ in 0..CROP_ATTEMPTS {
            let (w, h) = (cur.width() as f64, cur.height() as f64);
            let area = rng.gen_range(cfg.min_crop_area..=1.0) * w * h;
            let aspect = rng.gen_range(0.5f64..=2.0);
            let cw = ((area * aspect).sqrt().round() as usize).clamp(1, cur.width());
            let ch = ((area / aspect).sqrt().round() as usize).clamp(1, cur.height());
            let x0 = rng.gen_range(0..=cur.width() - cw);
            let y0 = rng.gen_range(0..=cur.height() - ch);
            if let Some(c) = crop(&cur, x0, y0, cw, ch, out_w, out_h)? {
                found = Some(c);
                break;
            }
        }
        match found {
            Some(c) => cur = c,
            None => return Ok(rec.clone()),
        }
    }
    if rng.gen_bool(cfg.flip_prob) {
        cur = hflip(&cur)?;
    }
    let delta = rng.gen_range(-cfg.brightness..=cfg.brightness);
    let contrast = rng.gen_range(cfg.contrast_low..=cfg.contrast_high);
    photometric(&cur, delta, contrast)
}

/// Paste the image at `(left, top)` on a `cw × ch` canvas filled with the
/// per-channel image mean.
pub fn expand(rec: &DatasetRecord, cw: usize, ch: usize, left: usize, top: usize) -> Result<DatasetRecord> {
    let (w, h) = (rec.width(), rec.height());
    if left + w > cw || top + h > ch {
        return Err(Error::contract(format!("expand: {w}x{h} at ({left}, {top}) exceeds {cw}x{ch}")));
    }
    let src = rec.image.data();
    let mut data = Vec::with_capacity(3 * cw * ch);
    for c in 0..3 {
        let plane = &src[c * w * h..(c + 1) * w * h];
        let mean = (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32;
        let start = data.len();
        data.resize(start + cw * ch, mean);
        for y in 0..h {
            let row = start + (top + y) * cw + left;
            data[row..row + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
        }
    }
    let gts = rec
        .gts
        .iter()
        .map(|(b, c)| Ok((BBox::image(b.x1 + left as f64, b.y1 + top as f64, b.x2 + left as f64, b.y2 + top as f64)?, *c)))
        .collect::<Result<_>>()?;
    Ok(DatasetRecord {
        image: Tensor::new(vec![3, ch, cw], data)?,
        gts,
        id: rec.id.clone(),
    })
}

/// Crop the window `(x0, y0, cw, ch)` and resize it to `out_w × out_h`.
///
/// Ground truth whose centre leaves the window is dropped; the rest is
/// clipped and rescaled, and boxes thinner than the minimum side after
/// rescaling are dropped. Returns `None` when nothing survives.
pub fn crop(
    rec: &DatasetRecord,
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
    out_w: usize,
    out_h: usize,
) -> Result<Option<DatasetRecord>> {
    if x0 + cw > rec.width() || y0 + ch > rec.height() || cw == 0 || ch == 0 {
        return Err(Error::contract("crop window outside image"));
    }
    let (fx0, fy0, fx1, fy1) = (x0 as f64, y0 as f64, (x0 + cw) as f64, (y0 + ch) as f64);
    let (sx, sy) = (out_w as f64 / cw as f64, out_h as f64 / ch as f64);
    let mut gts = Vec::new();
    for (b, c) in &rec.gts {
        let (cx, cy) = b.center();
        if cx < fx0 || cx >= fx1 || cy < fy0 || cy >= fy1 {
            continue;
        }
        let nb = BBox::image(
            (b.x1.max(fx0) - fx0) * sx,
            (b.y1.max(fy0) - fy0) * sy,
            (b.x2.min(fx1) - fx0) * sx,
            (b.y2.min(fy1) - fy0) * sy,
        )?;
        if nb.short_side() >= MIN_BOX_SIDE {
            gts.push((nb, *c));
        }
    }
    if gts.is_empty() {
        return Ok(None);
    }
    let window = window(&rec.image, x0, y0, cw, ch)?;
    Ok(Some(DatasetRecord {
        image: resize_nearest(&window, out_w, out_h)?,
        gts,
        id: rec.id.clone(),
    }))
}

fn window(image: &Tensor<f32>, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut data = Vec::with_capacity(3 * cw * ch);
    for c in 0..3 {
        for y in y0..y0 + ch {
            let row = (c * h + y) * w;
            data.extend_from_slice(&src[row + x0..row + x0 + cw]);
        }
    }
    Tensor::new(vec![3, ch, cw], data)
}

/// Nearest-neighbour resize of a `[3, H, W]` image.
pub fn resize_nearest(image: &Tensor<f32>, out_w: usize, out_h: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape("resize expects [C, H, W]"));
    };
    let (c, h, w) = (*c, *h, *w);
    if (w, h) == (out_w, out_h) {
        return Ok(image.clone());
    }
    let src = image.data();
    let xs: Vec<usize> = (0..out_w)
        .map(|x| (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1))
        .collect();
    let mut data = Vec::with_capacity(c * out_w * out_h);
    for ch in 0..c {
        for y in 0..out_h {
            let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
            let row = (ch * h + sy) * w;
            data.extend(xs.iter().map(|&sx| src[row + sx]));
        }
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

pub fn hflip(rec: &DatasetRecord) -> Result<DatasetRecord> {
    let w = rec.width();
    let mut data = rec.image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    let wf = w as f64;
    let gts = rec
        .gts
        .iter()
        .map(|(b, c)| Ok((BBox::image(wf - b.x2, b.y1, wf - b.x1, b.y2)?, *c)))
        .collect::<Result<_>>()?;
    Ok(DatasetRecord {
        image: Tensor::new(rec.image.shape().to_vec(), data)?,
        gts,
        id: rec.id.clone(),
    })
}

/// `v ← clamp(v·contrast + brightness, 0, 1)`.
pub fn photometric(rec: &DatasetRecord, brightness: f64, contrast: f64) -> Result<DatasetRecord> {
    let data = rec
        .image
        .data()
        .iter()
        .map(|&v| ((v as f64) * contrast + brightness).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(DatasetRecord {
        image: Tensor::new(rec.image.shape().to_vec(), data)?,
        gts: rec.gts.clone(),
        id: rec.id.clone(),
    })
}
