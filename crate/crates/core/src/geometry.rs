//! Axis-aligned boxes, IoU, non-maximum suppression and average precision.
//!
//! Boxes are continuous rectangles with area `(x2 − x1)(y2 − y1)`; there is no
//! `+1` pixel convention. Every box carries a unit tag and operations that
//! combine two boxes refuse to mix units.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Unit {
    ImagePixels,
    /// Coordinates on an output map with the given stride.
    Feature { stride: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub unit: Unit,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, unit: Unit) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 > x2 || y1 > y2 {
            return Err(Error::contract(format!(
                "invalid box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BBox {
            x1,
            y1,
            x2,
            y2,
            unit,
        })
    }

    pub fn image(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2, y2, Unit::ImagePixels)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn short_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Divide image-pixel coordinates by `stride`.
    pub fn to_feature(&self, stride: u32) -> Result<Self> {
        if self.unit != Unit::ImagePixels {
            return Err(Error::contract("to_feature expects an image-pixel box"));
        }
        let s = stride as f64;
        Ok(BBox {
            x1: self.x1 / s,
            y1: self.y1 / s,
            x2: self.x2 / s,
            y2: self.y2 / s,
            unit: Unit::Feature { stride },
        })
    }

    fn check_unit(&self, other: &BBox) -> Result<()> {
        if self.unit != other.unit {
            return Err(Error::contract(format!(
                "unit mismatch: {:?} vs {:?}",
                self.unit, other.unit
            )));
        }
        Ok(())
    }

    fn lexical_cmp(&self, other: &BBox) -> Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// Intersection-over-union; zero for disjoint or zero-area boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check_unit(b)?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// 1 for the stride-8 detector, 2 for the stride-32 detector.
    pub detector_id: u8,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64, detector_id: u8) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::contract(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
            detector_id,
        })
    }
}

/// Deterministic ranking: score descending, then smaller class id, then
/// lexicographic box coordinates.
pub fn rank_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| a.bbox.lexical_cmp(&b.bbox))
}

/// Greedy class-wise non-maximum suppression.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::contract(format!(
            "nms threshold {iou_threshold} outside [0, 1]"
        )));
    }
    if let Some(first) = dets.first() {
        for d in dets {
            first.bbox.check_unit(&d.bbox)?;
        }
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank_cmp(a, b));
    let mut kept_by_class: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
    let mut kept = Vec::new();
    for d in order {
        let same_class = kept_by_class.entry(d.class_id).or_default();
        if same_class
            .iter()
            .all(|k| iou_unchecked(k, &d.bbox) < iou_threshold)
        {
            same_class.push(d.bbox);
            kept.push(*d);
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Detections and ground truth of one image.
#[derive(Clone, Copy, Debug)]
pub struct ImageResult<'a> {
    pub detections: &'a [Detection],
    pub ground_truth: &'a [GroundTruth],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassCounts {
    pub ground_truth: usize,
    pub detections: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct APReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub counts: BTreeMap<usize, ClassCounts>,
    pub iou_threshold: f64,
}

impl APReport {
    pub fn to_table(&self, class_names: &[&str]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8}", "class", "gt", "dets", "AP");
        for (&c, counts) in &self.counts {
            let name = class_names
                .get(c)
                .map(|s| s.to_string())
                .unwrap_or_else(|| c.to_string());
            let ap = self
                .per_class_ap
                .get(&c)
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".to_string());
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>8}",
                name, counts.ground_truth, counts.detections, ap
            );
        }
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8.4}", format!("mAP@{}", self.iou_threshold), "", "", self.map);
        out
    }
}

/// Average precision of detections against ground truth in a single image.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Result<APReport> {
    average_precision_images(
        &[ImageResult {
            detections: dets,
            ground_truth: gts,
        }],
        iou_threshold,
    )
}

/// Dataset-level average precision; matching never crosses image boundaries.
pub fn average_precision_images(images: &[ImageResult<'_>], iou_threshold: f64) -> Result<APReport> {
    average_precision_filtered(images, iou_threshold, |_| true)
}

/// Average precision restricted to boxes accepted by `in_subset`.
///
/// Ground truth outside the subset is ignored rather than removed: a
/// detection that can only match an ignored ground truth is dropped, as is an
/// unmatched detection whose own box falls outside the subset.
pub fn average_precision_filtered<F>(images: &[ImageResult<'_>], iou_threshold: f64, in_subset: F) -> Result<APReport>
where
    F: Fn(&BBox) -> bool,
{
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::contract(format!(
            "AP threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let mut counts: BTreeMap<usize, ClassCounts> = BTreeMap::new();
    for img in images {
        for g in img.ground_truth {
            if in_subset(&g.bbox) {
                counts.entry(g.class_id).or_default().ground_truth += 1;
            }
        }
        for d in img.detections {
            counts.entry(d.class_id).or_default().detections += 1;
        }
    }

    let mut per_class_ap = BTreeMap::new();
    for (&class, c) in &counts {
        if c.ground_truth == 0 {
            continue;
        }
        // (image index, detection) for this class in ranking order
        let mut ranked: Vec<(usize, &Detection)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, img)| img.detections.iter().filter(|d| d.class_id == class).map(move |d| (i, d)))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.score
                .total_cmp(&a.1.score)
                .then(a.0.cmp(&b.0))
                .then_with(|| a.1.bbox.lexical_cmp(&b.1.bbox))
        });
        let mut matched: Vec<Vec<bool>> = images.iter().map(|img| vec![false; img.ground_truth.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for (img_idx, det) in ranked {
            let gts = images[img_idx].ground_truth;
            let mut best: Option<(usize, f64)> = None;
            let mut ignored_hit = false;
            for (gi, g) in gts.iter().enumerate() {
                if g.class_id != class {
                    continue;
                }
                let o = iou(&det.bbox, &g.bbox)?;
                if o < iou_threshold {
                    continue;
                }
                if !in_subset(&g.bbox) {
                    ignored_hit = true;
                    continue;
                }
                if matched[img_idx][gi] {
                    continue;
                }
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[img_idx][gi] = true;
                    hits.push(true);
                }
                None if ignored_hit || !in_subset(&det.bbox) => {}
                None => hits.push(false),
            }
        }
        per_class_ap.insert(class, all_point_ap(&hits, c.ground_truth));
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(APReport {
        per_class_ap,
        map,
        counts,
        iou_threshold,
    })
}

/// Area under the precision envelope for a ranked TP/FP sequence.
fn all_point_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // monotone envelope from the right
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap.clamp(0.0, 1.0)
}
