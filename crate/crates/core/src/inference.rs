//! Detection decoding, dual-detector merging and dataset evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetRecord;
use crate::encoding::{decode_offsets, DetectorId, HookGrid};
use crate::error::{Error, Result};
use crate::geometry::{average_precision_filtered, nms, APReport, BBox, Detection, GroundTruth, ImageResult};
use crate::network::{DetectorOutput, Model};
use crate::tensor::{Element, Tensor};

/// Which detections take part in evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Joint,
    D1,
    D2,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Joint, EvalMode::D1, EvalMode::D2];
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Joint => "joint",
            EvalMode::D1 => "d1",
            EvalMode::D2 => "d2",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(EvalMode::Joint),
            "d1" | "detector1" => Ok(EvalMode::D1),
            "d2" | "detector2" => Ok(EvalMode::D2),
            other => Err(Error::config("mode", format!("unknown mode `{other}` (joint, d1, d2)"))),
        }
    }
}

/// Optional per-detector score rescaling before the joint merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeCalibration {
    None,
    /// Per image and detector, map scores affinely onto `[0, 1]`.
    MinMax,
}

impl FromStr for MergeCalibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MergeCalibration::None),
            "minmax" => Ok(MergeCalibration::MinMax),
            other => Err(Error::config("merge_calibration", format!("unknown calibration `{other}` (none, minmax)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub iou_threshold: f64,
    pub merge_calibration: MergeCalibration,
    /// Images per forward pass.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            iou_threshold: 0.5,
            merge_calibration: MergeCalibration::None,
            batch_size: 16,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_threshold", self.nms_threshold),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("inference.{key}"), "must lie in [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("inference.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Decode one image's maps: `cls` is `[C, h, w]`, `bbox` is `[4, h, w]`.
///
/// Every (hook, class) with score at least `score_threshold` yields a
/// candidate; hooks decoding to an empty box are dropped.
pub fn decode_maps(cls: &[f64], bbox: &[f64], grid: &HookGrid, score_threshold: f64) -> Result<Vec<Detection>> {
    let hw = grid.hooks();
    if hw == 0 || !cls.len().is_multiple_of(hw) || bbox.len() != 4 * hw {
        return Err(Error::shape(format!(
            "decode: maps of {} and {} values on a {}x{} grid",
            cls.len(),
            bbox.len(),
            grid.map_w,
            grid.map_h
        )));
    }
    let classes = cls.len() / hw;
    let mut out = Vec::new();
    for j in 0..grid.map_h {
        for i in 0..grid.map_w {
            let k = j * grid.map_w + i;
            let mut decoded: Option<Option<BBox>> = None;
            for c in 0..classes {
                let score = cls[c * hw + k];
                if score < score_threshold {
                    continue;
                }
                let b = *decoded.get_or_insert_with(|| {
                    let offsets = [bbox[k], bbox[hw + k], bbox[2 * hw + k], bbox[3 * hw + k]];
                    decode_offsets(i, j, offsets, grid).ok()
                });
                if let Some(b) = b {
                    out.push(Detection::new(b, c, score.clamp(0.0, 1.0), grid.detector.number())?);
                }
            }
        }
    }
    Ok(out)
}

/// Decode image `n` of a batched detector output.
pub fn decode_detector<T: Element>(out: &DetectorOutput<T>, n: usize, grid: &HookGrid, score_threshold: f64) -> Result<Vec<Detection>> {
    let cls: Vec<f64> = out.cls.batch_item(n)?.data().iter().map(|v| v.as_f64()).collect();
    let bbox: Vec<f64> = out.bbox.batch_item(n)?.data().iter().map(|v| v.as_f64()).collect();
    decode_maps(&cls, &bbox, grid, score_threshold)
}

fn calibrate(dets: &mut [Detection]) {
    let lo = dets.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
    let hi = dets.iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        dets.iter_mut().for_each(|d| d.score = (d.score - lo) / (hi - lo));
    }
}

/// Union of both detectors' candidates followed by class-wise NMS.
pub fn joint_merge(d1: &[Detection], d2: &[Detection], nms_threshold: f64) -> Result<Vec<Detection>> {
    let all: Vec<Detection> = d1.iter().chain(d2).copied().collect();
    nms(&all, nms_threshold)
}

/// Final detections for one image given its two candidate lists.
pub fn merge_for_mode(mut d1: Vec<Detection>, mut d2: Vec<Detection>, mode: EvalMode, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    match mode {
        EvalMode::D1 => nms(&d1, cfg.nms_threshold),
        EvalMode::D2 => nms(&d2, cfg.nms_threshold),
        EvalMode::Joint => {
            if cfg.merge_calibration == MergeCalibration::MinMax {
                calibrate(&mut d1);
                calibrate(&mut d2);
            }
            joint_merge(&d1, &d2, cfg.nms_threshold)
        }
    }
}

/// Candidates of both detectors for every image of a batched output.
pub fn candidates<T: Element>(outputs: &[DetectorOutput<T>; 2], image_w: usize, image_h: usize, score_threshold: f64) -> Result<Vec<[Vec<Detection>; 2]>> {
    let grids = [
        HookGrid::new(image_w, image_h, DetectorId::One)?,
        HookGrid::new(image_w, image_h, DetectorId::Two)?,
    ];
    let n = outputs[0].cls.shape()[0];
    (0..n)
        .map(|i| {
            Ok([
                decode_detector(&outputs[0], i, &grids[0], score_threshold)?,
                decode_detector(&outputs[1], i, &grids[1], score_threshold)?,
            ])
        })
        .collect()
}

/// Run the model over `images` (each `[3, H, W]`) and return per-image
/// candidates of both detectors.
pub fn predict_candidates(model: &Model<f32>, images: &[&Tensor<f32>], cfg: &InferenceConfig, threads: usize) -> Result<Vec<[Vec<Detection>; 2]>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(cfg.batch_size) {
        for img in chunk {
            if img.shape() != [3, model.cfg.input_h, model.cfg.input_w] {
                return Err(Error::contract(format!(
                    "image shape {:?} does not match the model input 3x{}x{}",
                    img.shape(),
                    model.cfg.input_h,
                    model.cfg.input_w
                )));
            }
        }
        let owned: Vec<Tensor<f32>> = chunk.iter().map(|t| (*t).clone()).collect();
        let batch = Tensor::stack(&owned)?;
        let outputs = model.forward(&batch, threads)?;
        out.extend(candidates(&outputs, model.cfg.input_w, model.cfg.input_h, cfg.score_threshold)?);
    }
    Ok(out)
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub id: String,
    /// `[x1, y1, x2, y2, class_id, score, detector_id]`.
    pub detections: Vec<[f64; 7]>,
}

impl PredictionLine {
    pub fn new(id: &str, dets: &[Detection]) -> Self {
        PredictionLine {
            id: id.to_string(),
            detections: dets
                .iter()
                .map(|d| {
                    let [x1, y1, x2, y2] = d.bbox.coords();
                    [x1, y1, x2, y2, d.class_id as f64, d.score, d.detector_id as f64]
                })
                .collect(),
        }
    }

    pub fn to_detections(&self) -> Result<Vec<Detection>> {
        self.detections
            .iter()
            .map(|&[x1, y1, x2, y2, c, s, d]| Detection::new(BBox::image(x1, y1, x2, y2)?, c as usize, s, d as u8))
            .collect()
    }
}

/// Result of evaluating one mode over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub report: APReport,
    pub predictions: Vec<PredictionLine>,
}

fn ground_truth(rec: &DatasetRecord) -> Vec<GroundTruth> {
    rec.gts
        .iter()
        .map(|(b, c)| GroundTruth { bbox: *b, class_id: *c })
        .collect()
}

/// Average precision of per-image detections; `in_subset` restricts which
/// ground truth counts (the rest is ignored).
pub fn score_detections<F>(records: &[DatasetRecord], detections: &[Vec<Detection>], iou_threshold: f64, in_subset: F) -> Result<APReport>
where
    F: Fn(&BBox) -> bool,
{
    if records.len() != detections.len() {
        return Err(Error::contract(format!(
            "{} records but {} detection lists",
            records.len(),
            detections.len()
        )));
    }
    let gts: Vec<Vec<GroundTruth>> = records.iter().map(ground_truth).collect();
    let images: Vec<ImageResult<'_>> = detections
        .iter()
        .zip(&gts)
        .map(|(d, g)| ImageResult {
            detections: d,
            ground_truth: g,
        })
        .collect();
    average_precision_filtered(&images, iou_threshold, in_subset)
}

/// Evaluate precomputed candidates in the given mode.
pub fn evaluate_candidates<F>(
    records: &[DatasetRecord],
    cands: &[[Vec<Detection>; 2]],
    mode: EvalMode,
    cfg: &InferenceConfig,
    in_subset: F,
) -> Result<Evaluation>
where
    F: Fn(&BBox) -> bool,
{
    let merged = cands
        .iter()
        .map(|[a, b]| merge_for_mode(a.clone(), b.clone(), mode, cfg))
        .collect::<Result<Vec<_>>>()?;
    let report = score_detections(records, &merged, cfg.iou_threshold, in_subset)?;
    let predictions = records
        .iter()
        .zip(&merged)
        .map(|(r, d)| PredictionLine::new(&r.id, d))
        .collect();
    Ok(Evaluation {
        mode,
        report,
        predictions,
    })
}

/// Forward every record (no augmentation) and score the chosen mode.
pub fn evaluate(model: &Model<f32>, records: &[DatasetRecord], mode: EvalMode, cfg: &InferenceConfig, threads: usize) -> Result<Evaluation> {
    let images: Vec<&Tensor<f32>> = records.iter().map(|r| &r.image).collect();
    let cands = predict_candidates(model, &images, cfg, threads)?;
    evaluate_candidates(records, &cands, mode, cfg, |_| true)
}
