//! Command implementations behind the `dubox` binary.

mod config;
mod train;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use config::{OptimizerConfig, RunConfig};
pub use train::{
    batch_targets, checkpoint_name, compute_gradients, load_model, sample_batch, train, train_step, TrainOutcome, FINAL_CHECKPOINT, ITERATION_KEY,
    LOG_FILE,
};

use crate::dataio::{generate, read_dataset, read_dbimg, write_dataset, write_dbimg, DatasetRecord, ShapeClass};
use crate::encoding::{encode_targets, DetectorId, HookGrid};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::inference::{evaluate_candidates, merge_for_mode, predict_candidates, EvalMode, Evaluation, InferenceConfig, PredictionLine};
use crate::network::Model;
use crate::tensor::Tensor;

/// Generate `count` synthetic records and write them to `out`.
pub fn gen_data(cfg: &RunConfig, count: usize, seed: Option<u64>, out: &Path) -> Result<Vec<DatasetRecord>> {
    let mut synth = cfg.synth.clone();
    if let Some(s) = seed {
        synth.seed = s;
    }
    let records = generate(&synth, count)?;
    write_dataset(out, &records, &synth)?;
    Ok(records)
}

/// Ground-truth filter for evaluation on a size band.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SizeFilter {
    /// Keep ground truth whose shorter side is below this many pixels.
    pub max_short_side: Option<f64>,
    /// Keep ground truth whose shorter side is at least this many pixels.
    pub min_short_side: Option<f64>,
}

impl SizeFilter {
    pub fn accepts(&self, b: &BBox) -> bool {
        self.max_short_side.is_none_or(|m| b.short_side() < m) && self.min_short_side.is_none_or(|m| b.short_side() >= m)
    }
}

/// Evaluate a model on a dataset in each requested mode, sharing one pass
/// of network inference.
pub fn evaluate_modes(
    model: &Model<f32>,
    records: &[DatasetRecord],
    modes: &[EvalMode],
    cfg: &InferenceConfig,
    filter: SizeFilter,
    threads: usize,
) -> Result<Vec<Evaluation>> {
    let images: Vec<&Tensor<f32>> = records.iter().map(|r| &r.image).collect();
    let cands = predict_candidates(model, &images, cfg, threads)?;
    modes
        .iter()
        .map(|&m| evaluate_candidates(records, &cands, m, cfg, |b| filter.accepts(b)))
        .collect()
}

/// Load a checkpoint and a dataset directory and evaluate.
pub fn eval_command(checkpoint: &Path, data: &Path, modes: &[EvalMode], cfg: &InferenceConfig, filter: SizeFilter, threads: usize) -> Result<Vec<Evaluation>> {
    cfg.validate()?;
    let (model, _) = load_model(checkpoint)?;
    let records = read_dataset(data, model.cfg.num_classes)?;
    evaluate_modes(&model, &records, modes, cfg, filter, threads)
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l).map_err(|e| Error::contract(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const OVERLAY_COLORS: [[f32; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Copy of `image` with one-pixel box outlines, coloured by class.
pub fn draw_overlay(image: &Tensor<f32>, dets: &[Detection]) -> Result<Tensor<f32>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape("overlay expects [C, H, W]"));
    };
    let mut data = image.data().to_vec();
    for d in dets {
        let color = OVERLAY_COLORS[d.class_id % OVERLAY_COLORS.len()];
        let px = |v: f64, max: usize| (v.floor().max(0.0) as usize).min(max - 1);
        let (x1, y1) = (px(d.bbox.x1, w), px(d.bbox.y1, h));
        let (x2, y2) = (px(d.bbox.x2 - 1.0, w), px(d.bbox.y2 - 1.0, h));
        let mut paint = |x: usize, y: usize| {
            for (ch, &v) in color.iter().enumerate().take(c) {
                data[(ch * h + y) * w + x] = v;
            }
        };
        for x in x1..=x2.max(x1) {
            paint(x, y1);
            paint(x, y2);
        }
        for y in y1..=y2.max(y1) {
            paint(x1, y);
            paint(x2, y);
        }
    }
    Tensor::new(image.shape().to_vec(), data)
}

/// Detect objects in one DBIMG file.
pub fn detect_command(checkpoint: &Path, image: &Path, cfg: &InferenceConfig, overlay: Option<&Path>, threads: usize) -> Result<PredictionLine> {
    cfg.validate()?;
    let (model, _) = load_model(checkpoint)?;
    let img = read_dbimg(image)?;
    let cands = predict_candidates(&model, &[&img], cfg, threads)?;
    let [d1, d2] = cands.into_iter().next().expect("one image");
    let dets = merge_for_mode(d1, d2, EvalMode::Joint, cfg)?;
    if let Some(path) = overlay {
        write_dbimg(path, &draw_overlay(&img, &dets)?)?;
    }
    let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PredictionLine::new(&id, &dets))
}

/// Text dump of both detectors' targets for one record.
pub fn inspect_targets(cfg: &RunConfig, data: &Path, id: &str) -> Result<String> {
    let records = read_dataset(data, cfg.model.num_classes)?;
    let rec = records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::contract(format!("no record `{id}` in {}", data.display())))?;
    let mut out = String::new();
    let _ = writeln!(out, "record {} size {}x{}", rec.id, rec.width(), rec.height());
    for (b, c) in &rec.gts {
        let name = ShapeClass::NAMES.get(*c).copied().unwrap_or("?");
        let _ = writeln!(out, "  gt class {c} ({name}) box ({:.4}, {:.4}, {:.4}, {:.4})", b.x1, b.y1, b.x2, b.y2);
    }
    for det in DetectorId::ALL {
        let grid = HookGrid::new(rec.width(), rec.height(), det)?;
        out.push_str(&encode_targets(&rec.gts, &grid, &cfg.encoder)?.dump());
    }
    Ok(out)
}
