//! Training loop: balanced sampling, augmentation, target encoding, forward,
//! loss, backward and momentum SGD, with a CSV log and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::dataio::{augment, read_dataset, DatasetRecord};
use crate::encoding::{batch_balance_table, encode_targets, BatchBalanceTable, DetectorId, HookGrid, TargetMaps};
use crate::error::{Error, Result};
use crate::losses::{record_loss, DetectorVars, LossBreakdown, CSV_HEADER};
use crate::network::{Model, ModelConfig};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{sgd_step, SgdReport, Tape, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.dbckpt";
pub const ITERATION_KEY: &str = "iteration";

pub fn checkpoint_name(iter: usize) -> String {
    format!("iter-{iter:06}.dbckpt")
}

/// Draw and augment the batch of iteration `iter`; a pure function of the
/// run seed and `iter`, so resumed runs see the same batches.
pub fn sample_batch(data: &[DatasetRecord], table: &BatchBalanceTable, cfg: &RunConfig, iter: usize) -> Result<Vec<DatasetRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iter as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let (_, idx) = table.sample(&mut rng);
            augment(&data[idx], &cfg.augment, &mut rng)
        })
        .collect()
}

/// Encoded targets of both detectors for a batch.
pub fn batch_targets(batch: &[DatasetRecord], cfg: &RunConfig) -> Result<[Vec<TargetMaps>; 2]> {
    let (w, h) = (cfg.model.input_w, cfg.model.input_h);
    let grids = [HookGrid::new(w, h, DetectorId::One)?, HookGrid::new(w, h, DetectorId::Two)?];
    let encode = |g: &HookGrid| batch.iter().map(|r| encode_targets(&r.gts, g, &cfg.encoder)).collect::<Result<Vec<_>>>();
    Ok([encode(&grids[0])?, encode(&grids[1])?])
}

/// Forward, loss and backward on one batch; leaves gradients in the store.
pub fn compute_gradients(model: &mut Model<f32>, batch: &[DatasetRecord], cfg: &RunConfig, threads: usize) -> Result<LossBreakdown> {
    let targets = batch_targets(batch, cfg)?;
    let images: Vec<Tensor<f32>> = batch.iter().map(|r| r.image.clone()).collect();
    let mut tape = Tape::new().with_threads(threads);
    let x = tape.constant(Tensor::stack(&images)?);
    let outs = model.forward_vars(&mut tape, x)?;
    let vars = outs.map(|o| DetectorVars { cls: o.cls, bbox: o.bbox });
    let (loss, breakdown) = record_loss(&mut tape, vars, [&targets[0], &targets[1]], &cfg.loss)?;
    tape.backward(loss, &mut model.store)?;
    Ok(breakdown)
}

pub fn train_step(model: &mut Model<f32>, batch: &[DatasetRecord], cfg: &RunConfig, iter: usize, threads: usize) -> Result<(LossBreakdown, SgdReport)> {
    let breakdown = compute_gradients(model, batch, cfg, threads)?;
    let report = sgd_step(&mut model.store, &cfg.optimizer.sgd(iter))?;
    if !report.grad_norm.is_finite() {
        return Err(Error::numeric(format!("non-finite gradient norm at iteration {iter}")));
    }
    Ok((breakdown, report))
}

fn checkpoint(model: &Model<f32>, cfg: &RunConfig, iter: usize) -> Checkpoint {
    let mut header = model.cfg.to_header();
    header.push((ITERATION_KEY.into(), iter.to_string()));
    header.push(("run_seed".into(), cfg.seed.to_string()));
    header.push((
        "box_loss".into(),
        serde_json::to_value(cfg.loss.box_loss).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
    ));
    Checkpoint::from_store(&model.store, header)
}

/// Rebuild a model from a checkpoint; also returns the stored iteration.
pub fn load_model(path: &Path) -> Result<(Model<f32>, usize)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ModelConfig::from_header(&ckpt.header)?;
    let mut model = Model::new(cfg)?;
    ckpt.load_into(&mut model.store)?;
    let iter = match ckpt.header_value(ITERATION_KEY) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::contract(format!("checkpoint iteration `{v}` is not an integer")))?,
        None => 0,
    };
    Ok((model, iter))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub iterations: usize,
    pub final_checkpoint: PathBuf,
    pub last: Option<LossBreakdown>,
}

/// Keep the header and rows up to `iter` of an existing log.
fn truncate_log(path: &Path, iter: usize) -> Result<String> {
    let mut out = format!("{CSV_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let n: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
            if n.is_some_and(|n| n <= iter) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Run (or resume) training as configured. `progress` receives one line per
/// logged iteration.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, threads: usize, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset, cfg.model.num_classes)?;
    if data.is_empty() {
        return Err(Error::contract(format!("dataset {} is empty", cfg.dataset.display())));
    }
    for rec in &data {
        if (rec.width(), rec.height()) != (cfg.model.input_w, cfg.model.input_h) {
            return Err(Error::contract(format!(
                "record {} is {}x{}, model expects {}x{}",
                rec.id,
                rec.width(),
                rec.height(),
                cfg.model.input_w,
                cfg.model.input_h
            )));
        }
    }
    let table = batch_balance_table(&data)?;

    let (mut model, start) = match resume {
        Some(path) => {
            let (model, iter) = load_model(path)?;
            if model.cfg != cfg.model {
                return Err(Error::contract("checkpoint architecture differs from the configured model"));
            }
            (model, iter)
        }
        None => (Model::new(cfg.model.clone())?, 0),
    };

    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let log_path = out_dir.join(LOG_FILE);
    let initial = if start > 0 { truncate_log(&log_path, start)? } else { format!("{CSV_HEADER}\n") };
    fs::write(&log_path, initial).map_err(|e| Error::io(&log_path, e))?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut last = None;
    for iter in start + 1..=cfg.optimizer.iterations {
        let batch = sample_batch(&data, &table, cfg, iter)?;
        let (breakdown, _) = train_step(&mut model, &batch, cfg, iter, threads)?;
        let row = breakdown.csv_row(iter);
        writeln!(log, "{row}").map_err(|e| Error::io(&log_path, e))?;
        progress(&row);
        if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 && iter != cfg.optimizer.iterations {
            checkpoint(&model, cfg, iter).save(&out_dir.join(checkpoint_name(iter)))?;
        }
        last = Some(breakdown);
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    checkpoint(&model, cfg, cfg.optimizer.iterations.max(start)).save(&final_path)?;
    Ok(TrainOutcome {
        iterations: cfg.optimizer.iterations,
        final_checkpoint: final_path,
        last,
    })
}
