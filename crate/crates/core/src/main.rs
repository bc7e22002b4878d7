use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dubox::dataio::ShapeClass;
use dubox::inference::{EvalMode, MergeCalibration};
use dubox::losses::BoxLoss;
use dubox::pipeline::{self, RunConfig, SizeFilter};
use dubox::tensor::thread_cap_from_env;
use dubox::{Error, Result};

#[derive(Parser)]
#[command(name = "dubox", version, about = "Anchor-free dual-scale residual object detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic-shapes dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes a CSV log and checkpoints to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Box regression loss, overriding the config.
        #[arg(long, value_parser = parse_box_loss)]
        loss: Option<BoxLoss>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// joint, d1 or d2; repeat or comma-separate for several.
        #[arg(long, value_delimiter = ',', default_value = "joint")]
        mode: Vec<EvalMode>,
        #[arg(long, default_value_t = 0.05)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        #[arg(long, default_value = "none")]
        merge_calibration: MergeCalibration,
        /// Only ground truth with a shorter side below this many pixels counts.
        #[arg(long)]
        max_short_side: Option<f64>,
        #[arg(long)]
        min_short_side: Option<f64>,
        /// Write per-image detections (JSONL) for the first mode.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Print reports as JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
    /// Detect objects in a DBIMG image and print a prediction line.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_threshold: f64,
        #[arg(long, default_value = "none")]
        merge_calibration: MergeCalibration,
        /// Also write the image with box outlines.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Print the encoded training targets of one record.
    InspectTargets {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn parse_box_loss(s: &str) -> std::result::Result<BoxLoss, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown loss `{s}` (iou, smooth-l1)"))
}

fn run(cli: Cli) -> Result<()> {
    let threads = thread_cap_from_env();
    match cli.command {
        Command::GenData { config, count, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let recs = pipeline::gen_data(&cfg, count, seed, &out)?;
            println!("wrote {} records to {}", recs.len(), out.display());
        }
        Command::Train {
            config,
            resume,
            loss,
            output_dir,
            iterations,
            quiet,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(l) = loss {
                cfg.loss.box_loss = l;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(n) = iterations {
                cfg.optimizer.iterations = n;
            }
            cfg.validate()?;
            let every = (cfg.optimizer.iterations / 50).max(1);
            let mut n = 0usize;
            let outcome = pipeline::train(&cfg, resume.as_deref(), threads, |row| {
                n += 1;
                if !quiet && n.is_multiple_of(every) {
                    eprintln!("{row}");
                }
            })?;
            println!("trained {} iterations; checkpoint {}", outcome.iterations, outcome.final_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            mode,
            score_threshold,
            nms_threshold,
            iou_threshold,
            merge_calibration,
            max_short_side,
            min_short_side,
            predictions,
            json,
        } => {
            let cfg = dubox::inference::InferenceConfig {
                score_threshold,
                nms_threshold,
                iou_threshold,
                merge_calibration,
                ..Default::default()
            };
            let filter = SizeFilter {
                max_short_side,
                min_short_side,
            };
            let evals = pipeline::eval_command(&checkpoint, &data, &mode, &cfg, filter, threads)?;
            if let (Some(path), Some(first)) = (predictions, evals.first()) {
                pipeline::write_predictions(&path, &first.predictions)?;
            }
            for e in &evals {
                if json {
                    let value = serde_json::json!({ "mode": e.mode.to_string(), "report": e.report });
                    println!("{value}");
                } else {
                    println!("mode {}", e.mode);
                    print!("{}", e.report.to_table(&ShapeClass::NAMES));
                }
            }
        }
        Command::Detect {
            checkpoint,
            image,
            score_threshold,
            nms_threshold,
            merge_calibration,
            overlay,
        } => {
            let cfg = dubox::inference::InferenceConfig {
                score_threshold,
                nms_threshold,
                merge_calibration,
                ..Default::default()
            };
            let line = pipeline::detect_command(&checkpoint, &image, &cfg, overlay.as_deref(), threads)?;
            println!("{}", serde_json::to_string(&line).map_err(|e| Error::contract(e.to_string()))?);
        }
        Command::InspectTargets { config, data, id } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", pipeline::inspect_targets(&cfg, &data, &id)?);
        }
        Command::DefaultConfig => println!("{}", RunConfig::default().to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} code={}: {msg}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
