//! The command-line workflow: generate data, train either detector, detect,
//! evaluate, and benchmark the two methods against each other.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime/IO failure,
//! 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data_io::{decode_image, load_dataset, split_dataset, synth_dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::evalkit::{detection_overlay_svg, emit_report, evaluate, Detector};
use crate::faster_rcnn::alternating_train;
use crate::model::{load_model, save_model, DetectorModel};
use crate::rcnn::train_rcnn;
use crate::util::TrainLog;

#[derive(Parser)]
#[command(
    name = "twostage",
    about = "Desk-scale two-stage vehicle detection: train and compare R-CNN and Faster R-CNN on CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Rcnn,
    #[value(name = "faster-rcnn")]
    FasterRcnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitPart {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic vehicle dataset (PPM images + dataset.csv).
    Synth {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 350)]
        n: usize,
        /// Generator seed; identical seeds give byte-identical corpora.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a detector on the dataset's training split.
    Train {
        #[arg(long, value_enum)]
        method: Method,
        /// Dataset CSV produced by `synth` (or hand-written).
        #[arg(long)]
        data: PathBuf,
        /// Optional config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Individual overrides, e.g. --set seed=7 (repeatable; applied
        /// after the config file).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Where to write the trained model (a `.log` sibling is written too).
        #[arg(long)]
        out: PathBuf,
        /// Print the effective configuration to stdout and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run a trained detector on one image; prints `class score x y w h`.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write an annotated SVG overlay of the detections.
        #[arg(long)]
        dump_boxes: Option<PathBuf>,
    },
    /// Evaluate a trained model on a dataset split; writes report + PR curves.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitPart::Test)]
        split: SplitPart,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two trained models on the same test split (the desk-scale
    /// analogue of the paper-style method comparison table).
    Bench {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, n, seed } => cmd_synth(&out, n, seed),
        Command::Train {
            method,
            data,
            config,
            set,
            out,
            print_config,
        } => cmd_train(method, &data, config.as_deref(), &set, &out, print_config),
        Command::Detect {
            model,
            image,
            dump_boxes,
        } => cmd_detect(&model, &image, dump_boxes.as_deref()),
        Command::Eval {
            model,
            data,
            split,
            out,
        } => cmd_eval(&model, &data, split, &out),
        Command::Bench {
            model_a,
            model_b,
            data,
        } => cmd_bench(&model_a, &model_b, &data),
    }
}

fn cmd_synth(out: &Path, n: usize, seed: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage("--n must be >= 1".into()));
    }
    let table = synth_dataset(n, seed, out, &SynthConfig::default())?;
    eprintln!(
        "wrote {} images and dataset.csv to {}",
        table.len(),
        out.display()
    );
    Ok(())
}

fn build_config(config: Option<&Path>, set: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(
    method: Method,
    data: &Path,
    config: Option<&Path>,
    set: &[String],
    out: &Path,
    print_config: bool,
) -> Result<()> {
    let cfg = build_config(config, set)?;
    if print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }

    let table = load_dataset(data)?;
    let (train, test) = split_dataset(&table, &cfg.split_spec())?;
    let mut log = TrainLog::new(true);
    log.log(format!(
        "split: {} train / {} test rows (seed {})",
        train.len(),
        test.len(),
        cfg.seed
    ));

    let model = match method {
        Method::Rcnn => DetectorModel::Rcnn(train_rcnn(&train, &cfg, &mut log)?),
        Method::FasterRcnn => DetectorModel::Faster(alternating_train(&train, &cfg, &mut log)?),
    };
    save_model(&model, out)?;

    let log_path = log_path_for(out);
    fs::write(&log_path, log.to_text()).map_err(|e| Error::io(&log_path, e))?;
    eprintln!(
        "saved {} model to {} (log: {})",
        model.method_name(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

/// `model.tsd` -> `model.tsd.log`.
fn log_path_for(model_path: &Path) -> PathBuf {
    let mut name = model_path.as_os_str().to_os_string();
    name.push(".log");
    PathBuf::from(name)
}

fn cmd_detect(model_path: &Path, image_path: &Path, dump_boxes: Option<&Path>) -> Result<()> {
    let model = load_model(model_path)?;
    let image = decode_image(image_path)?;
    let detections = model.detect(&image)?;
    for d in &detections {
        println!(
            "{} {:.6} {:.2} {:.2} {:.2} {:.2}",
            d.class, d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h
        );
    }
    if let Some(path) = dump_boxes {
        let svg = detection_overlay_svg(&image, &detections);
        fs::write(path, svg).map_err(|e| Error::io(path, e))?;
        eprintln!("wrote overlay to {}", path.display());
    }
    Ok(())
}

fn cmd_eval(model_path: &Path, data: &Path, split: SplitPart, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let cfg = model.config().clone();
    let table = load_dataset(data)?;
    let (train, test) = split_dataset(&table, &cfg.split_spec())?;

    // Train/test leakage guard: the reconstructed split must be a partition.
    for tr in &train.rows {
        assert!(
            !test.rows.iter().any(|te| te.image_path == tr.image_path),
            "split leaked {} into both halves",
            tr.image_path.display()
        );
    }

    let part = match split {
        SplitPart::Train => &train,
        SplitPart::Test => &test,
    };
    let outcome = evaluate(&model, part, &cfg.eval_config())?;
    emit_report(&outcome, out)?;
    println!("map = {:.6}", outcome.report.map);
    eprintln!(
        "evaluated {} rows in {:.3}s mean/img; report in {}",
        part.len(),
        outcome.report.mean_seconds,
        out.display()
    );
    Ok(())
}

fn cmd_bench(model_a: &Path, model_b: &Path, data: &Path) -> Result<()> {
    let a = load_model(model_a)?;
    let b = load_model(model_b)?;
    let cfg = a.config().clone();
    let table = load_dataset(data)?;
    let (_, test) = split_dataset(&table, &cfg.split_spec())?;

    let eval_cfg = cfg.eval_config();
    let out_a = evaluate(&a, &test, &eval_cfg)?;
    let out_b = evaluate(&b, &test, &eval_cfg)?;

    println!("{:<14} {:>8} {:>18}", "method", "mAP", "mean_s_per_image");
    for (model, outcome) in [(&a, &out_a), (&b, &out_b)] {
        println!(
            "{:<14} {:>8.4} {:>18.6}",
            model.method_name(),
            outcome.report.map,
            outcome.report.mean_seconds
        );
    }
    Ok(())
}
