mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use outlierseg_core::imaging::{
    generate_synthetic_dataset, load_image, load_mask, save_image, save_mask, save_overlay, Image, SynthConfig,
};
use outlierseg_core::segmenter::{load_checkpoint, save_checkpoint};
use outlierseg_core::tiling::{
    extract_patches, materialize, prune_maskless, split_dataset, Split, AUGMENT_SIZES, INFER_MARGIN, INFER_PATCH,
    TRAIN_OVERLAP,
};
use outlierseg_core::trainer::{evaluate, infer, Dataset, Trainer};
use outlierseg_core::{Error, ErrorKind, EvalReport, Result};

#[derive(Parser)]
#[command(name = "outlierseg", version, about = "Segmentation training with synthesized logit outliers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cell dataset (images/ and masks/).
    Synth(SynthArgs),
    /// Cut a dataset into overlapping patches with a train/test manifest.
    Tile(TileArgs),
    /// Train a segmenter. Any config key can be set with --key=value.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Segment one image with tiled inference.
    Infer(InferArgs),
    /// Blend a mask over an image.
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    blur_radius: Option<usize>,
}

#[derive(Args)]
struct TileArgs {
    /// Directory with images/ and masks/.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = AUGMENT_SIZES)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = TRAIN_OVERLAP)]
    overlap: f64,
    /// Fraction of source images assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep patches without foreground.
    #[arg(long)]
    keep_empty: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Configuration overrides, each `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (images/ + masks/, or a tiled dataset with a manifest).
    #[arg(long)]
    data: PathBuf,
    /// Split to use when the dataset has a manifest.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long, default_value_t = INFER_PATCH)]
    patch: usize,
    #[arg(long, default_value_t = INFER_MARGIN)]
    margin: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output mask (PNG or PGM).
    #[arg(long)]
    out: PathBuf,
    /// Also write the foreground probability as a grayscale image.
    #[arg(long)]
    probs: Option<PathBuf>,
    /// Also write an overlay of the predicted mask.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long, default_value_t = INFER_PATCH)]
    patch: usize,
    #[arg(long, default_value_t = INFER_MARGIN)]
    margin: usize,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train or test)")),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        image_size: args.size,
        seed: args.seed,
        noise_sigma: args.noise_sigma.unwrap_or(defaults.noise_sigma),
        blur_radius: args.blur_radius.unwrap_or(defaults.blur_radius),
        ..defaults
    };
    let ds = Dataset::from_pairs(generate_synthetic_dataset(&cfg, args.count)?, "synth_")?;
    ds.save_dir(&args.out, 2)?;
    println!("wrote {} image/mask pairs to {}", ds.len(), args.out.display());
    Ok(())
}

fn tile(args: TileArgs) -> Result<()> {
    let ds = Dataset::load(&args.input, 2, None)?;
    // Split by source image so no image contributes to both splits.
    let (train_src, test_src) = split_dataset(ds.samples, args.train_fraction, args.seed)?;
    let cut = |samples: Vec<outlierseg_core::trainer::Sample>| -> Result<Vec<_>> {
        let mut out = Vec::new();
        for s in samples {
            let patches = extract_patches(&s.id, &s.image, &s.mask, &args.sizes, args.overlap)?;
            out.extend(if args.keep_empty { patches } else { prune_maskless(patches) });
        }
        Ok(out)
    };
    let train = cut(train_src)?;
    let test = cut(test_src)?;
    let records = materialize(&args.out, &train, &test)?;
    println!(
        "wrote {} patches ({} train, {} test) to {}",
        records.len(),
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn load_split(path: &Path, classes: usize, split: Split) -> Result<Dataset> {
    Dataset::load(path, classes, Some(split))
}

fn print_eval(report: &EvalReport) {
    let hd = report
        .mean_hd95
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
    let ious: Vec<String> = report.iou_at.iter().map(|(t, v)| format!("IoU@{t}={v:.1}")).collect();
    println!(
        "images={} DSC={:.2} HD95={hd} (skipped {}) {} mAP={:.1}",
        report.records.len(),
        report.mean_dsc,
        report.hd95_skipped,
        ious.join(" "),
        report.map
    );
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = config::load(args.config.as_deref(), &args.overrides, args.seed)?;
    let train_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| Error::Config("train_data is required (--train-data=DIR)".into()))?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    let train_set = load_split(&train_path, cfg.classes, Split::Train)?;
    let val_set = match &cfg.val_data {
        Some(p) => Some(load_split(p, cfg.classes, Split::Test)?),
        None => None,
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::Config(format!("{}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string())
        .map_err(|e| Error::Config(format!("{}: {e}", out_dir.display())))?;

    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(cfg.clone(), &train_set, val_set.as_ref(), load_checkpoint(path)?)?,
        None => Trainer::new(cfg.clone(), &train_set, val_set.as_ref())?,
    };
    let ckpt_dir = out_dir.join("checkpoints");
    while trainer.epoch() < cfg.epochs {
        trainer.run_until(trainer.epoch() + 1, Some(&ckpt_dir))?;
        let log = trainer.log();
        let row = log.epochs.last().expect("an epoch just ran");
        let losses: Vec<f64> = log
            .steps
            .iter()
            .filter(|s| s.epoch == row.epoch)
            .map(|s| s.report.combined)
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let eval = row
            .eval
            .as_ref()
            .map_or_else(String::new, |e| format!(" val DSC {:.2}", e.mean_dsc));
        println!(
            "epoch {}/{} loss {mean:.4} synthesis steps {}{eval} ({:.1}s)",
            row.epoch + 1,
            cfg.epochs,
            row.synthesis_steps,
            row.seconds
        );
    }
    let (checkpoint, log) = trainer.finish();
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    save_checkpoint(&checkpoint, out_dir.join("final.ckpt"))?;
    let loss_path = out_dir.join("loss.csv");
    if args.resume.is_some() && loss_path.is_file() {
        let rows: String = log.loss_csv().lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&loss_path)
            .map_err(|e| Error::Config(format!("{}: {e}", loss_path.display())))?;
        f.write_all(rows.as_bytes())
            .map_err(|e| Error::Config(format!("{}: {e}", loss_path.display())))?;
    } else {
        log.write_loss_csv(&loss_path)?;
    }
    log.write_json(&out_dir.join("run.json"))?;
    if cfg.gaussian_log {
        log.write_gaussian_csv(&out_dir.join("gaussian.csv"))?;
    }
    if let Some(report) = log.epochs.last().and_then(|r| r.eval.as_ref()) {
        print_eval(report);
    }
    println!("final checkpoint: {}", out_dir.join("final.ckpt").display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = Dataset::load(&args.data, ck.params.spec.classes(), args.split)?;
    let report = evaluate(&ck.params, &ds, args.patch, args.margin)?;
    if let Some(p) = &args.csv {
        report.write_csv(p)?;
    }
    if let Some(p) = &args.json {
        report.write_json(p)?;
    }
    print_eval(&report);
    Ok(())
}

fn infer_cmd(args: InferArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let image = load_image(&args.image)?;
    let (mask, probs) = infer(&ck.params, &image, args.patch, args.margin)?;
    save_mask(&mask, &args.out, ck.params.spec.classes())?;
    if let Some(p) = &args.probs {
        let k = probs.k();
        let fg: Vec<f64> = probs.probs().chunks(k).map(|px| 1.0 - px[0]).collect();
        save_image(&Image::new(probs.height(), probs.width(), 1, fg)?, p)?;
    }
    if let Some(p) = &args.overlay {
        save_overlay(&image, &mask, p)?;
    }
    println!(
        "{}: {} of {} pixels foreground",
        args.out.display(),
        mask.foreground_count(),
        mask.height() * mask.width()
    );
    Ok(())
}

fn overlay(args: OverlayArgs) -> Result<()> {
    let image = load_image(&args.image)?;
    let mask = load_mask(&args.mask, 2)?;
    save_overlay(&image, &mask, &args.out)
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Tile(a) => tile(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Overlay(a) => overlay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
