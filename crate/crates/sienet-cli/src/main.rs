//! Operator-facing entry point: `train`, `infer`, `eval` over plain
//! key=value config files.
//!
//! Exit codes: 0 ok, 1 runtime abort, 2 config error, 3 checkpoint version
//! error, 4 empty evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use sienet_core::config::TrainConfig;
use sienet_core::data::{FillingMode, SmoothMethod};
use sienet_core::error::Error;
use sienet_core::imageio;
use sienet_core::metrics::{psnr, ssim_luma, ImageScore, MetricReport};
use sienet_core::train::{batch_for_image, load_dataset, smooth_method, train_joint, LossReport, Trainer};

#[derive(Parser)]
#[command(name = "sienet", version, about = "Two-stage image outpainting: train, infer, eval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the two-stage model on a directory of images.
    Train(TrainArgs),
    /// Extend one image with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted images against ground truth (PSNR / SSIM).
    Eval(EvalArgs),
}

/// Every configuration key is also a flag; flags override file values.
#[derive(Args)]
struct TrainArgs {
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume training from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,

    /// Directory of training images (PNG/PPM).
    #[arg(long = "data_dir")]
    data_dir: Option<String>,
    /// Optional directory of precomputed structure maps (matched by stem).
    #[arg(long = "structure_dir")]
    structure_dir: Option<String>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long = "out_dir")]
    out_dir: Option<String>,
    /// Optional weights file for the frozen feature extractor.
    #[arg(long = "feature_weights")]
    feature_weights: Option<String>,
/// Number of training iterations.
    #[arg(long)]
    iterations: Option<String>,
    /// Images per iteration.
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
/// Square working resolution (multiple of 16).
    #[arg(long)]
    resolution: Option<String>,
    /// Seed for every random draw (defaults to $SIENET_SEED, then 0).
    #[arg(long)]
    seed: Option<String>,
    /// two_direction | single_direction
    #[arg(long = "mode")]
    mode: Option<String>,
/// Band fraction per extrapolated side, in (0, 0.5).
    #[arg(long)]
    ratio: Option<String>,
    /// Structure distance weight.
    #[arg(long = "lambda_dist")]
    lambda_dist: Option<String>,
    /// Adversarial weight.
    #[arg(long = "lambda_adv")]
    lambda_adv: Option<String>,
    /// Perceptual weight.
    #[arg(long = "lambda_p")]
    lambda_p: Option<String>,
    /// Style weight.
    #[arg(long = "lambda_s")]
    lambda_s: Option<String>,
    /// Siamese feature weight.
    #[arg(long = "lambda_sie")]
    lambda_sie: Option<String>,
    /// true | false: filling convolution at the encoder bottlenecks.
    #[arg(long = "use_filling_conv")]
    use_filling_conv: Option<String>,
    /// true | false: siamese feature loss and its ground-truth branch.
    #[arg(long = "use_siamese")]
    use_siamese: Option<String>,
    /// true | false: adversary on the structure stage.
    #[arg(long = "use_stage1_adv")]
    use_stage1_adv: Option<String>,
    /// true | false: let gradients reach the ground-truth branch too.
    #[arg(long = "siamese_symmetric")]
    siamese_symmetric: Option<String>,
    /// mse | rmse
    #[arg(long = "siamese_norm")]
    siamese_norm: Option<String>,
    /// box | center
/// box | center: pass-through branch of the filling convolution.
    #[arg(long)]
    skip: Option<String>,
/// true | false: seeded horizontal-flip augmentation.
    #[arg(long)]
    hflip: Option<String>,
    /// Gaussian sigma of the structure-map fallback.
    #[arg(long = "smooth_sigma")]
    smooth_sigma: Option<String>,
    /// Checkpoint cadence in iterations.
    #[arg(long = "checkpoint_every")]
    checkpoint_every: Option<String>,
    /// Seed of the frozen feature extractor weights.
    #[arg(long = "fe_seed")]
    fe_seed: Option<String>,
}

#[derive(Args)]
struct InferArgs {
/// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PNG or PPM); resized to the checkpoint's resolution.
    #[arg(long)]
    input: PathBuf,
/// Output image path (PNG or PPM).
    #[arg(long)]
    out: PathBuf,
    /// two_direction | single_direction (default: the checkpoint's mode)
    #[arg(long = "mode")]
    mode: Option<String>,
    /// Band fraction per side (default: the checkpoint's ratio)
    #[arg(long)]
    ratio: Option<f64>,
    /// Precomputed structure map to use instead of the smoothing fallback.
    #[arg(long)]
    structure: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted images.
    #[arg(long = "pred_dir")]
    pred_dir: PathBuf,
    /// Directory of ground-truth images (matched by file stem).
    #[arg(long = "gt_dir")]
    gt_dir: PathBuf,
    /// Write the comma-separated report here as well.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// full | bands: restrict scoring to the generated border bands.
    #[arg(long, default_value = "full")]
    region: String,
    /// Band layout when --region bands is used.
    #[arg(long = "mode", default_value = "two_direction")]
    mode: String,
/// Band fraction when --region bands is used.
    #[arg(long, default_value_t = 0.25)]
    ratio: f64,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::CheckpointVersion { .. } => 3,
        Error::EmptyEval => 4,
        _ => 1,
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    let overrides: [(&str, &Option<String>); 23] = [
        ("data_dir", &args.data_dir),
        ("structure_dir", &args.structure_dir),
        ("out_dir", &args.out_dir),
        ("feature_weights", &args.feature_weights),
        ("iterations", &args.iterations),
        ("batch_size", &args.batch_size),
        ("resolution", &args.resolution),
        ("seed", &args.seed),
        ("mode", &args.mode),
        ("ratio", &args.ratio),
        ("lambda_dist", &args.lambda_dist),
        ("lambda_adv", &args.lambda_adv),
        ("lambda_p", &args.lambda_p),
        ("lambda_s", &args.lambda_s),
        ("lambda_sie", &args.lambda_sie),
        ("use_filling_conv", &args.use_filling_conv),
        ("use_siamese", &args.use_siamese),
        ("use_stage1_adv", &args.use_stage1_adv),
        ("siamese_symmetric", &args.siamese_symmetric),
        ("siamese_norm", &args.siamese_norm),
        ("skip", &args.skip),
        ("hflip", &args.hflip),
        ("smooth_sigma", &args.smooth_sigma),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(v) = &args.checkpoint_every {
        cfg.set("checkpoint_every", v)?;
    }
    if let Some(v) = &args.fe_seed {
        cfg.set("fe_seed", v)?;
    }
    cfg.validate()?;
    if cfg.data_dir.is_none() {
        return Err(Error::Config("missing config key `data_dir`".into()));
    }

    let mut trainer: Trainer<f32> = match &args.resume {
        Some(path) => {
            let t = Trainer::load_checkpoint(path)?;
            println!("resumed from {} at iteration {}", path.display(), t.iteration);
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    println!("resolved configuration:");
    print!("{}", trainer.cfg.canonical_text());

    let dataset = load_dataset::<f32>(&trainer.cfg)?;
    println!("dataset: {} images at {}x{}", dataset.len(), trainer.cfg.resolution, trainer.cfg.resolution);

    fs::create_dir_all(&trainer.cfg.out_dir)?;
    let csv_path = trainer.cfg.out_dir.join("loss.csv");
    let mut csv = if args.resume.is_some() && csv_path.exists() {
        fs::OpenOptions::new().append(true).open(&csv_path)?
    } else {
        let mut f = fs::File::create(&csv_path)?;
        writeln!(f, "{}", LossReport::CSV_HEADER)?;
        f
    };

    let total = trainer.cfg.iterations;
    let mut failure: Option<Error> = None;
    train_joint(&mut trainer, &dataset, &mut |report| {
        if failure.is_none() {
            if let Err(e) = writeln!(csv, "{}", report.csv_row()) {
                failure = Some(e.into());
            }
        }
        if report.iteration == 1 || report.iteration == total || report.iteration % 100 == 0 {
            println!(
                "iter {}/{} total {:.4} dist {:.4} adv {:.4} perc {:.4} style {:.4} sie {:.4} d1 {:.4} d2 {:.4}",
                report.iteration,
                total,
                report.total,
                report.distance,
                report.adversarial,
                report.perceptual,
                report.style,
                report.siamese,
                report.d_struct,
                report.d_content,
            );
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    println!("done; checkpoints in {}", trainer.cfg.out_dir.display());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), Error> {
    let trainer: Trainer<f32> = Trainer::load_checkpoint(&args.checkpoint)?;
    let cfg = &trainer.cfg;
    let mode = match &args.mode {
        Some(m) => FillingMode::parse(m).ok_or_else(|| Error::Config(format!("unknown mode `{m}`")))?,
        None => cfg.mode,
    };
    let ratio = args.ratio.unwrap_or(cfg.ratio);
    let smooth = match &args.structure {
        Some(path) => SmoothMethod::FromFile { path: path.clone() },
        None => smooth_method(cfg),
    };
    let image = imageio::load_image::<f32>(&args.input)?;
    let batch = batch_for_image(&image, mode, ratio, cfg.resolution, &smooth)?;
    let out = trainer.infer(&batch)?;
    imageio::save_image(&out.composed, 0, &args.out)?;
    println!(
        "wrote {} ({}x{}, {} ratio {})",
        args.out.display(),
        cfg.resolution,
        cfg.resolution,
        mode.as_str(),
        ratio
    );
    Ok(())
}

fn list_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>, Error> {
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png") | Some("ppm")
            )
        })
        .map(|p| (p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(), p))
        .collect();
    out.sort();
    Ok(out)
}

/// Column ranges scored when the evaluation is restricted to the bands.
fn band_ranges(mode: FillingMode, ratio: f64, w: usize) -> Vec<(usize, usize)> {
    let band = (ratio * w as f64).round() as usize;
    match mode {
        FillingMode::TwoDirection => vec![(0, band), (w - band, w)],
        FillingMode::SingleDirection => vec![(w - band, w)],
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let bands = match args.region.as_str() {
        "full" => None,
        "bands" => Some(
            FillingMode::parse(&args.mode)
                .ok_or_else(|| Error::Config(format!("unknown mode `{}`", args.mode)))?,
        ),
        other => return Err(Error::Config(format!("unknown region `{other}` (full|bands)"))),
    };

    let preds = list_stems(&args.pred_dir)?;
    let gts = list_stems(&args.gt_dir)?;
    let mut report = MetricReport::default();
    let mut skipped = 0usize;
    for (stem, pred_path) in &preds {
        let Some((_, gt_path)) = gts.iter().find(|(s, _)| s == stem) else {
            eprintln!("warning: no ground truth for `{stem}`, skipped");
            skipped += 1;
            continue;
        };
        let pred = imageio::load_rgb8(pred_path)?;
        let gt = imageio::load_rgb8(gt_path)?;
        if (pred.width, pred.height) != (gt.width, gt.height) {
            eprintln!("warning: size mismatch for `{stem}`, skipped");
            skipped += 1;
            continue;
        }
        let (w, h) = (pred.width, pred.height);
        let to_planes = |img: &imageio::Rgb8| -> Vec<f64> {
            let mut planes = vec![0.0; 3 * w * h];
            for p in 0..w * h {
                for c in 0..3 {
                    planes[c * w * h + p] = img.pixels[p * 3 + c] as f64;
                }
            }
            planes
        };
        let pp = to_planes(&pred);
        let gp = to_planes(&gt);
        let luma = |planes: &[f64]| {
            sienet_core::metrics::rgb_to_luma(planes, h, w).expect("3 planes")
        };

        let (p_val, s_val) = match bands {
            None => (psnr(&pp, &gp, 255.0)?, ssim_luma(&luma(&pp), &luma(&gp), h, w)?),
            Some(mode) => {
                let ranges = band_ranges(mode, args.ratio, w);
                // PSNR over the union of band pixels
                let mut a = Vec::new();
                let mut b = Vec::new();
                for c in 0..3 {
                    for y in 0..h {
                        for &(x0, x1) in &ranges {
                            for x in x0..x1 {
                                a.push(pp[c * w * h + y * w + x]);
                                b.push(gp[c * w * h + y * w + x]);
                            }
                        }
                    }
                }
                // SSIM per band crop, weighted by band area
                let (la, lb) = (luma(&pp), luma(&gp));
                let mut acc = 0.0;
                let mut weight = 0.0;
                for &(x0, x1) in &ranges {
                    let bw = x1 - x0;
                    let mut ca = Vec::with_capacity(h * bw);
                    let mut cb = Vec::with_capacity(h * bw);
                    for y in 0..h {
                        ca.extend_from_slice(&la[y * w + x0..y * w + x1]);
                        cb.extend_from_slice(&lb[y * w + x0..y * w + x1]);
                    }
                    acc += ssim_luma(&ca, &cb, h, bw)? * (h * bw) as f64;
                    weight += (h * bw) as f64;
                }
                (psnr(&a, &b, 255.0)?, acc / weight)
            }
        };
        report.scores.push(ImageScore { name: stem.clone(), psnr: p_val, ssim: s_val });
    }

    if report.scores.is_empty() {
        return Err(Error::EmptyEval);
    }
    if skipped > 0 {
        eprintln!("warning: {skipped} file(s) skipped");
    }
    print!("{}", report.text_table());
    if let Some(csv_path) = &args.csv {
        fs::write(csv_path, report.csv())?;
        println!("csv report written to {}", csv_path.display());
    }
    Ok(())
}
