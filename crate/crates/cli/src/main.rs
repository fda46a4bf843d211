//! `liteseg`: train, infer, eval, bench and gradcheck.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use liteseg::checkpoint::{load_checkpoint, Checkpoint};
use liteseg::eval::{bench, predict_image, BenchConfig, ConfusionMatrix, MiouReport};
use liteseg::gradcheck::run_suite;
use liteseg::image_io::{colorize, palette, read_image, read_label, write_image, write_label};
use liteseg::train::augment::{normalize, IMAGENET_MEAN, IMAGENET_STD};
use liteseg::train::dataset::parse_manifest;
use liteseg::train::{train, DataConfig, Dataset, ManifestDataset, SyntheticShapes, TrainConfig};
use liteseg::{parallel, Error, Model, ModelConfig};

#[derive(Parser)]
#[command(name = "liteseg", version, about = "Real-time semantic segmentation with PP-LiteSeg")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Print a machine-readable JSON report on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config (weights, shuffling, augmentation).
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the `iter,lr,loss` curve.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Segment one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write an RGB color mask instead of raw class indices.
        #[arg(long)]
        palette: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class IoU and mIoU over a manifest (`image<TAB>label[<TAB>prediction]`).
    Eval {
        /// Needed unless every manifest line names a stored prediction.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Class count when no checkpoint is given.
        #[arg(long)]
        classes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Time resize → infer → resize at batch size 1.
    Bench {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        ckpt: Option<PathBuf>,
        /// Randomly initialized model preset (T, B or tiny) instead of a checkpoint.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 19)]
        classes: usize,
        /// Inference size as HxW.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks of every op and block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad extent `{v}` in `{s}`"));
    Ok((parse(h)?, parse(w)?))
}

/// Failure modes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

struct Outcome {
    command: &'static str,
    config: Value,
    metrics: Value,
    timings: Vec<Value>,
    text: String,
    ok: bool,
}

fn timing(name: &str, start: Instant) -> Value {
    json!({ "name": name, "ms": start.elapsed().as_secs_f64() * 1e3 })
}

fn miou_json(r: &MiouReport) -> Value {
    json!({ "miou": r.miou, "pixel_accuracy": r.pixel_accuracy, "per_class_iou": r.per_class })
}

fn miou_text(r: &MiouReport) -> String {
    let mut out = String::new();
    for (k, iou) in r.per_class.iter().enumerate() {
        match iou {
            Some(v) => out.push_str(&format!("class {k:3}  IoU {v:.4}\n")),
            None => out.push_str(&format!("class {k:3}  IoU n/a\n")),
        }
    }
    out.push_str(&format!("mIoU {:.4}\npixel accuracy {:.4}", r.miou, r.pixel_accuracy));
    out
}

fn run_train(config: &Path, out: &Path, seed: Option<u64>, loss_csv: Option<&Path>) -> Result<Outcome, Failure> {
    let text = std::fs::read_to_string(config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    let mut cfg = TrainConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        cfg.options.seed = s;
    }
    let dataset: Box<dyn Dataset<f32>> = match &cfg.data {
        DataConfig::Synthetic { num_samples, seed } => Box::new(SyntheticShapes::new(*seed, *num_samples)),
        DataConfig::Manifest { path } => Box::new(ManifestDataset::open(path, cfg.model.num_classes)?),
    };
    let mut model = Model::build(&cfg.model, cfg.options.seed)?;
    let start = Instant::now();
    let every = (cfg.options.iters / 20).max(1);
    let report = train(&mut model, dataset.as_ref(), &cfg.options, |r| {
        if r.iter % every == 0 || r.iter + 1 == cfg.options.iters {
            eprintln!("iter {:6}  lr {:.3e}  loss {:.4}", r.iter, r.lr, r.loss);
        }
    })?;
    let trained = timing("train", start);
    Checkpoint::from_model(&model).with_optimizer(&report.optimizer, &model.params).save(out)?;
    if let Some(path) = loss_csv {
        std::fs::write(path, report.to_csv()).map_err(Error::from)?;
    }
    let n = report.records.len();
    let window = n.min(50);
    let (first, last) =
        if n > 0 { (Some(report.mean_loss(0..window)), Some(report.mean_loss(n - window..n))) } else { (None, None) };
    Ok(Outcome {
        command: "train",
        config: serde_json::to_value(&cfg).unwrap_or(Value::Null),
        metrics: json!({ "iters": n, "initial_mean_loss": first, "final_mean_loss": last,
                         "parameter_count": model.parameter_count() }),
        timings: vec![trained],
        text: format!("trained {n} iterations; checkpoint written to {}", out.display()),
        ok: true,
    })
}

fn run_infer(ckpt: &Path, image: &Path, out: &Path, use_palette: bool) -> Result<Outcome, Failure> {
    let model: Model = load_checkpoint(ckpt)?;
    let img = read_image(image)?;
    let start = Instant::now();
    let x = normalize(&img.to_tensor::<f32>(), IMAGENET_MEAN, IMAGENET_STD);
    let pred = predict_image(&model, &x)?;
    let inferred = timing("infer", start);
    if use_palette {
        write_image(out, &colorize(&pred, &palette(model.num_classes())))?;
    } else {
        write_label(out, &pred)?;
    }
    let mut counts = vec![0u64; model.num_classes()];
    for &l in &pred.data {
        counts[l as usize] += 1;
    }
    Ok(Outcome {
        command: "infer",
        config: serde_json::to_value(&model.config).unwrap_or(Value::Null),
        metrics: json!({ "height": pred.height, "width": pred.width, "class_pixels": counts }),
        timings: vec![inferred],
        text: format!("{}x{} mask written to {}", pred.width, pred.height, out.display()),
        ok: true,
    })
}

fn run_eval(ckpt: Option<&Path>, manifest: &Path, classes: Option<usize>) -> Result<Outcome, Failure> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Failure::Usage(format!("{}: {e}", manifest.display())))?;
    let entries = parse_manifest(&text, manifest.parent().unwrap_or(Path::new(".")))?;
    let model: Option<Model> = ckpt.map(load_checkpoint).transpose()?;
    let k = match (&model, classes) {
        (Some(m), _) => m.num_classes(),
        (None, Some(k)) if (1..=255).contains(&k) => k,
        (None, Some(k)) => return Err(Failure::Usage(format!("--classes must be in 1..=255, got {k}"))),
        (None, None) => return Err(Failure::Usage("eval needs --ckpt or --classes".into())),
    };
    if model.is_none() && entries.iter().any(|e| e.prediction.is_none()) {
        return Err(Failure::Usage("manifest lines without a prediction column need --ckpt".into()));
    }
    let start = Instant::now();
    let dataset = ManifestDataset { entries: entries.clone(), num_classes: k };
    let mut cm = ConfusionMatrix::new(k);
    for (i, entry) in entries.iter().enumerate() {
        let gt = dataset.label(i)?;
        let pred = match (&entry.prediction, &model) {
            (Some(p), _) => read_label(p)?,
            (None, Some(m)) => {
                let image = read_image(&entry.image)?.to_tensor::<f32>();
                predict_image(m, &normalize(&image, IMAGENET_MEAN, IMAGENET_STD))?
            }
            (None, None) => unreachable!(),
        };
        cm.accumulate(&pred, &gt)?;
    }
    let report = cm.miou()?;
    Ok(Outcome {
        command: "eval",
        config: json!({ "manifest": manifest, "classes": k, "images": entries.len() }),
        metrics: miou_json(&report),
        timings: vec![timing("eval", start)],
        text: miou_text(&report),
        ok: true,
    })
}

fn run_bench(
    ckpt: Option<&Path>,
    preset: Option<&str>,
    classes: usize,
    size: (usize, usize),
    runs: usize,
    warmup: usize,
) -> Result<Outcome, Failure> {
    let model: Model = match (ckpt, preset) {
        (Some(path), _) => load_checkpoint(path)?,
        (None, Some(name)) => Model::build(&ModelConfig::preset(name, classes)?, 0)?,
        (None, None) => return Err(Failure::Usage("bench needs --ckpt or --preset".into())),
    };
    let mut cfg = BenchConfig::new(size.0, size.1);
    cfg.runs = runs;
    cfg.warmup = warmup;
    let report = bench(&model, &cfg)?;
    let timings =
        report.timings_ms.iter().enumerate().map(|(i, ms)| json!({ "name": format!("run{i}"), "ms": ms })).collect();
    Ok(Outcome {
        command: "bench",
        config: json!({ "model": model.config, "resolution": report.resolution, "warmup_runs": report.warmup_runs,
                        "timed_runs": report.timed_runs }),
        text: format!(
            "{}x{}: mean {:.2} ms (min {:.2}, max {:.2}) over {} runs, {:.1} FPS",
            report.resolution[0],
            report.resolution[1],
            report.mean_ms,
            report.min_ms,
            report.max_ms,
            report.timed_runs,
            report.fps
        ),
        metrics: serde_json::to_value(&report).unwrap_or(Value::Null),
        timings,
        ok: true,
    })
}

fn run_gradcheck(seed: u64) -> Result<Outcome, Failure> {
    let start = Instant::now();
    let reports = run_suite(seed)?;
    let ok = reports.iter().all(|r| r.passed);
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!(
            "{} {:<36} max rel err {:.2e}  ({} probes, {} skipped)\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.probes,
            r.skipped
        ));
    }
    text.push_str(&format!("{} of {} cases passed", reports.iter().filter(|r| r.passed).count(), reports.len()));
    Ok(Outcome {
        command: "gradcheck",
        config: json!({ "seed": seed, "step": liteseg::gradcheck::FD_STEP, "tolerance": liteseg::gradcheck::REL_TOL }),
        metrics: json!({ "passed": ok, "cases": reports }),
        timings: vec![timing("gradcheck", start)],
        text,
        ok,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (json_out, result) = parallel::install(None, || match &cli.command {
        Command::Train { config, out, seed, loss_csv, common } => {
            (common.json, run_train(config, out, *seed, loss_csv.as_deref()))
        }
        Command::Infer { ckpt, image, out, palette, common } => (common.json, run_infer(ckpt, image, out, *palette)),
        Command::Eval { ckpt, manifest, classes, common } => {
            (common.json, run_eval(ckpt.as_deref(), manifest, *classes))
        }
        Command::Bench { ckpt, preset, classes, size, runs, warmup, common } => {
            (common.json, run_bench(ckpt.as_deref(), preset.as_deref(), *classes, *size, *runs, *warmup))
        }
        Command::Gradcheck { seed, common } => (common.json, run_gradcheck(*seed)),
    });
    match result {
        Ok(o) => {
            if json_out {
                let report =
                    json!({ "command": o.command, "config": o.config, "metrics": o.metrics, "timings": o.timings });
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                println!("{}", o.text);
            }
            if o.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
