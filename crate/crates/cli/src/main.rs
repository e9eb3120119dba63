use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tapir_core::checkpoint::Checkpoint;
use tapir_core::config::TrainConfig;
use tapir_core::data::{load_jsonl, save_jsonl, synth_generate, RetrievalDataset, SynthConfig};
use tapir_core::eval::{evaluate_dataset, EvalOptions};
use tapir_core::gradcheck::{gradcheck, GradcheckConfig};
use tapir_core::trainer::{train_with, Progress};
use tapir_core::{LossConfig, LossKind, Pooling};

#[derive(Parser)]
#[command(
    name = "tapir",
    version,
    about = "Text-audio retrieval with text-aware attention pooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train/val/test JSONL files.
    SynthData {
        /// `key = value` generator settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save the checkpoint with the best validation recall.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.jsonl and, optionally, val.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; falls back to `checkpoint` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step loss log; defaults to the checkpoint path with `.steps.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the CSV report here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Override the worker count stored in the checkpoint.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// Check only this pooling (mean, max, meanmax, tap).
        #[arg(long)]
        pooling: Option<Pooling>,
        /// Check only this loss (ntxent, pmr).
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        stop_gradient_prior: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the per-parameter breakdown for every combination.
        #[arg(long)]
        verbose: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SynthData { config, out } => synth_data(config.as_deref(), &out),
        Command::Train { config, data, out, log } => train(config.as_deref(), &data, out, log),
        Command::Eval {
            ckpt,
            data,
            split,
            csv,
            workers,
        } => eval(&ckpt, &data, &split, csv.as_deref(), workers),
        Command::Gradcheck {
            pooling,
            loss,
            stop_gradient_prior,
            seed,
            verbose,
        } => grad(pooling, loss, stop_gradient_prior, seed, verbose),
    }
}

fn synth_data(config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => SynthConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => SynthConfig::default(),
    };
    let data = synth_generate(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let path = out.join(format!("{name}.jsonl"));
        save_jsonl(&split.dataset, &path).with_context(|| format!("writing {}", path.display()))?;
        println!(
            "{}: {} clips, {} captions",
            path.display(),
            split.dataset.len(),
            split.dataset.num_captions()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn load_split(dir: &Path, split: &str) -> Result<RetrievalDataset> {
    let path = dir.join(format!("{split}.jsonl"));
    load_jsonl(&path).with_context(|| format!("loading {}", path.display()))
}

fn train(config: Option<&Path>, data: &Path, out: Option<PathBuf>, log: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let Some(out) = out.or_else(|| cfg.checkpoint.clone()) else {
        bail!("no checkpoint path: pass --out or set `checkpoint` in the config");
    };
    let log = log.unwrap_or_else(|| out.with_extension("steps.csv"));
    let train_set = load_split(data, "train")?;
    let val_path = data.join("val.jsonl");
    let val_set = if val_path.exists() {
        Some(load_split(data, "val")?)
    } else {
        None
    };

    let steps_per_epoch = train_set.len() / cfg.batch_size.max(1);
    let outcome = train_with(&cfg, &train_set, val_set.as_ref(), |p| match p {
        Progress::Epoch(e) => {
            let r = &e.validation;
            eprintln!(
                "epoch {:>3}  val t2a R@1 {:.4}  a2t R@1 {:.4}",
                e.epoch,
                r.t2a.r_at.values().next().copied().unwrap_or(0.0),
                r.a2t.r_at.values().next().copied().unwrap_or(0.0),
            );
        }
        Progress::Step(s) if steps_per_epoch > 0 && s.step % steps_per_epoch == 0 => {
            eprintln!("epoch {:>3}  step {:>6}  loss {:.5}", s.epoch, s.step, s.loss);
        }
        Progress::Step(_) => {}
    })?;
    fs::write(&log, outcome.steps_csv()).with_context(|| format!("writing {}", log.display()))?;
    outcome
        .best
        .save(&out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("checkpoint: {} (epoch {})", out.display(), outcome.best.epoch);
    println!("metric log: {}", log.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(ckpt: &Path, data: &Path, split: &str, csv: Option<&Path>, workers: Option<usize>) -> Result<ExitCode> {
    let checkpoint = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let model = checkpoint.to_model()?;
    let dataset = load_split(data, split)?;
    let want = model.params.dims().input_dim;
    if let Some(got) = dataset.feature_dim() {
        if got != want {
            bail!("checkpoint expects {want}-wide features but {split} has {got}");
        }
    }
    let opts = EvalOptions {
        workers: workers.unwrap_or(checkpoint.config.workers),
        ..EvalOptions::default()
    };
    let report = evaluate_dataset(&model, &dataset, &checkpoint.config.eval_ks, &opts)?;
    print!("{}", report.to_csv());
    print!("{}", report.to_key_values());
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn grad(
    pooling: Option<Pooling>,
    loss: Option<LossKind>,
    stop_gradient_prior: bool,
    seed: u64,
    verbose: bool,
) -> Result<ExitCode> {
    let cfg = GradcheckConfig {
        seed,
        loss: LossConfig {
            stop_gradient_prior,
            ..LossConfig::default()
        },
        ..GradcheckConfig::default()
    };
    let poolings: Vec<Pooling> = pooling.map_or_else(|| Pooling::ALL.to_vec(), |p| vec![p]);
    let losses: Vec<LossKind> = loss.map_or_else(|| vec![LossKind::NtXent, LossKind::Pmr], |l| vec![l]);
    let mut failed = 0;
    for &p in &poolings {
        for &l in &losses {
            let report = gradcheck(p, l, &cfg)?;
            if verbose || !report.passed() {
                println!("{report}");
            } else {
                println!("{}", report.to_string().lines().next().unwrap_or_default());
            }
            failed += usize::from(!report.passed());
        }
    }
    if failed > 0 {
        eprintln!("{failed} combination(s) exceeded the tolerance of {:e}", cfg.tolerance);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
