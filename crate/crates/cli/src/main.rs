//! `mguide`: data generation, training, evaluation, inference and profiling.
//!
//! Exit status: 0 success, 2 usage error, 3 data error, 4 numeric failure,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mutual_guide::datagen::{generate, load_dataset, write_manifest, DegradeParams, Image};
use mutual_guide::metrics::{self, greedy_decode_batch};
use mutual_guide::nn::ops::{resize, Interp};
use mutual_guide::pipeline::{load_checkpoint, ImageModel, TrainOptions, Trainer};
use mutual_guide::{ErrorKind, ModelConfig};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "mguide", version, about = "Text image super-resolution with a jointly trained recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic LR/HR word pairs plus a manifest.
    Datagen {
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps, counted from initialization.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from this checkpoint; its configuration and seed take precedence.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for SR images and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also score every intermediate SR image and distribution.
        #[arg(long)]
        per_iteration: bool,
    },
    /// Super-resolve and read one image; writes `<stem>.sr.png` next to it.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Print per-module multiply-accumulates, parameters and latency.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Profile this checkpoint's configuration instead.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Report 2 flops per multiply-accumulate.
        #[arg(long)]
        flops: bool,
        /// Timed inference runs (at least 10).
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with model keys at top level and optional `[train]` / `[degrade]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed seed (0 unless given) and reproducible artifacts.
    #[arg(long)]
    determinism: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sections {
    #[serde(default)]
    train: Option<TrainOptions>,
    #[serde(default)]
    degrade: Option<DegradeParams>,
}

/// Configuration file contents; absent parts keep their defaults.
struct RunConfig {
    model: ModelConfig,
    train: TrainOptions,
    degrade: DegradeParams,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let Some(path) = &self.config else {
            return Ok(RunConfig {
                model: ModelConfig::default(),
                train: TrainOptions::default(),
                degrade: DegradeParams::default(),
            });
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {}", path.display(), e.message())))?;
        let mut sections = toml::Table::new();
        for key in ["train", "degrade"] {
            if let Some(v) = table.remove(key) {
                sections.insert(key.into(), v);
            }
        }
        let sections: Sections = sections.try_into().map_err(|e: toml::de::Error| usage(format!("{}: {}", path.display(), e.message())))?;
        let model = ModelConfig::from_toml_str(&toml::to_string(&table)?).with_context(|| path.display().to_string())?;
        let degrade = sections.degrade.unwrap_or_default();
        degrade.validate()?;
        Ok(RunConfig {
            model,
            train: sections.train.unwrap_or_default(),
            degrade,
        })
    }

    /// Flag, else 0 under determinism, else the config file's seed for
    /// training, else fresh entropy.
    fn seed(&self, from_config: Option<u64>) -> u64 {
        match (self.seed, self.determinism, from_config) {
            (Some(s), _, _) => s,
            (None, true, _) => 0,
            (None, false, Some(s)) => s,
            (None, false, None) => rand::random(),
        }
    }
}

fn usage(msg: String) -> anyhow::Error {
    anyhow::Error::new(mutual_guide::Error::Config(msg))
}

fn datagen(n: usize, common: &Common, out: &Path) -> Result<()> {
    let run = common.load()?;
    let seed = common.seed(None);
    let pairs = generate(n, seed, &run.model, &run.degrade)?;
    let manifest = write_manifest(&pairs, out)?;
    println!("wrote {} pairs (seed {seed}) to {}", pairs.len(), manifest.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    common: &Common,
    data: &Path,
    out: &Path,
    steps: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    let run = common.load()?;
    let mut opts = run.train.clone();
    opts.seed = common.seed(common.config.as_ref().map(|_| run.train.seed));
    opts.steps = steps.unwrap_or(opts.steps);
    opts.lr = lr.unwrap_or(opts.lr);
    opts.batch_size = batch_size.unwrap_or(opts.batch_size);
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if common.config.is_some() {
                ckpt.ensure_config(&run.model)?;
            }
            opts.seed = ckpt.seed;
            Trainer::from_checkpoint(&ckpt)?
        }
        None => Trainer::new(run.model, opts.seed, opts.optimizer())?,
    };
    let dataset = load_dataset(data, &trainer.model.cfg)?;
    eprintln!(
        "training {} parameters on {} pairs, seed {}, steps {}..{}",
        trainer.model.store.total(),
        dataset.len(),
        opts.seed,
        trainer.step(),
        opts.steps
    );
    trainer.run(&dataset, &opts, Some(out), |r| {
        eprintln!("step {:>6}  total {:.4}  sr {:.4}  rec {:.4}", r.step, r.total, r.sr_loss, r.rec_loss);
    })?;
    println!("{}", out.join("final.safetensors").display());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<ImageModel> {
    Ok(load_checkpoint(ckpt)?.to_model()?)
}

fn eval(ckpt: &Path, data: &Path, out: Option<&Path>, per_iteration: bool) -> Result<()> {
    let model = load_model(ckpt)?;
    let dataset = load_dataset(data, &model.cfg)?;
    let mut report = metrics::evaluate(&model, &dataset, out, per_iteration)?;
    report.per_sample.clear();
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn infer(ckpt: &Path, image: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let cfg = &model.cfg;
    let img = Image::load_png(image)?;
    let mut lr = img.to_tensor()?.unsqueeze(0)?;
    if (img.height, img.width) != (cfg.height, cfg.width) {
        lr = resize(&lr, cfg.height, cfg.width, Interp::Area)?;
    }
    let trace = model.forward(&lr, false)?;
    let text = greedy_decode_batch(trace.final_p(), cfg)?.remove(0);
    let sr = Image::from_tensor(&trace.final_sr().get(0)?)?;
    let out = image.with_extension("sr.png");
    sr.save_png(&out)?;
    println!("{text}");
    Ok(())
}

fn profile(common: &Common, ckpt: Option<&Path>, flops: bool, runs: usize) -> Result<()> {
    let model = match ckpt {
        Some(path) => load_model(path)?,
        None => ImageModel::new(common.load()?.model, common.seed(None))?,
    };
    let p = metrics::profile_model(&model);
    let unit = if flops { "FLOPs" } else { "MACs" };
    let scale = if flops { 2 } else { 1 };
    println!("{:<14} {:>16} {:>12}", "module", unit, "params");
    for e in &p.entries {
        println!("{:<14} {:>16} {:>12}", e.module, scale * e.macs, e.params);
    }
    println!("{:<14} {:>16} {:>12}", "total", scale * p.total_macs, p.total_params);
    let latency = metrics::measure_latency(&model, runs.max(10))?;
    println!("latency_ms     {latency:.3}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { n, common, out } => datagen(n, &common, &out),
        Command::Train {
            common,
            data,
            out,
            steps,
            lr,
            batch_size,
            resume,
        } => train(&common, &data, &out, steps, lr, batch_size, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            out,
            per_iteration,
        } => eval(&ckpt, &data, out.as_deref(), per_iteration),
        Command::Infer { ckpt, image } => infer(&ckpt, &image),
        Command::Profile {
            common,
            ckpt,
            flops,
            runs,
        } => profile(&common, ckpt.as_deref(), flops, runs),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err.chain().find_map(|e| e.downcast_ref::<mutual_guide::Error>()).map(|e| e.kind());
    match kind {
        Some(ErrorKind::Usage) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
        Some(ErrorKind::Internal) => 1,
        None if err.chain().any(|e| e.is::<std::io::Error>() || e.is::<toml::ser::Error>()) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", format!("{err:#}").replace('\n', " "));
            ExitCode::from(exit_code(&err))
        }
    }
}
