use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bdgf::config::RunConfig;
use bdgf::data_io::{import_npy, write_scene};
use bdgf::pipeline::{self, EvalSplit};
use bdgf::synthetic::{generate_scene, SyntheticSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

type Real = f32;

#[derive(Parser)]
#[command(
    name = "bdgf",
    version,
    about = "Diffusion-guided spectral + SAR land-cover classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the diffusion denoiser.
    Pretrain(RunArgs),
    /// Train the classifier on diffusion-guided features.
    Train(RunArgs),
    /// Evaluate trained checkpoints and render the classification map.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Dump per-sample branch and diffusion features.
    Featdump {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated row-major pixel indices; defaults to the training split.
        #[arg(long, value_delimiter = ',')]
        pixels: Option<Vec<usize>>,
    },
    /// Write a synthetic scene directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        bands: usize,
        #[arg(long, default_value_t = 2)]
        sar_channels: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert `.npy` cubes into a scene directory.
    Import {
        #[arg(long)]
        spectral: PathBuf,
        #[arg(long)]
        sar: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated class names in label order.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = load(&args)?;
            for &seed in &cfg.seeds {
                let r = pipeline::cmd_pretrain::<Real>(&cfg, seed)?;
                emit(json!({
                    "command": "pretrain",
                    "seed": seed,
                    "checkpoint": r.checkpoint,
                    "weights_sha256": r.weights_sha256,
                    "final_loss": r.losses.last(),
                }));
            }
        }
        Command::Train(args) => {
            let cfg = load(&args)?;
            for &seed in &cfg.seeds {
                let r = pipeline::cmd_train::<Real>(&cfg, seed)?;
                emit(json!({
                    "command": "train",
                    "seed": seed,
                    "checkpoint": r.checkpoint,
                    "weights_sha256": r.weights_sha256,
                    "train_oa": r.train_oa,
                }));
            }
        }
        Command::Eval { run, split } => {
            let cfg = load(&run)?;
            let split = match split {
                SplitArg::Train => EvalSplit::Train,
                SplitArg::Test => EvalSplit::Test,
            };
            let (reports, summary) = pipeline::cmd_eval_all::<Real>(&cfg, split)?;
            for r in &reports {
                emit(serde_json::to_value(&r.record)?);
            }
            emit(json!({ "summary": summary }));
        }
        Command::Featdump { run, pixels } => {
            let cfg = load(&run)?;
            for &seed in &cfg.seeds {
                let path = pipeline::cmd_featdump::<Real>(&cfg, seed, pixels.clone())?;
                emit(json!({ "command": "featdump", "seed": seed, "path": path }));
            }
        }
        Command::Synth {
            out,
            classes,
            size,
            bands,
            sar_channels,
            noise,
            seed,
        } => {
            let mut spec = SyntheticSpec::standard(classes, size, size, bands, sar_channels);
            spec.noise_level = noise;
            let scene = generate_scene(&spec, seed)?;
            write_scene(&out, &scene).with_context(|| format!("writing {}", out.display()))?;
            emit(json!({ "command": "synth", "path": out, "labeled": scene.labeled_count() }));
        }
        Command::Import {
            spectral,
            sar,
            labels,
            classes,
            out,
        } => {
            let scene = import_npy(&spectral, &sar, &labels, classes, &out)?;
            emit(json!({ "command": "import", "path": out, "header": scene.header }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<bdgf::Error>()
                .map_or("other", bdgf::Error::kind);
            let mut message = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !message.contains(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            eprintln!("{}", json!({ "error": kind, "message": message }));
            ExitCode::FAILURE
        }
    }
}
