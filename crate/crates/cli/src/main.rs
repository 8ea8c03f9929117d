use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use r2ios::config::RunConfig;
use r2ios::diffcore::Checkpoint;
use r2ios::pipeline;
use r2ios::synthdata::{read_dataset, CLASS_NAMES};

const EXIT_DATA: u8 = 2;
const EXIT_UNKNOWN_FLAG: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "r2ios", version, about = "Recursive instance segmentation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Shared {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Refinement iterations T.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    no_gates: bool,
    #[arg(long)]
    no_autoencoder: bool,
    #[arg(long)]
    fully_no_autoencoder: bool,
    #[arg(long)]
    no_seg_aware: bool,
    #[arg(long)]
    recursive_only_testing: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Index of the first scene; disjoint ranges give disjoint sets.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Two-stage training.
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Start from these parameters instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Predict masks for every image of a dataset.
    Infer {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory; defaults to the predictions directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Shared {
    fn resolve(&self) -> r2ios::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| r2ios::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.iterations {
            cfg.iterations = t;
        }
        cfg.no_gates |= self.no_gates;
        cfg.no_autoencoder |= self.no_autoencoder;
        cfg.fully_no_autoencoder |= self.fully_no_autoencoder;
        cfg.no_seg_aware |= self.no_seg_aware;
        cfg.recursive_only_testing |= self.recursive_only_testing;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> r2ios::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| r2ios::Error::Io { path: tmp.clone(), source: e })?;
    std::fs::rename(&tmp, path).map_err(|e| r2ios::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cmd: Command) -> r2ios::Result<()> {
    match cmd {
        Command::Gen {
            shared,
            out,
            count,
            start,
        } => {
            let cfg = shared.resolve()?;
            let s = pipeline::generate_dataset(&cfg, &out, count, start)?;
            println!("wrote {} images to {}", s.images, out.display());
            for (k, n) in s.per_class.iter().enumerate() {
                let name = CLASS_NAMES.get(k).copied().unwrap_or("?");
                println!("  class {} ({name}): {n} instances", k + 1);
            }
        }
        Command::Train {
            shared,
            data,
            out,
            init,
        } => {
            let cfg = shared.resolve()?;
            let (_, scenes) = read_dataset(&data)?;
            if scenes.is_empty() {
                return Err(r2ios::Error::InvalidArgument(format!("dataset {} is empty", data.display())));
            }
            let init = init.map(|p| pipeline::load_model(&cfg, &p)).transpose()?;
            info!(
                "training {} steps ({} gateless + {} gated) on {} images",
                cfg.stage1_steps + cfg.stage2_steps,
                cfg.stage1_steps,
                cfg.stage2_steps,
                scenes.len()
            );
            pipeline::train(
                &cfg,
                &scenes,
                init,
                |log| {
                    info!(
                        "step {} stage {} gates_enabled={} loss {:.5} t' {:?}",
                        log.step, log.stage, log.gates, log.loss, log.t_prime_hist
                    )
                },
                |ck: &Checkpoint| {
                    write_atomic(&out, &ck.to_bytes())?;
                    info!("checkpoint {} at step {}", out.display(), ck.meta["step"][0]);
                    Ok(())
                },
            )?;
        }
        Command::Infer {
            shared,
            checkpoint,
            data,
            out,
        } => {
            let cfg = shared.resolve()?;
            let params = pipeline::load_model(&cfg, &checkpoint)?;
            let (records, scenes) = read_dataset(&data)?;
            let results = scenes
                .par_iter()
                .enumerate()
                .map(|(i, s)| pipeline::infer_scene(&cfg, &params, s, i))
                .collect::<r2ios::Result<Vec<_>>>()?;
            let discards: usize = results.iter().map(|r| r.gate_discards).sum();
            if discards > 0 {
                warn!("{discards} proposals dropped: gated iteration predicted background");
            }
            let names: Vec<String> = records.into_iter().map(|r| r.image).collect();
            let preds = pipeline::write_predictions(&out, &names, &scenes, &results)?;
            println!("wrote {} predictions for {} images to {}", preds.len(), names.len(), out.display());
        }
        Command::Eval {
            shared,
            predictions,
            data,
            out,
        } => {
            let cfg = shared.resolve()?;
            let report = pipeline::evaluate_dirs(&cfg, &predictions, &data)?;
            let out = out.unwrap_or(predictions);
            std::fs::create_dir_all(&out).map_err(|e| r2ios::Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let table = report.to_table(&CLASS_NAMES);
            write_atomic(&out.join("report.tsv"), report.to_tsv().as_bytes())?;
            write_atomic(&out.join("report.txt"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn init_threads() {
    if let Some(n) = std::env::var("R2IOS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::UnknownArgument => EXIT_UNKNOWN_FLAG,
                _ => EXIT_DATA,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
