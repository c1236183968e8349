use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cwtmel::tensor::read_tensor;
use cwtmel_cli::config::RunConfig;
use cwtmel_cli::corpus::{gen_corpus, CorpusManifest};
use cwtmel_cli::pgm::encode_pgm;
use cwtmel_cli::pipeline::{self, read_run_record, RUN_FILE};

#[derive(Parser, Debug)]
#[command(name = "cwtmel", version, about = "Mel + CWT feature pipeline with an auxiliary wavelet loss")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic corpus in LJSpeech layout.
    GenCorpus {
        #[arg(long, default_value_t = 20)]
        n_utts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute Mel and scalogram features for every utterance.
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the global rank-k scalogram basis.
    FitBasis {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the `k` key.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the shared trunk, Post-Net and CWT-Net.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop the wavelet loss.
        #[arg(long)]
        no_aux: bool,
    },
    /// Report metrics of a checkpoint on a feature set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        /// Step whose decoder noise to use; defaults to the checkpoint's step.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Render a 2-D tensor as a binary PGM image.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Cli {
    /// `base`, then the config file, then `--set`, then `--seed`.
    fn resolve(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        for a in &self.set {
            cfg.apply_assignment(a).with_context(|| format!("--set {a}"))?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenCorpus { n_utts, out } => {
            let cfg = cli.resolve(RunConfig::default())?;
            gen_corpus(*n_utts, out, cfg.train.seed, cfg.sample_rate)?;
        }
        Command::Extract { corpus, out } => {
            let cfg = cli.resolve(RunConfig::default())?;
            let manifest = CorpusManifest::load(corpus)?;
            let summary = pipeline::extract(&manifest, &cfg, out, cli.force)?;
            for (path, msg) in &summary.failures {
                eprintln!("error: {}: {msg}", path.display());
            }
            if !summary.failures.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::FitBasis { features, out, k } => {
            let cfg = cli.resolve(RunConfig::default())?;
            let energy = pipeline::fit_basis(features, k.unwrap_or(cfg.k), out)?;
            println!("retained_energy={energy:.12}");
        }
        Command::Train { features, basis, out, no_aux } => {
            let mut cfg = cli.resolve(RunConfig::default())?;
            if *no_aux {
                cfg.train.aux_enabled = false;
            }
            pipeline::train(features, basis, &cfg, out)?;
        }
        Command::Eval { checkpoint, features, basis, step } => {
            let (base, trained) = if checkpoint.join(RUN_FILE).is_file() {
                read_run_record(checkpoint)?
            } else {
                (RunConfig::default(), 0)
            };
            let cfg = cli.resolve(base)?;
            let report = pipeline::eval(checkpoint, features, basis, &cfg, step.unwrap_or(trained))?;
            print!("{}", report.lines());
        }
        Command::Plot { input, out } => {
            let t = read_tensor(input)?;
            let bytes = encode_pgm(&t).with_context(|| format!("plotting {}", input.display()))?;
            write_file(out, &bytes)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
