use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use colorshift_core::run::{cmd_diagnose, cmd_sample, cmd_synth, cmd_train};
use colorshift_core::{Error, RunConfig};

/// Score-based diffusion with a mean-bypass score network.
#[derive(Parser)]
#[command(name = "colorshift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; resumes when the run directory already has a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output root>/<kind>-<resolution>-seed<seed>`, where the
        /// output root is `output_dir`, else `$COLORSHIFT_OUTPUT`, else `runs`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Overrides both the initialization seed and the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Draw samples from a trained run into `<run-dir>/samples`.
    Sample {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Use the exponential-moving-average parameters.
        #[arg(long)]
        use_ema: bool,
        /// Overrides the sampler seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write diagnostics CSVs into `<run-dir>/report`.
    Diagnose {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Generate the Gaussian-random-field dataset of a config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Overrides the field seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingInput(_) => 4,
        _ => 3,
    }
}

fn default_dir(config: &RunConfig, name: String) -> PathBuf {
    config.output_root().join(name)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            run_dir,
            seed,
            quiet,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            let dir = run_dir.unwrap_or_else(|| default_dir(&cfg, cfg.default_run_name()));
            let records = cmd_train(&cfg, &dir, !quiet)?;
            println!("logged {} loss records in {}", records.len(), dir.display());
        }
        Command::Sample {
            run_dir,
            count,
            use_ema,
            seed,
        } => {
            let images = cmd_sample(&run_dir, count, use_ema, seed)?;
            println!("wrote {} samples to {}", images.batch(), run_dir.join("samples").display());
        }
        Command::Diagnose { run_dir } => {
            let s = cmd_diagnose(&run_dir)?;
            println!(
                "compared {} data and {} generated images: W1(mean) {:.5}, W1(std) {:.5}",
                s.n_data, s.n_generated, s.w1_mean, s.w1_std
            );
            for f in &s.files {
                println!("  {}", f.display());
            }
        }
        Command::Synth { config, run_dir, seed } => {
            let cfg = RunConfig::load(&config)?;
            let dir = run_dir.unwrap_or_else(|| default_dir(&cfg, format!("synth-{}", cfg.dataset.cache_stem())));
            let path = cmd_synth(&cfg, &dir, seed)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
