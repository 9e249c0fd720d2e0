//! `shm`: command-line front end for the strain-field reconstruction pipeline.
//!
//! Every verb reads one TOML configuration (or the built-in defaults), works
//! inside the configured output directory and prints a JSON summary on stdout.

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;
use serde_json::Value;

use shm_core::config::PipelineConfig;
use shm_core::pipeline::{self, Artifacts, Split};
use shm_core::study;
use shm_core::uq::{FieldSpace, ReconstructionMode};
use shm_core::{Result, ShmError};

#[derive(Parser)]
#[command(name = "shm", version, about = "Strain-field reconstruction with Bayesian uncertainty")]
struct Cli {
    /// Pipeline configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// How mode scales are lifted onto the grid.
    #[arg(long, global = true, value_enum)]
    uq_mode: Option<ModeArg>,
    /// Space the uncertainty maps are reported in.
    #[arg(long, global = true, value_enum)]
    field_space: Option<SpaceArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic specimens.
    GenData,
    /// Fit the PCA basis on the training frames.
    FitPca,
    /// Pre-train the network.
    Pretrain,
    /// Draw the posterior ensemble.
    Sample,
    /// Stream predictions for JSON gauge frames read line by line.
    Monitor {
        /// Replay file; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Prediction stream; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Attach upsampled mean and epistemic grids to every line.
        #[arg(long)]
        inline_fields: bool,
    },
    /// Score the ensemble on held-out (or training) experiments.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Repeat training and sampling over increasing training sizes.
    StudyDatasize,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    AbsoluteSum,
    VariancePropagated,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Normalized,
    Physical,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(mode) = cli.uq_mode {
        cfg.uq.mode = match mode {
            ModeArg::AbsoluteSum => ReconstructionMode::AbsoluteSum,
            ModeArg::VariancePropagated => ReconstructionMode::VariancePropagated,
        };
    }
    if let Some(space) = cli.field_space {
        cfg.uq.space = match space {
            SpaceArg::Normalized => FieldSpace::Normalized,
            SpaceArg::Physical => FieldSpace::Physical,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Option<Value>> {
    let mut cfg = load_config(cli)?;
    let out = match &cli.command {
        Command::GenData => serde_json::to_value(pipeline::gen_data(&cfg)?)?,
        Command::FitPca => serde_json::to_value(pipeline::fit_pca(&cfg)?)?,
        Command::Pretrain => serde_json::to_value(pipeline::pretrain(&cfg)?)?,
        Command::Sample => serde_json::to_value(pipeline::sample(&cfg)?)?,
        Command::Eval { split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            serde_json::to_value(pipeline::eval(&cfg, split)?)?
        }
        Command::StudyDatasize => serde_json::to_value(study::datasize_study(&cfg)?)?,
        Command::PrintConfig => {
            print!("{}", cfg.to_toml()?);
            return Ok(None);
        }
        Command::Monitor {
            input,
            output,
            inline_fields,
        } => {
            cfg.monitor.inline_fields |= inline_fields;
            let art = Artifacts::load(&cfg)?;
            let reader: Box<dyn io::BufRead> = match input {
                Some(p) => Box::new(BufReader::new(File::open(p).map_err(|e| ShmError::io(p, e))?)),
                None => Box::new(io::stdin().lock()),
            };
            let result = match output {
                Some(p) => {
                    let file = File::create(p).map_err(|e| ShmError::io(p, e))?;
                    pipeline::monitor(&cfg, &art, reader, io::BufWriter::new(file))?
                }
                None => pipeline::monitor(&cfg, &art, reader, io::stdout().lock())?,
            };
            // The stream owns stdout when no output file is given.
            if output.is_none() {
                eprintln!("{}", serde_json::to_string(&result)?);
                return Ok(None);
            }
            serde_json::to_value(result)?
        }
    };
    Ok(Some(out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Some(value)) => {
            let text = serde_json::to_string_pretty(&value).unwrap_or_default();
            let _ = writeln!(io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
