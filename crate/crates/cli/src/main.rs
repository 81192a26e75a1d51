//! `blindsep`: corpus generation, staged training, separation and scoring.
//!
//! Exit codes: 0 success, 1 I/O or format failure, 2 usage or config error, 3 missing
//! dependency, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use blindsep::pipeline::{ExperimentConfig, Mode};
use blindsep::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "blindsep",
    version,
    about = "Speech separation with blind speaker adaptation"
)]
struct Cli {
    /// TOML config layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Override one config key, e.g. `--set trainer.max_epochs=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets trainer.seed and pipeline.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Ubm,
    Tv,
    Lda,
    Net,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Oracle,
    Realistic,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Oracle => Mode::Oracle,
            ModeArg::Realistic => Mode::Realistic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Corpus {
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
        /// Replace an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage of the model chain.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Network level; 0 is the baseline.
        #[arg(long, default_value_t = 0)]
        level: usize,
        /// Speaker-vector source of adapted levels.
        #[arg(long, value_enum, default_value = "realistic")]
        mode: ModeArg,
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        /// Root of models, estimates, i-vectors and reports.
        #[arg(long, default_value = "run")]
        work: PathBuf,
    },
    /// Separate one mixture; adapted levels run the lower levels first.
    Separate {
        mixture: PathBuf,
        #[arg(long, default_value_t = 0)]
        level: usize,
        #[arg(long, value_enum, default_value = "realistic")]
        mode: ModeArg,
        /// Reference sources for oracle mode, one per speaker.
        #[arg(long = "reference")]
        references: Vec<PathBuf>,
        #[arg(long, default_value = "run")]
        work: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimates against reference sources.
    Evaluate {
        estimates: PathBuf,
        references: PathBuf,
        /// JSON report path; defaults to `<estimates>/evaluation.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage and write all artifacts and tables.
    Experiment {
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, default_value = "run")]
        work: PathBuf,
    },
    /// Print the resolved configuration.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingDependency(_) => 3,
        Error::Numeric(_) | Error::ZeroVector | Error::ZeroEnergySource => 4,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Exists(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let config: ExperimentConfig =
        config::resolve(&cli.preset, cli.config.as_deref(), &cli.overrides, cli.seed)?;
    match cli.command {
        Command::Corpus { out, force } => commands::corpus(&config, &out, force),
        Command::Train {
            stage,
            level,
            mode,
            corpus,
            work,
        } => {
            if level > 0 && !matches!(stage, Stage::Net) {
                return Err(Error::InvalidArgument(
                    "--level applies to --stage net only".into(),
                ));
            }
            let corpus = commands::load_corpus(&corpus)?;
            match stage {
                Stage::Ubm => commands::train_ubm(&config, &corpus, &work),
                Stage::Tv => commands::train_tv(&config, &corpus, &work),
                Stage::Lda => commands::train_lda(&config, &corpus, &work),
                Stage::Net => commands::train_net(&config, &corpus, &work, level, mode.into()),
            }
        }
        Command::Separate {
            mixture,
            level,
            mode,
            references,
            work,
            out,
        } => commands::separate_file(
            &config,
            &work,
            &mixture,
            level,
            mode.into(),
            &references,
            &out,
        ),
        Command::Evaluate {
            estimates,
            references,
            out,
        } => {
            let report = commands::evaluate(&estimates, &references)?;
            let path = out.unwrap_or_else(|| estimates.join("evaluation.json"));
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            std::fs::write(&path, json)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Experiment { corpus, work } => {
            print!("{}", commands::experiment(&config, &corpus, &work)?);
            Ok(())
        }
        Command::Config => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
