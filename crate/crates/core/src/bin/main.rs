//! Command-line driver for the anchored ASR experiments.
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 when a
//! stage fails at run time.

use std::path::PathBuf;
use std::process::ExitCode;

use anchored_asr::config::{ExperimentConfig, OUTPUT_ENV};
use anchored_asr::pipeline::{self, Which};
use anchored_asr::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "anchored-asr", version, about = "Anchored speech recognition with neural transducers")]
struct Cli {
    /// Experiment config (JSON); built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root; overrides the config and the environment variable.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective config, or write it to a file.
    Config {
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Generate the synthetic corpus.
    Synth,
    /// Render the 15-cell evaluation grid of mixtures.
    Mix,
    /// Train systems (all configured systems when none is named).
    Train {
        #[arg(long = "system")]
        systems: Vec<String>,
        /// Continue from each system's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Decode the evaluation grid and write hypotheses.
    Decode {
        #[arg(long = "system")]
        systems: Vec<String>,
        #[arg(long, value_enum, default_value_t = Checkpoint::Best)]
        checkpoint: Checkpoint,
    },
    /// Score decoded hypotheses into a WER table with WERR.
    Score {
        #[arg(long = "system")]
        systems: Vec<String>,
        /// Earlier report.json holding the reference system.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Histogram of gate values on target versus background frames.
    AnalyzeGates {
        #[arg(long)]
        system: String,
        #[arg(long, default_value_t = 1.0)]
        snr: f64,
        #[arg(long, default_value_t = 100.0)]
        shift: f64,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, value_enum, default_value_t = Checkpoint::Best)]
        checkpoint: Checkpoint,
    },
    /// Every stage in order: synth, mix, train, decode, score.
    Run {
        #[arg(long)]
        resume: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Checkpoint {
    Best,
    Last,
}

impl From<Checkpoint> for Which {
    fn from(c: Checkpoint) -> Self {
        match c {
            Checkpoint::Best => Which::Best,
            Checkpoint::Last => Which::Last,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    // clap already folded the environment variable into `out`
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate().map_err(|e| Failure::Usage(format!("config: {e}")))?;
    Ok(cfg)
}

fn selected(cfg: &ExperimentConfig, names: &[String]) -> Result<Vec<String>, Failure> {
    if names.is_empty() {
        return Ok(cfg.systems.iter().map(|s| s.name.clone()).collect());
    }
    for n in names {
        cfg.system(n).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(names.to_vec())
}

fn train_all(cfg: &ExperimentConfig, names: &[String], resume: bool) -> Result<(), Failure> {
    for name in names {
        log::info!("training `{name}`");
        let out = pipeline::train_system(cfg, name, resume)?;
        log::info!(
            "`{name}`: {} epochs, {} steps, best dev loss {:.4} at epoch {}",
            out.epochs_done,
            out.steps,
            out.dev_losses[out.best_epoch],
            out.best_epoch + 1
        );
    }
    Ok(())
}

fn decode_all(cfg: &ExperimentConfig, names: &[String], which: Which) -> Result<(), Failure> {
    for name in names {
        let files = pipeline::decode(cfg, name, which)?;
        log::info!("`{name}`: wrote {} hypothesis files", files.len());
    }
    Ok(())
}

fn score(cfg: &ExperimentConfig, names: &[String], reference: Option<&std::path::Path>) -> Result<(), Failure> {
    let reports = pipeline::score(cfg, names, reference)?;
    print!("{}", anchored_asr::evalreport::render_table(&reports));
    let dir = pipeline::Layout::new(&cfg.output_dir).reports_dir();
    log::info!("wrote {}", dir.join("report.json").display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Config { write } => match write {
            Some(path) => {
                cfg.save(&path)?;
                log::info!("wrote {}", path.display());
            }
            None => println!(
                "{}",
                serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Runtime(e.into()))?
            ),
        },
        Command::Synth => {
            let corpus = pipeline::synth(&cfg)?;
            log::info!(
                "wrote {} utterances to {}",
                corpus.utterances.len(),
                pipeline::Layout::new(&cfg.output_dir).corpus_dir().display()
            );
        }
        Command::Mix => {
            let paths = pipeline::mix(&cfg)?;
            log::info!("wrote {} cell manifests", paths.len());
        }
        Command::Train { systems, resume } => train_all(&cfg, &selected(&cfg, &systems)?, resume)?,
        Command::Decode { systems, checkpoint } => decode_all(&cfg, &selected(&cfg, &systems)?, checkpoint.into())?,
        Command::Score { systems, reference } => score(&cfg, &selected(&cfg, &systems)?, reference.as_deref())?,
        Command::AnalyzeGates {
            system,
            snr,
            shift,
            bins,
            checkpoint,
        } => {
            cfg.system(&system).map_err(|e| Failure::Usage(e.to_string()))?;
            if bins == 0 {
                return Err(Failure::Usage("--bins must be at least 1".into()));
            }
            let s = pipeline::analyze_gates(&cfg, &system, checkpoint.into(), snr, shift, bins)?;
            println!(
                "{} {}: mean gate target {:.4} (n={}), background {:.4} (n={}), separation {:.4}",
                s.system,
                s.cell,
                s.histogram.mean_target,
                s.histogram.n_target,
                s.histogram.mean_background,
                s.histogram.n_background,
                s.separation
            );
        }
        Command::Run { resume } => {
            let names = selected(&cfg, &[])?;
            pipeline::synth(&cfg)?;
            pipeline::mix(&cfg)?;
            train_all(&cfg, &names, resume)?;
            decode_all(&cfg, &names, Which::Best)?;
            score(&cfg, &names, None)?;
        }
    }
    Ok(())
}
