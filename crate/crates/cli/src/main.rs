use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use prosody_core::labels::{LabelKind, Level};
use prosody_cli::commands::{self, IdSource, TrainOptions};
use prosody_cli::corpus::Split;
use prosody_cli::manifest;
use prosody_cli::synth::{synth_corpus, SynthConfig};
use prosody_cli::target::{ModelTarget, Target};
use prosody_cli::{CliError, CliResult, Project};

/// Token-level prosody labels, predictors and objective metrics.
///
/// Exit status: 0 success, 1 usage or configuration error, 2 data error,
/// 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "prosody", version)]
struct Cli {
    /// Project config; relative paths inside it resolve against its directory.
    #[arg(long, short, global = true, default_value = "prosody.toml")]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.word.total_steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded toy corpus with word-conditioned prosody and a config.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        utterances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract prosody labels for both splits.
    Extract {
        #[arg(long, value_parser = parse_kind)]
        kind: LabelKind,
        #[arg(long, value_parser = parse_level)]
        level: Level,
    },
    /// Train the reference encoder or a prosody predictor.
    Train {
        /// `ref-encoder` or `predictor:{P|W}+{R|N}` or `predictor:H(W+x,P+y)`.
        #[arg(long)]
        target: Target,
        /// Word-embedding source for word-level and hierarchical models.
        #[arg(long)]
        features: Option<String>,
        /// Continue from the last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps; resume later with `--resume`.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Predict labels from text-side inputs with a trained predictor.
    Predict {
        #[arg(long)]
        target: ModelTarget,
        #[arg(long)]
        features: Option<String>,
        #[arg(long, value_enum, conflicts_with = "ids", required_unless_present = "ids")]
        split: Option<Split>,
        /// File with one utterance id per line.
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Score (test, reference) WAV pairs listed in a CSV.
    Evaluate {
        /// CSV with `test_path,reference_path` columns.
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Held-out F0/energy MAE per feature source (`phoneme` or an embedding name).
    ReportPredictability {
        #[arg(long, num_args = 1.., required = true)]
        sources: Vec<String>,
    },
    /// Re-hash every manifest's inputs and outputs.
    Verify,
}

fn parse_kind(s: &str) -> Result<LabelKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "rule" | "r" => Ok(LabelKind::Rule),
        "neural" | "n" => Ok(LabelKind::Neural),
        _ => Err("expected `rule` or `neural`".into()),
    }
}

fn parse_level(s: &str) -> Result<Level, String> {
    match s.to_ascii_lowercase().as_str() {
        "phoneme" | "p" => Ok(Level::Phoneme),
        "word" | "w" => Ok(Level::Word),
        _ => Err("expected `phoneme` or `word`".into()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Command::SynthCorpus { out, utterances, seed } = &cli.command {
        let cfg = SynthConfig {
            utterances: *utterances,
            seed: *seed,
            ..SynthConfig::default()
        };
        let s = synth_corpus(out, &cfg)?;
        info!("wrote {} train and {} test utterances to {}", s.train.len(), s.test.len(), out.display());
        return Ok(());
    }
    let project = Project::load(&cli.config, &cli.overrides)?;
    match cli.command {
        Command::SynthCorpus { .. } => unreachable!("handled above"),
        Command::Extract { kind, level } => print_json(&commands::extract(&project, kind, level)?),
        Command::Train {
            target,
            features,
            resume,
            max_steps,
        } => {
            let out = commands::train(&project, target, features.as_deref(), TrainOptions { resume, max_steps })?;
            println!("{}: {} steps done", out.checkpoint.display(), out.steps_done);
            if let Some(path) = out.report_path {
                let text = std::fs::read_to_string(&path).map_err(prosody_cli::error::io_err(&path))?;
                print!("{text}");
            }
            Ok(())
        }
        Command::Predict {
            target,
            features,
            split,
            ids,
        } => {
            let ids = match (split, ids) {
                (Some(s), _) => IdSource::Split(s),
                (None, Some(p)) => IdSource::File(p),
                (None, None) => return Err(CliError::Usage("pass --split or --ids".into())),
            };
            print_json(&commands::predict(&project, target, features.as_deref(), &ids)?)
        }
        Command::Evaluate { pairs } => print_json(&commands::evaluate(&project, &pairs)?.1),
        Command::ReportPredictability { sources } => {
            let rows = commands::report_predictability(&project, &sources)?;
            for r in rows {
                println!("{}\t{}\tf0_mae={:.4}\tenergy_mae={:.6}", r.source, r.level, r.f0_mae, r.energy_mae);
            }
            Ok(())
        }
        Command::Verify => {
            let report = manifest::verify(&project)?;
            for p in &report.problems {
                error!("{p}");
            }
            println!(
                "{} manifests, {} files checked, {} problems",
                report.manifests,
                report.files_checked,
                report.problems.len()
            );
            if report.problems.is_empty() {
                Ok(())
            } else {
                Err(CliError::Data("provenance verification failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
