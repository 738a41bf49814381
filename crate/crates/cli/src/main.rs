//! `duet` binary: train / generate / eval / ablate / inspect-mask /
//! dump-dataset.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime failure, 3 validation failure.
//! Failures print one machine-readable JSON object to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use duet_cli::commands;
use duet_cli::run_config::RunConfig;
use duet_core::Error;

#[derive(Parser)]
#[command(name = "duet", about = "Two-part audio-video dialogue engine on synthetic streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage (conductor, audio_ar, or joint).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue a same-stage checkpoint; validates the config hash.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate audio/video streams from a creator checkpoint.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One directive wire dump per line.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        n_clips: usize,
        #[arg(long)]
        seed: u64,
        /// Optional reference latent record (first temporal latent is used).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output prefix; writes `<out>.avst` and `<out>.manifest.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a creator checkpoint against a dataset file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Paired fusion-on/fusion-off training runs with shared data and seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Print the attention mask of a constructed sequence as a PBM grid.
    InspectMask {
        #[arg(long)]
        config: PathBuf,
        /// `conductor` or `creator`.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 4)]
        text_len: usize,
        #[arg(long, default_value_t = 2)]
        clips: usize,
        /// Generated-text region length (conductor only).
        #[arg(long, default_value_t = 6)]
        gen_len: usize,
    },
    /// Write a synthetic dataset file plus its regeneration manifest.
    DumpDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        records: usize,
        /// Also print a text dump of the records.
        #[arg(long, default_value_t = false)]
        dump: bool,
    },
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ConfigInvalid { .. } => "config_invalid",
        Error::MissingFrame => "missing_frame",
        Error::NestedFrame => "nested_frame",
        Error::TrailingTokens(_) => "trailing_tokens",
        Error::ClipCountMismatch { .. } => "clip_count_mismatch",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::LengthMismatch(_) => "length_mismatch",
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::MalformedGrid(_) => "malformed_grid",
        Error::IndexOutOfRange(_) => "index_out_of_range",
        Error::RefOnLaterClip(_) => "ref_on_later_clip",
        Error::DecodeOverflow(_) => "decode_overflow",
        Error::TooFewClips { .. } => "too_few_clips",
        Error::StageOrderViolation(_) => "stage_order_violation",
        Error::ConfigMismatch(_) => "config_mismatch",
        Error::InvalidToken(_) => "invalid_token",
        Error::Format(_) => "format",
        Error::AtClip { .. } => "clip_failure",
        Error::Io(_) => "io",
    }
}

/// 2 for runtime failures, 3 for validation failures.
fn exit_class(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::DecodeOverflow(_) | Error::AtClip { .. } => 2,
        _ => 3,
    }
}

fn fail(e: Error) -> ExitCode {
    let class = exit_class(&e);
    let json = serde_json::json!({
        "error": { "kind": error_kind(&e), "message": e.to_string() }
    });
    eprintln!("{json}");
    ExitCode::from(class)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = commands::cmd_train(&cfg, resume.as_deref())?;
            if let (Some(first), Some(last)) = (outcome.first, outcome.last) {
                println!(
                    "stage {} done: l_all {:.6} -> {:.6}; checkpoint {}",
                    cfg.stage.as_str(),
                    first.l_all,
                    last.l_all,
                    outcome.checkpoint.display()
                );
            }
            Ok(())
        }
        Command::Generate { config, checkpoint, prompts, n_clips, seed, reference, out } => {
            let cfg = RunConfig::load(&config)?;
            let (stream, manifest) = commands::cmd_generate(
                &cfg,
                &checkpoint,
                &prompts,
                n_clips,
                seed,
                reference.as_deref(),
                &out,
            )?;
            println!("wrote {} and {}", stream.display(), manifest.display());
            Ok(())
        }
        Command::Eval { config, checkpoint, dataset } => {
            let cfg = RunConfig::load(&config)?;
            let report = commands::cmd_eval(&cfg, &checkpoint, &dataset)?;
            print!("{}", commands::render_report(&report));
            Ok(())
        }
        Command::Ablate { config, seeds } => {
            let cfg = RunConfig::load(&config)?;
            let summary = commands::cmd_ablate(&cfg, seeds)?;
            println!(
                "fusion on : consistency {:.4}  discontinuity {:.4}",
                summary.mean_on_consistency, summary.mean_on_discontinuity
            );
            println!(
                "fusion off: consistency {:.4}  discontinuity {:.4}",
                summary.mean_off_consistency, summary.mean_off_discontinuity
            );
            Ok(())
        }
        Command::InspectMask { config, kind, text_len, clips, gen_len } => {
            let cfg = RunConfig::load(&config)?;
            let pbm = commands::cmd_inspect_mask(&cfg, &kind, text_len, clips, gen_len)?;
            print!("{pbm}");
            Ok(())
        }
        Command::DumpDataset { config, out, records, dump } => {
            let cfg = RunConfig::load(&config)?;
            if let Some(text) = commands::cmd_dump_dataset(&cfg, &out, records, dump)? {
                print!("{text}");
            }
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; usage errors exit 1
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
