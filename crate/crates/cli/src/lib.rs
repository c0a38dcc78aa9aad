//! Command-line driver for the `seasound` library.
//!
//! A failed command exits with 2 for configuration errors and 3 for I/O errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use seasound::channel::ChannelProfile;
use seasound::iq::{read_cf32, write_cf32};
use seasound::sim::{compare_channels, experiment_track, run_experiment, ExperimentConfig};
use seasound::sounder::{sound_channel_report, synthesize_received, SoundConfig};
use seasound::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::TruncatedIq { .. } => CliError::io(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "seasound",
    version,
    about = "Channel sounding and turtle localization simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a channel profile from a simulated channel or an IQ capture.
    Sound(SoundArgs),
    /// Write the received probe waveform as a cf32 file.
    Synth(SoundArgs),
    /// Run a localization experiment.
    Localize(ExperimentArgs),
    /// Pair ideal-channel and configured-channel errors per surfacing.
    Compare(ExperimentArgs),
    /// Emit the turtle track of an experiment config.
    Track(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SoundArgs {
    /// Sound config JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub scenario: Option<u8>,
    /// Channel profile JSON file.
    #[arg(long, conflicts_with = "scenario")]
    pub profile: Option<PathBuf>,
    /// Headerless interleaved little-endian float32 IQ capture.
    #[arg(long)]
    pub iq: Option<PathBuf>,
    /// Sample rate of the IQ capture, Hz.
    #[arg(long)]
    pub sample_rate: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    #[arg(long, conflicts_with = "snr_db")]
    pub no_noise: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; the profile JSON goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-lag correlation CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config JSON; defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary JSON output. When absent it goes to stdout, or to stderr if
    /// the CSV already took stdout.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sound(args) => cmd_sound(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Localize(args) => cmd_localize(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Track(args) => cmd_track(&args),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(format!("stdout: {e}"))),
    }
}

fn with_context(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }
}

/// File config with command-line overrides applied.
pub fn resolve_sound_config(args: &SoundArgs) -> Result<SoundConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => SoundConfig::from_json(&read_text(p)?).map_err(with_context(p))?,
        None => SoundConfig::default(),
    };
    if let Some(n) = args.scenario {
        cfg.scenario = Some(n);
        cfg.profile = None;
    }
    if let Some(p) = &args.profile {
        cfg.profile = Some(ChannelProfile::from_json(&read_text(p)?).map_err(with_context(p))?);
        cfg.scenario = None;
    }
    if let Some(snr) = args.snr_db {
        cfg.snr_db = Some(snr);
    }
    if args.no_noise {
        cfg.snr_db = None;
    }
    if let Some(seed) = args.seed {
        cfg.params.seed = seed;
    }
    if let Some(fs) = args.sample_rate {
        cfg.params.fs = fs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulated_channel(cfg: &SoundConfig) -> Result<ChannelProfile, CliError> {
    cfg.channel()?.ok_or_else(|| {
        CliError::config(
            "no channel selected: give --scenario, --profile, --iq or a config with one",
        )
    })
}

pub fn cmd_sound(args: &SoundArgs) -> Result<(), CliError> {
    let cfg = resolve_sound_config(args)?;
    let received = match &args.iq {
        Some(path) => {
            if args.sample_rate.is_none() {
                return Err(CliError::config("--iq needs --sample-rate"));
            }
            read_cf32(path, cfg.params.fs).map_err(|e| {
                // Anything wrong with the capture file itself is an I/O failure.
                CliError::io(format!("{}: {e}", path.display()))
            })?
        }
        None => synthesize_received(&cfg.params, &simulated_channel(&cfg)?, cfg.snr_db)?,
    };
    let report = sound_channel_report(&received, &cfg.params, &cfg.detection)?;
    if let Some(csv) = &args.csv {
        write_output(
            Some(csv),
            &report.correlation.to_csv(report.reference_energy),
        )?;
    }
    write_output(args.out.as_deref(), &(report.profile.to_json() + "\n"))
}

pub fn cmd_synth(args: &SoundArgs) -> Result<(), CliError> {
    if args.iq.is_some() {
        return Err(CliError::config("synth does not take --iq"));
    }
    let out = args
        .out
        .as_deref()
        .ok_or_else(|| CliError::config("synth needs --out"))?;
    let cfg = resolve_sound_config(args)?;
    let rx = synthesize_received(&cfg.params, &simulated_channel(&cfg)?, cfg.snr_db)?;
    write_cf32(out, &rx).map_err(|e| CliError::io(format!("{}: {e}", out.display())))
}

/// File config (or defaults) with command-line overrides applied.
pub fn resolve_experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_json(&read_text(p)?).map_err(with_context(p))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_csv_and_summary(args: &ExperimentArgs, csv: &str, summary: &str) -> Result<(), CliError> {
    write_output(args.out.as_deref(), csv)?;
    let summary = format!("{summary}\n");
    match (&args.summary, &args.out) {
        (Some(p), _) => write_output(Some(p), &summary),
        (None, Some(_)) => write_output(None, &summary),
        (None, None) => {
            eprint!("{summary}");
            Ok(())
        }
    }
}

pub fn cmd_localize(args: &ExperimentArgs) -> Result<(), CliError> {
    let cfg = resolve_experiment_config(args)?;
    let results = run_experiment(&cfg)?;
    write_csv_and_summary(args, &results.to_csv(), &results.summary_json())
}

pub fn cmd_compare(args: &ExperimentArgs) -> Result<(), CliError> {
    let cfg = resolve_experiment_config(args)?;
    let comparison = compare_channels(&cfg)?;
    write_csv_and_summary(args, &comparison.to_csv(), &comparison.summary_json())
}

pub fn cmd_track(args: &ExperimentArgs) -> Result<(), CliError> {
    if args.summary.is_some() {
        return Err(CliError::config("track has no summary output"));
    }
    let cfg = resolve_experiment_config(args)?;
    write_output(args.out.as_deref(), &experiment_track(&cfg)?.to_csv())
}
