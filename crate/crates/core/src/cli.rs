//! The `densematch` command line. [`run`] parses arguments, dispatches to
//! the library and maps the outcome to an exit code: 0 on success, 1 on a
//! usage error, 2 on a runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_dataset, match_images, EvalConfig, EVAL_STRIDES};
use crate::geometry::RansacConfig;
use crate::matching::MatchConfig;
use crate::selftest;
use crate::synth::{generate_dataset, read_manifest, read_pair, DistortionConfig, Image, SourceImages};
use crate::train::{file_digest, load_checkpoint, overfit_check, train, TrainConfig, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "densematch", version, about = "Dense detector-free image matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic pair dataset.
    GenData(GenDataArgs),
    /// Train a descriptor network on a dataset.
    Train(TrainArgs),
    /// Overfit a fresh model on one pair of a dataset.
    Overfit(OverfitArgs),
    /// Match two images with a trained checkpoint.
    Match(MatchArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the built-in gradient, sampling, loss and geometry checks.
    Selftest,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["src_dir", "procedural"]))]
pub struct GenDataArgs {
    /// Directory of PNG source images, used in sorted order.
    #[arg(long)]
    pub src_dir: Option<PathBuf>,
    /// Use generated textures as sources.
    #[arg(long)]
    pub procedural: bool,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Distortion settings as JSON; defaults otherwise.
    #[arg(long)]
    pub distortion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration as JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct OverfitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pair_id: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub max_steps: usize,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image_a: PathBuf,
    #[arg(long)]
    pub image_b: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub stride: u32,
    /// Keep only mutual nearest neighbours.
    #[arg(long)]
    pub mutual: bool,
    /// CSV output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = parse_stride)]
    pub stride: usize,
    #[arg(long)]
    pub mutual: bool,
    #[arg(long, default_value_t = 3.0)]
    pub ransac_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_stride(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if EVAL_STRIDES.contains(&v) {
        Ok(v)
    } else {
        Err(format!("stride must be one of {EVAL_STRIDES:?}"))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Explicit config if given, otherwise the defaults sized to the dataset.
fn train_config(config: Option<&Path>, data: &Path) -> Result<TrainConfig> {
    match config {
        Some(p) => read_json(p),
        None => {
            let m = read_manifest(data)?;
            if m.width != m.height {
                return Err(Error::Dataset(format!(
                    "training expects square images, dataset is {}×{}",
                    m.width, m.height
                )));
            }
            Ok(TrainConfig {
                image_size: m.width,
                ..TrainConfig::default()
            })
        }
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let sources = match &a.src_dir {
        Some(dir) => SourceImages::from_dir(dir)?,
        None => SourceImages::Procedural,
    };
    let cfg = match &a.distortion {
        Some(p) => read_json(p)?,
        None => DistortionConfig::default(),
    };
    let m = generate_dataset(&sources, &cfg, a.size, a.size, a.count, a.seed, &a.out)?;
    println!("wrote {} pairs of {}×{} to {}", m.count, m.width, m.height, a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a.config.as_deref(), &a.data)?;
    let opts = TrainOptions {
        resume: a.resume,
        stop_after: None,
    };
    let report = train(&a.data, &cfg, &a.out, &opts)?;
    let means = report.epoch_means();
    println!(
        "{} steps; epoch mean loss {:.4} -> {:.4}; checkpoint {}",
        report.steps,
        means.first().copied().unwrap_or(f64::NAN),
        means.last().copied().unwrap_or(f64::NAN),
        report.checkpoint.display()
    );
    Ok(())
}

fn run_overfit(a: &OverfitArgs) -> Result<()> {
    let cfg = train_config(a.config.as_deref(), &a.data)?;
    let manifest = read_manifest(&a.data)?;
    let pair = read_pair(&a.data, &manifest, a.pair_id)?;
    let report = overfit_check(&pair, &cfg, a.max_steps)?;
    println!(
        "{}",
        serde_json::json!({
            "pair_id": a.pair_id,
            "converged": report.converged,
            "steps": report.steps,
            "final_loss": report.final_loss,
            "diagonal_accuracy": report.diagonal_accuracy,
        })
    );
    Ok(())
}

fn run_match(a: &MatchArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ia = Image::load(&a.image_a)?;
    let ib = Image::load(&a.image_b)?;
    let cfg = MatchConfig {
        stride_px: a.stride as usize,
        mutual_only: a.mutual,
        normalize: ck.matching.normalize,
        ..MatchConfig::default()
    };
    let matches = match_images(&ck.model, &ia, &ib, &cfg)?;
    match &a.out {
        Some(p) => {
            matches.write_csv(p)?;
            eprintln!("{} matches written to {}", matches.len(), p.display());
        }
        None => matches.write_to(std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = EvalConfig {
        stride_px: a.stride,
        mutual_only: a.mutual,
        normalize: ck.matching.normalize,
        ransac: RansacConfig {
            threshold_px: a.ransac_threshold,
            seed: a.seed,
            ..RansacConfig::default()
        },
        ..EvalConfig::default()
    };
    let digest = file_digest(&a.checkpoint)?;
    let (summary, records) = evaluate_dataset(&ck.model, &a.data, &cfg, Some(digest))?;
    emit_report(&summary, &records, &a.out)?;
    println!(
        "{} pairs, {} RANSAC failures, median MCE {}, reports in {}",
        summary.pairs,
        summary.ransac_failures,
        summary.median_mce_px.map_or("n/a".into(), |m| format!("{m:.3} px")),
        a.out.display()
    );
    Ok(())
}

fn run_selftest() -> Result<bool> {
    let checks = selftest::run_all()?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

pub fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Overfit(a) => run_overfit(a).map(|_| true),
        Command::Match(a) => run_match(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Selftest => run_selftest(),
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["densematch", "eval", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["densematch"]), EXIT_USAGE);
        assert_eq!(run(["densematch", "gen-data", "--count", "1", "--out", "x"]), EXIT_USAGE);
        assert_eq!(
            run(["densematch", "eval", "--checkpoint", "c", "--data", "d", "--out", "o", "--stride", "3"]),
            EXIT_USAGE
        );
        assert_eq!(run(["densematch", "--help"]), EXIT_OK);
    }

    #[test]
    fn eval_accepts_the_listed_strides() {
        for s in EVAL_STRIDES {
            let cli = Cli::try_parse_from(["densematch", "eval", "--checkpoint", "c", "--data", "d", "--out", "o", "--stride", &s.to_string()]).unwrap();
            let Command::Eval(a) = cli.command else { panic!() };
            assert_eq!(a.stride, s);
        }
    }

    #[test]
    fn missing_files_are_runtime_failures() {
        assert_eq!(run(["densematch", "train", "--data", "/nonexistent", "--out", "/tmp/x"]), EXIT_FAILURE);
    }
}
