//! `fastswa` command-line driver.
//!
//! Every failure prints a single line `error: <kind>: <message>` to stderr
//! and exits nonzero: 2 for usage errors, 3 for diverged training, 1 for
//! everything else.

mod analyze;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastswa::averaging::{average_of, load_checkpoint, save_checkpoint, CheckpointHeader, Role};
use fastswa::config::{load_config, output_root};
use fastswa::consistency::Stride;
use fastswa::experiment::run_experiment_in;
use fastswa::Error;

#[derive(Parser)]
#[command(name = "fastswa", version, about = "Semi-supervised training with SWA and fast-SWA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a configuration file.
    Train(TrainArgs),
    /// Loss-surface and averaging analyses.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
    /// Average checkpoints with equal weights.
    Avg {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print a checkpoint header and summary statistics.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Add an SWA averager.
    #[arg(long)]
    swa: bool,
    /// Add a fast-SWA averager (stride one epoch unless given).
    #[arg(long)]
    fast_swa: bool,
    /// fast-SWA stride in optimizer steps.
    #[arg(long, conflicts_with = "stride_epochs")]
    stride: Option<usize>,
    /// fast-SWA stride in epochs; may be fractional.
    #[arg(long)]
    stride_epochs: Option<f64>,
    /// Cycle length `c` of the cyclical schedule, in epochs.
    #[arg(long)]
    cycle_len: Option<f64>,
    /// Output directory, overriding the configuration.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Failure reported on stderr.
pub(crate) struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Diverged { .. }) { 3 } else { 1 };
        Failure {
            kind: e.kind(),
            message: e.to_string(),
            code,
        }
    }
}

impl Failure {
    pub(crate) fn usage(message: impl Into<String>) -> Self {
        Failure {
            kind: "usage",
            message: message.into(),
            code: 2,
        }
    }
}

pub(crate) type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Resolves a user-supplied output path against the output root.
pub(crate) fn resolve_output(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        output_root().join(p)
    }
}

pub(crate) fn write_output(path: &Path, text: &str) -> CliResult {
    let path = resolve_output(path);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(io_error(dir, e)))?;
    }
    std::fs::write(&path, text).map_err(|e| Failure::from(io_error(&path, e)))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.config)?;
    let stride = match (a.stride, a.stride_epochs) {
        (Some(s), _) => Some(Stride::Steps(s)),
        (None, Some(k)) => Some(Stride::Epochs(k)),
        (None, None) => None,
    };
    cfg.apply_overrides(a.swa, a.fast_swa, stride, a.cycle_len)?;
    if let Some(o) = a.output {
        cfg.output = o;
    }
    let dir = cfg.output_dir();
    let r = run_experiment_in(&cfg, &dir).map_err(|e| match e {
        Error::Diverged { epoch, step } => Failure {
            kind: "diverged",
            message: format!(
                "training diverged at epoch {epoch}, step {step}; partial artifacts in {}",
                dir.display()
            ),
            code: 3,
        },
        other => other.into(),
    })?;
    let last = r.outcome.log.rows().last();
    match last {
        Some(row) => println!(
            "ok {} epochs={} test_err_student={}",
            r.output_dir.display(),
            row.epoch + 1,
            row.test_err_student
        ),
        None => println!("ok {} epochs=0", r.output_dir.display()),
    }
    Ok(())
}

fn avg_cmd(checkpoints: &[PathBuf], output: &Path) -> CliResult {
    let mut ws = Vec::new();
    let mut headers: Vec<CheckpointHeader> = Vec::new();
    for p in checkpoints {
        let (w, h) = load_checkpoint(p)?;
        if let Some(h0) = headers.first() {
            if h0.widths != h.widths || h0.activation != h.activation {
                return Err(Error::HeaderMismatch(format!(
                    "{} has architecture {:?}/{}, expected {:?}/{}",
                    p.display(),
                    h.widths,
                    h.activation,
                    h0.widths,
                    h0.activation
                ))
                .into());
            }
        }
        ws.push(w);
        headers.push(h);
    }
    let mean = average_of(&ws)?;
    let h0 = &headers[0];
    let role = if headers.iter().all(|h| h.role == Role::FastSwa) {
        Role::FastSwa
    } else {
        Role::Swa
    };
    let latest = headers
        .iter()
        .max_by(|a, b| a.schedule_position.total_cmp(&b.schedule_position))
        .expect("at least one checkpoint");
    let header = CheckpointHeader {
        role,
        epoch: latest.epoch,
        step: latest.step,
        schedule_position: latest.schedule_position,
        ..h0.clone()
    };
    let out = resolve_output(output);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(io_error(dir, e)))?;
    }
    save_checkpoint(&out, &mean, &header)?;
    println!("wrote {} from {} checkpoints", out.display(), ws.len());
    Ok(())
}

fn inspect_cmd(path: &Path) -> CliResult {
    let (w, h) = load_checkpoint(path)?;
    let role = match h.role {
        Role::Student => "student",
        Role::Teacher => "teacher",
        Role::Swa => "swa",
        Role::FastSwa => "fast-swa",
    };
    let widths: Vec<String> = h.widths.iter().map(usize::to_string).collect();
    println!("role={role}");
    println!("widths={}", widths.join(","));
    println!("activation={}", h.activation);
    println!("epoch={}", h.epoch);
    println!("step={}", h.step);
    println!("seed={}", h.seed);
    println!("schedule_position={}", h.schedule_position);
    println!("param_count={}", h.param_count);
    println!("l2_norm={}", w.norm());
    let max_abs = w.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("max_abs={max_abs}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Avg {
            checkpoints,
            output,
        } => avg_cmd(&checkpoints, &output),
        Command::Inspect { checkpoint } => inspect_cmd(&checkpoint),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            // keep the reason, drop the usage block and hints that follow it
            let rendered = e.to_string();
            let reason: Vec<&str> = rendered
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            let reason = one_line(&reason.join(" "));
            eprintln!("error: usage: {}", reason.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.kind, one_line(&f.message));
            ExitCode::from(f.code)
        }
    }
}
