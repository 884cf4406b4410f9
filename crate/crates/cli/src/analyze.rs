use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use fastswa::averaging::load_checkpoint;
use fastswa::config::load_config;
use fastswa::data::DatasetSplit;
use fastswa::experiment::{load_data, RAY_DISTANCES};
use fastswa::geometry::{
    average_gain, diversity, ensemble_gain_of, exact_jacobian_frobenius, gaussian_iterate_mse_sim,
    hessian_trace_decomposition, jacobian_trace_estimate, ray_profile, report, DirectionKind, EvalSet,
    IterateSimSpec, JacobianWrt, RaySpec, RaySplit, TraceOptions,
};
use fastswa::nets::{forward, MlpSpec, OutputHead, ParamVector};

use crate::{write_output, CliResult, Failure};

#[derive(Subcommand)]
pub enum AnalyzeCommand {
    /// Error along random, adversarial or checkpoint-to-checkpoint rays.
    Rays(RaysArgs),
    /// Pairwise prediction disagreement between checkpoints.
    Diversity(MultiArgs),
    /// Ensembling and weight-averaging gains for every checkpoint pair.
    Gains(MultiArgs),
    /// Hutchinson estimate of the input-Jacobian norm.
    Trace(TraceArgs),
    /// Hessian trace decomposition at individual test points.
    Hessian(HessianArgs),
    /// Gaussian-iterate simulation of averaging with high-rate points.
    Simiter(SimiterArgs),
}

#[derive(Args)]
pub struct DataArgs {
    /// Configuration whose data section (and seed) defines the evaluation sets.
    #[arg(long)]
    config: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
pub struct RaysArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Origin of the ray.
    checkpoint: PathBuf,
    /// Follow the segment towards this checkpoint.
    #[arg(long, conflicts_with = "adversarial")]
    to: Option<PathBuf>,
    /// Ascend the cross-entropy gradient on this split.
    #[arg(long, value_enum)]
    adversarial: Option<Split>,
    /// Seed for random directions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated grid of `s` (or `t` with --to).
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
}

#[derive(Args)]
pub struct MultiArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(required = true, num_args = 2..)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
pub struct TraceArgs {
    #[command(flatten)]
    data: DataArgs,
    checkpoint: PathBuf,
    /// Probes per input point.
    #[arg(long, default_value_t = 1)]
    probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use pre-softmax outputs.
    #[arg(long)]
    logits: bool,
    /// Also compute the exact squared Frobenius norm.
    #[arg(long)]
    exact: bool,
}

#[derive(Args)]
pub struct HessianArgs {
    #[command(flatten)]
    data: DataArgs,
    checkpoint: PathBuf,
    /// Number of leading test points to decompose at.
    #[arg(long, default_value_t = 5)]
    points: usize,
    #[arg(long)]
    logits: bool,
}

#[derive(Args)]
pub struct SimiterArgs {
    /// Low-rate iterates.
    #[arg(long)]
    n: usize,
    /// Comma-separated counts of high-rate iterates.
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<usize>,
    #[arg(long)]
    eta1: f64,
    #[arg(long)]
    eta2: f64,
    /// Diagonal of Σ, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

struct Loaded {
    data: DatasetSplit,
    test_x: fastswa::autodiff::Tensor,
    train_x: fastswa::autodiff::Tensor,
}

impl Loaded {
    fn new(config: &Path) -> CliResult<Self> {
        let cfg = load_config(config)?;
        let data = load_data(&cfg.data, cfg.train.seed)?;
        Ok(Self {
            test_x: data.test_tensor()?,
            train_x: data.labeled_tensor()?,
            data,
        })
    }

    fn train(&self) -> EvalSet<'_> {
        EvalSet {
            x: &self.train_x,
            y: &self.data.labeled_y,
        }
    }

    fn test(&self) -> EvalSet<'_> {
        EvalSet {
            x: &self.test_x,
            y: &self.data.test_y,
        }
    }
}

fn load_model(path: &Path, data: Option<&DatasetSplit>) -> CliResult<(ParamVector, MlpSpec)> {
    let (w, h) = load_checkpoint(path)?;
    let spec = h.spec()?;
    if let Some(d) = data {
        if spec.input_dim() != d.dim || spec.num_classes() != d.classes {
            return Err(Failure::usage(format!(
                "{} expects {} inputs and {} classes, data has {} and {}",
                path.display(),
                spec.input_dim(),
                spec.num_classes(),
                d.dim,
                d.classes
            )));
        }
    }
    Ok((w, spec))
}

fn model_name(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn emit(output: &Option<PathBuf>, text: &str) -> CliResult {
    match output {
        Some(p) => write_output(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn head(logits: bool) -> OutputHead {
    if logits {
        OutputHead::Logits
    } else {
        OutputHead::Probabilities
    }
}

fn load_many(a: &MultiArgs, l: &Loaded) -> CliResult<(MlpSpec, Vec<ParamVector>, Vec<String>)> {
    let mut spec = None;
    let mut ws = Vec::new();
    for p in &a.checkpoints {
        let (w, s) = load_model(p, Some(&l.data))?;
        match &spec {
            None => spec = Some(s),
            Some(s0) if *s0 != s => {
                return Err(Failure::usage(format!("{} has a different architecture", p.display())))
            }
            Some(_) => {}
        }
        ws.push(w);
    }
    let names = a.checkpoints.iter().map(|p| model_name(p)).collect();
    Ok((spec.expect("at least two checkpoints"), ws, names))
}

pub fn run(cmd: AnalyzeCommand) -> CliResult {
    match cmd {
        AnalyzeCommand::Rays(a) => {
            let l = Loaded::new(&a.data.config)?;
            let (w, spec) = load_model(&a.checkpoint, Some(&l.data))?;
            let (direction, default_grid) = if let Some(to) = &a.to {
                let (wb, sb) = load_model(to, Some(&l.data))?;
                if sb != spec {
                    return Err(Failure::usage("segment endpoints have different architectures"));
                }
                let grid = (0..=20).map(|i| i as f64 / 20.0).collect();
                (DirectionKind::SgdSgd(wb), grid)
            } else if let Some(s) = a.adversarial {
                let split = match s {
                    Split::Train => RaySplit::Train,
                    Split::Test => RaySplit::Test,
                };
                (DirectionKind::Adversarial(split), RAY_DISTANCES.to_vec())
            } else {
                (
                    DirectionKind::Random {
                        seed: a.seed,
                        count: 5,
                    },
                    RAY_DISTANCES.to_vec(),
                )
            };
            let ray = RaySpec {
                origin: w,
                direction,
                grid: a.grid.unwrap_or(default_grid),
            };
            let p = ray_profile(&ray, &spec, l.train(), l.test())?;
            emit(&a.data.output, &report::ray_profile_csv(&p))
        }
        AnalyzeCommand::Diversity(a) => {
            let l = Loaded::new(&a.data.config)?;
            let (spec, ws, names) = load_many(&a, &l)?;
            let preds = ws
                .iter()
                .map(|w| forward(w, &spec, &l.test_x, None, 0))
                .collect::<Result<Vec<_>, _>>()?;
            let m = preds
                .iter()
                .map(|p| preds.iter().map(|q| diversity(p, q)).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
            emit(&a.data.output, &report::matrix_csv(&names, &m)?)
        }
        AnalyzeCommand::Gains(a) => {
            let l = Loaded::new(&a.data.config)?;
            let (spec, ws, names) = load_many(&a, &l)?;
            let y = &l.data.test_y;
            let mut rows = Vec::new();
            for i in 0..ws.len() {
                for j in i + 1..ws.len() {
                    let pi = forward(&ws[i], &spec, &l.test_x, None, 0)?;
                    let pj = forward(&ws[j], &spec, &l.test_x, None, 0)?;
                    let eg = ensemble_gain_of(&pi, &pj, y)?;
                    let ag = average_gain(&ws[i], &ws[j], &spec, &l.test_x, y)?;
                    rows.push((names[i].clone(), names[j].clone(), eg, ag));
                }
            }
            emit(&a.data.output, &report::gains_csv(&rows))
        }
        AnalyzeCommand::Trace(a) => {
            let l = Loaded::new(&a.data.config)?;
            let (w, spec) = load_model(&a.checkpoint, Some(&l.data))?;
            let opts = TraceOptions {
                epsilon: a.epsilon,
                probes: a.probes,
                head: head(a.logits),
                seed: a.seed,
                ..TraceOptions::default()
            };
            let est = jacobian_trace_estimate(&w, &spec, &l.test_x, &opts)?;
            let exact = if a.exact {
                Some(exact_jacobian_frobenius(&w, &spec, &l.test_x, JacobianWrt::Input, opts.head)?)
            } else {
                None
            };
            emit(&a.data.output, &report::trace_report_csv(&est, exact))
        }
        AnalyzeCommand::Hessian(a) => {
            let l = Loaded::new(&a.data.config)?;
            let (w, spec) = load_model(&a.checkpoint, Some(&l.data))?;
            let (d, k) = (l.data.dim, l.data.classes);
            let n = a.points.min(l.data.test_y.len());
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let x = &l.data.test_x[i * d..(i + 1) * d];
                let mut y = vec![0.0; k];
                y[l.data.test_y[i]] = 1.0;
                rows.push((i, hessian_trace_decomposition(&w, &spec, x, &y, head(a.logits))?));
            }
            emit(&a.data.output, &report::hessian_report_csv(&rows))
        }
        AnalyzeCommand::Simiter(a) => {
            let mut rows = Vec::with_capacity(a.m.len());
            for &m in &a.m {
                let spec = IterateSimSpec {
                    n: a.n,
                    m,
                    eta1: a.eta1,
                    eta2: a.eta2,
                    w0: vec![0.0; a.sigma.len()],
                    sigma_diag: a.sigma.clone(),
                    trials: a.trials,
                    seed: a.seed,
                };
                rows.push((m, gaussian_iterate_mse_sim(&spec)?));
            }
            emit(&a.output, &report::simulation_report_csv(&rows))
        }
    }
}
