use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use super::loss::{ema_update_in_place, total_loss, ConsistencyConfig, LossBatch, TeacherMode, TeacherState};
use super::PerturbationSpec;
use crate::autodiff::Tensor;
use crate::averaging::{should_collect, AveragerState, AveragingKind, CollectionPolicy};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::geometry::diversity;
use crate::metrics::{MetricsLog, MetricsRow};
use crate::nets::{forward, init_mlp, MlpSpec, ParamVector, Predictions};
use crate::rng::{stream_rng, Stream};
use crate::schedule::{lambda_at, lr_at, OptState, ScheduleSpec};

/// fast-SWA collection interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stride {
    Steps(usize),
    /// Fraction or multiple of an epoch, rounded to whole steps.
    Epochs(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragerSpec {
    pub kind: AveragingKind,
    pub stride: Stride,
}

impl AveragerSpec {
    pub fn swa() -> Self {
        Self {
            kind: AveragingKind::Swa,
            stride: Stride::Steps(1),
        }
    }

    pub fn fast_swa(stride: Stride) -> Self {
        Self {
            kind: AveragingKind::FastSwa,
            stride,
        }
    }

    pub fn resolve(&self, schedule: &ScheduleSpec, steps_per_epoch: usize) -> Result<CollectionPolicy> {
        match self.kind {
            AveragingKind::Swa => CollectionPolicy::swa(schedule),
            AveragingKind::FastSwa => {
                let steps = match self.stride {
                    Stride::Steps(s) => s,
                    Stride::Epochs(k) => (k * steps_per_epoch as f64).round().max(1.0) as usize,
                };
                CollectionPolicy::fast_swa(schedule, steps)
            }
        }
    }
}

/// Everything the training loop needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: MlpSpec,
    pub schedule: ScheduleSpec,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub consistency: ConsistencyConfig,
    /// Perturbation applied to both passes; `None` trains on clean inputs.
    pub perturbation: Option<PerturbationSpec>,
    /// EMA decay for the Mean Teacher.
    pub alpha: f64,
    pub averagers: Vec<AveragerSpec>,
    pub epochs: usize,
    pub seed: u64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Epochs after which a copy of the student is kept.
    pub snapshot_epochs: Vec<usize>,
}

impl TrainConfig {
    /// Column names of the averagers, disambiguated by position.
    pub fn averager_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for a in &self.averagers {
            let base = a.kind.name();
            let n = names.iter().filter(|x| x.split('#').next() == Some(base)).count();
            names.push(if n == 0 {
                base.to_string()
            } else {
                format!("{base}#{}", n + 1)
            });
        }
        names.into_iter().map(|s| s.replace('#', "_")).collect()
    }

    /// Optimizer steps in one epoch: one pass over the larger of the two
    /// data streams.
    pub fn steps_per_epoch(&self, data: &DatasetSplit) -> usize {
        let l = data.n_labeled().div_ceil(self.labeled_batch.max(1));
        let u = if self.unlabeled_batch == 0 {
            0
        } else {
            data.n_unlabeled().div_ceil(self.unlabeled_batch)
        };
        l.max(u).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: ParamVector,
    pub teacher: TeacherState,
    pub averagers: Vec<AveragerState>,
    pub log: MetricsLog,
    pub steps_per_epoch: usize,
    pub snapshots: Vec<(usize, ParamVector)>,
}

/// State at the point training stopped on a non-finite loss or gradient.
#[derive(Debug, Clone)]
pub struct DivergedRun {
    pub epoch: usize,
    pub step: usize,
    pub last_good: ParamVector,
    pub log: MetricsLog,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {}, step {}", .0.epoch, .0.step)]
    Diverged(Box<DivergedRun>),
    #[error(transparent)]
    Other(#[from] Error),
}

/// Endless stream of shuffled passes over `n` indices.
struct IndexStream {
    n: usize,
    seed: u64,
    stream: Stream,
    pass: u64,
    queue: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    fn new(n: usize, seed: u64, stream: Stream) -> Self {
        Self {
            n,
            seed,
            stream,
            pass: 0,
            queue: Vec::new(),
            pos: 0,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.queue.len() {
                let mut rng = stream_rng(self.seed, self.stream, self.pass);
                self.queue = (0..self.n).collect();
                self.queue.shuffle(&mut rng);
                self.pass += 1;
                self.pos = 0;
            }
            out.push(self.queue[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather(x: &[f64], dim: usize, idx: &[usize]) -> Result<Tensor> {
    let mut v = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        v.extend_from_slice(&x[i * dim..(i + 1) * dim]);
    }
    Tensor::matrix(idx.len(), dim, v)
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteGradient | Error::Diverged { .. }
    )
}

/// Runs the training loop on a fixed split.
///
/// Each optimizer step draws a labeled and an unlabeled minibatch, runs the
/// teacher and the student on independently perturbed copies, takes a
/// Nesterov step on the total loss, updates the EMA teacher and lets every
/// averager decide whether to collect the new weights. One metrics row is
/// written per epoch. The run is a pure function of `(cfg, data)`.
pub fn train(cfg: &TrainConfig, data: &DatasetSplit) -> Result<TrainOutcome, TrainError> {
    let spec = &cfg.model;
    if data.dim != spec.input_dim() || data.classes != spec.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "model {:?} does not fit data with dim {} and {} classes",
            spec.widths(),
            data.dim,
            data.classes
        ))
        .into());
    }
    if data.n_labeled() == 0 || cfg.labeled_batch == 0 {
        return Err(Error::InvalidArgument("empty labeled batch".into()).into());
    }
    if let Some(p) = &cfg.perturbation {
        p.validate(spec.input_dim())?;
    }
    let spe = cfg.steps_per_epoch(data);
    let policies: Vec<CollectionPolicy> = cfg
        .averagers
        .iter()
        .map(|a| a.resolve(&cfg.schedule, spe))
        .collect::<Result<_>>()?;

    let mut student = init_mlp(spec, cfg.seed);
    let mut teacher = TeacherState::new(student.clone(), cfg.alpha)?;
    let mut opt = OptState::new(student.len(), cfg.momentum, cfg.weight_decay, cfg.nesterov)?;
    let mut averagers: Vec<AveragerState> = policies
        .iter()
        .map(|&p| AveragerState::new(student.len(), p))
        .collect();
    let mut log = MetricsLog::new(cfg.averager_names());
    let mut snapshots = Vec::new();

    let test_x = data.test_tensor()?;
    let eval_test = |w: &ParamVector| -> Result<Predictions> { forward(w, spec, &test_x, None, 0) };
    let mut prev_preds = eval_test(&student)?;

    let use_unlabeled = cfg.unlabeled_batch > 0 && data.n_unlabeled() > 0;
    let mut labeled_stream = IndexStream::new(data.n_labeled(), cfg.seed, Stream::Batch);
    let mut unlabeled_stream =
        IndexStream::new(data.n_unlabeled(), cfg.seed ^ 0x5eed_0000_0000_0001, Stream::Batch);

    for epoch in 0..cfg.epochs {
        let (mut ce_sum, mut cons_sum, mut gce_sum, mut gcons_sum) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..spe {
            let global = (epoch * spe + k) as u64;
            let pos = epoch as f64 + k as f64 / spe as f64;
            let lr = lr_at(&cfg.schedule, pos);

            let li = labeled_stream.take(cfg.labeled_batch);
            let xl = gather(&data.labeled_x, data.dim, &li)?;
            let yl: Vec<usize> = li.iter().map(|&i| data.labeled_y[i]).collect();
            let xu = if use_unlabeled {
                Some(gather(&data.unlabeled_x, data.dim, &unlabeled_stream.take(cfg.unlabeled_batch))?)
            } else {
                None
            };
            let batch = LossBatch {
                labeled_x: &xl,
                labeled_y: &yl,
                unlabeled_x: xu.as_ref(),
                perturb: cfg.perturbation.as_ref(),
                student_seed: stream_rng(cfg.seed, Stream::StudentNoise, global).random(),
                teacher_seed: stream_rng(cfg.seed, Stream::TeacherNoise, global).random(),
            };
            let teacher_w = match cfg.consistency.teacher_mode {
                TeacherMode::SelfEnsemble => &student,
                TeacherMode::Ema => &teacher.weights,
            };
            let diverged = |log: &MetricsLog, student: &ParamVector| {
                TrainError::Diverged(Box::new(DivergedRun {
                    epoch,
                    step: k,
                    last_good: student.clone(),
                    log: log.clone(),
                }))
            };
            let eval = match total_loss(&student, teacher_w, spec, &batch, &cfg.consistency, pos) {
                Ok(e) => e,
                Err(e) if is_divergence(&e) => return Err(diverged(&log, &student)),
                Err(e) => return Err(e.into()),
            };
            let grad = eval.gradient()?;
            let before = student.clone();
            match opt.step(&mut student, &grad, lr) {
                Ok(()) => {}
                Err(e) if is_divergence(&e) => return Err(diverged(&log, &before)),
                Err(e) => return Err(e.into()),
            }
            if student.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(diverged(&log, &before));
            }
            match cfg.consistency.teacher_mode {
                TeacherMode::Ema => ema_update_in_place(&mut teacher, &student)?,
                TeacherMode::SelfEnsemble => teacher.weights = student.clone(),
            }
            for av in averagers.iter_mut() {
                if should_collect(&av.policy, epoch, k, spe, &cfg.schedule) {
                    av.collect_in_place(&student)?;
                }
            }
            ce_sum += eval.parts.ce;
            cons_sum += eval.parts.cons;
            gce_sum += eval.grad_ce.norm();
            gcons_sum += eval.grad_cons.norm();
        }

        let preds = eval_test(&student)?;
        let student_err = preds.error_rate(&data.test_y)?;
        let teacher_err = match cfg.consistency.teacher_mode {
            TeacherMode::Ema => eval_test(&teacher.weights)?.error_rate(&data.test_y)?,
            TeacherMode::SelfEnsemble => student_err,
        };
        let averager_errs = averagers
            .iter()
            .map(|a| match a.averaged() {
                Some(m) => eval_test(m)?.error_rate(&data.test_y),
                None => Ok(student_err),
            })
            .collect::<Result<Vec<_>>>()?;
        let n = spe as f64;
        log.push(MetricsRow {
            epoch,
            lr: lr_at(&cfg.schedule, epoch as f64),
            lambda: lambda_at(&cfg.consistency.ramp, epoch as f64),
            train_ce: ce_sum / n,
            train_cons: cons_sum / n,
            grad_norm_ce: gce_sum / n,
            grad_norm_cons: gcons_sum / n,
            test_err_student: student_err,
            test_err_teacher: teacher_err,
            test_err_averagers: averager_errs,
            diversity_vs_prev_epoch: diversity(&preds, &prev_preds)?,
        })?;
        prev_preds = preds;
        if cfg.snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, student.clone()));
        }
    }

    Ok(TrainOutcome {
        student,
        teacher,
        averagers,
        log,
        steps_per_epoch: spe,
        snapshots,
    })
}
