use std::collections::BTreeMap;

use super::PerturbationSpec;
use crate::autodiff::{backward, evaluate, Tensor};
use crate::error::{Error, Result};
use crate::nets::{bind_params, build_mlp, forward, gather_grads, MlpSpec, ParamVector, Predictions, INPUT_LEAF};
use crate::schedule::{lambda_at, RampSpec};

/// Divergence between student and teacher predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Divergence {
    /// Squared Euclidean distance between probability rows.
    #[default]
    Mse,
    /// `KL(student ‖ teacher)`, natural log.
    Kl,
}

/// Source of consistency targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TeacherMode {
    /// The student itself under an independent perturbation (Π model).
    #[default]
    SelfEnsemble,
    /// Exponential moving average of student weights (Mean Teacher).
    Ema,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyConfig {
    pub divergence: Divergence,
    pub teacher_mode: TeacherMode,
    pub ramp: RampSpec,
    /// Apply dropout on the teacher pass as well.
    pub teacher_dropout: bool,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            divergence: Divergence::Mse,
            teacher_mode: TeacherMode::SelfEnsemble,
            ramp: RampSpec::default(),
            teacher_dropout: true,
        }
    }
}

impl ConsistencyConfig {
    /// Plain supervised training: the consistency weight is zero throughout.
    pub fn supervised() -> Self {
        Self {
            ramp: RampSpec {
                lambda_max: 0.0,
                ramp_epochs: 0.0,
            },
            ..Self::default()
        }
    }

    pub fn is_supervised(&self) -> bool {
        self.ramp.lambda_max == 0.0
    }
}

/// EMA copy of the student weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub weights: ParamVector,
    pub alpha: f64,
}

impl TeacherState {
    pub fn new(weights: ParamVector, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { weights, alpha })
    }
}

/// `w_g ← α·w_g + (1 − α)·w_f`.
pub fn ema_update(t: &TeacherState, student: &ParamVector) -> Result<TeacherState> {
    let mut next = t.clone();
    ema_update_in_place(&mut next, student)?;
    Ok(next)
}

pub(crate) fn ema_update_in_place(t: &mut TeacherState, student: &ParamVector) -> Result<()> {
    if t.weights.len() != student.len() {
        return Err(Error::LengthMismatch {
            expected: t.weights.len(),
            actual: student.len(),
        });
    }
    let a = t.alpha;
    t.weights
        .as_mut_slice()
        .iter_mut()
        .zip(student.as_slice())
        .for_each(|(g, f)| *g = a * *g + (1.0 - a) * f);
    Ok(())
}

/// Batch-mean divergence between student and (constant) teacher predictions.
pub fn consistency_loss(
    student: &Predictions,
    teacher: &Predictions,
    divergence: Divergence,
) -> Result<f64> {
    if student.len() != teacher.len() || student.classes() != teacher.classes() {
        return Err(Error::LengthMismatch {
            expected: student.probabilities().len(),
            actual: teacher.probabilities().len(),
        });
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let (f, g) = (student.probabilities(), teacher.probabilities());
    let total: f64 = match divergence {
        Divergence::Mse => f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum(),
        Divergence::Kl => f
            .iter()
            .zip(g)
            .map(|(&a, &b)| {
                if a == 0.0 {
                    0.0
                } else {
                    a * (a.ln() - b.max(f64::MIN_POSITIVE).ln())
                }
            })
            .sum(),
    };
    Ok(total / student.len() as f64)
}

/// One labeled and one unlabeled minibatch plus the randomness for both passes.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub labeled_x: &'a Tensor,
    pub labeled_y: &'a [usize],
    pub unlabeled_x: Option<&'a Tensor>,
    pub perturb: Option<&'a PerturbationSpec>,
    pub student_seed: u64,
    pub teacher_seed: u64,
}

impl LossBatch<'_> {
    /// Labeled rows followed by unlabeled rows.
    pub fn union(&self) -> Result<Tensor> {
        let (nl, d) = self.labeled_x.rows_cols();
        let mut v = self.labeled_x.values().to_vec();
        let mut rows = nl;
        if let Some(u) = self.unlabeled_x {
            let (nu, du) = u.rows_cols();
            if du != d {
                return Err(Error::LengthMismatch {
                    expected: d,
                    actual: du,
                });
            }
            v.extend_from_slice(u.values());
            rows += nu;
        }
        Tensor::matrix(rows, d, v)
    }
}

/// Loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub cons: f64,
    pub lambda: f64,
}

/// Loss values and the two gradient components.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub parts: LossParts,
    pub grad_ce: ParamVector,
    pub grad_cons: ParamVector,
}

impl LossEval {
    /// `∇L_CE + λ·∇L_cons`.
    pub fn gradient(&self) -> Result<ParamVector> {
        self.grad_ce.axpy(self.parts.lambda, &self.grad_cons)
    }
}

/// Teacher predictions on the union batch, held constant for the student pass.
pub fn teacher_predictions(
    teacher: &ParamVector,
    spec: &MlpSpec,
    batch: &LossBatch<'_>,
    cfg: &ConsistencyConfig,
) -> Result<Predictions> {
    let x = batch.union()?;
    let perturb = batch.perturb.map(|p| {
        if cfg.teacher_dropout {
            p.clone()
        } else {
            p.without_dropout()
        }
    });
    forward(teacher, spec, &x, perturb.as_ref(), batch.teacher_seed)
}

/// Supervised cross-entropy plus `λ(epoch_pos)` times the consistency term.
///
/// The cross-entropy is averaged over labeled rows; the consistency term over
/// the union of labeled and unlabeled rows. Gradients flow through the
/// student pass only: `teacher` enters as constant targets.
pub fn total_loss(
    w_f: &ParamVector,
    teacher: &ParamVector,
    spec: &MlpSpec,
    batch: &LossBatch<'_>,
    cfg: &ConsistencyConfig,
    epoch_pos: f64,
) -> Result<LossEval> {
    let targets = if cfg.is_supervised() {
        None
    } else {
        Some(teacher_predictions(teacher, spec, batch, cfg)?)
    };
    let lambda = lambda_at(&cfg.ramp, epoch_pos);
    student_loss(w_f, spec, batch, targets.as_ref(), cfg.divergence, lambda)
}

/// Student pass against fixed teacher targets.
pub fn student_loss(
    w_f: &ParamVector,
    spec: &MlpSpec,
    batch: &LossBatch<'_>,
    targets: Option<&Predictions>,
    divergence: Divergence,
    lambda: f64,
) -> Result<LossEval> {
    let nl = batch.labeled_y.len();
    if nl == 0 {
        return Err(Error::InvalidArgument("empty labeled batch".into()));
    }
    if batch.labeled_x.rows_cols().0 != nl {
        return Err(Error::LengthMismatch {
            expected: batch.labeled_x.rows_cols().0,
            actual: nl,
        });
    }
    let k = spec.num_classes();
    let x = batch.union()?;
    let rows = x.rows_cols().0;
    let x = match batch.perturb {
        Some(p) => p.perturb_inputs(&x, batch.student_seed)?,
        None => x,
    };
    let dropout = batch.perturb.map(|p| (p.dropout_rate, batch.student_seed));

    let mut b = crate::autodiff::Tape::builder();
    let nodes = build_mlp(&mut b, spec, rows, dropout)?;
    let logp = b.log_softmax(nodes.logits)?;

    let mut mask = vec![0.0; rows * k];
    for (i, &y) in batch.labeled_y.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} >= {k}")));
        }
        mask[i * k + y] = 1.0;
    }
    let mask = b.constant(Tensor::matrix(rows, k, mask)?);
    let picked = b.mul(logp, mask)?;
    let s = b.sum(picked);
    let ce = b.scale(s, -1.0 / nl as f64)?;
    b.output("ce", ce);

    if let Some(t) = targets {
        if t.len() != rows || t.classes() != k {
            return Err(Error::LengthMismatch {
                expected: rows * k,
                actual: t.probabilities().len(),
            });
        }
        let p = b.softmax(nodes.logits)?;
        let term = match divergence {
            Divergence::Mse => {
                let g = b.constant(Tensor::matrix(rows, k, t.probabilities().to_vec())?);
                let diff = b.sub(p, g)?;
                b.square(diff)
            }
            Divergence::Kl => {
                let log_g: Vec<f64> = t
                    .probabilities()
                    .iter()
                    .map(|g| g.max(f64::MIN_POSITIVE).ln())
                    .collect();
                let lg = b.constant(Tensor::matrix(rows, k, log_g)?);
                let diff = b.sub(logp, lg)?;
                b.mul(p, diff)?
            }
        };
        let s = b.sum(term);
        let cons = b.scale(s, 1.0 / rows as f64)?;
        b.output("cons", cons);
    }
    let tape = b.build();

    let mut inputs = bind_params(w_f, spec, true)?;
    inputs.insert(INPUT_LEAF.to_string(), x);
    let eval = evaluate(&tape, &inputs)?;
    let ce_val = eval.output("ce")?.values()[0];
    let one = Tensor::scalar(1.0)?;
    let seed = |name: &str| BTreeMap::from([(name.to_string(), one.clone())]);
    let grad_ce = gather_grads(&backward(&tape, &eval, &seed("ce"))?, spec)?;
    let (cons_val, grad_cons) = if targets.is_some() {
        let g = gather_grads(&backward(&tape, &eval, &seed("cons"))?, spec)?;
        (eval.output("cons")?.values()[0], g)
    } else {
        (0.0, ParamVector::zeros(w_f.len()))
    };
    let total = ce_val + lambda * cons_val;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            node: tape.len(),
            op: "total_loss",
        });
    }
    Ok(LossEval {
        parts: LossParts {
            total,
            ce: ce_val,
            cons: cons_val,
            lambda,
        },
        grad_ce,
        grad_cons,
    })
}
