use crate::consistency::{student_loss, teacher_predictions, ConsistencyConfig, LossBatch};
use crate::error::{Error, Result};
use crate::nets::{MlpSpec, ParamVector};
use crate::schedule::lambda_at;

/// `(‖∇L_CE‖, ‖∇L_cons‖)` at `w` for one batch, computed separately.
///
/// The batch seeds fix the perturbations, so the result is reproducible.
pub fn grad_norms(
    w: &ParamVector,
    teacher: &ParamVector,
    spec: &MlpSpec,
    batch: &LossBatch<'_>,
    cfg: &ConsistencyConfig,
) -> Result<(f64, f64)> {
    let targets = teacher_predictions(teacher, spec, batch, cfg)?;
    let e = student_loss(w, spec, batch, Some(&targets), cfg.divergence, 1.0)?;
    Ok((e.grad_ce.norm(), e.grad_cons.norm()))
}

/// Unbiased trace of the covariance of a set of gradients:
/// `(1/(B − 1))·Σ‖gᵢ − ḡ‖²`.
pub fn grad_cov_trace_of(grads: &[ParamVector]) -> Result<f64> {
    let b = grads.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 gradients, got {b}")));
    }
    // centre on the first gradient so that identical inputs give exactly zero
    let p = grads[0].len();
    let g0 = grads[0].as_slice();
    let mut shift = vec![0.0; p];
    for g in grads {
        if g.len() != p {
            return Err(Error::LengthMismatch {
                expected: p,
                actual: g.len(),
            });
        }
        shift.iter_mut().zip(g.as_slice()).zip(g0).for_each(|((m, v), v0)| *m += v - v0);
    }
    shift.iter_mut().for_each(|m| *m /= b as f64);
    let ss: f64 = grads
        .iter()
        .map(|g| {
            g.as_slice()
                .iter()
                .zip(g0)
                .zip(&shift)
                .map(|((v, v0), m)| {
                    let d = (v - v0) - m;
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(ss / (b - 1) as f64)
}

/// Trace of the covariance of minibatch gradients of the total loss at `w`,
/// with the student acting as its own teacher and `λ` taken at `epoch_pos`.
pub fn grad_cov_trace(
    w: &ParamVector,
    spec: &MlpSpec,
    batches: &[LossBatch<'_>],
    cfg: &ConsistencyConfig,
    epoch_pos: f64,
) -> Result<f64> {
    if batches.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 minibatches, got {}",
            batches.len()
        )));
    }
    let lambda = lambda_at(&cfg.ramp, epoch_pos);
    let grads = batches
        .iter()
        .map(|b| {
            let targets = if cfg.is_supervised() {
                None
            } else {
                Some(teacher_predictions(w, spec, b, cfg)?)
            };
            student_loss(w, spec, b, targets.as_ref(), cfg.divergence, lambda)?.gradient()
        })
        .collect::<Result<Vec<_>>>()?;
    grad_cov_trace_of(&grads)
}
