//! Learning-rate schedules, the consistency-weight ramp and Nesterov SGD.

use crate::error::{Error, Result};
use crate::nets::ParamVector;

/// Cosine annealing over `ell0` epochs, optionally switching to a cyclical
/// schedule at epoch `ell` that repeats the rates of `[ell − c, ell)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub eta0: f64,
    pub ell0: f64,
    cycle: Option<Cycle>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cycle {
    ell: f64,
    c: f64,
}

impl ScheduleSpec {
    /// Plain cosine annealing; the rate stays at zero after `ell0`.
    pub fn cosine(eta0: f64, ell0: f64) -> Result<Self> {
        if !(eta0 > 0.0 && eta0.is_finite()) || !(ell0 > 0.0 && ell0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs eta0 > 0 and ell0 > 0, got {eta0}, {ell0}"
            )));
        }
        Ok(Self {
            eta0,
            ell0,
            cycle: None,
        })
    }

    pub fn cyclic(eta0: f64, ell0: f64, ell: f64, c: f64) -> Result<Self> {
        let mut s = Self::cosine(eta0, ell0)?;
        if !(c > 0.0 && c <= ell && ell <= ell0) {
            return Err(Error::InvalidArgument(format!(
                "cyclic schedule needs 0 < c <= ell <= ell0, got c={c}, ell={ell}, ell0={ell0}"
            )));
        }
        s.cycle = Some(Cycle { ell, c });
        Ok(s)
    }

    /// Cycle start `ell`, if cyclical.
    pub fn ell(&self) -> Option<f64> {
        self.cycle.map(|c| c.ell)
    }

    /// Cycle length `c`, if cyclical.
    pub fn cycle_len(&self) -> Option<f64> {
        self.cycle.map(|c| c.c)
    }

    /// First epoch of the repeated window, `ell − c`.
    pub fn window_start(&self) -> Option<f64> {
        self.cycle.map(|c| c.ell - c.c)
    }

    fn cosine_at(&self, i: f64) -> f64 {
        let i = i.min(self.ell0);
        0.5 * self.eta0 * (1.0 + (std::f64::consts::PI * i / self.ell0).cos())
    }
}

/// Learning rate at (possibly fractional) epoch position `epoch_pos`.
pub fn lr_at(s: &ScheduleSpec, epoch_pos: f64) -> f64 {
    let pos = epoch_pos.max(0.0);
    match s.cycle {
        Some(Cycle { ell, c }) if pos >= ell => s.cosine_at(ell - c + (pos - ell).rem_euclid(c)),
        _ => s.cosine_at(pos),
    }
}

/// Linear ramp of the consistency weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampSpec {
    pub lambda_max: f64,
    pub ramp_epochs: f64,
}

impl Default for RampSpec {
    fn default() -> Self {
        Self {
            lambda_max: 100.0,
            ramp_epochs: 5.0,
        }
    }
}

impl RampSpec {
    pub fn new(lambda_max: f64, ramp_epochs: f64) -> Result<Self> {
        if !(lambda_max >= 0.0 && ramp_epochs >= 0.0) {
            return Err(Error::InvalidArgument(
                "lambda_max and ramp_epochs must be nonnegative".into(),
            ));
        }
        Ok(Self {
            lambda_max,
            ramp_epochs,
        })
    }
}

/// `λ_max · min(1, epoch_pos / ramp_epochs)`.
pub fn lambda_at(r: &RampSpec, epoch_pos: f64) -> f64 {
    if r.ramp_epochs <= 0.0 || epoch_pos >= r.ramp_epochs {
        return r.lambda_max;
    }
    r.lambda_max * (epoch_pos.max(0.0) / r.ramp_epochs)
}

/// SGD with (optionally Nesterov) momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: ParamVector,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl OptState {
    pub fn new(len: usize, momentum: f64, weight_decay: f64, nesterov: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !(0.0..).contains(&weight_decay) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0,1) and weight decay >= 0, got {momentum}, {weight_decay}"
            )));
        }
        Ok(Self {
            velocity: ParamVector::zeros(len),
            momentum,
            weight_decay,
            nesterov,
        })
    }

    /// In-place update of `w` and the velocity buffer.
    pub fn step(&mut self, w: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
        if grad.len() != w.len() || self.velocity.len() != w.len() {
            return Err(Error::LengthMismatch {
                expected: w.len(),
                actual: if grad.len() != w.len() {
                    grad.len()
                } else {
                    self.velocity.len()
                },
            });
        }
        if grad.as_slice().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let mu = self.momentum;
        let wd = self.weight_decay;
        let v = self.velocity.as_mut_slice();
        for ((wi, &gi), vi) in w.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(v) {
            let g = gi + wd * *wi;
            *vi = mu * *vi + g;
            let update = if self.nesterov { mu * *vi + g } else { *vi };
            *wi -= lr * update;
        }
        Ok(())
    }
}

/// Functional form of [`OptState::step`].
pub fn sgd_step(
    w: &ParamVector,
    grad: &ParamVector,
    lr: f64,
    st: &OptState,
) -> Result<(ParamVector, OptState)> {
    let mut w = w.clone();
    let mut st = st.clone();
    st.step(&mut w, grad, lr)?;
    Ok((w, st))
}
