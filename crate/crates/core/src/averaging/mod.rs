//! SWA and fast-SWA weight averaging.
//!
//! An [`AveragerState`] keeps a running mean of collected weight vectors;
//! its [`CollectionPolicy`] decides at which optimizer steps the training
//! loop hands it the current student.
//!
//! * SWA collects once per learning-rate cycle, at the final optimizer step
//!   of the cycle where the rate is lowest. The first collection is at the
//!   end of epoch `ell − 1`.
//! * fast-SWA collects every `stride_steps` optimizer steps from epoch
//!   `ell − c` on, anchored so that strides which are whole multiples of an
//!   epoch land on epoch ends `ell − c`, `ell − c + k`, ...

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, Role, MAGIC,
};

use crate::error::{Error, Result};
use crate::nets::ParamVector;
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingKind {
    Swa,
    FastSwa,
}

impl AveragingKind {
    pub fn name(self) -> &'static str {
        match self {
            AveragingKind::Swa => "swa",
            AveragingKind::FastSwa => "fast_swa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectionPolicy {
    pub kind: AveragingKind,
    /// fast-SWA collection interval in optimizer steps.
    pub stride_steps: usize,
    pub start_epoch: usize,
}

impl CollectionPolicy {
    /// SWA policy starting at the window start of `schedule`.
    pub fn swa(schedule: &ScheduleSpec) -> Result<Self> {
        Ok(Self {
            kind: AveragingKind::Swa,
            stride_steps: 1,
            start_epoch: window_start(schedule)?,
        })
    }

    /// fast-SWA policy with the given stride, starting at `ell − c`.
    pub fn fast_swa(schedule: &ScheduleSpec, stride_steps: usize) -> Result<Self> {
        if stride_steps == 0 {
            return Err(Error::InvalidArgument("stride_steps must be >= 1".into()));
        }
        Ok(Self {
            kind: AveragingKind::FastSwa,
            stride_steps,
            start_epoch: window_start(schedule)?,
        })
    }
}

fn window_start(schedule: &ScheduleSpec) -> Result<usize> {
    schedule
        .window_start()
        .map(|s| s.round() as usize)
        .ok_or_else(|| Error::InvalidArgument("averaging needs a cyclical schedule".into()))
}

/// Whether the weights after step `step_in_epoch` of `epoch` are collected.
pub fn should_collect(
    policy: &CollectionPolicy,
    epoch: usize,
    step_in_epoch: usize,
    steps_per_epoch: usize,
    schedule: &ScheduleSpec,
) -> bool {
    if epoch < policy.start_epoch || steps_per_epoch == 0 || step_in_epoch >= steps_per_epoch {
        return false;
    }
    match policy.kind {
        AveragingKind::FastSwa => {
            if policy.stride_steps == 0 {
                return false;
            }
            let step = (epoch * steps_per_epoch + step_in_epoch) as i64;
            let anchor = ((policy.start_epoch + 1) * steps_per_epoch) as i64 - 1;
            (step - anchor).rem_euclid(policy.stride_steps as i64) == 0
        }
        AveragingKind::Swa => {
            let (Some(ell), Some(c)) = (schedule.ell(), schedule.cycle_len()) else {
                return false;
            };
            let (ell, c) = (ell.round() as usize, c.round() as usize);
            if c == 0 || ell == 0 || epoch + 1 < ell || step_in_epoch + 1 != steps_per_epoch {
                return false;
            }
            (epoch + 1 - ell).is_multiple_of(c)
        }
    }
}

/// Running mean of collected weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragerState {
    pub mean: ParamVector,
    pub count: usize,
    pub policy: CollectionPolicy,
}

impl AveragerState {
    pub fn new(len: usize, policy: CollectionPolicy) -> Self {
        Self {
            mean: ParamVector::zeros(len),
            count: 0,
            policy,
        }
    }

    /// The averaged weights, or `None` before the first collection.
    pub fn averaged(&self) -> Option<&ParamVector> {
        (self.count > 0).then_some(&self.mean)
    }

    pub(crate) fn collect_in_place(&mut self, w: &ParamVector) -> Result<()> {
        if w.len() != self.mean.len() {
            return Err(Error::LengthMismatch {
                expected: self.mean.len(),
                actual: w.len(),
            });
        }
        let n = (self.count + 1) as f64;
        self.mean
            .as_mut_slice()
            .iter_mut()
            .zip(w.as_slice())
            .for_each(|(m, x)| *m += (x - *m) / n);
        self.count += 1;
        Ok(())
    }
}

/// `mean ← mean + (w − mean)/(count + 1)`.
pub fn collect(st: &AveragerState, w: &ParamVector) -> Result<AveragerState> {
    let mut next = st.clone();
    next.collect_in_place(w)?;
    Ok(next)
}

/// Equal-weight mean of several weight vectors, accumulated incrementally.
pub fn average_of(ws: &[ParamVector]) -> Result<ParamVector> {
    let first = ws
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let mut mean = first.clone();
    for (i, w) in ws.iter().enumerate().skip(1) {
        if w.len() != mean.len() {
            return Err(Error::LengthMismatch {
                expected: mean.len(),
                actual: w.len(),
            });
        }
        let n = (i + 1) as f64;
        mean.as_mut_slice()
            .iter_mut()
            .zip(w.as_slice())
            .for_each(|(m, x)| *m += (x - *m) / n);
    }
    Ok(mean)
}
