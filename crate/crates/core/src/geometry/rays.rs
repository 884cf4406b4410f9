use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::consistency::{student_loss, Divergence, LossBatch};
use crate::error::{Error, Result};
use crate::nets::{forward, MlpSpec, ParamVector};
use crate::rng::{stream_rng, unit_sphere, Stream};

/// Which split the adversarial direction ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaySplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DirectionKind {
    /// Segment towards a second solution; the grid holds `t` with
    /// `w(t) = (1 − t)·origin + t·w_b`.
    SgdSgd(ParamVector),
    /// `count` uniform unit directions; errors are averaged over them.
    Random { seed: u64, count: usize },
    /// Normalized full-batch cross-entropy gradient on the chosen split.
    Adversarial(RaySplit),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySpec {
    pub origin: ParamVector,
    pub direction: DirectionKind,
    /// Distances `s`, or interpolation values `t` for [`DirectionKind::SgdSgd`].
    pub grid: Vec<f64>,
}

impl RaySpec {
    /// Five random directions, the usual setting.
    pub fn random(origin: ParamVector, seed: u64, grid: Vec<f64>) -> Self {
        Self {
            origin,
            direction: DirectionKind::Random { seed, count: 5 },
            grid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPoint {
    /// `t` or `s`, as given in the grid.
    pub coord: f64,
    /// Euclidean distance from the origin.
    pub distance: f64,
    pub train_err: f64,
    pub test_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayProfile {
    pub points: Vec<RayPoint>,
}

/// Labeled rows used for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
}

fn wrong_count(w: &ParamVector, spec: &MlpSpec, set: EvalSet<'_>) -> Result<usize> {
    let p = forward(w, spec, set.x, None, 0)?;
    if set.y.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: set.y.len(),
        });
    }
    Ok(p.labels().iter().zip(set.y).filter(|(a, b)| a != b).count())
}

/// Full-batch cross-entropy of the deterministic network.
pub fn cross_entropy(w: &ParamVector, spec: &MlpSpec, set: EvalSet<'_>) -> Result<f64> {
    Ok(ce_eval(w, spec, set)?.0)
}

fn ce_eval(w: &ParamVector, spec: &MlpSpec, set: EvalSet<'_>) -> Result<(f64, ParamVector)> {
    let batch = LossBatch {
        labeled_x: set.x,
        labeled_y: set.y,
        unlabeled_x: None,
        perturb: None,
        student_seed: 0,
        teacher_seed: 0,
    };
    let e = student_loss(w, spec, &batch, None, Divergence::Mse, 0.0)?;
    Ok((e.parts.ce, e.grad_ce))
}

/// Unit vector along the cross-entropy gradient at `w`.
pub fn adversarial_direction(w: &ParamVector, spec: &MlpSpec, set: EvalSet<'_>) -> Result<ParamVector> {
    let (_, g) = ce_eval(w, spec, set)?;
    let n = g.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidArgument("cross-entropy gradient vanishes".into()));
    }
    Ok(g.scale(1.0 / n))
}

/// Train and test error along a ray from `spec.origin`.
///
/// Evaluation uses the deterministic forward pass (no noise, no dropout).
pub fn ray_profile(
    ray: &RaySpec,
    spec: &MlpSpec,
    train: EvalSet<'_>,
    test: EvalSet<'_>,
) -> Result<RayProfile> {
    if ray.grid.is_empty() {
        return Err(Error::InvalidArgument("empty ray grid".into()));
    }
    if ray.origin.len() != spec.param_count() {
        return Err(Error::LengthMismatch {
            expected: spec.param_count(),
            actual: ray.origin.len(),
        });
    }
    let directions: Vec<ParamVector> = match &ray.direction {
        DirectionKind::SgdSgd(_) => Vec::new(),
        DirectionKind::Random { seed, count } => {
            if *count == 0 {
                return Err(Error::InvalidArgument("need at least one direction".into()));
            }
            (0..*count as u64)
                .map(|j| {
                    let mut rng = stream_rng(*seed, Stream::Direction, j);
                    ParamVector::new(unit_sphere(&mut rng, ray.origin.len()))
                })
                .collect()
        }
        DirectionKind::Adversarial(split) => {
            let set = match split {
                RaySplit::Train => train,
                RaySplit::Test => test,
            };
            vec![adversarial_direction(&ray.origin, spec, set)?]
        }
    };
    let (n_train, n_test) = (train.y.len(), test.y.len());
    let mut cache: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    let mut points = Vec::with_capacity(ray.grid.len());
    for &c in &ray.grid {
        let point = match &ray.direction {
            DirectionKind::SgdSgd(wb) => {
                let w = ray.origin.interpolate(wb, c)?;
                let (tr, te) = (wrong_count(&w, spec, train)?, wrong_count(&w, spec, test)?);
                RayPoint {
                    coord: c,
                    distance: c.abs() * ray.origin.distance(wb)?,
                    train_err: ratio(tr, n_train),
                    test_err: ratio(te, n_test),
                }
            }
            _ => {
                let (tr, te) = match cache.get(&c.to_bits()) {
                    Some(&v) => v,
                    None => {
                        // summing counts keeps the s = 0 point exactly Err(origin)
                        let mut v = (0, 0);
                        for d in &directions {
                            let w = ray.origin.axpy(c, d)?;
                            v.0 += wrong_count(&w, spec, train)?;
                            v.1 += wrong_count(&w, spec, test)?;
                        }
                        cache.insert(c.to_bits(), v);
                        v
                    }
                };
                let k = directions.len();
                RayPoint {
                    coord: c,
                    distance: c.abs(),
                    train_err: ratio(tr, n_train * k),
                    test_err: ratio(te, n_test * k),
                }
            }
        };
        points.push(point);
    }
    Ok(RayProfile { points })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
