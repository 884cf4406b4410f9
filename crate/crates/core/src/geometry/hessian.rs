use std::collections::BTreeMap;

use crate::autodiff::{backward, evaluate, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::{bind_params, build_mlp, gather_grads, Activation, MlpSpec, OutputHead, ParamVector, INPUT_LEAF};
use crate::rng::{stream_rng, unit_sphere, Stream};

use super::jacobian::{exact_jacobian_frobenius, weight_jacobian, JacobianWrt};

/// Step used for finite differences of gradients.
const FD_STEP: f64 = 1e-4;

/// Trace of the Hessian of `ℓ(w) = ½‖f(x; w) − y‖²` at one example, split as
/// `tr H = ‖J_w‖²_F + Σᵢ tr(∇²fᵢ)·(fᵢ − yᵢ)`.
///
/// With the unhalved loss `‖f − y‖²` every term doubles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianDecomp {
    /// From finite differences of the exact gradient.
    pub tr_h: f64,
    /// `‖J_w‖²_F` from one backward pass per output.
    pub gn_term: f64,
    /// `tr_h − gn_term`.
    pub residual: f64,
    /// `Σᵢ tr(∇²fᵢ)·(fᵢ − yᵢ)` from finite differences of each output's gradient.
    pub residual_oracle: f64,
    pub loss: f64,
}

fn loss_and_grad(
    w: &ParamVector,
    spec: &MlpSpec,
    x: &[f64],
    y: &[f64],
    head: OutputHead,
) -> Result<(f64, ParamVector)> {
    let k = spec.num_classes();
    let mut b = Tape::builder();
    let nodes = build_mlp(&mut b, spec, 1, None)?;
    let f = match head {
        OutputHead::Logits => nodes.logits,
        OutputHead::Probabilities => b.softmax(nodes.logits)?,
    };
    let target = b.constant(Tensor::matrix(1, k, y.to_vec())?);
    let r = b.sub(f, target)?;
    let sq = b.square(r);
    let s = b.sum(sq);
    let loss = b.scale(s, 0.5)?;
    b.output("loss", loss);
    let tape = b.build();
    let mut inputs = bind_params(w, spec, true)?;
    inputs.insert(INPUT_LEAF.to_string(), Tensor::matrix(1, x.len(), x.to_vec())?);
    let eval = evaluate(&tape, &inputs)?;
    let seed = BTreeMap::from([("loss".to_string(), Tensor::scalar(1.0)?)]);
    let g = gather_grads(&backward(&tape, &eval, &seed)?, spec)?;
    Ok((eval.output("loss")?.values()[0], g))
}

/// `½‖f(x; w) − y‖²` for one example.
pub fn half_squared_error(
    w: &ParamVector,
    spec: &MlpSpec,
    x: &[f64],
    y: &[f64],
    head: OutputHead,
) -> Result<f64> {
    Ok(loss_and_grad(w, spec, x, y, head)?.0)
}

fn check_example(spec: &MlpSpec, x: &[f64], y: &[f64]) -> Result<()> {
    if spec.activation() == Activation::Relu && spec.widths().len() > 2 {
        return Err(Error::InvalidArgument(
            "Hessian of a relu network is undefined at its kinks; use softplus".into(),
        ));
    }
    if x.len() != spec.input_dim() {
        return Err(Error::LengthMismatch {
            expected: spec.input_dim(),
            actual: x.len(),
        });
    }
    if y.len() != spec.num_classes() {
        return Err(Error::LengthMismatch {
            expected: spec.num_classes(),
            actual: y.len(),
        });
    }
    Ok(())
}

/// Decomposes the loss Hessian trace at a single example.
pub fn hessian_trace_decomposition(
    w: &ParamVector,
    spec: &MlpSpec,
    x: &[f64],
    y: &[f64],
    head: OutputHead,
) -> Result<HessianDecomp> {
    check_example(spec, x, y)?;
    let h = FD_STEP;
    let (loss, _) = loss_and_grad(w, spec, x, y, head)?;
    let p = w.len();
    let mut tr_h = 0.0;
    let (f0, _) = weight_jacobian(w, spec, x, head)?;
    let k = f0.len();
    let mut output_traces = vec![0.0; k];
    let mut shifted = w.clone();
    for j in 0..p {
        let orig = shifted.as_slice()[j];
        shifted.as_mut_slice()[j] = orig + h;
        let (_, gp) = loss_and_grad(&shifted, spec, x, y, head)?;
        let (_, jp) = weight_jacobian(&shifted, spec, x, head)?;
        shifted.as_mut_slice()[j] = orig - h;
        let (_, gm) = loss_and_grad(&shifted, spec, x, y, head)?;
        let (_, jm) = weight_jacobian(&shifted, spec, x, head)?;
        shifted.as_mut_slice()[j] = orig;
        tr_h += (gp.as_slice()[j] - gm.as_slice()[j]) / (2.0 * h);
        for c in 0..k {
            output_traces[c] += (jp[c].as_slice()[j] - jm[c].as_slice()[j]) / (2.0 * h);
        }
    }
    let row = Tensor::matrix(1, x.len(), x.to_vec())?;
    let gn_term = exact_jacobian_frobenius(w, spec, &row, JacobianWrt::Weights, head)?;
    let residual_oracle = (0..k).map(|c| output_traces[c] * (f0[c] - y[c])).sum();
    Ok(HessianDecomp {
        tr_h,
        gn_term,
        residual: tr_h - gn_term,
        residual_oracle,
        loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessCheck {
    /// Monte-Carlo `E_d[R(w + s·d)] − R(w)` over unit directions.
    pub lhs: f64,
    pub lhs_std_error: f64,
    /// `s²/(2p)·tr H`.
    pub rhs: f64,
}

/// Compares the mean rise of `risk` along random unit rays of length `s`
/// with its second-order prediction from `tr_h`.
///
/// Directions are used in antithetic pairs `±d`, so odd-order terms of the
/// expansion cancel exactly rather than only in expectation.
pub fn ray_sharpness_expansion_check<F>(
    risk: F,
    w: &[f64],
    tr_h: f64,
    s: f64,
    directions: usize,
    seed: u64,
) -> Result<SharpnessCheck>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if directions == 0 {
        return Err(Error::InvalidArgument("need at least one direction".into()));
    }
    let p = w.len();
    let r0 = risk(w)?;
    let mut probe = w.to_vec();
    let mut at = |d: &[f64], sign: f64| -> Result<f64> {
        probe.iter_mut().zip(w).zip(d).for_each(|((q, w), d)| *q = w + sign * s * d);
        risk(&probe)
    };
    let samples = (0..directions as u64)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Direction, i);
            let d = unit_sphere(&mut rng, p);
            Ok(0.5 * (at(&d, 1.0)? + at(&d, -1.0)?) - r0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = directions as f64;
    let lhs = samples.iter().sum::<f64>() / n;
    let lhs_std_error = if directions > 1 {
        (samples.iter().map(|v| (v - lhs) * (v - lhs)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(SharpnessCheck {
        lhs,
        lhs_std_error,
        rhs: s * s / (2.0 * p as f64) * tr_h,
    })
}
