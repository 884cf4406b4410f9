use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{backward, evaluate, Tape, Tensor};
use crate::consistency::Projection;
use crate::error::{Error, Result};
use crate::nets::{bind_params, build_mlp, forward_outputs, gather_grads, MlpSpec, OutputHead, ParamVector, INPUT_LEAF};
use crate::rng::{standard_normal_vec, stream_rng, Stream};

/// Variable the Jacobian is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianWrt {
    Input,
    Weights,
}

fn network_tape(spec: &MlpSpec, rows: usize, head: OutputHead) -> Result<Tape> {
    let mut b = Tape::builder();
    let nodes = build_mlp(&mut b, spec, rows, None)?;
    let out = match head {
        OutputHead::Logits => nodes.logits,
        OutputHead::Probabilities => b.softmax(nodes.logits)?,
    };
    b.output("out", out);
    Ok(b.build())
}

fn column_seed(rows: usize, k: usize, col: usize) -> Result<BTreeMap<String, Tensor>> {
    let mut s = vec![0.0; rows * k];
    (0..rows).for_each(|r| s[r * k + col] = 1.0);
    Ok(BTreeMap::from([("out".to_string(), Tensor::matrix(rows, k, s)?)]))
}

/// Outputs `f(x)` of a single row and the weight gradient of every output.
pub fn weight_jacobian(
    w: &ParamVector,
    spec: &MlpSpec,
    row: &[f64],
    head: OutputHead,
) -> Result<(Vec<f64>, Vec<ParamVector>)> {
    let tape = network_tape(spec, 1, head)?;
    let mut inputs = bind_params(w, spec, true)?;
    inputs.insert(INPUT_LEAF.to_string(), Tensor::matrix(1, row.len(), row.to_vec())?);
    let eval = evaluate(&tape, &inputs)?;
    let k = spec.num_classes();
    let grads = (0..k)
        .map(|c| gather_grads(&backward(&tape, &eval, &column_seed(1, k, c)?)?, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok((eval.output("out")?.values().to_vec(), grads))
}

/// Mean over the rows of `inputs` of `‖J‖²_F`, the sum over outputs of
/// squared gradient norms, from one backward pass per output.
pub fn exact_jacobian_frobenius(
    w: &ParamVector,
    spec: &MlpSpec,
    inputs: &Tensor,
    wrt: JacobianWrt,
    head: OutputHead,
) -> Result<f64> {
    let (m, d) = inputs.rows_cols();
    if d != spec.input_dim() {
        return Err(Error::LengthMismatch {
            expected: spec.input_dim(),
            actual: d,
        });
    }
    let k = spec.num_classes();
    let total = match wrt {
        JacobianWrt::Input => {
            // rows do not interact, so one backward pass per output serves all rows
            let tape = network_tape(spec, m, head)?;
            let mut bound = bind_params(w, spec, false)?;
            bound.insert(INPUT_LEAF.to_string(), inputs.clone().with_grad());
            let eval = evaluate(&tape, &bound)?;
            let mut s = 0.0;
            for c in 0..k {
                let g = backward(&tape, &eval, &column_seed(m, k, c)?)?;
                s += g[INPUT_LEAF].values().iter().map(|v| v * v).sum::<f64>();
            }
            s
        }
        JacobianWrt::Weights => {
            let mut s = 0.0;
            for row in inputs.values().chunks(d) {
                let (_, grads) = weight_jacobian(w, spec, row, head)?;
                s += grads.iter().map(|g| g.dot(g)).sum::<Result<f64>>()?;
            }
            s
        }
    };
    Ok(total / m as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOptions {
    pub epsilon: f64,
    /// Probes per input point.
    pub probes: usize,
    pub head: OutputHead,
    /// Restricts probes to a subspace: `z ← P·z`.
    pub projection: Option<Projection>,
    pub seed: u64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            probes: 1,
            head: OutputHead::Probabilities,
            projection: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub q_hat: f64,
    pub probes_per_point: usize,
    pub points: usize,
    pub std_error: f64,
    pub epsilon: f64,
}

/// Finite-difference Hutchinson estimate of `E_x‖J_x‖²_F`:
///
/// `Q̂ = (1/m)·Σᵢ (1/n)·Σₖ ‖f(xᵢ + ε·zᵢₖ) − f(xᵢ)‖² / ε²`
///
/// with standard normal probes `z` (projected when a projection is set) and
/// the unperturbed `f(xᵢ)` as reference.
pub fn jacobian_trace_estimate(
    w: &ParamVector,
    spec: &MlpSpec,
    inputs: &Tensor,
    opts: &TraceOptions,
) -> Result<TraceEstimate> {
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", opts.epsilon)));
    }
    if opts.probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe per point".into()));
    }
    let (m, d) = inputs.rows_cols();
    if let Some(p) = &opts.projection {
        if p.dim() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                actual: p.dim(),
            });
        }
    }
    let n = opts.probes;
    let base = forward_outputs(w, spec, inputs, opts.head)?;
    let mut rng = stream_rng(opts.seed, Stream::Probe, 0);
    let mut shifted = Vec::with_capacity(m * n * d);
    for row in inputs.values().chunks(d) {
        for _ in 0..n {
            let z = standard_normal_vec(&mut rng, d);
            let z = match &opts.projection {
                Some(p) => p.apply(&z),
                None => z,
            };
            shifted.extend(row.iter().zip(&z).map(|(x, z)| x + opts.epsilon * z));
        }
    }
    let out = forward_outputs(w, spec, &Tensor::matrix(m * n, d, shifted)?, opts.head)?;
    let k = spec.num_classes();
    let e2 = opts.epsilon * opts.epsilon;
    let terms: Vec<f64> = out
        .values()
        .chunks(k)
        .enumerate()
        .map(|(j, f)| {
            let f0 = &base.values()[(j / n) * k..(j / n + 1) * k];
            f.iter().zip(f0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / e2
        })
        .collect();
    let per_point: Vec<f64> = terms.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let q_hat = per_point.iter().sum::<f64>() / m as f64;
    // with several points their spread already contains the probe noise
    let std_error = if m >= 2 {
        sample_std(&per_point) / (m as f64).sqrt()
    } else if n >= 2 {
        sample_std(&terms) / (n as f64).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        q_hat,
        probes_per_point: n,
        points: m,
        std_error,
        epsilon: opts.epsilon,
    })
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// A finite family of symmetric matrices, `x` uniform over the family.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    dim: usize,
    matrices: Vec<Vec<f64>>,
}

impl MatrixField {
    pub fn new(dim: usize, matrices: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 || matrices.is_empty() {
            return Err(Error::InvalidArgument("empty matrix field".into()));
        }
        for a in &matrices {
            if a.len() != dim * dim {
                return Err(Error::LengthMismatch {
                    expected: dim * dim,
                    actual: a.len(),
                });
            }
            for i in 0..dim {
                for j in 0..i {
                    if (a[i * dim + j] - a[j * dim + i]).abs() > 1e-12 {
                        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
                    }
                }
            }
        }
        Ok(Self { dim, matrices })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn trace(&self, a: &[f64]) -> f64 {
        (0..self.dim).map(|i| a[i * self.dim + i]).sum()
    }

    /// `tr(A²)` of a symmetric matrix is its squared Frobenius norm.
    fn trace_sq(a: &[f64]) -> f64 {
        a.iter().map(|v| v * v).sum()
    }

    fn quad(&self, a: &[f64], z: &[f64]) -> f64 {
        let d = self.dim;
        (0..d)
            .map(|i| z[i] * (0..d).map(|j| a[i * d + j] * z[j]).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceReport {
    pub empirical_mean: f64,
    /// `E[tr A]`.
    pub expected_mean: f64,
    pub empirical_var: f64,
    /// `(1/m)(Var[tr A] + (2/n)·E[tr A²])`.
    pub closed_form_var: f64,
    /// `empirical_var / closed_form_var`.
    pub ratio: f64,
    pub trials: usize,
}

/// Monte-Carlo variance of the probe estimator `(1/m)Σᵢ(1/n)Σₖ zᵀA(xᵢ)z`
/// against its closed form.
pub fn estimator_variance_check(
    field: &MatrixField,
    n: usize,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if n == 0 || m == 0 || trials < 2 {
        return Err(Error::InvalidArgument("need n, m >= 1 and at least 2 trials".into()));
    }
    let count = field.matrices.len() as f64;
    let traces: Vec<f64> = field.matrices.iter().map(|a| field.trace(a)).collect();
    let e_tr = traces.iter().sum::<f64>() / count;
    let var_tr = traces.iter().map(|t| (t - e_tr) * (t - e_tr)).sum::<f64>() / count;
    let e_tr2 = field.matrices.iter().map(|a| MatrixField::trace_sq(a)).sum::<f64>() / count;
    let closed = (var_tr + 2.0 * e_tr2 / n as f64) / m as f64;

    let samples: Vec<f64> = (0..trials as u64)
        .map(|t| {
            let mut rng = stream_rng(seed, Stream::Probe, t);
            let mut total = 0.0;
            for _ in 0..m {
                let a = &field.matrices[rng.random_range(0..field.matrices.len())];
                let mut s = 0.0;
                for _ in 0..n {
                    let z = standard_normal_vec(&mut rng, field.dim);
                    s += field.quad(a, &z);
                }
                total += s / n as f64;
            }
            total / m as f64
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (trials - 1) as f64;
    Ok(VarianceReport {
        empirical_mean: mean,
        expected_mean: e_tr,
        empirical_var: var,
        closed_form_var: closed,
        ratio: var / closed,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use crate::nets::{init_mlp, Activation};

    fn random_inputs(seed: u64, rows: usize, d: usize) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Test, 0);
        Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn linear(seed: u64, d: usize, k: usize) -> (MlpSpec, ParamVector, f64) {
        let spec = MlpSpec::new(vec![d, k], 0.0).unwrap();
        let w = init_mlp(&spec, seed);
        let fro = w.as_slice()[..d * k].iter().map(|v| v * v).sum();
        (spec, w, fro)
    }

    #[test]
    fn linear_model_input_jacobian_is_weight_norm() {
        let (spec, w, fro) = linear(1, 4, 3);
        let x = random_inputs(1, 5, 4);
        let j = exact_jacobian_frobenius(&w, &spec, &x, JacobianWrt::Input, OutputHead::Logits).unwrap();
        assert!((j - fro).abs() < 1e-12 * fro.max(1.0));
    }

    #[test]
    fn zero_final_layer_kills_input_jacobian() {
        let spec = MlpSpec::new(vec![3, 5, 2], 0.0).unwrap();
        let mut w = init_mlp(&spec, 2);
        let n = w.len();
        w.as_mut_slice()[n - (5 * 2 + 2)..n - 2].iter_mut().for_each(|v| *v = 0.0);
        let x = random_inputs(2, 4, 3);
        let j = exact_jacobian_frobenius(&w, &spec, &x, JacobianWrt::Input, OutputHead::Logits).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let spec = MlpSpec::new(vec![3, 4, 3], 0.0).unwrap().with_activation(Activation::Softplus);
        let w = init_mlp(&spec, 3);
        let x = random_inputs(3, 1, 3);
        let row = x.values().to_vec();
        let h = 1e-5;
        let (mut fd_in, mut fd_w) = (0.0, 0.0);
        for c in 0..3 {
            let out = |xx: &[f64], ww: &[f64]| -> Result<f64> {
                let t = Tensor::matrix(1, 3, xx.to_vec())?;
                let o = forward_outputs(&ParamVector::new(ww.to_vec()), &spec, &t, OutputHead::Probabilities)?;
                Ok(o.values()[c])
            };
            let gx = finite_diff_gradient(|xx| out(xx, w.as_slice()), &row, h).unwrap();
            let gw = finite_diff_gradient(|ww| out(&row, ww), w.as_slice(), h).unwrap();
            fd_in += gx.iter().map(|v| v * v).sum::<f64>();
            fd_w += gw.iter().map(|v| v * v).sum::<f64>();
        }
        let ji = exact_jacobian_frobenius(&w, &spec, &x, JacobianWrt::Input, OutputHead::Probabilities).unwrap();
        let jw = exact_jacobian_frobenius(&w, &spec, &x, JacobianWrt::Weights, OutputHead::Probabilities).unwrap();
        assert!((ji - fd_in).abs() < 1e-6, "{ji} vs {fd_in}");
        assert!((jw - fd_w).abs() < 1e-6, "{jw} vs {fd_w}");
    }

    #[test]
    fn constant_network_estimates_zero() {
        let spec = MlpSpec::new(vec![2, 3, 2], 0.0).unwrap();
        let mut w = init_mlp(&spec, 1);
        // zero the first layer: outputs no longer depend on the input
        w.as_mut_slice()[..6].iter_mut().for_each(|v| *v = 0.0);
        let x = random_inputs(4, 10, 2);
        let est = jacobian_trace_estimate(&w, &spec, &x, &TraceOptions { probes: 4, ..Default::default() }).unwrap();
        assert!(est.q_hat.abs() < 1e-12);
    }

    #[test]
    fn projection_restricts_to_leading_columns() {
        // f(x) = xW with W of shape [d, k]; projecting onto the first r input
        // coordinates keeps the first r rows of W
        let (spec, w, _) = linear(5, 5, 3);
        let r = 2;
        let want: f64 = w.as_slice()[..r * 3].iter().map(|v| v * v).sum();
        let opts = TraceOptions {
            probes: 20_000,
            head: OutputHead::Logits,
            projection: Some(Projection::onto_coordinates(5, r).unwrap()),
            seed: 3,
            ..Default::default()
        };
        let est = jacobian_trace_estimate(&w, &spec, &random_inputs(5, 1, 5), &opts).unwrap();
        assert!((est.q_hat - want).abs() < 4.0 * est.std_error, "{} vs {want}", est.q_hat);
    }

    #[test]
    fn default_epsilon_bias_is_negligible() {
        let spec = MlpSpec::new(vec![2, 6, 3], 0.0).unwrap().with_activation(Activation::Softplus);
        let w = init_mlp(&spec, 6);
        let x = random_inputs(6, 8, 2);
        let run = |eps: f64| {
            let o = TraceOptions { epsilon: eps, probes: 16, seed: 1, ..Default::default() };
            jacobian_trace_estimate(&w, &spec, &x, &o).unwrap()
        };
        // halving the default step moves the estimate by far less than its noise
        let (a, b) = (run(1e-4), run(5e-5));
        assert!((a.q_hat - b.q_hat).abs() < 1e-3 * a.std_error, "{a:?} vs {b:?}");
    }

    #[test]
    fn bad_epsilon_is_rejected() {
        let (spec, w, _) = linear(1, 2, 2);
        let x = random_inputs(1, 2, 2);
        let o = TraceOptions { epsilon: 0.0, ..Default::default() };
        assert!(jacobian_trace_estimate(&w, &spec, &x, &o).is_err());
    }

    #[test]
    fn identity_variance_is_six() {
        let field = MatrixField::new(3, vec![vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]]).unwrap();
        let r = estimator_variance_check(&field, 1, 1, 10_000, 2).unwrap();
        assert_eq!(r.closed_form_var, 6.0);
        assert!((r.ratio - 1.0).abs() < 0.1, "{r:?}");
        assert!((r.empirical_mean - 3.0).abs() < 0.1);
    }

    #[test]
    fn many_probes_leave_only_point_variance() {
        let a = vec![2.0, 0.5, 0.5, 1.0];
        let b = vec![0.2, 0.0, 0.0, 0.1];
        let field = MatrixField::new(2, vec![a, b]).unwrap();
        let r = estimator_variance_check(&field, 1000, 1, 2000, 4).unwrap();
        // Var[tr A] over {3.0, 0.3} is 1.8225; probe noise adds ~0.003
        assert!((r.empirical_var - 1.8225).abs() < 0.15 * 1.8225, "{r:?}");
        assert!((r.ratio - 1.0).abs() < 0.1);
    }

    #[test]
    fn asymmetric_field_is_rejected() {
        assert!(MatrixField::new(2, vec![vec![1.0, 2.0, 0.0, 1.0]]).is_err());
    }
}
