//! Small MLP classifiers and the flat parameter algebra.
//!
//! Parameters are stored as a single [`ParamVector`] in layer-major order:
//! for each layer the `[fan_in, fan_out]` weight matrix row-major, then the
//! bias. Averaging, interpolation and ray analyses all act on this flat view.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{evaluate, NodeId, Tape, TapeBuilder, Tensor};
use crate::consistency::PerturbationSpec;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth stand-in used where second derivatives are needed.
    Softplus,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            o => Err(Error::InvalidArgument(format!("unknown activation `{o}`"))),
        }
    }
}

/// Which network output a computation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputHead {
    /// Softmax probabilities, the outputs the consistency loss compares.
    #[default]
    Probabilities,
    /// Pre-softmax outputs.
    Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
    dropout_rate: f64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, dropout_rate: f64) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least 2 layer widths".into()));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if *layer_widths.last().unwrap() < 2 {
            return Err(Error::InvalidArgument("at least 2 output classes required".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(Self {
            layer_widths,
            activation: Activation::Relu,
            dropout_rate,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_widths.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.check_len(other)?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| a * factor).collect())
    }

    /// `self + factor·dir`.
    pub fn axpy(&self, factor: f64, dir: &ParamVector) -> Result<ParamVector> {
        self.zip_with(dir, |a, d| a + factor * d)
    }

    /// `t·b + (1 − t)·a` with `a = self`; `t = 0` is `self`.
    pub fn interpolate(&self, other: &ParamVector, t: f64) -> Result<ParamVector> {
        self.zip_with(other, |a, b| t * b + (1.0 - t) * a)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Euclidean distance.
    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Per-layer `(weight, bias)` slices.
    pub fn layers<'a>(&'a self, spec: &'a MlpSpec) -> Result<Vec<(&'a [f64], &'a [f64])>> {
        if self.len() != spec.param_count() {
            return Err(Error::LengthMismatch {
                expected: spec.param_count(),
                actual: self.len(),
            });
        }
        let mut out = Vec::new();
        let mut off = 0;
        for (i, o) in spec.layers() {
            let w = &self.0[off..off + i * o];
            let b = &self.0[off + i * o..off + i * o + o];
            out.push((w, b));
            off += i * o + o;
        }
        Ok(out)
    }

    /// Rebuilds a vector from per-layer tensors (inverse of [`ParamVector::layers`]).
    pub fn from_layers(spec: &MlpSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut v = Vec::with_capacity(spec.param_count());
        for ((i, o), (w, b)) in spec.layers().zip(layers) {
            if w.len() != i * o || b.len() != o {
                return Err(Error::LengthMismatch {
                    expected: i * o + o,
                    actual: w.len() + b.len(),
                });
            }
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        if v.len() != spec.param_count() {
            return Err(Error::LengthMismatch {
                expected: spec.param_count(),
                actual: v.len(),
            });
        }
        Ok(Self(v))
    }
}

/// Row-stochastic class probabilities and their argmax labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    probabilities: Vec<f64>,
    classes: usize,
    labels: Vec<usize>,
}

impl Predictions {
    pub fn new(probabilities: Vec<f64>, classes: usize) -> Result<Self> {
        if classes < 2 || !probabilities.len().is_multiple_of(classes) {
            return Err(Error::InvalidArgument(format!(
                "{} probabilities do not split into rows of {classes}",
                probabilities.len()
            )));
        }
        for (i, row) in probabilities.chunks(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) {
                return Err(Error::InvalidArgument(format!("row {i} is not a distribution")));
            }
        }
        let labels = probabilities.chunks(classes).map(argmax).collect();
        Ok(Self {
            probabilities,
            classes,
            labels,
        })
    }

    /// Builds predictions from hard labels (one-hot rows).
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut p = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::InvalidArgument(format!("label {l} >= {classes}")));
            }
            p[i * classes + l] = 1.0;
        }
        Self::new(p, classes)
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probabilities[i * self.classes..(i + 1) * self.classes]
    }

    /// Fraction of rows whose label differs from `targets`.
    pub fn error_rate(&self, targets: &[usize]) -> Result<f64> {
        if targets.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: targets.len(),
            });
        }
        if targets.is_empty() {
            return Ok(0.0);
        }
        let wrong = self.labels.iter().zip(targets).filter(|(a, b)| a != b).count();
        Ok(wrong as f64 / targets.len() as f64)
    }

    /// Row-wise mean of probabilities: the prediction of an ensemble.
    pub fn average(&self, other: &Predictions) -> Result<Predictions> {
        if self.classes != other.classes || self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.probabilities.len(),
                actual: other.probabilities.len(),
            });
        }
        let p = self
            .probabilities
            .iter()
            .zip(&other.probabilities)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        Predictions::new(p, self.classes)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut v = Vec::with_capacity(spec.param_count());
    for (i, o) in spec.layers() {
        let bound = (6.0 / (i + o) as f64).sqrt();
        v.extend((0..i * o).map(|_| rng.random_range(-bound..bound)));
        v.extend(std::iter::repeat_n(0.0, o));
    }
    ParamVector(v)
}

/// Leaf name for layer `l` weights.
pub fn weight_leaf(l: usize) -> String {
    format!("w{l}")
}

/// Leaf name for layer `l` biases.
pub fn bias_leaf(l: usize) -> String {
    format!("b{l}")
}

/// Input leaf name.
pub const INPUT_LEAF: &str = "x";

/// Node handles of an MLP laid on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub input: NodeId,
    pub logits: NodeId,
}

/// Lays the network on `b` with input leaf `x` of `rows` rows.
///
/// `dropout` is `(rate, seed)`; a positive rate inserts seeded dropout after
/// every hidden activation.
pub fn build_mlp(
    b: &mut TapeBuilder,
    spec: &MlpSpec,
    rows: usize,
    dropout: Option<(f64, u64)>,
) -> Result<MlpNodes> {
    let input = b.leaf(INPUT_LEAF, &[rows, spec.input_dim()])?;
    let n_layers = spec.layers().count();
    let mut h = input;
    for (l, (i, o)) in spec.layers().enumerate() {
        let w = b.leaf(&weight_leaf(l), &[i, o])?;
        let bias = b.leaf(&bias_leaf(l), &[o])?;
        let z = b.matmul(h, w)?;
        h = b.add_bias(z, bias)?;
        if l + 1 < n_layers {
            h = match spec.activation {
                Activation::Relu => b.relu(h),
                Activation::Softplus => b.softplus(h),
            };
            if let Some((rate, seed)) = dropout {
                if rate > 0.0 {
                    h = b.dropout(h, rate, layer_dropout_seed(seed, l))?;
                }
            }
        }
    }
    Ok(MlpNodes { input, logits: h })
}

fn layer_dropout_seed(seed: u64, layer: usize) -> u64 {
    stream_rng(seed, Stream::Dropout, layer as u64).random()
}

/// Binds parameters (and optionally the input) as named tensors.
pub fn bind_params(
    params: &ParamVector,
    spec: &MlpSpec,
    grad: bool,
) -> Result<BTreeMap<String, Tensor>> {
    let mut m = BTreeMap::new();
    for (l, ((w, b), (i, o))) in params.layers(spec)?.into_iter().zip(spec.layers()).enumerate() {
        let mut wt = Tensor::matrix(i, o, w.to_vec())?;
        let mut bt = Tensor::vector(b.to_vec())?;
        if grad {
            wt = wt.with_grad();
            bt = bt.with_grad();
        }
        m.insert(weight_leaf(l), wt);
        m.insert(bias_leaf(l), bt);
    }
    Ok(m)
}

/// Flattens per-leaf gradients into a [`ParamVector`].
pub fn gather_grads(grads: &BTreeMap<String, Tensor>, spec: &MlpSpec) -> Result<ParamVector> {
    let mut v = Vec::with_capacity(spec.param_count());
    for l in 0..spec.layers().count() {
        for name in [weight_leaf(l), bias_leaf(l)] {
            let t = grads
                .get(&name)
                .ok_or_else(|| Error::UnknownOutput(name.clone()))?;
            v.extend_from_slice(t.values());
        }
    }
    Ok(ParamVector(v))
}

/// Deterministic, unperturbed network outputs for a batch.
pub fn forward_outputs(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: &Tensor,
    head: OutputHead,
) -> Result<Tensor> {
    run_forward(params, spec, batch.clone(), None, head)
}

fn check_batch(spec: &MlpSpec, batch: &Tensor) -> Result<usize> {
    match batch.shape() {
        [r, c] if *c == spec.input_dim() => Ok(*r),
        s => Err(Error::Shape {
            node: 0,
            op: "input",
            detail: format!("batch {s:?} does not match input width {}", spec.input_dim()),
        }),
    }
}

fn run_forward(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: Tensor,
    dropout: Option<(f64, u64)>,
    head: OutputHead,
) -> Result<Tensor> {
    let rows = check_batch(spec, &batch)?;
    let mut b = Tape::builder();
    let nodes = build_mlp(&mut b, spec, rows, dropout)?;
    let out = match head {
        OutputHead::Logits => nodes.logits,
        OutputHead::Probabilities => b.softmax(nodes.logits)?,
    };
    b.output("out", out);
    let tape = b.build();
    let mut inputs = bind_params(params, spec, false)?;
    inputs.insert(INPUT_LEAF.to_string(), batch);
    let eval = evaluate(&tape, &inputs)?;
    Ok(eval.output("out")?.clone())
}

/// Class probabilities for `batch`.
///
/// With `perturb` the input is perturbed and dropout applied, both drawn
/// from `seed`; without it the pass is deterministic and `seed` is unused.
pub fn forward(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: &Tensor,
    perturb: Option<&PerturbationSpec>,
    seed: u64,
) -> Result<Predictions> {
    check_batch(spec, batch)?;
    let (input, dropout) = match perturb {
        Some(p) => (p.perturb_inputs(batch, seed)?, Some((p.dropout_rate, seed))),
        None => (batch.clone(), None),
    };
    let probs = run_forward(params, spec, input, dropout, OutputHead::Probabilities)?;
    Predictions::new(probs.into_values(), spec.num_classes())
}

/// Error rate of the deterministic forward pass.
pub fn error_rate(params: &ParamVector, spec: &MlpSpec, x: &Tensor, y: &[usize]) -> Result<f64> {
    forward(params, spec, x, None, 0)?.error_rate(y)
}
