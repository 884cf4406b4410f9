//! Tape construction, evaluation and reverse sweep.
//!
//! A [`Tape`] is an immutable, topologically ordered list of primitive
//! operations. Shapes are inferred while building, so a shape error is
//! reported against the node that introduced it. Evaluation state lives in
//! an [`Evaluation`], one per call, which makes a tape shareable across
//! threads.

use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{rows_cols, Tensor};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Index of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[n, k] + [k]`, the bias broadcast over rows.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    /// Inverted dropout with a mask drawn from `seed`.
    Dropout {
        input: NodeId,
        rate: f64,
        seed: u64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Immutable record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Tape {
    pub fn builder() -> TapeBuilder {
        TapeBuilder {
            tape: Tape::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(String::as_str)
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }
}

/// Incremental tape construction with eager shape checks.
#[derive(Debug)]
pub struct TapeBuilder {
    tape: Tape,
}

impl TapeBuilder {
    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.tape.nodes.len());
        self.tape.nodes.push(Node { op, shape });
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.tape.nodes[id.0].shape
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.tape.nodes.len(),
            op,
            detail,
        }
    }

    /// Named input slot. Gradients are reported for leaves whose bound
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.tape.leaves.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate leaf `{name}`")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(self.shape_err("leaf", format!("bad leaf shape {shape:?}")));
        }
        let id = self.push(Op::Leaf(name.to_string()), shape.to_vec());
        self.tape.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Constant(t), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match (sa.as_slice(), sb.as_slice()) {
            ([n, k], [k2, m]) if k == k2 => Ok(self.push(Op::MatMul(a, b), vec![*n, *m])),
            _ => Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        }
    }

    fn same_shape(&mut self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let detail = format!("{sa:?} vs {sb:?}");
            return Err(self.shape_err(op, detail));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        match (sx.as_slice(), sb.as_slice()) {
            ([_, k], [k2]) if k == k2 => Ok(self.push(Op::AddBias(x, bias), sx)),
            _ => Err(self.shape_err("add_bias", format!("{sx:?} + {sb:?}"))),
        }
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::InvalidArgument("non-finite scale factor".into()));
        }
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Scale(x, factor), s))
    }

    fn unary(&mut self, x: NodeId, op: Op) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(op, s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Softplus(x))
    }

    /// Row-wise softmax (rank-1 input is one row).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.rowwise_check(x, "softmax")?;
        Ok(self.unary(x, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.rowwise_check(x, "log_softmax")?;
        Ok(self.unary(x, Op::LogSoftmax(x)))
    }

    fn rowwise_check(&self, x: NodeId, op: &'static str) -> Result<()> {
        if self.shape(x).len() > 2 {
            return Err(self.shape_err(op, format!("rank > 2: {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), vec![1])
    }

    /// `[n, k] -> [n]`.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.rowwise_check(x, "row_sum")?;
        let (r, _) = rows_cols(self.shape(x));
        Ok(self.push(Op::RowSum(x), vec![r]))
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(self.unary(
            x,
            Op::Dropout {
                input: x,
                rate,
                seed,
            },
        ))
    }

    pub fn output(&mut self, name: &str, id: NodeId) -> &mut Self {
        self.tape.outputs.insert(name.to_string(), id);
        self
    }

    pub fn build(self) -> Tape {
        self.tape
    }
}

fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::Dropout, 0);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ·b` for `a: [n, k]`, `b: [n, m]`.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a·bᵀ` for `a: [n, m]`, `b: [k, m]`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn row_softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

fn row_log_softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Values of every node for one set of inputs.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    grad_leaves: Vec<(String, NodeId)>,
    outputs: BTreeMap<String, NodeId>,
}

impl Evaluation {
    pub fn output(&self, name: &str) -> Result<&Tensor> {
        let id = self
            .outputs
            .get(name)
            .ok_or_else(|| Error::UnknownOutput(name.to_string()))?;
        Ok(&self.values[id.0])
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// All named outputs.
    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.values[id.0].clone()))
            .collect()
    }
}

/// Forward pass. All leaves must be bound with tensors of the declared shape.
pub fn evaluate(tape: &Tape, inputs: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
    let mut values: Vec<Tensor> = Vec::with_capacity(tape.nodes.len());
    let mut grad_leaves = Vec::new();
    for (idx, node) in tape.nodes.iter().enumerate() {
        let v = |id: NodeId| values[id.0].values();
        let (_, c) = rows_cols(&node.shape);
        let out: Vec<f64> = match &node.op {
            Op::Leaf(name) => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::Shape {
                        node: idx,
                        op: "leaf",
                        detail: format!(
                            "input `{name}` bound with {:?}, declared {:?}",
                            t.shape(),
                            node.shape
                        ),
                    });
                }
                if t.requires_grad() {
                    grad_leaves.push((name.clone(), NodeId(idx)));
                }
                values.push(t.clone());
                continue;
            }
            Op::Constant(t) => t.values().to_vec(),
            Op::MatMul(a, b) => {
                let (n, k) = rows_cols(&tape.nodes[a.0].shape);
                matmul(v(*a), v(*b), n, k, node.shape[1])
            }
            Op::Add(a, b) => v(*a).iter().zip(v(*b)).map(|(x, y)| x + y).collect(),
            Op::Sub(a, b) => v(*a).iter().zip(v(*b)).map(|(x, y)| x - y).collect(),
            Op::Mul(a, b) => v(*a).iter().zip(v(*b)).map(|(x, y)| x * y).collect(),
            Op::AddBias(x, b) => {
                let bias = v(*b);
                v(*x)
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(bias).map(|(x, b)| x + b))
                    .collect()
            }
            Op::Scale(x, f) => v(*x).iter().map(|x| x * f).collect(),
            Op::Relu(x) => v(*x).iter().map(|x| x.max(0.0)).collect(),
            Op::Softplus(x) => v(*x).iter().map(|&x| softplus(x)).collect(),
            Op::Softmax(x) => row_softmax(v(*x), c),
            Op::LogSoftmax(x) => row_log_softmax(v(*x), c),
            Op::Log(x) => v(*x).iter().map(|x| x.ln()).collect(),
            Op::Square(x) => v(*x).iter().map(|x| x * x).collect(),
            Op::Sum(x) => vec![v(*x).iter().sum()],
            Op::Mean(x) => {
                let xs = v(*x);
                vec![xs.iter().sum::<f64>() / xs.len() as f64]
            }
            Op::RowSum(x) => {
                let (_, xc) = rows_cols(&tape.nodes[x.0].shape);
                v(*x).chunks(xc).map(|row| row.iter().sum()).collect()
            }
            Op::Dropout { input, rate, seed } => {
                let mask = dropout_mask(node.shape.iter().product(), *rate, *seed);
                v(*input).iter().zip(&mask).map(|(x, m)| x * m).collect()
            }
        };
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                node: idx,
                op: node.op.name(),
            });
        }
        values.push(Tensor::from_parts_unchecked(node.shape.clone(), out));
    }
    Ok(Evaluation {
        values,
        grad_leaves,
        outputs: tape.outputs.clone(),
    })
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// Reverse sweep seeded with cotangents on named outputs.
///
/// Returns a gradient for every leaf bound with `requires_grad`, zero when
/// the leaf does not influence the seeded outputs.
pub fn backward(
    tape: &Tape,
    eval: &Evaluation,
    seeds: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut adj: Vec<Option<Vec<f64>>> = vec![None; tape.nodes.len()];
    for (name, seed) in seeds {
        let id = *tape
            .outputs
            .get(name)
            .ok_or_else(|| Error::UnknownOutput(name.clone()))?;
        if seed.shape() != tape.nodes[id.0].shape.as_slice() {
            return Err(Error::Shape {
                node: id.0,
                op: "seed",
                detail: format!(
                    "seed for `{name}` has {:?}, output has {:?}",
                    seed.shape(),
                    tape.nodes[id.0].shape
                ),
            });
        }
        accumulate(&mut adj[id.0], seed.values().to_vec());
    }

    for idx in (0..tape.nodes.len()).rev() {
        let Some(g) = adj[idx].take() else { continue };
        let node = &tape.nodes[idx];
        let val = |id: NodeId| eval.values[id.0].values();
        let (_, c) = rows_cols(&node.shape);
        match &node.op {
            Op::Leaf(_) | Op::Constant(_) => {
                adj[idx] = Some(g);
            }
            Op::MatMul(a, b) => {
                let (n, k) = rows_cols(&tape.nodes[a.0].shape);
                let m = node.shape[1];
                let da = matmul_nt(&g, val(*b), n, m, k);
                let db = matmul_tn(val(*a), &g, n, k, m);
                accumulate(&mut adj[a.0], da);
                accumulate(&mut adj[b.0], db);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], g.clone());
                accumulate(&mut adj[b.0], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], g.clone());
                accumulate(&mut adj[b.0], g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(&mut adj[a.0], da);
                accumulate(&mut adj[b.0], db);
            }
            Op::AddBias(x, b) => {
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                accumulate(&mut adj[x.0], g);
                accumulate(&mut adj[b.0], db);
            }
            Op::Scale(x, f) => accumulate(&mut adj[x.0], g.iter().map(|g| g * f).collect()),
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut adj[x.0], d);
            }
            Op::Softplus(x) => {
                let d = g.iter().zip(val(*x)).map(|(g, &x)| g * sigmoid(x)).collect();
                accumulate(&mut adj[x.0], d);
            }
            Op::Softmax(x) => {
                let y = eval.values[idx].values();
                let mut d = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    d.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - dot)));
                }
                accumulate(&mut adj[x.0], d);
            }
            Op::LogSoftmax(x) => {
                let p = row_softmax(val(*x), c);
                let mut d = Vec::with_capacity(g.len());
                for (grow, prow) in g.chunks(c).zip(p.chunks(c)) {
                    let total: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(prow).map(|(g, p)| g - p * total));
                }
                accumulate(&mut adj[x.0], d);
            }
            Op::Log(x) => {
                let d = g.iter().zip(val(*x)).map(|(g, x)| g / x).collect();
                accumulate(&mut adj[x.0], d);
            }
            Op::Square(x) => {
                let d = g.iter().zip(val(*x)).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(&mut adj[x.0], d);
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                accumulate(&mut adj[x.0], vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(&mut adj[x.0], vec![g[0] / n as f64; n]);
            }
            Op::RowSum(x) => {
                let (_, xc) = rows_cols(&tape.nodes[x.0].shape);
                let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, xc)).collect();
                accumulate(&mut adj[x.0], d);
            }
            Op::Dropout { input, rate, seed } => {
                let mask = dropout_mask(g.len(), *rate, *seed);
                accumulate(&mut adj[input.0], g.iter().zip(&mask).map(|(g, m)| g * m).collect());
            }
        }
    }

    let mut grads = BTreeMap::new();
    for (name, id) in &eval.grad_leaves {
        let shape = tape.nodes[id.0].shape.clone();
        let values = adj[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: id.0,
                op: "gradient",
            });
        }
        grads.insert(name.clone(), Tensor::from_parts_unchecked(shape, values));
    }
    Ok(grads)
}
