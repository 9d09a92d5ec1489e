use std::cell::RefCell;
use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Floor applied to the argument of [`Var::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Position of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    RowNorm(NodeId),
    FrobeniusNorm(NodeId),
    Concat(Vec<NodeId>),
    CenterBatch(NodeId),
    NormalizeRows(NodeId, f64),
    Transpose(NodeId),
    SelectRows(NodeId, Vec<usize>),
    Pick(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    leaf: bool,
}

/// A single-use computation tape.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer and the reverse sweep in [`Graph::backward`] is a plain reverse
/// iteration.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id.0];
        f.debug_struct("Var")
            .field("id", &self.id.0)
            .field("shape", &n.value.shape())
            .field("tracked", &n.tracked)
            .finish()
    }
}

/// Gradients of a scalar root with respect to every tracked leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_node.get(var.id.0).and_then(Option::as_ref)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tracked leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
            leaf: true,
        });
        Var { graph: self, id }
    }

    fn push(&self, op_name: &'static str, op: Op, value: Tensor, tracked: bool) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value,
            op,
            tracked,
            leaf: false,
        });
        Ok(Var { graph: self, id })
    }

    /// Reverse sweep from a tracked scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let rnode = &nodes[root.id.0];
        if !rnode.value.is_scalar() {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                rnode.value.shape()
            )));
        }
        if !rnode.tracked {
            return Err(Error::Backward("root does not depend on any tracked leaf".into()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id.0 + 1];
        grads[root.id.0] = Some(vec![1.0]);

        for i in (0..=root.id.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.leaf {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, i, &g, &mut grads);
        }

        let mut by_node: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.leaf && node.tracked {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                by_node.push(Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                }));
            } else {
                by_node.push(None);
            }
        }
        Ok(Gradients { by_node })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    if !nodes[id.0].tracked {
        return;
    }
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id.0].value.numel()]);
    }
    f(slot.as_mut().unwrap());
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().expect("rank checked on forward")
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (m, k) = dims(av);
            let (_, n) = dims(bv);
            accumulate(grads, nodes, *a, |ga| {
                let d = mm_a_bt(g, m, n, bv.data(), k);
                add_into(ga, &d);
            });
            accumulate(grads, nodes, *b, |gb| {
                let d = mm_at_b(av.data(), m, k, g, n);
                add_into(gb, &d);
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| {
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            accumulate(grads, nodes, *a, |ga| {
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *x += gi * bi;
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *x += gi * ai;
                }
            });
        }
        Op::AddRow(a, r) => {
            let (_, c) = dims(out);
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *r, |gr| {
                for row in g.chunks(c) {
                    add_into(gr, row);
                }
            });
        }
        Op::MulRow(a, r) => {
            let (_, c) = dims(out);
            let av = nodes[a.0].value.data();
            let rv = nodes[r.0].value.data();
            accumulate(grads, nodes, *a, |ga| {
                for (idx, x) in ga.iter_mut().enumerate() {
                    *x += g[idx] * rv[idx % c];
                }
            });
            accumulate(grads, nodes, *r, |gr| {
                for (idx, gi) in g.iter().enumerate() {
                    gr[idx % c] += gi * av[idx];
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += s * gi;
                }
            });
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, |ga| add_into(ga, g)),
        Op::Relu(a) => {
            let av = nodes[a.0].value.data();
            accumulate(grads, nodes, *a, |ga| {
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                    if *ai > 0.0 {
                        *x += gi;
                    }
                }
            });
        }
        Op::Log(a) => {
            let av = nodes[a.0].value.data();
            accumulate(grads, nodes, *a, |ga| {
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                    if *ai > LOG_FLOOR {
                        *x += gi / ai;
                    }
                }
            });
        }
        Op::Exp(a) => {
            let ov = out.data();
            accumulate(grads, nodes, *a, |ga| {
                for ((x, gi), yi) in ga.iter_mut().zip(g).zip(ov) {
                    *x += gi * yi;
                }
            });
        }
        Op::Softmax(a) => {
            let (_, c) = dims(out);
            let ov = out.data();
            accumulate(grads, nodes, *a, |ga| {
                for ((gar, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(ov.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gar[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let (_, c) = dims(out);
            let ov = out.data();
            accumulate(grads, nodes, *a, |ga| {
                for ((gar, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(ov.chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        gar[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            });
        }
        Op::SumAll(a) => accumulate(grads, nodes, *a, |ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
        Op::MeanAll(a) => accumulate(grads, nodes, *a, |ga| {
            let s = g[0] / ga.len() as f64;
            for x in ga.iter_mut() {
                *x += s;
            }
        }),
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (r, c) = dims(&nodes[a.0].value);
            let denom = match &nodes[i].op {
                Op::MeanAxis(..) => {
                    if *axis == 0 {
                        r as f64
                    } else {
                        c as f64
                    }
                }
                _ => 1.0,
            };
            accumulate(grads, nodes, *a, |ga| {
                for row in 0..r {
                    for col in 0..c {
                        let gi = if *axis == 0 { g[col] } else { g[row] };
                        ga[row * c + col] += gi / denom;
                    }
                }
            });
        }
        Op::RowNorm(a) => {
            let av = &nodes[a.0].value;
            let (_, c) = dims(av);
            let ov = out.data();
            accumulate(grads, nodes, *a, |ga| {
                for (row, (gar, ar)) in ga.chunks_mut(c).zip(av.data().chunks(c)).enumerate() {
                    let n = ov[row];
                    if n > 0.0 {
                        for j in 0..c {
                            gar[j] += g[row] * ar[j] / n;
                        }
                    }
                }
            });
        }
        Op::FrobeniusNorm(a) => {
            let av = nodes[a.0].value.data();
            let n = out.data()[0];
            accumulate(grads, nodes, *a, |ga| {
                if n > 0.0 {
                    for (x, ai) in ga.iter_mut().zip(av) {
                        *x += g[0] * ai / n;
                    }
                }
            });
        }
        Op::Concat(parts) => {
            let (r, c) = dims(out);
            let mut offset = 0;
            for p in parts {
                let (_, pc) = dims(&nodes[p.0].value);
                accumulate(grads, nodes, *p, |gp| {
                    for row in 0..r {
                        for j in 0..pc {
                            gp[row * pc + j] += g[row * c + offset + j];
                        }
                    }
                });
                offset += pc;
            }
        }
        Op::CenterBatch(a) => {
            let (r, c) = dims(out);
            let means = col_means(g, r, c);
            accumulate(grads, nodes, *a, |ga| {
                for row in 0..r {
                    for j in 0..c {
                        ga[row * c + j] += g[row * c + j] - means[j];
                    }
                }
            });
        }
        Op::NormalizeRows(a, eps) => {
            let av = &nodes[a.0].value;
            let (_, c) = dims(av);
            let ov = out.data();
            accumulate(grads, nodes, *a, |ga| {
                for (row, ar) in av.data().chunks(c).enumerate() {
                    let (_, var) = mean_var(ar);
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = &g[row * c..(row + 1) * c];
                    let xh = &ov[row * c..(row + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[row * c + j] += inv * (gr[j] - mg - xh[j] * mgx);
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = dims(out);
            accumulate(grads, nodes, *a, |ga| {
                for row in 0..r {
                    for j in 0..c {
                        ga[j * r + row] += g[row * c + j];
                    }
                }
            });
        }
        Op::SelectRows(a, idx) => {
            let (_, c) = dims(out);
            accumulate(grads, nodes, *a, |ga| {
                for (row, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[row * c + j];
                    }
                }
            });
        }
        Op::Pick(a, idx) => {
            let (_, c) = dims(&nodes[a.0].value);
            accumulate(grads, nodes, *a, |ga| {
                for (row, &col) in idx.iter().enumerate() {
                    ga[row * c + col] += g[row];
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn col_means(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut means = vec![0.0; c];
    for row in data.chunks(c) {
        add_into(&mut means, row);
    }
    for m in &mut means {
        *m /= r as f64;
    }
    means
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ · g` for `a: m×k`, `g: m×n`.
fn mm_at_b(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

/// `g · bᵀ` for `g: m×n`, `b: k×n`.
fn mm_a_bt(g: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// Fallible arithmetic (shape checks), so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id.0].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.nodes.borrow()[self.id.0].tracked
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id.0].value.data()[0]
    }

    fn unary(
        self,
        name: &'static str,
        op: impl FnOnce(NodeId) -> Op,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Var<'g>> {
        let (value, tracked) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id.0];
            (f(&n.value)?, n.tracked)
        };
        self.graph.push(name, op(self.id), value, tracked)
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: impl FnOnce(NodeId, NodeId) -> Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'g>> {
        debug_assert!(std::ptr::eq(self.graph, other.graph));
        let (value, tracked) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id.0];
            let b = &nodes[other.id.0];
            (f(&a.value, &b.value)?, a.tracked || b.tracked)
        };
        self.graph.push(name, op(self.id, other.id), value, tracked)
    }

    fn elementwise(
        self,
        other: Var<'g>,
        name: &'static str,
        op: impl FnOnce(NodeId, NodeId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.binary(other, name, op, |a, b| {
            if a.shape() != b.shape() {
                return Err(shape_err(name, a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Ok(Tensor {
                shape: a.shape().to_vec(),
                data,
            })
        })
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "matmul", Op::MatMul, |a, b| {
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(shape_err("matmul", a, b));
            }
            Ok(Tensor {
                shape: vec![m, n],
                data: mm(a.data(), m, k, b.data(), n),
            })
        })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "mul", Op::Mul, |x, y| x * y)
    }

    /// `self (n×d) + row (1×d)` broadcast over rows.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.binary(row, "add_row", Op::AddRow, |a, r| {
            let (_, c) = a.dims2()?;
            if r.numel() != c {
                return Err(shape_err("add_row", a, r));
            }
            let data = a.data().iter().enumerate().map(|(i, v)| v + r.data()[i % c]).collect();
            Ok(Tensor {
                shape: vec![a.numel() / c.max(1), c],
                data,
            })
        })
    }

    /// `self (n×d) ⊙ row (1×d)` broadcast over rows.
    pub fn mul_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.binary(row, "mul_row", Op::MulRow, |a, r| {
            let (_, c) = a.dims2()?;
            if r.numel() != c {
                return Err(shape_err("mul_row", a, r));
            }
            let data = a.data().iter().enumerate().map(|(i, v)| v * r.data()[i % c]).collect();
            Ok(Tensor {
                shape: vec![a.numel() / c.max(1), c],
                data,
            })
        })
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.unary("scale", |a| Op::Scale(a, s), |a| Ok(a.map(|v| v * s)))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", Op::AddScalar, |a| Ok(a.map(|v| v + s)))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", Op::Relu, |a| Ok(a.map(|v| v.max(0.0))))
    }

    /// Hinge `max(x, 0)`, identical to [`Var::relu`].
    pub fn hinge(self) -> Result<Var<'g>> {
        self.relu()
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(self) -> Result<Var<'g>> {
        self.unary("log", Op::Log, |a| Ok(a.map(|v| v.max(LOG_FLOOR).ln())))
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary("exp", Op::Exp, |a| Ok(a.map(f64::exp)))
    }

    /// Row-wise softmax (log-sum-exp shifted).
    pub fn softmax(self) -> Result<Var<'g>> {
        self.unary("softmax", Op::Softmax, |a| {
            let (r, c) = a.dims2()?;
            let mut data = Vec::with_capacity(r * c);
            for row in a.data().chunks(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = exps.iter().sum();
                data.extend(exps.iter().map(|e| e / s));
            }
            Ok(Tensor {
                shape: vec![r, c],
                data,
            })
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        self.unary("log_softmax", Op::LogSoftmax, |a| {
            let (r, c) = a.dims2()?;
            let mut data = Vec::with_capacity(r * c);
            for row in a.data().chunks(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                data.extend(row.iter().map(|v| v - lse));
            }
            Ok(Tensor {
                shape: vec![r, c],
                data,
            })
        })
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.unary("sum", Op::SumAll, |a| Ok(Tensor::scalar(a.data().iter().sum())))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.unary("mean", Op::MeanAll, |a| {
            if a.numel() == 0 {
                return Err(Error::invalid("mean of empty tensor"));
            }
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
        })
    }

    /// Sum over `axis` of a rank-2 tensor; the reduced axis is kept with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.unary("sum_axis", |a| Op::SumAxis(a, axis), |a| reduce_axis(a, axis, false))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        self.unary("mean_axis", |a| Op::MeanAxis(a, axis), |a| reduce_axis(a, axis, true))
    }

    /// Euclidean norm of every row: `n×d → n×1`.
    pub fn row_norm(self) -> Result<Var<'g>> {
        self.unary("row_norm", Op::RowNorm, |a| {
            let (r, c) = a.dims2()?;
            let data = a
                .data()
                .chunks(c)
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Ok(Tensor {
                shape: vec![r, 1],
                data,
            })
        })
    }

    pub fn frobenius_norm(self) -> Result<Var<'g>> {
        self.unary("frobenius_norm", Op::FrobeniusNorm, |a| {
            Ok(Tensor::scalar(a.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
        })
    }

    /// Subtracts the mean row (mean over the batch axis) from every row.
    pub fn center_batch(self) -> Result<Var<'g>> {
        self.unary("center_batch", Op::CenterBatch, |a| {
            let (r, c) = a.dims2()?;
            let means = col_means(a.data(), r, c);
            let data = a.data().iter().enumerate().map(|(i, v)| v - means[i % c]).collect();
            Ok(Tensor {
                shape: vec![r, c],
                data,
            })
        })
    }

    /// Per-row standardization `(x − μ) / sqrt(σ² + eps)`.
    pub fn normalize_rows(self, eps: f64) -> Result<Var<'g>> {
        self.unary(
            "normalize_rows",
            |a| Op::NormalizeRows(a, eps),
            |a| {
                let (r, c) = a.dims2()?;
                let mut data = Vec::with_capacity(r * c);
                for row in a.data().chunks(c) {
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    data.extend(row.iter().map(|v| (v - mean) * inv));
                }
                Ok(Tensor {
                    shape: vec![r, c],
                    data,
                })
            },
        )
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        self.unary("transpose", Op::Transpose, |a| {
            let (r, c) = a.dims2()?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Ok(Tensor {
                shape: vec![c, r],
                data,
            })
        })
    }

    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'g>> {
        let idx = rows.to_vec();
        self.unary(
            "select_rows",
            |a| Op::SelectRows(a, idx),
            |a| {
                let (r, c) = a.dims2()?;
                let mut data = Vec::with_capacity(rows.len() * c);
                for &i in rows {
                    if i >= r {
                        return Err(Error::invalid(format!("select_rows: row {i} out of {r}")));
                    }
                    data.extend_from_slice(&a.data()[i * c..(i + 1) * c]);
                }
                Ok(Tensor {
                    shape: vec![rows.len(), c],
                    data,
                })
            },
        )
    }

    /// Picks column `cols[i]` from row `i`: `n×c → n×1`.
    pub fn pick(self, cols: &[usize]) -> Result<Var<'g>> {
        let idx = cols.to_vec();
        self.unary(
            "pick",
            |a| Op::Pick(a, idx),
            |a| {
                let (r, c) = a.dims2()?;
                if cols.len() != r {
                    return Err(Error::Shape {
                        op: "pick",
                        lhs: a.shape().to_vec(),
                        rhs: vec![cols.len()],
                    });
                }
                let mut data = Vec::with_capacity(r);
                for (i, &j) in cols.iter().enumerate() {
                    if j >= c {
                        return Err(Error::invalid(format!("pick: column {j} out of {c}")));
                    }
                    data.push(a.data()[i * c + j]);
                }
                Ok(Tensor {
                    shape: vec![r, 1],
                    data,
                })
            },
        )
    }
}

/// Concatenates rank-2 tensors along the feature axis.
pub fn concat<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let graph = first.graph;
    let (value, tracked) = {
        let nodes = graph.nodes.borrow();
        let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id.0].value).collect();
        let (r, _) = vals[0].dims2()?;
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (vr, vc) = v.dims2()?;
            if vr != r {
                return Err(shape_err("concat", vals[0], v));
            }
            widths.push(vc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[row * w..(row + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|p| nodes[p.id.0].tracked);
        (
            Tensor {
                shape: vec![r, total],
                data,
            },
            tracked,
        )
    };
    graph.push(
        "concat",
        Op::Concat(parts.iter().map(|p| p.id).collect()),
        value,
        tracked,
    )
}

fn reduce_axis(a: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    match axis {
        0 => {
            let mut s = col_means(a.data(), r, c);
            if !mean {
                for v in &mut s {
                    *v *= r as f64;
                }
            }
            Ok(Tensor {
                shape: vec![1, c],
                data: s,
            })
        }
        1 => {
            let data = a
                .data()
                .chunks(c)
                .map(|row| {
                    let s: f64 = row.iter().sum();
                    if mean {
                        s / c as f64
                    } else {
                        s
                    }
                })
                .collect();
            Ok(Tensor {
                shape: vec![r, 1],
                data,
            })
        }
        _ => Err(Error::invalid(format!("axis {axis} out of range for rank 2"))),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}
