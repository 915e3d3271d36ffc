// Reverse-mode differentiation over an append-only operation tape.
//
// Every op appends one node whose inputs are earlier nodes, so node order is
// a topological order and backward is a single reverse sweep.

use std::cell::RefCell;

use super::tensor::check_finite;
use super::{NumError, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    ClampMin(usize, f64),
    AddBias(usize, usize),
    Softmax(usize),
    MaskedSoftmax(usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    GatherEntries(usize, Vec<(usize, usize)>),
    MulRows(usize, usize),
    Sum(usize),
    Mean(usize),
    MeanOverRows(usize),
    CrossEntropy(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation tape. Single-threaded; independent tapes may live on separate threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::from_parts_unchecked(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_>, NumError> {
        check_finite(name, &data)?;
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].tracked)
        };
        Ok(self.push_raw(Tensor::from_parts_unchecked(shape, data), op, tracked))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a tracked scalar.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(NumError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.tracked {
            return Err(NumError::Untracked);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].tracked {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv.data()[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                accumulate(grads, nodes, *a, da);
            }
            if nodes[*b].tracked {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av.data()[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(grads, nodes, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Exp(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, g.iter().zip(y).map(|(g, y)| g * y).collect());
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            accumulate(grads, nodes, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            let d = g
                .iter()
                .zip(x)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::ClampMin(a, c) => {
            let x = nodes[*a].value.data();
            let d = g
                .iter()
                .zip(x)
                .map(|(g, x)| if x >= c { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::AddBias(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            let n = out.cols();
            let mut db = vec![0.0; n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            accumulate(grads, nodes, *b, db);
        }
        Op::Softmax(a) | Op::MaskedSoftmax(a) => {
            // dx = y ⊙ (dy − ⟨dy, y⟩) per row; masked entries have y = 0.
            let n = out.cols();
            let mut dx = vec![0.0; g.len()];
            for ((dxr, gr), yr) in dx
                .chunks_mut(n)
                .zip(g.chunks(n))
                .zip(out.data().chunks(n))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, g), y) in dxr.iter_mut().zip(gr).zip(yr) {
                    *d = y * (g - dot);
                }
            }
            accumulate(grads, nodes, *a, dx);
        }
        Op::SliceCols(a, start) => {
            let src = &nodes[*a].value;
            let (m, n_src, n_out) = (src.rows(), src.cols(), out.cols());
            let mut dx = vec![0.0; m * n_src];
            for i in 0..m {
                dx[i * n_src + start..i * n_src + start + n_out]
                    .copy_from_slice(&g[i * n_out..(i + 1) * n_out]);
            }
            accumulate(grads, nodes, *a, dx);
        }
        Op::GatherRows(a, idx) => {
            let src = &nodes[*a].value;
            let n = src.cols();
            let mut dx = vec![0.0; src.len()];
            for (r, &i) in idx.iter().enumerate() {
                dx[i * n..(i + 1) * n]
                    .iter_mut()
                    .zip(&g[r * n..(r + 1) * n])
                    .for_each(|(d, v)| *d += v);
            }
            accumulate(grads, nodes, *a, dx);
        }
        Op::ScatterAddRows(a, idx) => {
            let n = out.cols();
            let mut dx = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                dx.extend_from_slice(&g[i * n..(i + 1) * n]);
            }
            accumulate(grads, nodes, *a, dx);
        }
        Op::GatherEntries(a, pairs) => {
            let src = &nodes[*a].value;
            let n = src.cols();
            let mut dx = vec![0.0; src.len()];
            for (&(i, j), v) in pairs.iter().zip(g) {
                dx[i * n + j] += v;
            }
            accumulate(grads, nodes, *a, dx);
        }
        Op::MulRows(a, s) => {
            let (av, sv) = (&nodes[*a].value, &nodes[*s].value);
            let n = av.cols();
            let mut da = vec![0.0; av.len()];
            let mut ds = vec![0.0; sv.len()];
            for i in 0..av.rows() {
                let si = sv.data()[i];
                let mut acc = 0.0;
                for j in 0..n {
                    da[i * n + j] = g[i * n + j] * si;
                    acc += g[i * n + j] * av.data()[i * n + j];
                }
                ds[i] = acc;
            }
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *s, ds);
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0]; len]);
        }
        Op::Mean(a) => {
            let len = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0] / len as f64; len]);
        }
        Op::MeanOverRows(a) => {
            let src = &nodes[*a].value;
            let (m, n) = (src.rows(), src.cols());
            let mut dx = vec![0.0; m * n];
            for row in dx.chunks_mut(n) {
                row.iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d = v / m as f64);
            }
            accumulate(grads, nodes, *a, dx);
        }
        Op::CrossEntropy(a, targets) => {
            let logits = &nodes[*a].value;
            let (b, c) = (logits.rows(), logits.cols());
            let mut dx = vec![0.0; b * c];
            for (i, &t) in targets.iter().enumerate() {
                let probs = softmax_slice(logits.row(i));
                for j in 0..c {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    dx[i * c + j] = g[0] * (probs[j] - onehot) / b as f64;
                }
            }
            accumulate(grads, nodes, *a, dx);
        }
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(NumError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), NumError> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(NumError::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: Vec::new(),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Clone::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64, NumError> {
        self.tape.with_value(self.id, Tensor::item)
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn binary<F>(self, other: Var<'t>, name: &'static str, op: Op, f: F) -> Result<Var<'t>, NumError>
    where
        F: Fn(f64, f64) -> f64,
    {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            same_shape(name, a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            (a.shape().to_vec(), data)
        };
        self.tape.push(name, shape, data, op, &[self.id, other.id])
    }

    fn unary<F>(self, name: &'static str, op: Op, f: F) -> Result<Var<'t>, NumError>
    where
        F: Fn(f64) -> f64,
    {
        let (shape, data) = self.tape.with_value(self.id, |a| {
            (a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
        });
        self.tape.push(name, shape, data, op, &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            require_matrix("matmul", a)?;
            require_matrix("matmul", b)?;
            if a.cols() != b.rows() {
                return Err(NumError::Shape {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a.data()[i * k + p];
                    let brow = &b.data()[p * n..(p + 1) * n];
                    crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
                }
            }
            (vec![m, n], c)
        };
        self.tape
            .push("matmul", shape, data, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, NumError> {
        self.unary("scale", Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>, NumError> {
        self.unary("add_scalar", Op::AddScalar(self.id), |a| a + c)
    }

    pub fn exp(self) -> Result<Var<'t>, NumError> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>, NumError> {
        if let Some(index) = self
            .tape
            .with_value(self.id, |a| a.data().iter().position(|&x| x <= 0.0))
        {
            return Err(NumError::Domain {
                op: "log",
                index,
            });
        }
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn relu(self) -> Result<Var<'t>, NumError> {
        self.unary("relu", Op::Relu(self.id), |a| a.max(0.0))
    }

    pub fn clamp_min(self, floor: f64) -> Result<Var<'t>, NumError> {
        self.unary("clamp_min", Op::ClampMin(self.id, floor), |a| a.max(floor))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, NumError> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if b.shape().len() != 1 || b.len() != a.cols() {
                return Err(NumError::Shape {
                    op: "add_bias",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = a
                .data()
                .chunks(a.cols())
                .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
                .collect();
            (a.shape().to_vec(), data)
        };
        self.tape
            .push("add_bias", shape, data, Op::AddBias(self.id, bias.id), &[self.id, bias.id])
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t>, NumError> {
        let (shape, data) = self.tape.with_value(self.id, |a| {
            let data = a.data().chunks(a.cols()).flat_map(softmax_slice).collect();
            (a.shape().to_vec(), data)
        });
        self.tape.push("softmax", shape, data, Op::Softmax(self.id), &[self.id])
    }

    /// Softmax restricted to the entries where `mask` is set; all other entries become 0.
    /// Every row must have at least one selected entry.
    pub fn masked_softmax_rows(self, mask: &[bool]) -> Result<Var<'t>, NumError> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if mask.len() != a.len() {
                return Err(NumError::Shape {
                    op: "masked_softmax",
                    lhs: a.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let n = a.cols();
            let mut out = vec![0.0; a.len()];
            for (r, (row, mrow)) in a.data().chunks(n).zip(mask.chunks(n)).enumerate() {
                let max = row
                    .iter()
                    .zip(mrow)
                    .filter(|(_, m)| **m)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(NumError::EmptyRow {
                        op: "masked_softmax",
                        row: r,
                    });
                }
                let orow = &mut out[r * n..(r + 1) * n];
                let mut z = 0.0;
                for ((o, v), m) in orow.iter_mut().zip(row).zip(mrow) {
                    if *m {
                        *o = (v - max).exp();
                        z += *o;
                    }
                }
                orow.iter_mut().for_each(|o| *o /= z);
            }
            (a.shape().to_vec(), out)
        };
        self.tape
            .push("masked_softmax", shape, data, Op::MaskedSoftmax(self.id), &[self.id])
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, NumError> {
        let (shape, data) = self.tape.with_value(self.id, |a| {
            require_matrix("slice_cols", a)?;
            if start >= end || end > a.cols() {
                return Err(NumError::Index {
                    op: "slice_cols",
                    index: end,
                    bound: a.cols(),
                });
            }
            let data = a
                .data()
                .chunks(a.cols())
                .flat_map(|row| row[start..end].iter().copied())
                .collect();
            Ok((vec![a.rows(), end - start], data))
        })?;
        self.tape
            .push("slice_cols", shape, data, Op::SliceCols(self.id, start), &[self.id])
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>, NumError> {
        let (shape, data) = self.tape.with_value(self.id, |a| {
            require_matrix("gather_rows", a)?;
            let mut data = Vec::with_capacity(idx.len() * a.cols());
            for &i in idx {
                if i >= a.rows() {
                    return Err(NumError::Index {
                        op: "gather_rows",
                        index: i,
                        bound: a.rows(),
                    });
                }
                data.extend_from_slice(a.row(i));
            }
            Ok((vec![idx.len(), a.cols()], data))
        })?;
        if idx.is_empty() {
            return Err(NumError::InvalidShape { shape });
        }
        self.tape.push(
            "gather_rows",
            shape,
            data,
            Op::GatherRows(self.id, idx.to_vec()),
            &[self.id],
        )
    }

    /// Zero `m×n` matrix with row `r` of `self` added into row `idx[r]`.
    pub fn scatter_add_rows(self, idx: &[usize], m: usize) -> Result<Var<'t>, NumError> {
        let (shape, data) = self.tape.with_value(self.id, |a| {
            require_matrix("scatter_add_rows", a)?;
            if idx.len() != a.rows() {
                return Err(NumError::Shape {
                    op: "scatter_add_rows",
                    lhs: a.shape().to_vec(),
                    rhs: vec![idx.len()],
                });
            }
            let n = a.cols();
            let mut out = vec![0.0; m * n];
            for (r, &i) in idx.iter().enumerate() {
                if i >= m {
                    return Err(NumError::Index {
                        op: "scatter_add_rows",
                        index: i,
                        bound: m,
                    });
                }
                out[i * n..(i + 1) * n]
                    .iter_mut()
                    .zip(a.row(r))
                    .for_each(|(o, v)| *o += v);
            }
            Ok((vec![m, n], out))
        })?;
        self.tape.push(
            "scatter_add_rows",
            shape,
            data,
            Op::ScatterAddRows(self.id, idx.to_vec()),
            &[self.id],
        )
    }

    /// Vector of the matrix entries at `(row, col)` pairs.
    pub fn gather_entries(self, pairs: &[(usize, usize)]) -> Result<Var<'t>, NumError> {
        let data = self.tape.with_value(self.id, |a| {
            require_matrix("gather_entries", a)?;
            pairs
                .iter()
                .map(|&(i, j)| {
                    if i < a.rows() && j < a.cols() {
                        Ok(a.at(i, j))
                    } else {
                        Err(NumError::Index {
                            op: "gather_entries",
                            index: i * a.cols() + j,
                            bound: a.len(),
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        self.tape.push(
            "gather_entries",
            vec![pairs.len()],
            data,
            Op::GatherEntries(self.id, pairs.to_vec()),
            &[self.id],
        )
    }

    /// Scales row `i` of an `m×n` matrix by `scales[i]`.
    pub fn mul_rows(self, scales: Var<'t>) -> Result<Var<'t>, NumError> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, s) = (&nodes[self.id].value, &nodes[scales.id].value);
            require_matrix("mul_rows", a)?;
            if s.len() != a.rows() {
                return Err(NumError::Shape {
                    op: "mul_rows",
                    lhs: a.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            let data = a
                .data()
                .chunks(a.cols())
                .zip(s.data())
                .flat_map(|(row, si)| row.iter().map(move |v| v * si))
                .collect();
            (a.shape().to_vec(), data)
        };
        self.tape
            .push("mul_rows", shape, data, Op::MulRows(self.id, scales.id), &[self.id, scales.id])
    }

    pub fn sum(self) -> Result<Var<'t>, NumError> {
        let s = self.tape.with_value(self.id, |a| a.data().iter().sum::<f64>());
        self.tape.push("sum", Vec::new(), vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>, NumError> {
        let s = self
            .tape
            .with_value(self.id, |a| a.data().iter().sum::<f64>() / a.len() as f64);
        self.tape.push("mean", Vec::new(), vec![s], Op::Mean(self.id), &[self.id])
    }

    /// Column means of an `m×n` matrix, shape `[n]`.
    pub fn mean_over_rows(self) -> Result<Var<'t>, NumError> {
        let (shape, data) = self.tape.with_value(self.id, |a| {
            require_matrix("mean_over_rows", a)?;
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![0.0; n];
            for row in a.data().chunks(n) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= m as f64);
            Ok((vec![n], out))
        })?;
        self.tape
            .push("mean_over_rows", shape, data, Op::MeanOverRows(self.id), &[self.id])
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>, NumError> {
        let loss = self.tape.with_value(self.id, |a| {
            require_matrix("cross_entropy", a)?;
            if targets.len() != a.rows() {
                return Err(NumError::Shape {
                    op: "cross_entropy",
                    lhs: a.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                if t >= a.cols() {
                    return Err(NumError::Index {
                        op: "cross_entropy",
                        index: t,
                        bound: a.cols(),
                    });
                }
                let row = a.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Ok(total / targets.len() as f64)
        })?;
        self.tape.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy(self.id, targets.to_vec()),
            &[self.id],
        )
    }
}

/// Element-wise operation kinds accepted by [`ew`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
    Log,
    Exp,
    Relu,
}

/// Second operand of [`ew`]: an exact-shape tensor or a scalar broadcast.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'t> {
    Var(Var<'t>),
    Scalar(f64),
    None,
}

/// Element-wise dispatch supporting exact-shape and scalar broadcasting only.
pub fn ew<'t>(op: EwOp, a: Var<'t>, b: Operand<'t>) -> Result<Var<'t>, NumError> {
    match (op, b) {
        (EwOp::Add, Operand::Var(b)) => a.add(b),
        (EwOp::Sub, Operand::Var(b)) => a.sub(b),
        (EwOp::Mul, Operand::Var(b)) => a.mul(b),
        (EwOp::Add, Operand::Scalar(c)) => a.add_scalar(c),
        (EwOp::Sub, Operand::Scalar(c)) => a.add_scalar(-c),
        (EwOp::Mul, Operand::Scalar(c)) => a.scale(c),
        (EwOp::Log, Operand::None) => a.log(),
        (EwOp::Exp, Operand::None) => a.exp(),
        (EwOp::Relu, Operand::None) => a.relu(),
        (op, _) => Err(NumError::InvalidArgument(format!(
            "operand does not fit element-wise op {op:?}"
        ))),
    }
}
