//! Tape of array operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep simply walks it in reverse.

use crate::error::{Error, Result};

use super::DArray;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Log(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
        excluded: Vec<bool>,
    },
    LogSoftmax {
        x: Var,
        excluded: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    L2NormalizeRows(Var, Vec<f64>),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded recording of a forward computation.
///
/// A graph can be differentiated once; build a fresh graph for every
/// forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    differentiated: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_data(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an array as a leaf; it is differentiated iff the array
    /// has `requires_grad` set.
    pub fn leaf(&mut self, a: &DArray) -> Var {
        self.push(
            a.shape().to_vec(),
            a.data().to_vec(),
            Op::Leaf,
            a.requires_grad(),
        )
    }

    /// Differentiable leaf regardless of the array's flag.
    pub fn param(&mut self, a: &DArray) -> Var {
        self.push(a.shape().to_vec(), a.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let a = DArray::new(shape, data)?;
        Ok(self.leaf(&a))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_array(&self, v: Var) -> DArray {
        let n = self.node(v);
        DArray::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.node(v).shape)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape {
                op,
                left: self.node(a).shape.clone(),
                right: self.node(b).shape.clone(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.node(a).data, &self.node(b).data, &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Sub(a, b), ng))
    }

    /// Broadcast-adds a length-`n` row to every row of an `m × n` array.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(a);
        if self.node(row).data.len() != n {
            return Err(Error::Shape {
                op: "add_row",
                left: self.node(a).shape.clone(),
                right: self.node(row).shape.clone(),
            });
        }
        let r = &self.node(row).data;
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[a, row]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(&[a]);
        self.push(self.node(a).shape.clone(), out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.ng(&[a]);
        self.push(self.node(a).shape.clone(), out, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.ng(&[a]);
        self.push(self.node(a).shape.clone(), out, Op::Gelu(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let ng = self.ng(&[a]);
        self.push(self.node(a).shape.clone(), out, Op::Log(a), ng)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        if axis >= shape.len().max(1) {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = if shape.is_empty() {
            (1, 1, 1)
        } else {
            (
                shape[..axis].iter().product(),
                shape[axis],
                shape[axis + 1..].iter().product(),
            )
        };
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Row-wise softmax over the last axis in which `excluded` entries
    /// (one flag per element) receive exactly zero weight.
    pub fn masked_softmax_rows(&mut self, x: Var, excluded: Vec<bool>) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if excluded.len() != m * n {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                left: self.node(x).shape.clone(),
                right: vec![excluded.len()],
            });
        }
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let ex = &excluded[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(ex)
                .filter(|(_, &e)| !e)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!("row {r} has every entry masked")));
            }
            let mut total = 0.0;
            for j in 0..n {
                if !ex[j] {
                    let e = (row[j] - max).exp();
                    out[r * n + j] = e;
                    total += e;
                }
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= total;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            self.node(x).shape.clone(),
            out,
            Op::MaskedSoftmax { x, excluded },
            ng,
        ))
    }

    /// Row-wise log-softmax over the last axis. Excluded entries are left
    /// out of the normalizer and read back as 0 with zero gradient.
    pub fn log_softmax_rows(&mut self, x: Var, excluded: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if let Some(ex) = &excluded {
            if ex.len() != m * n {
                return Err(Error::Shape {
                    op: "log_softmax_rows",
                    left: self.node(x).shape.clone(),
                    right: vec![ex.len()],
                });
            }
        }
        let is_ex = |i: usize| excluded.as_ref().is_some_and(|e| e[i]);
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if !is_ex(r * n + j) {
                    max = max.max(src[r * n + j]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!("row {r} has every entry masked")));
            }
            let mut total = 0.0;
            for j in 0..n {
                if !is_ex(r * n + j) {
                    total += (src[r * n + j] - max).exp();
                }
            }
            let lse = max + total.ln();
            for j in 0..n {
                if !is_ex(r * n + j) {
                    out[r * n + j] = src[r * n + j] - lse;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            self.node(x).shape.clone(),
            out,
            Op::LogSoftmax { x, excluded },
            ng,
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        for p in [gain, bias] {
            if self.node(p).data.len() != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.node(x).shape.clone(),
                    right: self.node(p).shape.clone(),
                });
            }
        }
        let src = self.value(x);
        let g = &self.node(gain).data;
        let b = &self.node(bias).data;
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            self.node(x).shape.clone(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.ng(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), ng)
    }

    /// Column means: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let mut out = vec![0.0; n];
        for chunk in self.value(a).chunks(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(&[a]);
        self.push(vec![1, n], out, Op::MeanRows(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let n = self.dims2(first).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.node(first).shape.clone(),
                    right: self.node(p).shape.clone(),
                });
            }
            out.extend_from_slice(self.value(p));
            m += pm;
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let m = self.dims2(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.node(first).shape.clone(),
                    right: self.node(p).shape.clone(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if start >= end || end > m {
            return Err(Error::contract(format!(
                "slice_rows {start}..{end} of {m} rows"
            )));
        }
        let out = self.value(a)[start * n..end * n].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(vec![end - start, n], out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if start >= end || end > n {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} of {n} columns"
            )));
        }
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(vec![m, end - start], out, Op::SliceCols(a, start), ng))
    }

    /// Row gather (embedding lookup); indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!("gather index {bad} of {m} rows")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            vec![idx.len(), n],
            out,
            Op::GatherRows(a, idx.to_vec()),
            ng,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let out = transpose_data(self.value(a), m, n);
        let ng = self.ng(&[a]);
        self.push(vec![n, m], out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.node(a).shape.clone(),
                right: shape,
            });
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims2(a);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(a).len());
        for r in self.value(a).chunks(n) {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            norms.push(norm);
            out.extend(r.iter().map(|v| v / norm));
        }
        let ng = self.ng(&[a]);
        self.push(
            self.node(a).shape.clone(),
            out,
            Op::L2NormalizeRows(a, norms),
            ng,
        )
    }

    /// Populates gradients of `loss` with respect to every node that
    /// depends on a differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::contract(
                "graph already differentiated; re-run the forward pass",
            ));
        }
        if self.node(loss).data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = nodes[b.0].shape[1];
                acc(*a, &mut |g| {
                    let bt = transpose_data(&nodes[b.0].data, k, n);
                    matmul_into(dy, &bt, g, m, n, k);
                });
                acc(*b, &mut |g| {
                    let at = transpose_data(&nodes[a.0].data, m, k);
                    matmul_into(&at, dy, g, k, m, n);
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                let n = nodes[row.0].data.len();
                acc(*row, &mut |g| {
                    for chunk in dy.chunks(n) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)),
            Op::Relu(a) => {
                let x = &nodes[a.0].data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::Log(a) => {
                let x = &nodes[a.0].data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / x[i];
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.data;
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| dy[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                g[idx(j)] += y[idx(j)] * (dy[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, excluded } => {
                let y = &node.data;
                let n = rows_cols(&node.shape).1;
                acc(*x, &mut |g| {
                    for r in 0..y.len() / n {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = dy[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            if !excluded[j] {
                                g[j] += y[j] * (dy[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, excluded } => {
                let y = &node.data;
                let n = rows_cols(&node.shape).1;
                let is_ex = |i: usize| excluded.as_ref().is_some_and(|e| e[i]);
                acc(*x, &mut |g| {
                    for r in 0..y.len() / n {
                        let total: f64 = (r * n..(r + 1) * n)
                            .filter(|&j| !is_ex(j))
                            .map(|j| dy[j])
                            .sum();
                        for j in r * n..(r + 1) * n {
                            if !is_ex(j) {
                                g[j] += dy[j] - y[j].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = rows_cols(&node.shape).1;
                let gv = &nodes[gain.0].data;
                acc(*x, &mut |g| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let s = r * n..(r + 1) * n;
                        let dxhat: Vec<f64> = s.clone().map(|j| dy[j] * gv[j - r * n]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[s.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n as f64;
                        for (k, j) in s.enumerate() {
                            g[j] += is * (dxhat[k] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (j, (d, h)) in dy.iter().zip(xhat).enumerate() {
                        g[j % n] += d * h;
                    }
                });
                acc(*bias, &mut |g| {
                    for (j, d) in dy.iter().enumerate() {
                        g[j % n] += d;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(a) => {
                let k = dy[0] / nodes[a.0].data.len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += k));
            }
            Op::MeanRows(a) => {
                let (m, n) = rows_cols(&nodes[a.0].shape);
                acc(*a, &mut |g| {
                    for chunk in g.chunks_mut(n) {
                        for (gv, d) in chunk.iter_mut().zip(dy) {
                            *gv += d / m as f64;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].data.len();
                    acc(p, &mut |g| {
                        g.iter_mut().zip(&dy[off..off + len]).for_each(|(g, d)| *g += d)
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = rows_cols(&node.shape).1;
                let mut col = 0;
                for &p in parts {
                    let w = rows_cols(&nodes[p.0].shape).1;
                    acc(p, &mut |g| {
                        for (r, chunk) in g.chunks_mut(w).enumerate() {
                            for (c, gv) in chunk.iter_mut().enumerate() {
                                *gv += dy[r * n + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = rows_cols(&node.shape).1;
                acc(*a, &mut |g| {
                    g[start * n..start * n + dy.len()]
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, d)| *g += d)
                });
            }
            Op::SliceCols(a, start) => {
                let w = rows_cols(&node.shape).1;
                let n = rows_cols(&nodes[a.0].shape).1;
                acc(*a, &mut |g| {
                    for (r, chunk) in dy.chunks(w).enumerate() {
                        for (c, d) in chunk.iter().enumerate() {
                            g[r * n + start + c] += d;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let n = rows_cols(&node.shape).1;
                acc(*a, &mut |g| {
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            g[i * n + c] += dy[k * n + c];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = rows_cols(&nodes[a.0].shape);
                acc(*a, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)),
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.data;
                let n = rows_cols(&node.shape).1;
                acc(*a, &mut |g| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = dy[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            g[j] += (dy[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participates in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `target`'s grad slot; zeros when `v`
    /// did not influence the loss.
    pub fn write_grad(&self, v: Var, target: &mut DArray) -> Result<()> {
        let g = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; target.len()]);
        target.set_grad(g)
    }
}
