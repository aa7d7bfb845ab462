//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tensor`] is a
//! cheap handle into the tape. Node ids grow monotonically and parents
//! always precede children, so walking ids in reverse is a valid reverse
//! topological order. All data is 64-bit floats in row-major layout and
//! every reduction uses a fixed summation order, which makes forward and
//! backward bitwise reproducible.
//!
//! Tensors are rank 0 (scalar), 1 or 2. A graph is confined to one thread;
//! independent tapes may run concurrently.

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    BroadcastRows(usize),
    Sum(usize),
    Mean(usize),
    SoftmaxLast(usize),
    LayerNormLast(usize),
    Relu(usize),
    Mse(usize, usize),
    RowNorms(usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    /// Caller-supplied key identifying which parameter this leaf mirrors.
    param_key: Option<usize>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Records one forward/backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, cols) view of a rank-0/1/2 shape: scalars are 1x1, vectors 1xm.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("rank > 2 is never constructed"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, param_key: Option<usize>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            param_key,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// A constant or input leaf.
    pub fn leaf(&self, data: &[f64], shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(shape.to_vec(), data.to_vec(), Op::Leaf, None)
    }

    /// A leaf tagged with a parameter key so its gradient can be collected
    /// after `backward` via [`Tape::param_grads`].
    pub fn param_leaf(&self, data: &[f64], shape: &[usize], key: usize) -> Tensor {
        assert_eq!(numel(shape), data.len());
        self.push(shape.to_vec(), data.to_vec(), Op::Leaf, Some(key))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![], vec![v], Op::Leaf, None)
    }

    /// Gradients of all keyed leaves, in leaf creation order. Leaves whose
    /// gradient was never touched report zeros.
    pub fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .filter_map(|n| {
                n.param_key.map(|k| {
                    let g = n
                        .grad
                        .clone()
                        .unwrap_or_else(|| vec![0.0; n.data.len()]);
                    (k, g)
                })
            })
            .collect()
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    /// A constant leaf on this tensor's tape.
    pub fn tape_leaf(&self, data: &[f64], shape: &[usize]) -> Tensor {
        self.tape.leaf(data, shape)
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Scalar value; panics if not rank 0.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        assert!(n.shape.is_empty(), "item() on non-scalar {:?}", n.shape);
        n.data[0]
    }

    /// Gradient accumulated so far (zeros if backward never reached it).
    pub fn grad(&self) -> Vec<f64> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        n.grad.clone().unwrap_or_else(|| vec![0.0; n.data.len()])
    }

    fn with<B>(&self, f: impl FnOnce(&Node) -> B) -> B {
        f(&self.tape.inner.borrow().nodes[self.id])
    }

    fn binary_same_shape(&self, other: &Tensor, op_name: &'static str) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: "operands live on different tapes".into(),
            });
        }
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: format!("{a:?} vs {b:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "add")?;
        let data = self.with(|a| other.with(|b| a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()));
        Ok(self.tape.push(self.shape(), data, Op::Add(self.id, other.id), None))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "sub")?;
        let data = self.with(|a| other.with(|b| a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect()));
        Ok(self.tape.push(self.shape(), data, Op::Sub(self.id, other.id), None))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "mul")?;
        let data = self.with(|a| other.with(|b| a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect()));
        Ok(self.tape.push(self.shape(), data, Op::Mul(self.id, other.id), None))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.with(|a| a.data.iter().map(|x| x * s).collect());
        self.tape.push(self.shape(), data, Op::Scale(self.id, s), None)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: "operands live on different tapes".into(),
            });
        }
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = self.with(|a| {
            other.with(|b| {
                let mut c = vec![0.0; n * m];
                matmul_into(&a.data, &b.data, &mut c, n, k, m);
                c
            })
        });
        Ok(self
            .tape
            .push(vec![n, m], data, Op::Matmul(self.id, other.id), None))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("{s:?}"),
            });
        }
        let (n, m) = (s[0], s[1]);
        let data = self.with(|a| transpose_copy(&a.data, n, m));
        Ok(self.tape.push(vec![m, n], data, Op::Transpose(self.id), None))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{start}..{end} of {s:?}"),
            });
        }
        let m = s[1];
        let data = self.with(|a| a.data[start * m..end * m].to_vec());
        Ok(self
            .tape
            .push(vec![end - start, m], data, Op::SliceRows(self.id, start), None))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}..{end} of {s:?}"),
            });
        }
        let (n, m) = (s[0], s[1]);
        let w = end - start;
        let data = self.with(|a| {
            let mut out = vec![0.0; n * w];
            for i in 0..n {
                out[i * w..(i + 1) * w].copy_from_slice(&a.data[i * m + start..i * m + end]);
            }
            out
        });
        Ok(self
            .tape
            .push(vec![n, w], data, Op::SliceCols(self.id, start), None))
    }

    /// Repeats a rank-1 vector as `n` rows.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                detail: format!("{s:?}"),
            });
        }
        let m = s[0];
        let data = self.with(|a| {
            let mut out = Vec::with_capacity(n * m);
            for _ in 0..n {
                out.extend_from_slice(&a.data);
            }
            out
        });
        Ok(self
            .tape
            .push(vec![n, m], data, Op::BroadcastRows(self.id), None))
    }

    /// Sum of all elements (scalar).
    pub fn sum(&self) -> Tensor {
        let v = self.with(|a| a.data.iter().sum::<f64>());
        self.tape.push(vec![], vec![v], Op::Sum(self.id), None)
    }

    /// Mean of all elements (scalar).
    pub fn mean(&self) -> Tensor {
        let v = self.with(|a| a.data.iter().sum::<f64>() / a.data.len() as f64);
        self.tape.push(vec![], vec![v], Op::Mean(self.id), None)
    }

    /// Softmax over the last axis, computed row-wise with max subtraction.
    pub fn softmax_last(&self) -> Tensor {
        let shape = self.shape();
        let (n, m) = rows_cols(&shape);
        let data = self.with(|a| {
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let row = &a.data[i * m..(i + 1) * m];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..m {
                    let e = (row[j] - mx).exp();
                    out[i * m + j] = e;
                    z += e;
                }
                for j in 0..m {
                    out[i * m + j] /= z;
                }
            }
            out
        });
        self.tape.push(shape, data, Op::SoftmaxLast(self.id), None)
    }

    /// Normalizes each row to zero mean and unit variance (epsilon 1e-5).
    /// Affine gain/bias, when wanted, are separate mul/add ops.
    pub fn layer_norm_last(&self) -> Tensor {
        let shape = self.shape();
        let (n, m) = rows_cols(&shape);
        let data = self.with(|a| {
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let row = &a.data[i * m..(i + 1) * m];
                let (mu, sd) = row_mean_std(row);
                for j in 0..m {
                    out[i * m + j] = (row[j] - mu) / sd;
                }
            }
            out
        });
        self.tape.push(shape, data, Op::LayerNormLast(self.id), None)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.with(|a| a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect());
        self.tape.push(self.shape(), data, Op::Relu(self.id), None)
    }

    /// Mean squared error over all elements (scalar).
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(target, "mse")?;
        let v = self.with(|a| {
            target.with(|b| {
                let n = a.data.len() as f64;
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    / n
            })
        });
        Ok(self
            .tape
            .push(vec![], vec![v], Op::Mse(self.id, target.id), None))
    }

    /// Euclidean norm of each row of a rank-2 tensor, as a rank-1 vector.
    pub fn row_norms(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_norms",
                detail: format!("{s:?}"),
            });
        }
        let (n, m) = (s[0], s[1]);
        let data = self.with(|a| {
            (0..n)
                .map(|i| a.data[i * m..(i + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        });
        Ok(self.tape.push(vec![n], data, Op::RowNorms(self.id), None))
    }
}

/// Concatenates rank-2 tensors along axis 0.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let tape = parts[0].tape.clone();
    let m = parts[0].shape()[1];
    let mut n = 0;
    let mut data = Vec::new();
    let mut ids = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != 2 || s[1] != m || !tape.same_tape(&p.tape) {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: format!("part {s:?}, expected [_, {m}] on one tape"),
            });
        }
        n += s[0];
        data.extend(p.value());
        ids.push(p.id);
    }
    Ok(tape.push(vec![n, m], data, Op::ConcatRows(ids), None))
}

/// Concatenates rank-2 tensors along axis 1 (via transpose round-trip).
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let transposed: Result<Vec<Tensor>> = parts.iter().map(|p| p.transpose()).collect();
    concat_rows(&transposed?)?.transpose()
}

fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn transpose_copy(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

fn row_mean_std(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mu = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
    (mu, (var + LAYER_NORM_EPS).sqrt())
}

/// Propagates gradients from a scalar loss to every reachable node.
/// Gradients accumulate additively across repeated calls.
pub fn backward(loss: &Tensor) -> Result<()> {
    {
        let inner = loss.tape.inner.borrow();
        let shape = &inner.nodes[loss.id].shape;
        if !shape.is_empty() {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
    }
    let mut inner = loss.tape.inner.borrow_mut();
    let nodes = &inner.nodes;

    // Propagate through a per-call buffer, then fold into the persistent
    // grads, so repeated backward calls accumulate additively.
    let mut pass: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
    pass[loss.id] = Some(vec![1.0]);

    for id in (0..=loss.id).rev() {
        let Some(gout) = pass[id].clone() else {
            continue;
        };
        let op = nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(&mut pass, a, &gout);
                acc(&mut pass, b, &gout);
            }
            Op::Sub(a, b) => {
                acc(&mut pass, a, &gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                acc(&mut pass, b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = gout.iter().zip(&nodes[b].data).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gout.iter().zip(&nodes[a].data).map(|(g, x)| g * x).collect();
                acc(&mut pass, a, &ga);
                acc(&mut pass, b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = gout.iter().map(|g| g * s).collect();
                acc(&mut pass, a, &ga);
            }
            Op::Matmul(a, b) => {
                let (n, k) = rows_cols(&nodes[a].shape);
                let m = nodes[b].shape[1];
                // dA = dC * B^T, dB = A^T * dC
                let bt = transpose_copy(&nodes[b].data, k, m);
                let mut ga = vec![0.0; n * k];
                matmul_into(&gout, &bt, &mut ga, n, m, k);
                let at = transpose_copy(&nodes[a].data, n, k);
                let mut gb = vec![0.0; k * m];
                matmul_into(&at, &gout, &mut gb, k, n, m);
                acc(&mut pass, a, &ga);
                acc(&mut pass, b, &gb);
            }
            Op::Transpose(a) => {
                let (n, m) = rows_cols(&nodes[a].shape);
                let ga = transpose_copy(&gout, m, n);
                acc(&mut pass, a, &ga);
            }
            Op::ConcatRows(parts) => {
                let m = nodes[id].shape[1];
                let mut offset = 0;
                for p in parts {
                    let rows = nodes[p].shape[0];
                    let gp = gout[offset * m..(offset + rows) * m].to_vec();
                    acc(&mut pass, p, &gp);
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let m = nodes[a].shape[1];
                let rows = nodes[id].shape[0];
                let mut ga = vec![0.0; nodes[a].data.len()];
                ga[start * m..(start + rows) * m].copy_from_slice(&gout);
                acc(&mut pass, a, &ga);
            }
            Op::SliceCols(a, start) => {
                let (n, m) = rows_cols(&nodes[a].shape);
                let w = nodes[id].shape[1];
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    ga[i * m + start..i * m + start + w]
                        .copy_from_slice(&gout[i * w..(i + 1) * w]);
                }
                acc(&mut pass, a, &ga);
            }
            Op::BroadcastRows(a) => {
                let m = nodes[a].shape[0];
                let n = nodes[id].shape[0];
                let mut ga = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        ga[j] += gout[i * m + j];
                    }
                }
                acc(&mut pass, a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![gout[0]; nodes[a].data.len()];
                acc(&mut pass, a, &ga);
            }
            Op::Mean(a) => {
                let n = nodes[a].data.len() as f64;
                let ga = vec![gout[0] / n; nodes[a].data.len()];
                acc(&mut pass, a, &ga);
            }
            Op::SoftmaxLast(a) => {
                let (n, m) = rows_cols(&nodes[id].shape);
                let s = &nodes[id].data;
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    let srow = &s[i * m..(i + 1) * m];
                    let grow = &gout[i * m..(i + 1) * m];
                    let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                    for j in 0..m {
                        ga[i * m + j] = srow[j] * (grow[j] - dot);
                    }
                }
                acc(&mut pass, a, &ga);
            }
            Op::LayerNormLast(a) => {
                let (n, m) = rows_cols(&nodes[a].shape);
                let x = &nodes[a].data;
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    let row = &x[i * m..(i + 1) * m];
                    let grow = &gout[i * m..(i + 1) * m];
                    let (mu, sd) = row_mean_std(row);
                    let inv = 1.0 / sd;
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let gmean = grow.iter().sum::<f64>() / m as f64;
                    let gxhat_mean =
                        grow.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / m as f64;
                    for j in 0..m {
                        ga[i * m + j] = inv * (grow[j] - gmean - xhat[j] * gxhat_mean);
                    }
                }
                acc(&mut pass, a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = nodes[a]
                    .data
                    .iter()
                    .zip(&gout)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                acc(&mut pass, a, &ga);
            }
            Op::Mse(a, b) => {
                let n = nodes[a].data.len() as f64;
                let scale = 2.0 * gout[0] / n;
                let diff: Vec<f64> = nodes[a]
                    .data
                    .iter()
                    .zip(&nodes[b].data)
                    .map(|(x, y)| x - y)
                    .collect();
                let ga: Vec<f64> = diff.iter().map(|d| scale * d).collect();
                let gb: Vec<f64> = diff.iter().map(|d| -scale * d).collect();
                acc(&mut pass, a, &ga);
                acc(&mut pass, b, &gb);
            }
            Op::RowNorms(a) => {
                let (n, m) = rows_cols(&nodes[a].shape);
                let norms = &nodes[id].data;
                let x = &nodes[a].data;
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    // Subgradient 0 at the origin kink.
                    if norms[i] > 0.0 {
                        let s = gout[i] / norms[i];
                        for j in 0..m {
                            ga[i * m + j] = s * x[i * m + j];
                        }
                    }
                }
                acc(&mut pass, a, &ga);
            }
        }
    }

    let nodes = &mut inner.nodes;
    for (id, g) in pass.into_iter().enumerate() {
        if let Some(g) = g {
            let node = &mut nodes[id];
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (dst, src) in grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
    }
    Ok(())
}

fn acc(pass: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let slot = pass[id].get_or_insert_with(|| vec![0.0; g.len()]);
    debug_assert_eq!(slot.len(), g.len());
    for (dst, src) in slot.iter_mut().zip(g) {
        *dst += src;
    }
}

/// Relative error used by all gradient checks:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Central finite differences of a scalar closure, h = 1e-5.
pub fn finite_diff(value: impl Fn(&[f64]) -> f64, point: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    let mut p = point.to_vec();
    let mut grad = vec![0.0; point.len()];
    for i in 0..point.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = value(&p);
        p[i] = orig - h;
        let fm = value(&p);
        p[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Compares a provided analytic gradient against central finite differences
/// of `value` at `point`; returns the max relative error over coordinates.
pub fn grad_check_fn(value: impl Fn(&[f64]) -> f64, analytic: &[f64], point: &[f64]) -> f64 {
    let numeric = finite_diff(value, point);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Gradient check of a tape-built scalar function of one tensor input.
/// Returns the max relative error against central finite differences.
pub fn grad_check<F>(f: F, point: &[f64], shape: &[usize]) -> Result<f64>
where
    F: Fn(&Tape, Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let x = tape.param_leaf(point, shape, 0);
    let loss = f(&tape, x.clone())?;
    backward(&loss)?;
    let analytic = x.grad();
    let eval = |p: &[f64]| -> f64 {
        let t = Tape::new();
        let x = t.leaf(p, shape);
        f(&t, x).expect("grad_check forward failed").item()
    };
    Ok(grad_check_fn(eval, &analytic, point))
}
