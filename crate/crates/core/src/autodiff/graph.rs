//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is already a
//! topological order and `backward` walks it in reverse. Leaves keep a
//! persistent gradient buffer; interior gradients live only for the duration of
//! one backward pass, which is what makes repeated `backward` calls accumulate
//! exactly once per call.

use std::collections::HashMap;

use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    bindings: Vec<(ParamId, Var)>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Frozen parameters enter as
    /// constants. Binding the same parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value().clone(), Op::Leaf, !p.is_frozen());
        self.params.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    pub(crate) fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(a) || self.needs(b);
        self.push(value, op, rg)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "{what}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner widths {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// Adds a row vector `b` (width `n`) to every row of matrix `a` (`[m, n]`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_row")?;
        let bv = self.value(b);
        if bv.len() != n {
            return Err(Error::dim(format!(
                "add_row: row vector has {} entries, matrix has width {n}",
                bv.len()
            )));
        }
        let mut out = self.value(a).data().to_vec();
        let bd = bv.data();
        for i in 0..m {
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(bd) {
                *o += x;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.binary(a, b, value, Op::AddRow(a, b)))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_same(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.unary(a, value, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.unary(a, value, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(logistic);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(a, value, Op::LeakyRelu(a, slope))
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.unary(a, value, Op::ClampMin(a, floor))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(v.cols()) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.unary(a, value, Op::Softmax(a))
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(v.cols()) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.unary(a, value, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.unary(a, value, Op::Mean(a))
    }

    /// Sums each row of a matrix, giving a vector of length `rows`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "sum_cols")?;
        let d = self.value(a).data();
        let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(self.unary(a, Tensor::vector(out), Op::SumCols(a)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.matrix_dims(a, "concat_cols lhs")?;
        let (m2, nb) = self.matrix_dims(b, "concat_cols rhs")?;
        if m != m2 {
            return Err(Error::dim(format!(
                "concat_cols: row counts {m} and {m2} differ"
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&da[i * na..(i + 1) * na]);
            out.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let value = Tensor::matrix(m, na + nb, out)?;
        Ok(self.binary(a, b, value, Op::ConcatCols(a, b)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::dim(format!(
                "slice_cols: range {start}..{end} invalid for width {n}"
            )));
        }
        let d = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + end]);
        }
        let value = Tensor::matrix(m, w, out)?;
        Ok(self.unary(a, value, Op::SliceCols(a, start)))
    }

    /// Weighted sum `Σ c_i · v_i` of same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, c) in terms {
            let t = self.scale(v, c);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::contract("weighted_sum of no terms"))
    }

    /// Propagates `d loss / d leaf` into every reachable leaf that requires a
    /// gradient, adding to whatever those leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = self.nodes[idx].value.shape().to_vec();
                match &mut self.nodes[idx].grad {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.cols();
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), val(b), (1, n), &mut da, false);
                    send(grads, a, da);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(a), (1, k), g, (n, 1), &mut db, false);
                    send(grads, b, db);
                }
            }
            Op::AddRow(a, b) => {
                let n = self.nodes[b.0].value.len();
                if self.needs(b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    send(grads, b, db);
                }
                send(grads, a, g.to_vec());
            }
            Op::Add(a, b) => {
                send(grads, a, g.to_vec());
                send(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(grads, a, g.to_vec());
                send(grads, b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    send(grads, a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                }
                if self.needs(b) {
                    send(grads, b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => send(grads, a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => send(grads, a, g.to_vec()),
            Op::Exp(a) => send(grads, a, g.iter().zip(out).map(|(x, y)| x * y).collect()),
            Op::Log(a) => send(grads, a, g.iter().zip(val(a)).map(|(x, y)| x / y).collect()),
            Op::Square(a) => send(
                grads,
                a,
                g.iter().zip(val(a)).map(|(x, y)| 2.0 * x * y).collect(),
            ),
            Op::Abs(a) => send(
                grads,
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(x, y)| {
                        if *y > 0.0 {
                            *x
                        } else if *y < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Tanh(a) => send(
                grads,
                a,
                g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect(),
            ),
            Op::Sigmoid(a) => send(
                grads,
                a,
                g.iter().zip(out).map(|(x, y)| x * y * (1.0 - y)).collect(),
            ),
            Op::LeakyRelu(a, slope) => send(
                grads,
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(x, y)| if *y > 0.0 { *x } else { slope * x })
                    .collect(),
            ),
            Op::ClampMin(a, floor) => send(
                grads,
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(x, y)| if *y > floor { *x } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut da = Vec::with_capacity(g.len());
                for (gr, sr) in g.chunks(n).zip(out.chunks(n)) {
                    let dot: f64 = gr.iter().zip(sr).map(|(x, s)| x * s).sum();
                    da.extend(gr.iter().zip(sr).map(|(x, s)| s * (x - dot)));
                }
                send(grads, a, da);
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let mut da = Vec::with_capacity(g.len());
                for (gr, lr) in g.chunks(n).zip(out.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    da.extend(gr.iter().zip(lr).map(|(x, l)| x - l.exp() * total));
                }
                send(grads, a, da);
            }
            Op::Sum(a) => send(grads, a, vec![g[0]; self.nodes[a.0].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                send(grads, a, vec![g[0] / n as f64; n]);
            }
            Op::SumCols(a) => {
                let n = self.nodes[a.0].value.cols();
                send(
                    grads,
                    a,
                    g.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect(),
                );
            }
            Op::ConcatCols(a, b) => {
                let na = self.nodes[a.0].value.cols();
                let nb = self.nodes[b.0].value.cols();
                let mut da = Vec::new();
                let mut db = Vec::new();
                for row in g.chunks(na + nb) {
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                send(grads, a, da);
                send(grads, b, db);
            }
            Op::SliceCols(a, start) => {
                let n = self.nodes[a.0].value.cols();
                let w = node.value.cols();
                let mut da = vec![0.0; self.nodes[a.0].value.len()];
                for (i, row) in g.chunks(w).enumerate() {
                    da[i * n + start..i * n + start + w].copy_from_slice(row);
                }
                send(grads, a, da);
            }
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with explicit
/// (row, column) strides for `a` and `b` so transposes need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are at least as long as the strided extents asserted above,
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Logistic function, split on sign so neither branch overflows.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}
