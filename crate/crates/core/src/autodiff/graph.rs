use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(width: usize) -> Self {
        BnState {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's moments into the running statistics. The running
    /// variance tracks the unbiased (n-1) batch variance.
    pub fn update(&mut self, moments: &BatchMoments) {
        let m = self.momentum;
        let n = moments.count as f64;
        let correction = if moments.count > 1 { n / (n - 1.0) } else { 1.0 };
        for j in 0..self.width() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * moments.mean[j];
            self.running_var[j] =
                (1.0 - m) * self.running_var[j] + m * moments.var[j] * correction;
        }
    }
}

/// Batch mean and biased variance observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    Exp,
    Log,
    Sqrt,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LogSoftmax(Var),
    PairwiseDistances(Var),
    UCenter(Var),
    SelectRows(Var, Vec<usize>),
    PickColumns(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A dynamically built reverse-mode differentiation graph.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order. Calling [`Graph::backward`] more than once without
/// [`Graph::zero_grad`] adds into the stored leaf gradients: the second call
/// on the same loss leaves exactly twice the first call's gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    validate: bool,
}

fn is_scalar_shape(t: &Tensor) -> bool {
    t.len() == 1
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph that rejects any node whose value contains NaN or infinity.
    pub fn with_validation() -> Self {
        Graph {
            validate: true,
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        if self.validate && !value.all_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input (parameter or data that needs a gradient).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "leaf")
            .unwrap_or_else(|_| panic!("leaf value is not finite"))
    }

    /// Fallible variant of [`Graph::leaf`] for validating graphs.
    pub fn try_leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::raw(ta.shape().to_vec(), data)
        } else if is_scalar_shape(tb) {
            let s = tb.item();
            ta.map(|x| f(x, s))
        } else if is_scalar_shape(ta) {
            let s = ta.item();
            tb.map(|y| f(s, y))
        } else {
            return Err(Error::dim(format!(
                "{kind:?}: shapes {:?} and {:?} do not broadcast",
                ta.shape(),
                tb.shape()
            )));
        };
        self.push(value, Op::Binary(kind, a, b), "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x (n×m) + bias (m)` added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (n, m) = tx.expect_matrix("add_row")?;
        if tb.len() != m {
            return Err(Error::dim(format!(
                "add_row: bias has {} entries for width {m}",
                tb.len()
            )));
        }
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for (o, b) in data[i * m..(i + 1) * m].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(Tensor::raw(vec![n, m], data), Op::AddRow(x, bias), "add_row")
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = match kind {
            Unary::Relu => tx.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Exp => tx.map(f64::exp),
            Unary::Log => {
                if let Some(v) = tx.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain(format!("log of negative value {v}")));
                }
                tx.map(f64::ln)
            }
            Unary::Sqrt => {
                if let Some(v) = tx.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain(format!("sqrt of negative value {v}")));
                }
                tx.map(f64::sqrt)
            }
            Unary::Scale(c) => tx.map(|v| v * c),
        };
        self.push(value, Op::Unary(kind, x), "unary")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    /// Sum of all entries, accumulated in index order.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = tensor::inner(self.value(x).data(), &vec![1.0; self.value(x).len()]);
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean of empty tensor"));
        }
        let s = tensor::inner(t.data(), &vec![1.0; t.len()]) / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Concatenates n×·  matrices along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let n = self.value(parts[0]).expect_matrix("concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat")?;
            if r != n {
                return Err(Error::dim(format!(
                    "concat: batch dimension {r} differs from {n}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::raw(vec![n, total], data),
            Op::Concat(parts.to_vec()),
            "concat",
        )
    }

    /// Batch normalization over the rows of `x`.
    ///
    /// Train mode normalizes with the batch mean and biased variance and
    /// returns the observed moments; the caller decides whether to fold them
    /// into `state`. Eval mode uses `state`'s running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BnState,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let tx = self.value(x);
        let (n, m) = tx.expect_matrix("batch_norm")?;
        if self.value(gamma).len() != m || self.value(beta).len() != m || state.width() != m {
            return Err(Error::dim(format!(
                "batch_norm: affine/state widths do not match input width {m}"
            )));
        }
        let (mean, var, moments) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![0.0; m];
                for i in 0..n {
                    for (mu, v) in mean.iter_mut().zip(tx.row(i)) {
                        *mu += v;
                    }
                }
                mean.iter_mut().for_each(|mu| *mu /= n as f64);
                let mut var = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let d = tx.get(i, j) - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, Some(moments))
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * m];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let h = (tx.get(i, j) - mean[j]) * inv_std[j];
                xhat[i * m + j] = h;
                out[i * m + j] = g[j] * h + b[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        let v = self.push(Tensor::raw(vec![n, m], out), op, "batch_norm")?;
        Ok((v, moments))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, k) = tx.expect_matrix("log_softmax")?;
        if k < 2 {
            return Err(Error::dim("log_softmax needs at least 2 columns"));
        }
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = tx.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                out[i * k + j] = row[j] - lse;
            }
        }
        self.push(Tensor::raw(vec![n, k], out), Op::LogSoftmax(x), "log_softmax")
    }

    /// n×n matrix of Euclidean distances between the rows of `x`.
    pub fn pairwise_distances(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = tx.expect_matrix("pairwise_distances")?;
        if n < 2 {
            return Err(Error::dim("pairwise_distances needs at least 2 rows"));
        }
        let d = tensor::distance_matrix(tx.data(), n, m);
        self.push(
            Tensor::raw(vec![n, n], d),
            Op::PairwiseDistances(x),
            "pairwise_distances",
        )
    }

    /// U-centering of a square matrix (see [`tensor::u_center_in_place`]).
    pub fn u_center(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = ta.expect_matrix("u_center")?;
        if n != m || n < 3 {
            return Err(Error::dim(format!("u_center needs a square n≥3 matrix, got {n}x{m}")));
        }
        let mut data = ta.data().to_vec();
        tensor::u_center_in_place(&mut data, n);
        self.push(Tensor::raw(vec![n, n], data), Op::UCenter(a), "u_center")
    }

    /// Rows of `x` at `idx`, in that order.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = tx.expect_matrix("select_rows")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("select_rows: row {bad} out of {n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        self.push(
            Tensor::raw(vec![idx.len(), m], data),
            Op::SelectRows(x, idx.to_vec()),
            "select_rows",
        )
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = tx.expect_matrix("pick_columns")?;
        if cols.len() != n {
            return Err(Error::dim(format!(
                "pick_columns: {} indices for {n} rows",
                cols.len()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for (i, &c) in cols.iter().enumerate() {
            if c >= m {
                return Err(Error::dim(format!("pick_columns: column {c} out of {m}")));
            }
            data.push(tx.get(i, c));
        }
        self.push(
            Tensor::vector(data),
            Op::PickColumns(x, cols.to_vec()),
            "pick_columns",
        )
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    match &mut self.grads[idx] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].needs_grad {
                        let ga = tensor::matmul(&g, &self.value(b).transpose())?;
                        accumulate(&mut adj, a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = tensor::matmul(&self.value(a).transpose(), &g)?;
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (kind, a, b) = (*kind, *a, *b);
                    let (ta, tb) = (self.value(a), self.value(b));
                    let out_shape = g.shape().to_vec();
                    // Local derivative of each operand, expanded to the output shape.
                    let at = |t: &Tensor, i: usize| if t.len() == 1 { t.item() } else { t.data()[i] };
                    let n = g.len();
                    let (mut da, mut db) = (vec![0.0; n], vec![0.0; n]);
                    for i in 0..n {
                        let gi = g.data()[i];
                        match kind {
                            Binary::Add => {
                                da[i] = gi;
                                db[i] = gi;
                            }
                            Binary::Sub => {
                                da[i] = gi;
                                db[i] = -gi;
                            }
                            Binary::Mul => {
                                da[i] = gi * at(tb, i);
                                db[i] = gi * at(ta, i);
                            }
                        }
                    }
                    let reduce = |t: &Tensor, d: Vec<f64>| {
                        if t.shape() == out_shape.as_slice() {
                            Tensor::raw(out_shape.clone(), d)
                        } else {
                            Tensor::raw(t.shape().to_vec(), vec![tensor::inner(&d, &vec![1.0; d.len()])])
                        }
                    };
                    let ga = reduce(ta, da);
                    let gb = reduce(tb, db);
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::AddRow(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let m = self.value(bias).len();
                    if self.nodes[bias.0].needs_grad {
                        let mut gb = vec![0.0; m];
                        for i in 0..g.rows() {
                            for (o, v) in gb.iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        let shape = self.value(bias).shape().to_vec();
                        accumulate(&mut adj, bias, Tensor::raw(shape, gb));
                    }
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut adj, x, g);
                    }
                }
                Op::Unary(kind, x) => {
                    let (kind, x) = (*kind, *x);
                    let tx = self.value(x);
                    let out = &node.value;
                    let data: Vec<f64> = (0..g.len())
                        .map(|i| {
                            let gi = g.data()[i];
                            match kind {
                                Unary::Relu => {
                                    if tx.data()[i] > 0.0 {
                                        gi
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Exp => gi * out.data()[i],
                                Unary::Log => gi / tx.data()[i],
                                Unary::Sqrt => gi * 0.5 / out.data()[i],
                                Unary::Scale(c) => gi * c,
                            }
                        })
                        .collect();
                    accumulate(&mut adj, x, Tensor::raw(tx.shape().to_vec(), data));
                }
                Op::Sum(x) => {
                    let x = *x;
                    let t = Tensor::filled(self.value(x).shape(), g.item());
                    accumulate(&mut adj, x, t);
                }
                Op::Mean(x) => {
                    let x = *x;
                    let len = self.value(x).len() as f64;
                    let t = Tensor::filled(self.value(x).shape(), g.item() / len);
                    accumulate(&mut adj, x, t);
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let n = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(p).cols();
                        if self.nodes[p.0].needs_grad {
                            let mut data = Vec::with_capacity(n * w);
                            for i in 0..n {
                                data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut adj, p, Tensor::raw(vec![n, w], data));
                        }
                        offset += w;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                    let (n, m) = (g.rows(), g.cols());
                    let gam = self.value(gamma).data();
                    let mut dgamma = vec![0.0; m];
                    let mut dbeta = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            let gi = g.data()[i * m + j];
                            dbeta[j] += gi;
                            dgamma[j] += gi * xhat[i * m + j];
                        }
                    }
                    let mut dx = vec![0.0; n * m];
                    if train {
                        // dx = inv_std/n * (n*dxhat - Σ dxhat - xhat * Σ dxhat*xhat)
                        let nf = n as f64;
                        for j in 0..m {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for i in 0..n {
                                let dh = g.data()[i * m + j] * gam[j];
                                s1 += dh;
                                s2 += dh * xhat[i * m + j];
                            }
                            for i in 0..n {
                                let dh = g.data()[i * m + j] * gam[j];
                                dx[i * m + j] =
                                    inv_std[j] / nf * (nf * dh - s1 - xhat[i * m + j] * s2);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..m {
                                dx[i * m + j] = g.data()[i * m + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    let gshape = self.value(gamma).shape().to_vec();
                    let bshape = self.value(beta).shape().to_vec();
                    if self.nodes[gamma.0].needs_grad {
                        accumulate(&mut adj, gamma, Tensor::raw(gshape, dgamma));
                    }
                    if self.nodes[beta.0].needs_grad {
                        accumulate(&mut adj, beta, Tensor::raw(bshape, dbeta));
                    }
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut adj, x, Tensor::raw(vec![n, m], dx));
                    }
                }
                Op::LogSoftmax(x) => {
                    let x = *x;
                    let (n, k) = (g.rows(), g.cols());
                    let out = &node.value;
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        let gs: f64 = g.row(i).iter().sum();
                        for j in 0..k {
                            dx[i * k + j] = g.data()[i * k + j] - out.data()[i * k + j].exp() * gs;
                        }
                    }
                    accumulate(&mut adj, x, Tensor::raw(vec![n, k], dx));
                }
                Op::PairwiseDistances(x) => {
                    let x = *x;
                    let tx = self.value(x);
                    let (n, m) = (tx.rows(), tx.cols());
                    let d = node.value.data();
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..n {
                            let dij = d[i * n + j];
                            if i == j || dij == 0.0 {
                                continue;
                            }
                            let w = (g.data()[i * n + j] + g.data()[j * n + i]) / dij;
                            if j > i {
                                for c in 0..m {
                                    let diff = tx.data()[i * m + c] - tx.data()[j * m + c];
                                    dx[i * m + c] += w * diff;
                                    dx[j * m + c] -= w * diff;
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, x, Tensor::raw(vec![n, m], dx));
                }
                Op::UCenter(a) => {
                    let a = *a;
                    let n = g.rows();
                    let mut gm = g.into_data();
                    for i in 0..n {
                        gm[i * n + i] = 0.0;
                    }
                    let mut row = vec![0.0; n];
                    let mut col = vec![0.0; n];
                    let mut total = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            let v = gm[i * n + j];
                            row[i] += v;
                            col[j] += v;
                            total += v;
                        }
                    }
                    let nf = n as f64;
                    let c1 = 1.0 / (nf - 2.0);
                    let c2 = total / ((nf - 1.0) * (nf - 2.0));
                    // the forward pass never reads the diagonal
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                gm[i * n + j] += -row[i] * c1 - col[j] * c1 + c2;
                            }
                        }
                    }
                    accumulate(&mut adj, a, Tensor::raw(vec![n, n], gm));
                }
                Op::SelectRows(x, idx) => {
                    let x = *x;
                    let tx = self.value(x);
                    let (n, m) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; n * m];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..m {
                            dx[i * m + c] += g.data()[r * m + c];
                        }
                    }
                    accumulate(&mut adj, x, Tensor::raw(vec![n, m], dx));
                }
                Op::PickColumns(x, cols) => {
                    let x = *x;
                    let tx = self.value(x);
                    let (n, m) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; n * m];
                    for (i, &c) in cols.iter().enumerate() {
                        dx[i * m + c] += g.data()[i];
                    }
                    accumulate(&mut adj, x, Tensor::raw(vec![n, m], dx));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) => vec![*a, *b],
        Op::Unary(_, x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::LogSoftmax(x)
        | Op::PairwiseDistances(x)
        | Op::UCenter(x)
        | Op::SelectRows(x, _)
        | Op::PickColumns(x, _) => vec![*x],
        Op::Concat(parts) => parts.clone(),
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
    }
}
