use super::tensor::{matmul_raw, transpose_raw};
use super::{Tensor, TensorError};

/// Norms below this are treated as this value by `l2_normalize`.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L2Normalize(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    Sign,
    Clamp(Var, f64, f64),
    Pick(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Dynamic record of primitive applications.
///
/// Nodes are appended in evaluation order, so replaying them from the last
/// index down is a reverse topological order. Leaf gradients accumulate
/// across calls to [`Tape::backward`] until [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Domain {
            op,
            detail: "non-finite output".to_string(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Resets accumulated leaf gradients, keeping the recorded graph.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf; zeros for constants or unreachable leaves.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone())
                .expect("gradient shape tracks value shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(TensorError::InvalidShape {
                shape: ta.shape().to_vec(),
                len: ta.numel(),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let value = Tensor::new(vec![n, m], transpose_raw(ta.data(), m, n))?;
        Ok(self.push_derived(value, Op::Transpose(a), &[a]))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_derived(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.rank() != 2 || tr.rank() != 1 || tr.numel() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_derived(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push_derived(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push_derived(value, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_derived(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(f64::exp);
        check_finite("exp", &value)?;
        Ok(self.push_derived(value, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(f64::ln);
        check_finite("log", &value)?;
        Ok(self.push_derived(value, Op::Log(a), &[a]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_derived(value, Op::Sum(a), &[a])
    }

    /// Mean of all entries; an empty input yields 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel();
        let m = if n == 0 { 0.0 } else { t.sum() / n as f64 };
        self.push_derived(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sums over the last axis: `[m, n] -> [m]`, `[n] -> []`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let value = match t.rank() {
            1 => Tensor::scalar(t.sum()),
            2 => {
                let n = t.cols();
                let m = t.shape()[0];
                let data = (0..m).map(|i| t.data()[i * n..(i + 1) * n].iter().sum()).collect();
                Tensor::vector(data)
            }
            _ => {
                return Err(TensorError::InvalidShape {
                    shape: t.shape().to_vec(),
                    len: t.numel(),
                })
            }
        };
        Ok(self.push_derived(value, Op::SumLast(a), &[a]))
    }

    fn row_count(t: &Tensor) -> (usize, usize) {
        let n = t.cols();
        let m = if n == 0 { 0 } else { t.numel() / n };
        (m, n)
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = Self::row_count(t);
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            for x in row.iter_mut() {
                *x /= norm;
            }
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push_derived(value, Op::L2Normalize(a, norms), &[a])
    }

    fn softmax_rows(t: &Tensor, log: bool) -> Tensor {
        let (m, n) = Self::row_count(t);
        let mut data = t.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x = if log { *x - lse } else { (*x - lse).exp() };
            }
        }
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Self::softmax_rows(self.value(a), false);
        check_finite("softmax", &value)?;
        Ok(self.push_derived(value, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Self::softmax_rows(self.value(a), true);
        check_finite("log_softmax", &value)?;
        Ok(self.push_derived(value, Op::LogSoftmax(a), &[a]))
    }

    /// Row-wise cosine similarity matrix `[m, n]` between two point sets.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let na = self.l2_normalize(a);
        let nb = self.l2_normalize(b);
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// Elementwise sign with `sign(0) = 0`; zero gradient everywhere.
    pub fn sign(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sign);
        self.push_derived(value, Op::Sign, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_derived(value, Op::Clamp(a, lo, hi), &[a])
    }

    /// Picks one entry per row: `out[i] = a[i, cols[i]]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (m, n) = Self::row_count(t);
        if t.rank() != 2 || cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                left: t.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let data = cols.iter().enumerate().map(|(i, &c)| t.data()[i * n + c]).collect();
        Ok(self.push_derived(Tensor::vector(data), Op::Pick(a, cols.to_vec()), &[a]))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rank() != 2 || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                left: t.shape().to_vec(),
                right: vec![rows.len()],
            });
        }
        let value = t.select_rows(rows);
        Ok(self.push_derived(value, Op::SelectRows(a, rows.to_vec()), &[a]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).concat_rows(self.value(b))?;
        Ok(self.push_derived(value, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Reverse pass from a one-element output.
    ///
    /// Adds `d loss / d leaf` into each reachable leaf's gradient slot. Calling
    /// it twice without [`Tape::zero_grad`] accumulates both contributions.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    let slot = self.grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.nodes[a.0].needs_grad {
                        let bt = transpose_raw(tb.data(), k, n);
                        let ga = matmul_raw(&g, &bt, m, n, k);
                        accumulate(&mut adj, *a, &ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = transpose_raw(ta.data(), m, k);
                        let gb = matmul_raw(&at, &g, k, m, n);
                        accumulate(&mut adj, *b, &gb);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let ga = transpose_raw(&g, r, c);
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut adj, *a, &g);
                    let n = out.cols();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n.max(1)) {
                        for (s, v) in gr.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    accumulate(&mut adj, *row, &gr);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut adj, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ta = self.nodes[a.0].value.data();
                    let tb = self.nodes[b.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(tb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(ta).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut adj, *a, &ga);
                }
                Op::AddScalar(a) => accumulate(&mut adj, *a, &g),
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    let ga: Vec<f64> =
                        g.iter().zip(x).map(|(v, &xi)| if xi > 0.0 { *v } else { 0.0 }).collect();
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(out.data()).map(|(v, y)| v * y).collect();
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Log(a) => {
                    let x = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(v, xi)| v / xi).collect();
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    accumulate(&mut adj, *a, &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.numel();
                    if n > 0 {
                        accumulate(&mut adj, *a, &vec![g[0] / n as f64; n]);
                    }
                }
                Op::SumLast(a) => {
                    let ta = &self.nodes[a.0].value;
                    let n = ta.cols();
                    let mut ga = vec![0.0; ta.numel()];
                    for (i, chunk) in ga.chunks_mut(n.max(1)).enumerate() {
                        chunk.fill(g[i]);
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::L2Normalize(a, norms) => {
                    let n = out.cols();
                    let y = out.data();
                    let mut ga = vec![0.0; y.len()];
                    for (i, &norm) in norms.iter().enumerate() {
                        let r = i * n..(i + 1) * n;
                        let yr = &y[r.clone()];
                        let gr = &g[r.clone()];
                        if norm <= NORM_FLOOR {
                            for (o, gv) in ga[r].iter_mut().zip(gr) {
                                *o = gv / norm;
                            }
                            continue;
                        }
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in ga[r].iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Softmax(a) => {
                    let n = out.cols();
                    let y = out.data();
                    let mut ga = vec![0.0; y.len()];
                    for (i, chunk) in ga.chunks_mut(n.max(1)).enumerate() {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in chunk.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let n = out.cols();
                    let y = out.data();
                    let mut ga = vec![0.0; y.len()];
                    for (i, chunk) in ga.chunks_mut(n.max(1)).enumerate() {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for ((o, gv), yv) in chunk.iter_mut().zip(gr).zip(yr) {
                            *o = gv - yv.exp() * gsum;
                        }
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Sign => {}
                Op::Clamp(a, lo, hi) => {
                    let x = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(v, &xi)| if xi > *lo && xi < *hi { *v } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Pick(a, cols) => {
                    let ta = &self.nodes[a.0].value;
                    let n = ta.cols();
                    let mut ga = vec![0.0; ta.numel()];
                    for (i, &c) in cols.iter().enumerate() {
                        ga[i * n + c] += g[i];
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::SelectRows(a, rows) => {
                    let ta = &self.nodes[a.0].value;
                    let n = ta.cols();
                    let mut ga = vec![0.0; ta.numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[i * n + j];
                        }
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.nodes[a.0].value.numel();
                    accumulate(&mut adj, *a, &g[..split]);
                    accumulate(&mut adj, *b, &g[split..]);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(slot) => {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
