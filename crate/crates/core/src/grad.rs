//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! Values live on a [`Tape`] and are referred to by copyable [`Var`] handles.
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the recorded nodes in reverse order and accumulates gradients into
//! zero-initialised buffers on each node that requires them.
//!
//! Tensors are row-major and at most two-dimensional. A one-dimensional tensor
//! of width `c` is treated as a `1 x c` matrix wherever a matrix is expected,
//! and scalars have shape `[1]`.

use crate::error::{EcanError, Result};

/// Row norms below this are rejected by [`Tape::l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(EcanError::Dimension(format!(
                "tensors are 1-D or 2-D, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(EcanError::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::vector(vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// Builds an `n x width` matrix from row slices. `width` is needed so that
    /// an empty row list still carries its column count.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != width {
                return Err(EcanError::Dimension(format!(
                    "row {i} has width {}, expected {width}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), width, data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating a zeroed one first if
    /// needed.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(EcanError::Dimension(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.data.len()
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Row and column count, viewing a 1-D tensor as a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => unreachable!("tensor rank is checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(EcanError::Dimension(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Writes the unit-norm version of `row` into `out` and returns the original
/// norm. The bank and the differentiable op share this so stored rows match
/// live ones bit for bit.
pub fn normalize_row(row: &[f64], out: &mut [f64]) -> f64 {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (o, x) in out.iter_mut().zip(row) {
        *o = x / norm;
    }
    norm
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    ColumnMean(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    LogSumExpRows(Var, Option<Vec<bool>>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        };
        self.push(value, op)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape != y.shape {
            return Err(EcanError::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                x.shape, y.shape
            )));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let shape = x.shape.clone();
        let data = x.data.iter().map(|&v| f(v)).collect();
        self.derived(shape, data, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (x.dims(), y.dims());
        if k != k2 {
            return Err(EcanError::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let out = matmul_raw(&x.data, &y.data, m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let shape = x.shape.clone();
        Ok(self.derived(shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let shape = x.shape.clone();
        Ok(self.derived(shape, data, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let shape = x.shape.clone();
        Ok(self.derived(shape, data, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `b` (width `c`) to every row of the `n x c` matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (n, c) = x.dims();
        if y.len() != c {
            return Err(EcanError::Dimension(format!(
                "add_row: row vector of width {} against {n}x{c}",
                y.len()
            )));
        }
        let mut data = x.data.clone();
        for r in 0..n {
            for (o, bias) in data[r * c..(r + 1) * c].iter_mut().zip(&y.data) {
                *o += bias;
            }
        }
        Ok(self.derived(vec![n, c], data, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        Ok(self.elementwise(a, Op::Scale(a, s), |v| v * s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        Ok(self.elementwise(a, Op::Relu(a), |v| v.max(0.0)))
    }

    /// Natural log. Non-positive inputs are a numeric error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
            return Err(EcanError::Numeric(format!("log of {bad}")));
        }
        Ok(self.elementwise(a, Op::Log(a), f64::ln))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.elementwise(a, Op::Exp(a), f64::exp);
        if !self.value(v).all_finite() {
            return Err(EcanError::Numeric("exp overflow".into()));
        }
        Ok(v)
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        Ok(self.elementwise(a, Op::ClampMin(a, floor), |v| v.max(floor)))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.dims();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(EcanError::Index { index: i, len: n });
            }
            data.extend_from_slice(x.row(i));
        }
        Ok(self.derived(
            vec![indices.len(), c],
            data,
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        Ok(self.derived(vec![1], vec![s], Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(EcanError::Dimension("mean of empty tensor".into()));
        }
        let m = x.data.iter().sum::<f64>() / x.len() as f64;
        Ok(self.derived(vec![1], vec![m], Op::Mean(a), &[a]))
    }

    /// Mean over rows: `n x c` to `1 x c`.
    pub fn column_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.dims();
        if n == 0 {
            return Err(EcanError::Dimension("column_mean of zero rows".into()));
        }
        let mut data = vec![0.0; c];
        for r in 0..n {
            for (o, v) in data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.derived(vec![1, c], data, Op::ColumnMean(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.dims();
        let data = transpose_raw(&x.data, n, c);
        Ok(self.derived(vec![c, n], data, Op::Transpose(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.dims();
        let mut data = vec![0.0; n * c];
        for r in 0..n {
            softmax_row(x.row(r), &mut data[r * c..(r + 1) * c]);
        }
        Ok(self.derived(vec![n, c], data, Op::SoftmaxRows(a), &[a]))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.dims();
        let mut data = vec![0.0; n * c];
        for r in 0..n {
            let norm = normalize_row(x.row(r), &mut data[r * c..(r + 1) * c]);
            if !(norm >= MIN_ROW_NORM) {
                return Err(EcanError::DegenerateFeature { row: r, norm });
            }
        }
        Ok(self.derived(vec![n, c], data, Op::L2NormalizeRows(a), &[a]))
    }

    /// Per-row `log(sum(exp(x)))` over the entries where `mask` is true (all
    /// entries when `mask` is `None`). Produces an `n x 1` column. Every row
    /// must keep at least one entry.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.dims();
        if let Some(m) = &mask {
            if m.len() != n * c {
                return Err(EcanError::Dimension(format!(
                    "logsumexp mask of length {} for {n}x{c}",
                    m.len()
                )));
            }
        }
        let keep = |r: usize, j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
        let mut data = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let max = (0..c)
                .filter(|&j| keep(r, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(EcanError::Dimension(format!(
                    "logsumexp row {r} has no unmasked entries"
                )));
            }
            let total: f64 = (0..c)
                .filter(|&j| keep(r, j))
                .map(|j| (row[j] - max).exp())
                .sum();
            data.push(max + total.ln());
        }
        Ok(self.derived(vec![n, 1], data, Op::LogSumExpRows(a, mask), &[a]))
    }

    /// Back-propagates from the one-element tensor `loss`, accumulating into
    /// the gradient buffers of every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(EcanError::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        if !self.value(loss).requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0])?;

        // Nodes that receive gradient from `loss`. Leaves keep their
        // accumulated buffers across calls; intermediate nodes get a fresh
        // upstream gradient each call.
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        upstream[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = upstream[i].take() else {
                continue;
            };
            if i != loss.0 {
                self.nodes[i].value.accumulate_grad(&g)?;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                if !self.nodes[input.0].value.requires_grad {
                    continue;
                }
                match &mut upstream[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs given upstream `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].value.requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ((m, k), (_, n)) = (x.dims(), y.dims());
                let mut res = Vec::new();
                if needs(*a) {
                    // dA = G * B^T
                    let bt = transpose_raw(&y.data, k, n);
                    res.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if needs(*b) {
                    // dB = A^T * G
                    let at = transpose_raw(&x.data, m, k);
                    res.push((*b, matmul_raw(&at, g, k, m, n)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(&y.data).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(&x.data).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::AddRow(a, b) => {
                let (n, c) = out.dims();
                let mut db = vec![0.0; c];
                for r in 0..n {
                    for (d, gv) in db.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += gv;
                    }
                }
                vec![(*a, g.to_vec()), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Relu(a) => {
                let x = val(*a);
                let d = g
                    .iter()
                    .zip(&x.data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::Log(a) => {
                let x = val(*a);
                vec![(*a, g.iter().zip(&x.data).map(|(g, x)| g / x).collect())]
            }
            Op::Exp(a) => vec![(*a, g.iter().zip(&out.data).map(|(g, y)| g * y).collect())],
            Op::ClampMin(a, floor) => {
                let x = val(*a);
                let d = g
                    .iter()
                    .zip(&x.data)
                    .map(|(g, &x)| if x >= *floor { *g } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::GatherRows(a, indices) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (r, &src) in indices.iter().enumerate() {
                    for (dv, gv) in d[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *dv += gv;
                    }
                }
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::ColumnMean(a) => {
                let (n, c) = val(*a).dims();
                let mut d = Vec::with_capacity(n * c);
                for _ in 0..n {
                    d.extend(g.iter().map(|v| v / n as f64));
                }
                vec![(*a, d)]
            }
            Op::Transpose(a) => {
                let (n, c) = out.dims();
                vec![(*a, transpose_raw(g, n, c))]
            }
            Op::SoftmaxRows(a) => {
                let (n, c) = out.dims();
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = gr.iter().zip(y).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        d[r * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, d)]
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let (n, c) = out.dims();
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    let y = out.row(r);
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = gr.iter().zip(y).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                vec![(*a, d)]
            }
            Op::LogSumExpRows(a, mask) => {
                let x = val(*a);
                let (n, c) = x.dims();
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    let lse = out.data[r];
                    for j in 0..c {
                        let idx = r * c + j;
                        if mask.as_ref().is_none_or(|m| m[idx]) {
                            d[idx] = g[r] * (x.data[idx] - lse).exp();
                        }
                    }
                }
                vec![(*a, d)]
            }
        }
        .into_iter()
        .filter(|(v, _)| needs(*v))
        .collect()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            for (o, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
