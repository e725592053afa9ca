//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is a 2-D tensor (`rows x cols`); scalars are `1 x 1`. Each
//! operation records its inputs on the [`Tape`] and the node keeps its
//! forward value, which doubles as the saved activation for the pullback:
//!
//! | op | pullback reads |
//! |----|----------------|
//! | `sin`, `log`, `softplus`, `square` | input |
//! | `exp`, `sigmoid` | output |
//! | `mul`, `div`, `mul_col`, `matmul` | both inputs (`div` also its output) |
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Tape::backward`] visits it once in reverse.
//! Gradient contributions are summed in that fixed order, which makes
//! backward passes bit-reproducible. Operands that do not depend on any
//! gradient-tracking leaf receive no gradient.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Keeps `cos` of the input for the backward pass.
    Sin(Var, Vec<f64>),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    GroupSum(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    ExclusiveCumsum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar loss, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if the loss does not
    /// depend on it through tracked operations.
    pub fn wrt(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(r, c, g),
            None => Tensor::zeros(r, c),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFiniteValue(op))
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, with optional transposes
/// expressed as strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    // Strides of the logical (untransposed) operands.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as long as the strided extents above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn emit(&mut self, name: &'static str, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        check_finite(name, &value.data)?;
        Ok(self.push(value, op, tracked))
    }

    /// A gradient-tracking leaf (a parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant leaf; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.rows, va.cols, data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.emit(name, t, op, tracked)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(va.rows, va.cols, va.data.iter().map(|x| f(*x)).collect());
        let tracked = self.tracked(a);
        self.emit(name, t, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out, 0.0);
        let tracked = self.tracked(a) || self.tracked(b);
        self.emit("matmul", Tensor::new(m, n, out), Op::MatMul(a, b), tracked)
    }

    /// `a[m, n] + bias[1, n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(bias) != (1, n) {
            return Err(AutodiffError::ShapeMismatch { op: "add_bias", lhs: (m, n), rhs: self.shape(bias) });
        }
        let b = &self.value(bias).data;
        let data = self
            .value(a)
            .data
            .chunks_exact(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(bias);
        self.emit("add_bias", Tensor::new(m, n, data), Op::AddBias(a, bias), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn col_op(&mut self, name: &'static str, a: Var, c: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(c) != (m, 1) {
            return Err(AutodiffError::ShapeMismatch { op: name, lhs: (m, n), rhs: self.shape(c) });
        }
        let col = &self.value(c).data;
        let mut data = Vec::with_capacity(m * n);
        for (i, row) in self.value(a).data.chunks_exact(n.max(1)).enumerate() {
            data.extend(row.iter().map(|x| f(*x, col[i])));
        }
        let tracked = self.tracked(a) || self.tracked(c);
        self.emit(name, Tensor::new(m, n, data), op, tracked)
    }

    /// Scale each row of `a[m, n]` by the matching entry of `c[m, 1]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op("mul_col", a, c, Op::MulCol(a, c), |x, y| x * y)
    }

    /// Add `c[m, 1]` to every column of `a[m, n]`.
    pub fn add_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op("add_col", a, c, Op::AddCol(a, c), |x, y| x + y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + k)
    }

    /// `k - a`
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, k)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let tracked = self.tracked(a);
        let mut sin = Vec::with_capacity(va.len());
        let mut cos = Vec::with_capacity(if tracked { va.len() } else { 0 });
        for &x in &va.data {
            let (s, c) = crate::math::sin_cos(x);
            sin.push(s);
            if tracked {
                cos.push(c);
            }
        }
        let t = Tensor::new(va.rows, va.cols, sin);
        self.emit("sin", t, Op::Sin(a, cos), tracked)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        let tracked = self.tracked(a);
        self.emit("sum", Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(a);
        self.emit("mean", Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// `[m, n] -> [m, 1]`
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let data = if n == 0 {
            vec![0.0; m]
        } else {
            self.value(a).data.chunks_exact(n).map(|r| r.iter().sum()).collect()
        };
        let tracked = self.tracked(a);
        self.emit("row_sum", Tensor::new(m, 1, data), Op::RowSum(a), tracked)
    }

    /// Sum consecutive groups of `group` rows: `[m * group, n] -> [m, n]`.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, n) = self.shape(a);
        if group == 0 || rows % group != 0 {
            return Err(AutodiffError::ShapeMismatch { op: "group_sum", lhs: (rows, n), rhs: (group, 1) });
        }
        let m = rows / group;
        let src = &self.value(a).data;
        let mut data = vec![0.0; m * n];
        for (g, out) in data.chunks_exact_mut(n.max(1)).enumerate().take(m) {
            for k in 0..group {
                let row = &src[(g * group + k) * n..(g * group + k + 1) * n];
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        let tracked = self.tracked(a);
        self.emit("group_sum", Tensor::new(m, n, data), Op::GroupSum(a, group), tracked)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a);
        if v.len() != rows * cols {
            return Err(AutodiffError::ShapeMismatch { op: "reshape", lhs: v.shape(), rhs: (rows, cols) });
        }
        let t = Tensor::new(rows, cols, v.data.clone());
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::Reshape(a), tracked))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0]).0;
        for p in parts {
            if self.shape(*p).0 != m {
                return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: self.shape(parts[0]), rhs: self.shape(*p) });
            }
        }
        let n: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        Ok(self.push(Tensor::new(m, n, data), Op::Concat(parts.to_vec()), tracked))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start > end || end > n {
            return Err(AutodiffError::ShapeMismatch { op: "slice", lhs: (m, n), rhs: (start, end) });
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(m, end - start, data), Op::Slice(a, start), tracked))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, n) = self.shape(table);
        let v = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(v.row(i));
        }
        let tracked = self.tracked(table);
        Ok(self.push(Tensor::new(idx.len(), n, data), Op::Gather(table, idx.to_vec()), tracked))
    }

    /// Per-row exclusive prefix sum: `out[i, j] = sum_{k < j} a[i, k]`.
    pub fn exclusive_cumsum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = &self.value(a).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                data[i * n + j] = acc;
                acc += src[i * n + j];
            }
        }
        let tracked = self.tracked(a);
        self.emit("exclusive_cumsum", Tensor::new(m, n, data), Op::ExclusiveCumsum(a), tracked)
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.pullback(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(dst) = self.acc(grads, v) {
            for (i, (d, gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, *gi);
            }
        }
    }

    fn pullback(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_acc(m, n, k, g, false, vb, true, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_acc(k, m, n, va, true, g, false, gb, 1.0);
                }
            }
            Op::AddBias(a, b) => {
                self.acc_map(grads, *a, g, |_, x| x);
                let n = out.cols;
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks_exact(n) {
                        for (d, x) in gb.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, x| x);
                self.acc_map(grads, *b, g, |_, x| x);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, x| x);
                self.acc_map(grads, *b, g, |_, x| -x);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.acc_map(grads, *a, g, |i, x| x * vb[i]);
                self.acc_map(grads, *b, g, |i, x| x * va[i]);
            }
            Op::Div(a, b) => {
                let vb = &self.value(*b).data;
                self.acc_map(grads, *a, g, |i, x| x / vb[i]);
                self.acc_map(grads, *b, g, |i, x| -x * out.data[i] / vb[i]);
            }
            Op::MulCol(a, c) => {
                let n = out.cols;
                let (va, vc) = (&self.value(*a).data, &self.value(*c).data);
                self.acc_map(grads, *a, g, |i, x| x * vc[i / n]);
                if let Some(gc) = self.acc(grads, *c) {
                    for (i, d) in gc.iter_mut().enumerate() {
                        let row = i * n..(i + 1) * n;
                        *d += g[row.clone()].iter().zip(&va[row]).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::AddCol(a, c) => {
                let n = out.cols;
                self.acc_map(grads, *a, g, |_, x| x);
                if let Some(gc) = self.acc(grads, *c) {
                    for (i, d) in gc.iter_mut().enumerate() {
                        *d += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                }
            }
            Op::Scale(a, k) => self.acc_map(grads, *a, g, |_, x| k * x),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc_map(grads, *a, g, |_, x| x),
            Op::Sin(a, cos) => self.acc_map(grads, *a, g, |i, x| x * cos[i]),
            Op::Exp(a) => self.acc_map(grads, *a, g, |i, x| x * out.data[i]),
            Op::Log(a) => {
                let va = &self.value(*a).data;
                self.acc_map(grads, *a, g, |i, x| x / va[i]);
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, g, |i, x| {
                let y = out.data[i];
                x * y * (1.0 - y)
            }),
            Op::Softplus(a) => {
                let va = &self.value(*a).data;
                self.acc_map(grads, *a, g, |i, x| x * sigmoid(va[i]));
            }
            Op::Square(a) => {
                let va = &self.value(*a).data;
                self.acc_map(grads, *a, g, |i, x| 2.0 * va[i] * x);
            }
            Op::Sum(a) => {
                let s = g[0];
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Mean(a) => {
                let s = g[0] / self.value(*a).len() as f64;
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::RowSum(a) => {
                let n = self.shape(*a).1;
                if let Some(d) = self.acc(grads, *a) {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += g[i / n];
                    }
                }
            }
            Op::GroupSum(a, group) => {
                let n = out.cols;
                if let Some(d) = self.acc(grads, *a) {
                    for (i, v) in d.iter_mut().enumerate() {
                        let (row, col) = (i / n, i % n);
                        *v += g[(row / group) * n + col];
                    }
                }
            }
            Op::Concat(parts) => {
                let m = out.rows;
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if let Some(d) = self.acc(grads, *p) {
                        for i in 0..m {
                            let src = &g[i * out.cols + offset..i * out.cols + offset + w];
                            for (dv, s) in d[i * w..(i + 1) * w].iter_mut().zip(src) {
                                *dv += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice(a, start) => {
                let n = self.shape(*a).1;
                let w = out.cols;
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..out.rows {
                        for j in 0..w {
                            d[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Gather(table, idx) => {
                let n = out.cols;
                if let Some(d) = self.acc(grads, *table) {
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..n {
                            d[r * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::ExclusiveCumsum(a) => {
                let (m, n) = (out.rows, out.cols);
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..m {
                        let mut acc = 0.0;
                        for k in (0..n).rev() {
                            d[i * n + k] += acc;
                            acc += g[i * n + k];
                        }
                    }
                }
            }
        }
    }
}

/// Worst per-coordinate relative error between central differences and
/// `analytic`, with `|a - b| / max(|a|, |b|, floor)`.
///
/// `f` maps a full parameter vector to a scalar.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> f64 {
    assert!(h > 0.0, "finite difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut x = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
