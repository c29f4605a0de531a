use std::sync::Arc;

use super::kernels::{
    matmul_nt_raw, matmul_raw, matmul_tn_raw, rotate_row_pairs, transpose_raw,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Ln,
    Tanh,
    Sin,
    Cos,
    Square,
    /// tanh approximation
    Gelu,
    Sigmoid,
    LogSigmoid,
    Softplus,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    AddRow(Var, Var),
    ScaleCols(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Pick {
        x: Var,
        at: Vec<(usize, usize)>,
    },
    Stack(Vec<Var>),
    RotatePairs {
        x: Var,
        angles: Var,
        pairs: Arc<[(usize, usize)]>,
        sign: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, which is therefore a topological
/// order. [`Graph::backward`] may run once per graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::InvalidShape {
            op,
            msg: format!("expected a matrix, got shape {s:?}"),
        }),
    }
}

/// Rows × last-axis extent, treating a vector as one row.
fn rows_last(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&d, rest)) => (rest.iter().product(), d),
        None => (1, 1),
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x);
    (y, dy)
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul_nt")?;
        let (n, k2) = dims2(self.shape(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "transpose")?;
        let out = transpose_raw(self.data(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    /// `x[m×n] + b[n]` added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "add_row")?;
        if self.shape(b) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let (xd, bd) = (self.data(x), self.data(b));
        let data = (0..m * n).map(|i| xd[i] + bd[i % n]).collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRow(x, b), rg))
    }

    /// `x[d×n] · diag(s[n])`: scales column `j` by `s[j]`.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "scale_cols")?;
        if self.shape(s) != [n] {
            return Err(Error::shape("scale_cols", self.shape(x), self.shape(s)));
        }
        let (xd, sd) = (self.data(x), self.data(s));
        let data = (0..m * n).map(|i| xd[i] * sd[i % n]).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ScaleCols(x, s), rg))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).map(|x| match f {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Square => x * x,
            Unary::Gelu => gelu(x).0,
            Unary::Sigmoid => sigmoid(x),
            Unary::LogSigmoid => -softplus(-x),
            Unary::Softplus => softplus(x),
        });
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, f), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// Sum of all elements into a scalar, left to right.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.data(a) {
            acc += v;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(acc), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    fn check_finite(&self, a: Var, op: &'static str) -> Result<()> {
        if self.data(a).iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax where row `i` only covers columns `0..=i`; later
    /// columns are exactly zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        self.check_finite(a, "softmax_rows")?;
        let (m, n) = rows_last(self.shape(a));
        let x = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let width = if causal { (r % n + 1).min(n) } else { n };
            let row = &x[r * n..r * n + width];
            let mx = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut z = T::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[r * n + c] = e;
                z += e;
            }
            for c in 0..width {
                out[r * n + c] /= z;
            }
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "log_softmax_rows")?;
        let (m, n) = rows_last(self.shape(a));
        let x = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut z = T::zero();
            for &v in row {
                z += (v - mx).exp();
            }
            let lse = mx + z.ln();
            for (c, &v) in row.iter().enumerate() {
                out[r * n + c] = v - lse;
            }
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(a), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = rows_last(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![T::zero(); m * d];
        let mut xhat = vec![T::zero(); m * d];
        let mut rstd = vec![T::zero(); m];
        for r in 0..m {
            let row = &xd[r * d..(r + 1) * d];
            let mut mu = T::zero();
            for &v in row {
                mu += v;
            }
            mu /= dn;
            let mut var = T::zero();
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            var /= dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mu) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table), "embedding")?;
        if ids.is_empty() {
            return Err(Error::Empty("id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                bound: v,
            });
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat input"))?;
        let (m, _) = dims2(self.shape(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.shape(p), "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {n}", start + len),
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xd[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Selects entries `(row, col)` of a matrix into a vector.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "pick")?;
        if at.is_empty() {
            return Err(Error::Empty("pick index list"));
        }
        for &(r, c) in at {
            if r >= m {
                return Err(Error::IndexOutOfRange { index: r, bound: m });
            }
            if c >= n {
                return Err(Error::IndexOutOfRange { index: c, bound: n });
            }
        }
        let xd = self.data(x);
        let out = at.iter().map(|&(r, c)| xd[r * n + c]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[at.len()], out)?,
            Op::Pick {
                x,
                at: at.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Empty("stack input"));
        }
        let mut out = Vec::with_capacity(items.len());
        for &v in items {
            if self.value(v).numel() != 1 {
                return Err(Error::InvalidShape {
                    op: "stack",
                    msg: format!("expected scalars, got shape {:?}", self.shape(v)),
                });
            }
            out.push(self.data(v)[0]);
        }
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&[items.len()], out)?, Op::Stack(items.to_vec()), rg))
    }

    /// Disjoint plane rotations of the rows of `x[d×n]`, one angle per pair.
    /// `sign` is `+1` for counter-clockwise and `-1` for clockwise blocks.
    pub fn rotate_pairs(
        &mut self,
        x: Var,
        angles: Var,
        pairs: Arc<[(usize, usize)]>,
        sign: T,
    ) -> Result<Var> {
        let (d, n) = dims2(self.shape(x), "rotate_pairs")?;
        if self.value(angles).numel() != pairs.len() {
            return Err(Error::InvalidShape {
                op: "rotate_pairs",
                msg: format!(
                    "{} angles for {} pairs",
                    self.value(angles).numel(),
                    pairs.len()
                ),
            });
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= d || j >= d) {
            return Err(Error::IndexOutOfRange {
                index: i.max(j),
                bound: d,
            });
        }
        let out = rotate_row_pairs(self.data(x), n, &pairs, self.data(angles), sign);
        let rg = self.rg(x) || self.rg(angles);
        Ok(self.push(
            Tensor::new(&[d, n], out)?,
            Op::RotatePairs {
                x,
                angles,
                pairs,
                sign,
            },
            rg,
        ))
    }

    /// Accumulates `d loss / d node` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Backward("gradients already computed on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss is not a node of this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Backward("loss is detached from every parameter".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to `v`, after [`Graph::backward`].
    /// Nodes that require a gradient but lie off the loss path get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape();
        Some(match &grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    fn backprop_node(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a), "").unwrap();
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    acc(*a, matmul_nt_raw(gy, self.data(*b), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn_raw(self.data(*a), gy, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a bᵀ: da = gy b, db = gyᵀ a
                let (m, k) = dims2(self.shape(*a), "").unwrap();
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    acc(*a, matmul_raw(gy, self.data(*b), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn_raw(gy, self.data(*a), m, n, k));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.shape(*a), "").unwrap();
                acc(*a, transpose_raw(gy, c, r));
            }
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, gy.iter().zip(self.data(*b)).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, gy.iter().zip(self.data(*a)).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, k) => acc(*a, gy.iter().map(|&g| g * *k).collect()),
            Op::AddConst(a) => acc(*a, gy.to_vec()),
            Op::AddRow(x, b) => {
                let n = self.shape(*b)[0];
                acc(*x, gy.to_vec());
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); n];
                    for (i, &g) in gy.iter().enumerate() {
                        gb[i % n] += g;
                    }
                    acc(*b, gb);
                }
            }
            Op::ScaleCols(x, s) => {
                let n = self.shape(*s)[0];
                let (xd, sd) = (self.data(*x), self.data(*s));
                if self.rg(*x) {
                    acc(*x, gy.iter().enumerate().map(|(i, &g)| g * sd[i % n]).collect());
                }
                if self.rg(*s) {
                    let mut gs = vec![T::zero(); n];
                    for (i, &g) in gy.iter().enumerate() {
                        gs[i % n] += g * xd[i];
                    }
                    acc(*s, gs);
                }
            }
            Op::Unary(a, f) => {
                let x = self.data(*a);
                let y = node.value.data();
                let g = gy
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&x, &y))| {
                        g * match f {
                            Unary::Neg => -T::one(),
                            Unary::Exp => y,
                            Unary::Ln => T::one() / x,
                            Unary::Tanh => T::one() - y * y,
                            Unary::Sin => x.cos(),
                            Unary::Cos => -x.sin(),
                            Unary::Square => x + x,
                            Unary::Gelu => gelu(x).1,
                            Unary::Sigmoid => y * (T::one() - y),
                            Unary::LogSigmoid => sigmoid(-x),
                            Unary::Softplus => sigmoid(x),
                        }
                    })
                    .collect();
                acc(*a, g);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![gy[0]; n]);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (m, n) = rows_last(node.value.shape());
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    let mut dot = T::zero();
                    for c in 0..n {
                        dot += gy[r * n + c] * y[r * n + c];
                    }
                    for c in 0..n {
                        gx[r * n + c] = y[r * n + c] * (gy[r * n + c] - dot);
                    }
                }
                acc(*a, gx);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let (m, n) = rows_last(node.value.shape());
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    let mut s = T::zero();
                    for c in 0..n {
                        s += gy[r * n + c];
                    }
                    for c in 0..n {
                        gx[r * n + c] = gy[r * n + c] - y[r * n + c].exp() * s;
                    }
                }
                acc(*a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, d) = rows_last(node.value.shape());
                let g = self.data(*gain);
                let dn = T::from_f64(d as f64);
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); m * d];
                    for r in 0..m {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gy[r * d + c] * g[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + c];
                        }
                        mean_dh /= dn;
                        mean_dh_h /= dn;
                        for c in 0..d {
                            let dh = gy[r * d + c] * g[c];
                            gx[r * d + c] = rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                    acc(*x, gx);
                }
                if self.rg(*gain) {
                    let mut gg = vec![T::zero(); d];
                    for (i, &gv) in gy.iter().enumerate() {
                        gg[i % d] += gv * xhat[i];
                    }
                    acc(*gain, gg);
                }
                if self.rg(*bias) {
                    let mut gb = vec![T::zero(); d];
                    for (i, &gv) in gy.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                    acc(*bias, gb);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (t, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += gy[t * d + c];
                    }
                }
                acc(*table, gt);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = rows_last(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&gy[r * n + offset..r * n + offset + w]);
                        }
                        acc(p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims2(self.shape(*x), "").unwrap();
                let len = node.value.shape()[1];
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::Pick { x, at } => {
                let n = self.shape(*x)[1];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&(r, c), &g) in at.iter().zip(gy) {
                    gx[r * n + c] += g;
                }
                acc(*x, gx);
            }
            Op::Stack(items) => {
                for (&v, &g) in items.iter().zip(gy) {
                    acc(v, vec![g]);
                }
            }
            Op::RotatePairs {
                x,
                angles,
                pairs,
                sign,
            } => {
                let n = self.shape(*x)[1];
                let xd = self.data(*x);
                let th = self.data(*angles);
                if self.rg(*x) {
                    // transpose of the forward block: rotate by the opposite sign
                    acc(*x, rotate_row_pairs(gy, n, pairs, th, -*sign));
                }
                if self.rg(*angles) {
                    let mut ga = vec![T::zero(); pairs.len()];
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let (c, s) = (th[k].cos(), th[k].sin());
                        let mut total = T::zero();
                        for col in 0..n {
                            let xi = xd[i * n + col];
                            let xj = xd[j * n + col];
                            let dyi = -xi * s - *sign * xj * c;
                            let dyj = *sign * xi * c - xj * s;
                            total += gy[i * n + col] * dyi + gy[j * n + col] * dyj;
                        }
                        ga[k] = total;
                    }
                    acc(*angles, ga);
                }
            }
        }
    }
}
