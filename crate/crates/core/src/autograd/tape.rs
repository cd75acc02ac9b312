use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::{normal_cdf, normal_pdf};
use crate::tensor::{self, Activation, LayerNormCache};
use crate::{Error, Result, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Activation(Var, Activation),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<T>,
    },
    L2Norm(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
        clamped: Vec<bool>,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanGroups {
        x: Var,
        group: usize,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    NormalCdf(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// Leaves are created with [`Tape::param`] (differentiable) or
/// [`Tape::constant`]. Every operation validates shapes and fails on
/// non-finite results.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed in.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Reduces a broadcast gradient back onto a single-element operand.
fn unbroadcast<T: Scalar>(g: Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::full(target.shape().to_vec(), g.sum())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::MatMulNt(a, b), rg))
    }

    /// `x · wᵀ + b` with `w` shaped `[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::sub(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::div(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let y = tensor::scale(self.value(x), s)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Scale(x, s), rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let y = self.value(x).map(|v| act.apply(v)).check_finite(act.name())?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Activation(x, act), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = tensor::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, cache) = tensor::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    /// Euclidean norm of the whole tensor as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(tensor::l2_norm(self.value(x))).check_finite("l2_norm")?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::L2Norm(x), rg))
    }

    /// Scales each row of a matrix to unit norm; norms below `min_norm` are
    /// clamped to `min_norm`. Returns the node and the number of clamped rows.
    pub fn normalize_rows(&mut self, x: Var, min_norm: T) -> Result<(Var, usize)> {
        let xv = self.value(x);
        let (m, _) = xv.expect_rank2("normalize_rows")?;
        let mut norms = Vec::with_capacity(m);
        let mut clamped = Vec::with_capacity(m);
        let mut out = xv.clone();
        for r in 0..m {
            let n = tensor::dot(xv.row(r), xv.row(r)).sqrt();
            let c = n < min_norm;
            let n = if c { min_norm } else { n };
            for v in out.row_mut(r) {
                *v /= n;
            }
            norms.push(n);
            clamped.push(c);
        }
        let out = out.check_finite("normalize_rows")?;
        let count = clamped.iter().filter(|c| **c).count();
        let rg = self.rg(&[x]);
        Ok((self.push(out, Op::NormalizeRows { x, norms, clamped }, rg), count))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = tensor::transpose(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum()).check_finite("sum")?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyAxis { op: "mean" });
        }
        let y = Tensor::scalar(xv.sum() / T::of(xv.len() as f64)).check_finite("mean")?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Mean(x), rg))
    }

    /// Column sums of a matrix: `[m×n] → [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_rank2("sum_rows")?;
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let y = Tensor::vector(out).check_finite("sum_rows")?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::SumRows(x), rg))
    }

    /// Averages consecutive groups of `group` rows: `[g·group × n] → [g × n]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_rank2("mean_groups")?;
        if group == 0 || m % group != 0 {
            return Err(Error::InvalidShape {
                op: "mean_groups",
                shape: xv.shape().to_vec(),
                reason: "rows not divisible by group size",
            });
        }
        let g = m / group;
        let inv = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); g * n];
        for r in 0..m {
            let o = &mut out[(r / group) * n..(r / group + 1) * n];
            for (a, &v) in o.iter_mut().zip(xv.row(r)) {
                *a += v * inv;
            }
        }
        let y = Tensor::new([g, n], out)?.check_finite("mean_groups")?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::MeanGroups { x, group }, rg))
    }

    /// Rectangular window `[row0..row0+rows, col0..col0+cols]` of a matrix.
    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_rank2("slice")?;
        if row0 + rows > m || col0 + cols > n {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: xv.shape().to_vec(),
                reason: "window out of bounds",
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            out.extend_from_slice(&xv.row(r)[col0..col0 + cols]);
        }
        let y = Tensor::new([rows, cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Slice { x, row0, col0 }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).expect_rank2("concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (m, n) = pv.expect_rank2("concat_rows")?;
            if n != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            out.extend_from_slice(pv.data());
            rows += m;
        }
        let y = Tensor::new([rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).expect_rank2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (m, n) = pv.expect_rank2("concat_cols")?;
            if m != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let y = Tensor::new([rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows `idx` of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_rank2("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::invalid("gather_rows", "row index out of range"));
            }
            out.extend_from_slice(xv.row(i));
        }
        let y = Tensor::new([idx.len(), n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Writes row `i` of `x` into row `idx[i]` of a zero `[rows × n]` matrix,
    /// summing collisions.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.expect_rank2("scatter_rows")?;
        if m != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::invalid("scatter_rows", "index list does not match source rows"));
        }
        let mut out = Tensor::zeros([rows, n]);
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ScatterRows { x, idx: idx.to_vec() }, rg))
    }

    /// Picks flat elements `idx` into a vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= xv.len() {
                return Err(Error::invalid("gather_elems", "element index out of range"));
            }
            out.push(xv.data()[i]);
        }
        let y = Tensor::vector(out);
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::GatherElems { x, idx: idx.to_vec() }, rg))
    }

    /// Multiplies row `i` of `x[m×n]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        let (m, _) = xv.expect_rank2("scale_rows")?;
        if sv.len() != m {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: xv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for r in 0..m {
            let f = sv.data()[r];
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        let out = out.check_finite("scale_rows")?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleRows { x, s }, rg))
    }

    /// Elementwise standard Gaussian CDF.
    pub fn normal_cdf(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(normal_cdf).check_finite("normal_cdf")?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::NormalCdf(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[B×K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = lv.expect_rank2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::invalid("cross_entropy", "label count does not match batch"));
        }
        if b == 0 {
            return Err(Error::EmptyAxis { op: "cross_entropy" });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let logp = tensor::log_softmax_rows(lv)?;
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            loss -= logp.at(r, y);
        }
        loss /= T::of(b as f64);
        let probs = logp.map(|v| v.exp());
        let y = Tensor::scalar(loss).check_finite("cross_entropy")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            y,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                reason: "loss must be a single element",
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor<T>| accumulate(&mut grads[v.0], t);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    send(*a, tensor::matmul_nt(g, val(*b))?);
                }
                if needs(*b) {
                    send(*b, tensor::matmul_tn(val(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if needs(*a) {
                    send(*a, tensor::matmul(g, val(*b))?);
                }
                if needs(*b) {
                    send(*b, tensor::matmul_tn(g, val(*a))?);
                }
            }
            Op::Linear { x, w, b } => {
                if needs(*x) {
                    send(*x, tensor::matmul(g, val(*w))?);
                }
                if needs(*w) {
                    send(*w, tensor::matmul_tn(g, val(*x))?);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![T::zero(); val(*b).len()];
                        for r in 0..g.rows() {
                            for (d, &v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        send(*b, Tensor::new(val(*b).shape().to_vec(), db)?);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    send(*a, unbroadcast(g.clone(), val(*a)));
                }
                if needs(*b) {
                    send(*b, unbroadcast(g.clone(), val(*b)));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    send(*a, unbroadcast(g.clone(), val(*a)));
                }
                if needs(*b) {
                    send(*b, unbroadcast(g.map(|v| -v), val(*b)));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, unbroadcast(tensor::mul(g, val(*b))?, val(*a)));
                }
                if needs(*b) {
                    send(*b, unbroadcast(tensor::mul(g, val(*a))?, val(*b)));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if needs(*a) {
                    send(*a, unbroadcast(tensor::div(g, bv)?, val(*a)));
                }
                if needs(*b) {
                    // d(a/b)/db = -y/b
                    let t = tensor::mul(g, &node.value)?;
                    let t = tensor::div(&t, bv)?.map(|v| -v);
                    send(*b, unbroadcast(t, bv));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                send(*x, g.map(|v| v * s));
            }
            Op::Activation(x, act) => {
                let xv = val(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gv, &xv)| gv * act.derivative(xv)).collect();
                send(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = tensor::axis_split("softmax", y.shape(), *axis)?;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let mut s = T::zero();
                        for j in 0..n {
                            s += g.data()[idx(j)] * y.data()[idx(j)];
                        }
                        for j in 0..n {
                            dx[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - s);
                        }
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let gv = val(*gamma);
                let d = gv.len();
                let rows = g.len() / d;
                let xhat = cache.xhat.data();
                if needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let dn = T::of(d as f64);
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let is = cache.inv_std[r];
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            dx[r * d + j] = is / dn * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                    send(*x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                if needs(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (k, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                        dg[k % d] += gv * h;
                    }
                    send(*gamma, Tensor::new(gv.shape().to_vec(), dg)?);
                }
                if needs(*beta) {
                    let mut db = vec![T::zero(); d];
                    for (k, &gv) in g.data().iter().enumerate() {
                        db[k % d] += gv;
                    }
                    send(*beta, Tensor::new(val(*beta).shape().to_vec(), db)?);
                }
            }
            Op::L2Norm(x) => {
                let n = node.value.item();
                let xv = val(*x);
                if n > T::zero() {
                    let s = g.item() / n;
                    send(*x, xv.map(|v| v * s));
                } else {
                    send(*x, Tensor::zeros(xv.shape().to_vec()));
                }
            }
            Op::NormalizeRows { x, norms, clamped } => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let n = norms[r];
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let proj = if clamped[r] { T::zero() } else { tensor::dot(gr, yr) };
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (gr[j] - yr[j] * proj) / n;
                    }
                }
                send(*x, dx);
            }
            Op::Transpose(x) => send(*x, tensor::transpose(g)?),
            Op::Reshape(x) => send(*x, g.clone().reshape(val(*x).shape().to_vec())?),
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape().to_vec(), g.item())),
            Op::Mean(x) => {
                let xv = val(*x);
                send(*x, Tensor::full(xv.shape().to_vec(), g.item() / T::of(xv.len() as f64)));
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let m = xv.rows();
                let mut d = Vec::with_capacity(xv.len());
                for _ in 0..m {
                    d.extend_from_slice(g.data());
                }
                send(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::MeanGroups { x, group } => {
                let xv = val(*x);
                let inv = T::one() / T::of(*group as f64);
                let mut d = Tensor::zeros(xv.shape().to_vec());
                for r in 0..xv.rows() {
                    for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *o = v * inv;
                    }
                }
                send(*x, d);
            }
            Op::Slice { x, row0, col0 } => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.shape().to_vec());
                let cols = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(row0 + r)[*col0..col0 + cols].copy_from_slice(g.row(r));
                }
                send(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.len();
                    if needs(p) {
                        send(p, Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + len].to_vec())?);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        send(p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    c0 += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let mut d = Tensor::zeros(val(*x).shape().to_vec());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                send(*x, d);
            }
            Op::ScatterRows { x, idx } => {
                let xv = val(*x);
                let mut d = Vec::with_capacity(xv.len());
                for &i in idx {
                    d.extend_from_slice(g.row(i));
                }
                send(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::GatherElems { x, idx } => {
                let mut d = Tensor::zeros(val(*x).shape().to_vec());
                for (k, &i) in idx.iter().enumerate() {
                    d.data_mut()[i] += g.data()[k];
                }
                send(*x, d);
            }
            Op::ScaleRows { x, s } => {
                let xv = val(*x);
                let sv = val(*s);
                if needs(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let f = sv.data()[r];
                        for v in d.row_mut(r) {
                            *v *= f;
                        }
                    }
                    send(*x, d);
                }
                if needs(*s) {
                    let ds = (0..xv.rows()).map(|r| tensor::dot(g.row(r), xv.row(r))).collect();
                    send(*s, Tensor::new(sv.shape().to_vec(), ds)?);
                }
            }
            Op::NormalCdf(x) => {
                let xv = val(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gv, &z)| gv * normal_pdf(z)).collect();
                send(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = T::of(labels.len() as f64);
                let s = g.item() / b;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d.row_mut(r)[y] -= T::one();
                }
                for v in d.data_mut() {
                    *v *= s;
                }
                send(*logits, d);
            }
        }
        Ok(())
    }
}

pub(crate) fn var_at(index: usize) -> Var {
    Var(index)
}
