//! Forward kernels. Every kernel validates shapes and rejects non-finite
//! results, naming the producing operation.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result, Scalar};

/// Elementwise activation used inside feed-forward blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Gelu => gelu_scalar(v),
            Activation::Relu => v.max(T::zero()),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Gelu => gelu_grad_scalar(v),
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Exact gelu: `x * Φ(x)`.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * crate::scalar::normal_cdf(x)
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    crate::scalar::normal_cdf(x) + x * crate::scalar::normal_pdf(x)
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.expect_rank2("matmul")?;
    let (k2, n) = b.expect_rank2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new([m, n], out)?.check_finite("matmul")
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.expect_rank2("matmul_nt")?;
    let (n, k2) = b.expect_rank2("matmul_nt")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out.push(dot(arow, b.row(j)));
        }
    }
    Tensor::new([m, n], out)?.check_finite("matmul_nt")
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.expect_rank2("matmul_tn")?;
    let (k2, n) = b.expect_rank2("matmul_tn")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new([m, n], out)?.check_finite("matmul_tn")
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `x[m×in] · w[out×in]ᵀ + b[out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut y = matmul_nt(x, w)?;
    if let Some(b) = b {
        let out = w.rows();
        if b.len() != out {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        for r in 0..y.rows() {
            for (v, &bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        y = y.check_finite("linear")?;
    }
    Ok(y)
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.expect_rank2("transpose")?;
    let d = x.data();
    Ok(Tensor::from_fn([n, m], |i| d[(i % m) * n + i / m]))
}

fn broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out = if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)?
    } else if b.len() == 1 {
        let s = b.data()[0];
        a.map(|x| f(x, s))
    } else if a.len() == 1 {
        let s = a.data()[0];
        b.map(|y| f(s, y))
    } else {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    };
    out.check_finite(op)
}

/// Elementwise sum; one side may be a single-element tensor.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("mul", a, b, |x, y| x * y)
}

pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("div", a, b, |x, y| x / y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    x.map(|v| v * s).check_finite("scale")
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| Activation::Relu.apply(v))
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Euclidean norm of all elements; zero for the zero tensor.
pub fn l2_norm<T: Scalar>(x: &Tensor<T>) -> T {
    dot(x.data(), x.data()).sqrt()
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::EmptyAxis { op });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

/// Softmax along `axis`, stabilized by subtracting the running maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split("softmax", x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(src[idx(j)]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.check_finite("softmax")
}

/// Row-wise log-softmax of a matrix.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.expect_rank2("log_softmax")?;
    if n == 0 {
        return Err(Error::EmptyAxis { op: "log_softmax" });
    }
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let row = x.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new([m, n], out)?.check_finite("log_softmax")
}

/// Normalized activations and the per-row inverse standard deviations.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_cached<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    if x.rank() == 0 {
        return Err(Error::InvalidShape {
            op: "layer_norm",
            shape: x.shape().to_vec(),
            reason: "expected at least one axis",
        });
    }
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::EmptyAxis { op: "layer_norm" });
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if eps <= T::zero() {
        return Err(Error::invalid("layer_norm", "eps must be positive"));
    }
    let rows = x.len() / d;
    let inv_d = T::one() / T::of(d as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * is;
            xhat.push(h);
            out.push(h * gamma.data()[j] + beta.data()[j]);
        }
    }
    let shape = x.shape().to_vec();
    let y = Tensor::new(shape.clone(), out)?.check_finite("layer_norm")?;
    Ok((
        y,
        LayerNormCache {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        },
    ))
}

/// Normalizes the last axis to zero mean and unit variance, then applies
/// `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}
