//! Classification loss and the expert-balancing losses.
//!
//! Every loss exists as a plain function of tensors and as a tape builder;
//! both share the same arithmetic so diagnostics and training agree.

use crate::autograd::{Tape, Var};
use crate::{Error, Result, Scalar, Tensor};

/// Default weight of the balancing terms.
pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub classification: f64,
    pub importance: f64,
    pub load: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(classification: f64, importance: f64, load: f64, lambda: f64) -> Self {
        LossBreakdown {
            classification,
            importance,
            load,
            total: total_loss(classification, importance, load, lambda),
            lambda,
        }
    }
}

/// Mean negative log-probability of the true class under row-wise softmax.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// `(population std / mean)²`.
pub fn squared_cv<T: Scalar>(values: &Tensor<T>) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyAxis { op: "squared_cv" });
    }
    let n = T::of(values.len() as f64);
    let mean = values.sum() / n;
    if mean == T::zero() {
        return Err(Error::ZeroMean);
    }
    let first = values.data()[0];
    if values.data().iter().all(|&v| v == first) {
        return Ok(T::zero());
    }
    let var = values.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    Ok(var / (mean * mean))
}

/// Per-expert column sums of a `[tokens × N]` matrix.
pub fn column_sums<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, n) = m.expect_rank2("column_sums")?;
    let mut out = Tensor::zeros([n]);
    for r in 0..rows {
        for (o, &v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Squared CV of per-expert summed gate weights.
pub fn importance_loss<T: Scalar>(gate_weights: &Tensor<T>) -> Result<T> {
    squared_cv(&column_sums(gate_weights)?)
}

/// Squared CV of per-expert summed load probabilities.
pub fn load_loss<T: Scalar>(load_prob: &Tensor<T>) -> Result<T> {
    squared_cv(&column_sums(load_prob)?)
}

/// `cls + (λ/2)(imp + load)`.
pub fn total_loss(cls: f64, imp: f64, load: f64, lambda: f64) -> f64 {
    cls + 0.5 * lambda * (imp + load)
}

/// Tape form of [`squared_cv`] for a vector node.
pub fn squared_cv_var<T: Scalar>(tape: &mut Tape<T>, values: Var) -> Result<Var> {
    let v = tape.value(values);
    if v.is_empty() {
        return Err(Error::EmptyAxis { op: "squared_cv" });
    }
    if v.sum() == T::zero() {
        return Err(Error::ZeroMean);
    }
    let mean = tape.mean(values)?;
    let dev = tape.sub(values, mean)?;
    let sq = tape.mul(dev, dev)?;
    let var = tape.mean(sq)?;
    let m2 = tape.mul(mean, mean)?;
    tape.div(var, m2)
}

/// Tape form of [`importance_loss`] and [`load_loss`]: squared CV of the
/// column sums of `m`.
pub fn balance_var<T: Scalar>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let sums = tape.sum_rows(m)?;
    squared_cv_var(tape, sums)
}

/// Tape form of [`total_loss`].
pub fn total_var<T: Scalar>(tape: &mut Tape<T>, cls: Var, aux: Option<Var>, lambda: f64) -> Result<Var> {
    match aux {
        Some(a) if lambda != 0.0 => {
            let a = tape.scale(a, T::of(0.5 * lambda))?;
            tape.add(cls, a)
        }
        _ => Ok(cls),
    }
}
