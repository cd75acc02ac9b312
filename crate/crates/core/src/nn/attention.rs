use alloc::format;
use alloc::vec::Vec;

use super::{Ctx, Linear, ParamStore};
use crate::autograd::Var;
use crate::rng::StreamRng;
use crate::{Error, Result, Scalar};

/// Multi-head scaled dot-product self-attention.
///
/// The key projection has no bias: a key bias shifts every score of a query
/// by the same amount and cancels in the softmax.
///
/// Inputs are sequences stacked row-wise: `[B·S × d]` for `B` sequences of
/// `S` tokens. Tokens attend only within their own sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.output.num_params()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, seq_len: usize) -> Result<Var> {
        let rows = ctx.tape.value(x).rows();
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::invalid(
                "mha_forward",
                format!("{rows} rows do not split into sequences of {seq_len}"),
            ));
        }
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let dh = self.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();

        let mut sequences = Vec::with_capacity(rows / seq_len);
        for s in 0..rows / seq_len {
            let r0 = s * seq_len;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let c0 = h * dh;
                let qh = ctx.tape.slice(q, r0, seq_len, c0, dh)?;
                let kh = ctx.tape.slice(k, r0, seq_len, c0, dh)?;
                let vh = ctx.tape.slice(v, r0, seq_len, c0, dh)?;
                let scores = ctx.tape.matmul_nt(qh, kh)?;
                let scores = ctx.tape.scale(scores, scale)?;
                let weights = ctx.tape.softmax(scores, 1)?;
                heads.push(ctx.tape.matmul(weights, vh)?);
            }
            sequences.push(if heads.len() == 1 { heads[0] } else { ctx.tape.concat_cols(&heads)? });
        }
        let merged = if sequences.len() == 1 { sequences[0] } else { ctx.tape.concat_rows(&sequences)? };
        self.output.forward(ctx, merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradient_check, Tape};
    use crate::rng::{standard_normal, SeedTree};
    use crate::tensor::{self, Tensor};
    use alloc::vec;

    fn build(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(seed).stream("mha");
        let mha = MultiHeadAttention::new(&mut store, "mha", dim, heads, &mut rng).unwrap();
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = standard_normal::<f64, _>(&mut rng) * 0.4;
            }
        }
        (store, mha)
    }

    fn run(store: &ParamStore<f64>, mha: &MultiHeadAttention, x: &Tensor<f64>, seq: usize) -> Tensor<f64> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, false);
        let xv = ctx.tape.constant(x.clone());
        let y = mha.forward(&mut ctx, xv, seq).unwrap();
        tape.value(y).clone()
    }

    fn proj(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = store.get(l.weight);
        let b = l.bias.map(|b| store.get(b));
        (0..l.out_dim)
            .map(|o| (0..l.in_dim).map(|i| w.at(o, i) * x[i]).sum::<f64>() + b.map_or(0.0, |b| b.data()[o]))
            .collect()
    }

    /// Explicit per-query attention formula over one sequence.
    fn oracle(store: &ParamStore<f64>, mha: &MultiHeadAttention, x: &Tensor<f64>, r0: usize, seq: usize) -> Vec<Vec<f64>> {
        let dh = mha.head_dim();
        let rows: Vec<_> = (r0..r0 + seq).map(|r| x.row(r)).collect();
        let q: Vec<_> = rows.iter().map(|r| proj(store, &mha.query, r)).collect();
        let k: Vec<_> = rows.iter().map(|r| proj(store, &mha.key, r)).collect();
        let v: Vec<_> = rows.iter().map(|r| proj(store, &mha.value, r)).collect();
        (0..seq)
            .map(|i| {
                let mut concat = vec![0.0; mha.dim()];
                for h in 0..mha.heads {
                    let c = h * dh..(h + 1) * dh;
                    let s: Vec<f64> = (0..seq)
                        .map(|j| q[i][c.clone()].iter().zip(&k[j][c.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..seq {
                        for (o, vv) in concat[c.clone()].iter_mut().zip(&v[j][c.clone()]) {
                            *o += e[j] / z * vv;
                        }
                    }
                }
                proj(store, &mha.output, &concat)
            })
            .collect()
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(0).stream("mha");
        assert!(MultiHeadAttention::new(&mut store, "m", 10, 3, &mut rng).is_err());
    }

    #[test]
    fn matches_direct_formula() {
        let (store, mha) = build(8, 2, 1);
        let mut rng = SeedTree::new(2).stream("x");
        let x = Tensor::from_fn([3 * 5, 8], |_| standard_normal(&mut rng));
        let y = run(&store, &mha, &x, 5);
        for s in 0..3 {
            for (i, row) in oracle(&store, &mha, &x, s * 5, 5).iter().enumerate() {
                for (a, b) in y.row(s * 5 + i).iter().zip(row) {
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_queries_attend_uniformly() {
        let (mut store, mha) = build(6, 3, 4);
        store.get_mut(mha.query.weight).data_mut().fill(0.0);
        store.get_mut(mha.query.bias.unwrap()).data_mut().fill(0.0);
        let mut rng = SeedTree::new(5).stream("x");
        let x = Tensor::from_fn([4, 6], |_| standard_normal(&mut rng));
        let y = run(&store, &mha, &x, 4);
        let mut mean_v = vec![0.0; 6];
        for r in 0..4 {
            for (m, v) in mean_v.iter_mut().zip(proj(&store, &mha.value, x.row(r))) {
                *m += v / 4.0;
            }
        }
        let expect = proj(&store, &mha.output, &mean_v);
        for r in 0..4 {
            for (a, b) in y.row(r).iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_passes_values_through() {
        let (store, mha) = build(4, 2, 6);
        let x = Tensor::from_fn([1, 4], |i| i as f64 - 1.5);
        let y = run(&store, &mha, &x, 1);
        let expect = proj(&store, &mha.output, &proj(&store, &mha.value, x.row(0)));
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let (store, mha) = build(8, 4, 7);
        let mut rng = SeedTree::new(8).stream("x");
        let x = Tensor::from_fn([6, 8], |_| standard_normal(&mut rng));
        let perm = [3, 0, 5, 1, 4, 2];
        let mut xp = Tensor::zeros([6, 8]);
        for (i, &p) in perm.iter().enumerate() {
            xp.row_mut(i).copy_from_slice(x.row(p));
        }
        let (y, yp) = (run(&store, &mha, &x, 6), run(&store, &mha, &xp, 6));
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = SeedTree::new(9).stream("x");
        let s = Tensor::<f64>::from_fn([7, 7], |_| standard_normal::<f64, _>(&mut rng) * 5.0);
        let w = tensor::softmax(&s, 1).unwrap();
        for r in 0..7 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn gradient_check_passes() {
        let (store, mha) = build(4, 2, 10);
        let mut rng = SeedTree::new(11).stream("x");
        let x = Tensor::from_fn([2 * 3, 4], |_| standard_normal(&mut rng));
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let mut ctx = Ctx::on_leaves(tape, vars)?;
            let xv = ctx.tape.constant(x.clone());
            let y = mha.forward(&mut ctx, xv, 3)?;
            let y2 = ctx.tape.mul(y, y)?;
            ctx.tape.sum(y2)
        };
        let report = gradient_check(f, store.tensors(), 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
