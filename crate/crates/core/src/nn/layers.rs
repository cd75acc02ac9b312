use alloc::format;

use super::{Ctx, ParamId, ParamStore, INIT_STD};
use crate::autograd::Var;
use crate::rng::StreamRng;
use crate::{Result, Scalar, Tensor};

/// `y = x Wᵀ + b` with `W` shaped `[out×in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut StreamRng,
    ) -> Self {
        let weight = store.add_trunc_normal(format!("{name}.weight"), &[out_dim, in_dim], INIT_STD, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.linear(x, ctx.p(self.weight), b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Layer normalization over the last axis with learned affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]));
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b, T::of(self.eps))
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}
