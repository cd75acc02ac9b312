use alloc::format;

use super::{Ctx, Linear, ParamStore};
use crate::autograd::Var;
use crate::rng::StreamRng;
use crate::tensor::{self, Activation};
use crate::{Result, Scalar, Tensor};

/// Two-layer feed-forward block `w2 · φ(w1 · x + b1) + b2`; also the body of
/// every expert.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub const DEFAULT_EXPANSION: usize = 4;

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut StreamRng,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_dim
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.activation(h, self.activation)?;
        self.fc2.forward(ctx, h)
    }

    /// Evaluates the block on rows of `x` without recording a tape.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b1 = self.fc1.bias.map(|b| store.get(b));
        let h = tensor::linear(x, store.get(self.fc1.weight), b1)?;
        let h = h.map(|v| self.activation.apply(v)).check_finite(self.activation.name())?;
        let b2 = self.fc2.bias.map(|b| store.get(b));
        tensor::linear(&h, store.get(self.fc2.weight), b2)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradient_check, Tape};
    use crate::rng::SeedTree;
    use alloc::vec::Vec;

    fn setup(act: Activation) -> (ParamStore<f64>, FeedForward) {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(3).stream("ffn");
        let ffn = FeedForward::new(&mut store, "ffn", 4, 16, act, &mut rng);
        (store, ffn)
    }

    #[test]
    fn negative_preactivations_give_output_bias() {
        let (mut store, ffn) = setup(Activation::Relu);
        store.get_mut(ffn.fc1.bias.unwrap()).data_mut().iter_mut().for_each(|v| *v = -100.0);
        let b2 = Tensor::from_fn([4], |i| i as f64 * 0.5);
        *store.get_mut(ffn.fc2.bias.unwrap()) = b2.clone();
        let x = Tensor::from_fn([3, 4], |i| (i as f64 * 0.1).sin());
        let y = ffn.apply(&store, &x).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), b2.data());
        }
    }

    #[test]
    fn zero_everything_gives_zero() {
        let (mut store, ffn) = setup(Activation::Gelu);
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let x = Tensor::from_fn([2, 4], |i| i as f64);
        assert!(ffn.apply(&store, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_manual_composition_and_tape() {
        let (mut store, ffn) = setup(Activation::Gelu);
        let mut rng = SeedTree::new(9).stream("x");
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = crate::rng::standard_normal(&mut rng);
            }
        }
        let x = Tensor::from_fn([3, 4], |_| crate::rng::standard_normal(&mut rng));
        let (w1, b1) = (store.get(ffn.fc1.weight), store.get(ffn.fc1.bias.unwrap()));
        let (w2, b2) = (store.get(ffn.fc2.weight), store.get(ffn.fc2.bias.unwrap()));
        let mut expect = Vec::new();
        for r in 0..3 {
            let h: Vec<f64> = (0..16)
                .map(|j| {
                    let z: f64 = (0..4).map(|i| w1.at(j, i) * x.at(r, i)).sum::<f64>() + b1.data()[j];
                    tensor::gelu_scalar(z)
                })
                .collect();
            for o in 0..4 {
                expect.push((0..16).map(|j| w2.at(o, j) * h[j]).sum::<f64>() + b2.data()[o]);
            }
        }
        let got = ffn.apply(&store, &x).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12);
        }

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let xv = ctx.tape.constant(x.clone());
        let y = ffn.forward(&mut ctx, xv).unwrap();
        assert_eq!(tape.value(y), &got);
    }

    #[test]
    fn gradient_check_passes() {
        let (store, ffn) = setup(Activation::Gelu);
        let mut rng = SeedTree::new(10).stream("g");
        let theta: Vec<Tensor<f64>> = store
            .tensors()
            .iter()
            .map(|t| Tensor::from_fn(t.shape().to_vec(), |_| crate::rng::standard_normal::<f64, _>(&mut rng) * 0.5))
            .collect();
        let x = Tensor::from_fn([2, 4], |_| crate::rng::standard_normal(&mut rng));
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let mut ctx = Ctx::on_leaves(tape, vars)?;
            let xv = ctx.tape.constant(x.clone());
            let y = ffn.forward(&mut ctx, xv)?;
            let y2 = ctx.tape.mul(y, y)?;
            ctx.tape.sum(y2)
        };
        let report = gradient_check(f, &theta, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
