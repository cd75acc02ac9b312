//! Transformer constituents: parameter storage, linear layers, layer norm,
//! feed-forward blocks, multi-head attention and patch embedding.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`]s. A forward
//! pass binds the whole store onto a fresh tape ([`Ctx::new`]) so that
//! parameter `i` is tape leaf `i` and gradients map straight back.

mod attention;
mod ffn;
mod layers;
mod patch;

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Gradients, Tape, Var};
use crate::rng::{self, StreamRng};
use crate::{Error, Result, Scalar, Tensor};

pub use attention::MultiHeadAttention;
pub use ffn::FeedForward;
pub use layers::{LayerNorm, Linear};
pub use patch::{extract_patches, PatchEmbed};

/// Default standard deviation for scratch initialization of weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut StreamRng) -> ParamId {
        let t = Tensor::from_fn(shape.to_vec(), |_| rng::truncated_normal(rng, std));
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every tensor with the identically named one from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::config("parameter count differs"));
        }
        for (i, (name, t)) in other.iter().enumerate() {
            if self.names[i] != name || self.tensors[i].shape() != t.shape() {
                return Err(Error::config(alloc::format!("parameter `{name}` does not match")));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// Leaves `offset..offset + len` of a tape bound with [`Ctx::new`].
    pub fn gradients(&self, grads: &Gradients<T>, bound: ParamVars) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| grads.get_or_zeros(bound.var(ParamId(i)), t))
            .collect()
    }
}

/// Location of a bound parameter store on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamVars {
    offset: usize,
}

impl ParamVars {
    pub fn var(self, id: ParamId) -> Var {
        crate::autograd::tape_var(self.offset + id.0)
    }
}

/// Forward-pass context: the tape, the bound parameters, the mode flag and
/// the routing-noise stream.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    params: ParamVars,
    train: bool,
    noise: Option<&'a mut StreamRng>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Binds every parameter of `store` as a leaf; differentiable when
    /// `trainable`.
    pub fn new(tape: &'a mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let offset = tape.len();
        for t in store.tensors() {
            if trainable {
                tape.param(t.clone());
            } else {
                tape.constant(t.clone());
            }
        }
        Ctx {
            tape,
            params: ParamVars { offset },
            train: false,
            noise: None,
        }
    }

    /// Reuses leaves already on the tape, e.g. the ones a gradient check
    /// creates. `leaves` must be contiguous and ordered like the store.
    pub fn on_leaves(tape: &'a mut Tape<T>, leaves: &[Var]) -> Result<Self> {
        let offset = leaves.first().map_or(tape.len(), |v| v.index());
        if leaves.iter().enumerate().any(|(i, v)| v.index() != offset + i) {
            return Err(Error::invalid("Ctx::on_leaves", "leaves are not contiguous"));
        }
        Ok(Ctx {
            tape,
            params: ParamVars { offset },
            train: false,
            noise: None,
        })
    }

    /// Enables training mode; routing noise is drawn from `noise`.
    pub fn training(mut self, noise: &'a mut StreamRng) -> Self {
        self.train = true;
        self.noise = Some(noise);
        self
    }

    /// Training mode without a noise source (noise disabled everywhere).
    pub fn training_without_noise(mut self) -> Self {
        self.train = true;
        self
    }

    #[inline]
    pub fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }

    pub fn bound(&self) -> ParamVars {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn noise_rng(&mut self) -> Option<&mut StreamRng> {
        self.noise.as_deref_mut()
    }
}
