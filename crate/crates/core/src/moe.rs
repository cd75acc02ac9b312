//! Sparse mixture-of-experts: linear and cosine routers, noisy top-k gating,
//! the differentiable load estimate and sparse expert dispatch.
//!
//! Gate weights are the softmax of the (noisy) router logits with all but the
//! top-k entries zeroed. Kept values are not renormalized, so a row sums to
//! less than one whenever `k < N`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::autograd::{Tape, Var};
use crate::nn::{Ctx, FeedForward, ParamId, ParamStore, INIT_STD};
use crate::rng::{self, StreamRng};
use crate::tensor::Activation;
use crate::{Error, Result, Scalar, Tensor};

/// Norms of projected tokens are clamped below at this value.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RouterKind {
    Linear,
    #[default]
    Cosine,
}

impl RouterKind {
    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Linear => "linear",
            RouterKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(RouterKind::Linear),
            "cosine" => Some(RouterKind::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RouterConfig {
    pub kind: RouterKind,
    pub num_experts: usize,
    pub k: usize,
    /// Cosine routers only.
    pub temperature: f64,
    /// Width of the cosine embedding space; `None` means the model width.
    pub embed_dim: Option<usize>,
    pub noise_enabled: bool,
    /// `None` means `1 / num_experts`.
    pub noise_std: Option<f64>,
}

impl RouterConfig {
    pub const DEFAULT_TEMPERATURE: f64 = 0.07;

    pub fn new(kind: RouterKind, num_experts: usize, k: usize) -> Self {
        RouterConfig {
            kind,
            num_experts,
            k,
            temperature: Self::DEFAULT_TEMPERATURE,
            embed_dim: None,
            noise_enabled: true,
            noise_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::config("router needs at least one expert"));
        }
        if self.k == 0 || self.k > self.num_experts {
            return Err(Error::config(format!(
                "top-k must be in 1..={}, got {}",
                self.num_experts, self.k
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("router temperature must be positive"));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::config("router embedding width must be positive"));
        }
        if let Some(s) = self.noise_std {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("routing noise std must be non-negative"));
            }
        }
        Ok(())
    }

    /// Effective noise standard deviation; zero when noise is disabled.
    pub fn noise_std(&self) -> f64 {
        if !self.noise_enabled {
            return 0.0;
        }
        self.noise_std.unwrap_or(1.0 / self.num_experts as f64)
    }
}

/// Per-token routing result for one batch of `T` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision<T: Scalar = f64> {
    pub raw_logits: Tensor<T>,
    pub noisy_logits: Tensor<T>,
    /// Softmax of the noisy logits with non-selected entries zeroed.
    pub gate_weights: Tensor<T>,
    /// Selected experts per token in rank order: descending noisy logit,
    /// ties to the lower index.
    pub selected: Vec<Vec<usize>>,
    pub load_prob: Tensor<T>,
}

impl<T: Scalar> GateDecision<T> {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn num_experts(&self) -> usize {
        self.raw_logits.cols()
    }

    pub fn top1(&self, token: usize) -> usize {
        self.selected[token][0]
    }

    /// Number of tokens whose selection includes each expert.
    pub fn expert_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_experts()];
        for sel in &self.selected {
            for &e in sel {
                counts[e] += 1;
            }
        }
        counts
    }
}

/// Result of [`top_k_mask`].
#[derive(Debug, Clone, PartialEq)]
pub struct TopK<T: Scalar = f64> {
    /// Row-major `[T×N]` keep flags.
    pub mask: Vec<bool>,
    /// Input with every non-kept entry set to zero.
    pub kept: Tensor<T>,
    pub selected: Vec<Vec<usize>>,
}

/// Ranks each row in descending order, ties to the lower index.
fn ranked<T: Scalar>(row: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Keeps the `k` largest entries of each row of `scores[T×N]` and zeroes the
/// rest. Kept values are left as they are.
pub fn top_k_mask<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<TopK<T>> {
    let (t, n) = scores.expect_rank2("top_k_mask")?;
    if k == 0 || k > n {
        return Err(Error::invalid("top_k_mask", format!("k = {k} with {n} experts")));
    }
    let mut mask = vec![false; t * n];
    let mut kept = Tensor::zeros([t, n]);
    let mut selected = Vec::with_capacity(t);
    for r in 0..t {
        let row = scores.row(r);
        let sel: Vec<usize> = ranked(row).into_iter().take(k).collect();
        for &e in &sel {
            mask[r * n + e] = true;
            kept.row_mut(r)[e] = row[e];
        }
        selected.push(sel);
    }
    Ok(TopK { mask, kept, selected })
}

fn sample_noise<T: Scalar>(shape: &[usize], std: f64, rng: &mut StreamRng) -> Result<Tensor<T>> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid("add_routing_noise", "std must be non-negative"));
    }
    let s = T::of(std);
    Ok(Tensor::from_fn(shape.to_vec(), |_| rng::standard_normal::<T, _>(rng) * s))
}

/// `logits + N(0, std²)` drawn elementwise from `rng`.
pub fn add_routing_noise<T: Scalar>(logits: &Tensor<T>, std: f64, rng: &mut StreamRng) -> Result<Tensor<T>> {
    let noise = sample_noise(logits.shape(), std, rng)?;
    crate::tensor::add(logits, &noise)
}

/// Flat index of the k-th largest noisy logit among the experts other than
/// `e`, for every `(token, e)`; `None` when fewer than `k` others exist.
fn threshold_indices<T: Scalar>(noisy: &Tensor<T>, k: usize) -> Result<Vec<Option<usize>>> {
    let (t, n) = noisy.expect_rank2("load_probability")?;
    let mut out = Vec::with_capacity(t * n);
    for r in 0..t {
        let order = ranked(noisy.row(r));
        for e in 0..n {
            out.push(order.iter().filter(|&&j| j != e).nth(k - 1).map(|&j| r * n + j));
        }
    }
    Ok(out)
}

/// Probability that expert `e` stays in the top-k when only its own noise
/// is resampled: `Φ((raw_e − η_k) / std)`, with `η_k` the k-th largest noisy
/// logit among the other experts. A zero `std` yields the hard indicator
/// `raw_e > η_k`.
pub fn load_probability<T: Scalar>(raw: &Tensor<T>, noisy: &Tensor<T>, k: usize, std: f64) -> Result<Tensor<T>> {
    if raw.shape() != noisy.shape() {
        return Err(Error::ShapeMismatch {
            op: "load_probability",
            lhs: raw.shape().to_vec(),
            rhs: noisy.shape().to_vec(),
        });
    }
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid("load_probability", "std must be non-negative"));
    }
    let (_, n) = raw.expect_rank2("load_probability")?;
    if k == 0 || k > n {
        return Err(Error::invalid("load_probability", format!("k = {k} with {n} experts")));
    }
    let thr = threshold_indices(noisy, k)?;
    let s = T::of(std);
    let data = raw
        .data()
        .iter()
        .zip(&thr)
        .map(|(&x, t)| match t {
            None => T::one(),
            Some(j) if std == 0.0 => {
                if x > noisy.data()[*j] {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Some(j) => crate::scalar::normal_cdf((x - noisy.data()[*j]) / s),
        })
        .collect();
    Tensor::new(raw.shape().to_vec(), data)?.check_finite("load_probability")
}

/// Tape nodes of one routing pass.
#[derive(Debug, Clone, Copy)]
pub struct RouteVars {
    pub logits: Var,
    pub gates: Var,
    pub load: Var,
}

/// Linear (`W x`) or cosine (`⟨E_e, W x⟩ / (τ‖W x‖‖E_e‖)`) router.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub config: RouterConfig,
    /// `[N×d]` for linear routers, `[d_e×d]` for cosine routers.
    pub weight: ParamId,
    /// `[d_e×N]` expert embeddings, cosine routers only.
    pub embedding: Option<ParamId>,
    pub dim: usize,
}

impl Router {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        config: RouterConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.num_experts;
        let (weight, embedding) = match config.kind {
            RouterKind::Linear => (store.add_trunc_normal(format!("{name}.weight"), &[n, dim], INIT_STD, rng), None),
            RouterKind::Cosine => {
                let de = config.embed_dim.unwrap_or(dim);
                let w = store.add_trunc_normal(format!("{name}.weight"), &[de, dim], INIT_STD, rng);
                let e = store.add(format!("{name}.embedding"), unit_columns(de, n, rng));
                (w, Some(e))
            }
        };
        Ok(Router {
            config,
            weight,
            embedding,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        let n = self.config.num_experts;
        match self.config.kind {
            RouterKind::Linear => n * self.dim,
            RouterKind::Cosine => {
                let de = self.config.embed_dim.unwrap_or(self.dim);
                de * self.dim + de * n
            }
        }
    }

    /// Pre-noise router logits `[T×N]`.
    pub fn logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        match (self.config.kind, self.embedding) {
            (RouterKind::Linear, _) => ctx.tape.linear(x, w, None),
            (RouterKind::Cosine, Some(e)) => {
                let wx = ctx.tape.linear(x, w, None)?;
                let (wx, _) = ctx.tape.normalize_rows(wx, T::of(MIN_NORM))?;
                let et = ctx.tape.transpose(ctx.p(e))?;
                let (et, _) = ctx.tape.normalize_rows(et, T::of(MIN_NORM))?;
                let cos = ctx.tape.matmul_nt(wx, et)?;
                ctx.tape.scale(cos, T::of(1.0 / self.config.temperature))
            }
            (RouterKind::Cosine, None) => Err(Error::config("cosine router has no expert embedding")),
        }
    }

    /// Routes the rows of `x[T×d]`. Noise is added only in training mode with
    /// a noise stream attached.
    pub fn route<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(RouteVars, GateDecision<T>)> {
        let cfg = &self.config;
        let std = cfg.noise_std();
        let logits = self.logits(ctx, x)?;
        let raw = ctx.tape.value(logits).clone();
        let noisy = if ctx.is_training() && std > 0.0 {
            match ctx.noise_rng() {
                Some(rng) => {
                    let noise = sample_noise(raw.shape(), std, rng)?;
                    let n = ctx.tape.constant(noise);
                    ctx.tape.add(logits, n)?
                }
                None => logits,
            }
        } else {
            logits
        };
        let noisy_t = ctx.tape.value(noisy).clone();
        let top = top_k_mask(&noisy_t, cfg.k)?;

        let probs = ctx.tape.softmax(noisy, 1)?;
        let mask = Tensor::new(
            raw.shape().to_vec(),
            top.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
        )?;
        let mask = ctx.tape.constant(mask);
        let gates = ctx.tape.mul(probs, mask)?;
        let load = load_var(ctx.tape, logits, noisy, cfg.k, std)?;

        let decision = GateDecision {
            raw_logits: raw,
            noisy_logits: noisy_t,
            gate_weights: ctx.tape.value(gates).clone(),
            selected: top.selected,
            load_prob: ctx.tape.value(load).clone(),
        };
        Ok((RouteVars { logits, gates, load }, decision))
    }

    /// Routes `x` without gradients; noise is drawn from `noise` when given.
    pub fn decide<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        noise: Option<&mut StreamRng>,
    ) -> Result<GateDecision<T>> {
        let mut tape = Tape::new();
        let ctx = Ctx::new(&mut tape, store, false);
        let mut ctx = match noise {
            Some(rng) => ctx.training(rng),
            None => ctx,
        };
        let xv = ctx.tape.constant(x.clone());
        self.route(&mut ctx, xv).map(|(_, d)| d)
    }
}

/// Gaussian columns scaled to unit norm.
fn unit_columns<T: Scalar>(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor<T> {
    let mut m: Tensor<T> = Tensor::from_fn([rows, cols], |_| rng::standard_normal(rng));
    for c in 0..cols {
        let norm = (0..rows).map(|r| m.at(r, c) * m.at(r, c)).sum::<T>().sqrt();
        let norm = if norm > T::zero() { norm } else { T::one() };
        for r in 0..rows {
            m.data_mut()[r * cols + c] /= norm;
        }
    }
    m
}

fn load_var<T: Scalar>(tape: &mut Tape<T>, raw: Var, noisy: Var, k: usize, std: f64) -> Result<Var> {
    let shape = tape.value(raw).shape().to_vec();
    let thr = threshold_indices(tape.value(noisy), k)?;
    if thr.iter().any(Option::is_none) || std == 0.0 {
        let p = load_probability(tape.value(raw), tape.value(noisy), k, std)?;
        return Ok(tape.constant(p));
    }
    let idx: Vec<usize> = thr.into_iter().flatten().collect();
    let eta = tape.gather_elems(noisy, &idx)?;
    let eta = tape.reshape(eta, &shape)?;
    let z = tape.sub(raw, eta)?;
    let z = tape.scale(z, T::of(1.0 / std))?;
    tape.normal_cdf(z)
}

/// Output of [`MoELayer::forward`].
#[derive(Debug, Clone)]
pub struct MoEOutput<T: Scalar = f64> {
    pub output: Var,
    pub route: RouteVars,
    pub decision: GateDecision<T>,
}

/// Router plus `N` identically shaped expert feed-forward blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    pub router: Router,
    pub experts: Vec<FeedForward>,
}

impl MoELayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
        config: RouterConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let router = Router::new(store, &format!("{name}.router"), dim, config, rng)?;
        let experts = (0..router.config.num_experts)
            .map(|e| FeedForward::new(store, &format!("{name}.expert{e}"), dim, hidden, activation, rng))
            .collect();
        Ok(MoELayer { router, experts })
    }

    pub fn num_params(&self) -> usize {
        self.router.num_params() + self.experts.iter().map(FeedForward::num_params).sum::<usize>()
    }

    /// `y_t = Σ_{e ∈ selected(t)} g_{t,e} · FFN_e(x_t)`. Each expert runs only
    /// on the tokens routed to it; unselected experts are never evaluated.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<MoEOutput<T>> {
        let (t, d) = ctx.tape.value(x).expect_rank2("moe_forward")?;
        if d != self.router.dim {
            return Err(Error::ShapeMismatch {
                op: "moe_forward",
                lhs: vec![t, d],
                rhs: vec![t, self.router.dim],
            });
        }
        let (route, decision) = self.router.route(ctx, x)?;
        let n = self.experts.len();
        let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (tok, sel) in decision.selected.iter().enumerate() {
            for &e in sel {
                tokens[e].push(tok);
            }
        }
        let mut acc: Option<Var> = None;
        for (e, idx) in tokens.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let xe = ctx.tape.gather_rows(x, idx)?;
            let ye = self.experts[e].forward(ctx, xe)?;
            let flat: Vec<usize> = idx.iter().map(|&tok| tok * n + e).collect();
            let g = ctx.tape.gather_elems(route.gates, &flat)?;
            let ye = ctx.tape.scale_rows(ye, g)?;
            let ye = ctx.tape.scatter_rows(ye, idx, t)?;
            acc = Some(match acc {
                None => ye,
                Some(a) => ctx.tape.add(a, ye)?,
            });
        }
        let output = match acc {
            Some(v) => v,
            None => ctx.tape.constant(Tensor::zeros([t, d])),
        };
        Ok(MoEOutput {
            output,
            route,
            decision,
        })
    }
}
