//! Finite-difference gradient suite: every differentiable tape operation,
//! every layer and a full tiny GMoE forward pass with the balancing loss, all
//! in 64-bit.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{gradient_check, gradient_check_with, Difference, Tape, Var};
use crate::losses;
use crate::model::{build_gmoe, Classifier, ModelConfig, Placement};
use crate::moe::{MoELayer, RouterConfig, RouterKind};
use crate::nn::{extract_patches, Ctx, FeedForward, MultiHeadAttention, ParamStore, PatchEmbed};
use crate::rng::{standard_normal, SeedTree, StreamRng};
use crate::tensor::Activation;
use crate::{Result, Tensor};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step for single operations.
pub const STEP: f64 = 1e-6;
/// Richardson step for layers.
pub const LAYER_STEP: f64 = 1e-4;
/// Romberg step for the composed model, whose true gradients reach `1e-7`
/// and need a large step against roundoff.
pub const MODEL_STEP: f64 = 1e-2;
/// Smallest gap between any two router logits of a token, relative to the
/// largest logit magnitude, at the routed check points; expert selection is
/// locally constant there.
pub const MIN_ROUTING_MARGIN: f64 = 0.04;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// (parameter, flat element) of the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| scale * standard_normal::<f64, _>(rng))
}

/// Contracts `y` with fixed random weights so every element contributes.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SeedTree::new(seed).stream("projection");
    let w = uniform(t.value(y).shape(), &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn case(name: &'static str, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, theta: &[Tensor<f64>]) -> Result<SuiteCase> {
    let r = gradient_check(f, theta, STEP)?;
    Ok(SuiteCase {
        name,
        max_rel_error: r.max_rel_error,
        worst: r.worst,
        checked: r.checked,
    })
}

/// Composed functions have entries with tiny gradients (e.g. experts with
/// gates near zero) where a small central step is dominated by roundoff.
fn composed_case(name: &'static str, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, theta: &[Tensor<f64>]) -> Result<SuiteCase> {
    let r = gradient_check_with(f, theta, LAYER_STEP, Difference::Richardson)?;
    Ok(SuiteCase {
        name,
        max_rel_error: r.max_rel_error,
        worst: r.worst,
        checked: r.checked,
    })
}

/// Perturbs every parameter so that layer norms and routers leave their
/// symmetric initial point.
fn jitter(store: &ParamStore<f64>, scale: f64, rng: &mut StreamRng) -> Vec<Tensor<f64>> {
    store
        .tensors()
        .iter()
        .map(|t| Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + scale * standard_normal::<f64, _>(rng)))
        .collect()
}

/// One check per tape operation on random inputs drawn from `seed`.
pub fn operation_cases(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = SeedTree::new(seed).stream("ops");
    let a = uniform(&[3, 4], &mut rng);
    let b = uniform(&[4, 2], &mut rng);
    let c = uniform(&[3, 4], &mut rng);
    let w = uniform(&[5, 4], &mut rng);
    let bias = uniform(&[5], &mut rng);
    let gamma = uniform(&[4], &mut rng);
    let beta = uniform(&[4], &mut rng);
    let s = uniform(&[3], &mut rng);
    let pos = Tensor::from_fn([3, 4], |_| rng.random_range(0.5..2.0));
    let p = seed;
    Ok(vec![
        case("matmul", |t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, p) }, &[a.clone(), b.clone()])?,
        case("matmul_nt", |t, v| { let y = t.matmul_nt(v[0], v[1])?; project(t, y, p) }, &[a.clone(), c.clone()])?,
        case("linear", |t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; project(t, y, p) }, &[a.clone(), w.clone(), bias.clone()])?,
        case("add_sub_mul", |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.sub(y, v[1])?;
            let y = t.mul(y, v[1])?;
            project(t, y, p)
        }, &[a.clone(), c.clone()])?,
        case("div", |t, v| { let y = t.div(v[0], v[1])?; project(t, y, p) }, &[a.clone(), pos.clone()])?,
        case("scale", |t, v| { let y = t.scale(v[0], -1.7)?; project(t, y, p) }, &[a.clone()])?,
        case("relu", |t, v| { let y = t.relu(v[0])?; project(t, y, p) }, &[a.clone()])?,
        case("gelu", |t, v| { let y = t.activation(v[0], Activation::Gelu)?; project(t, y, p) }, &[a.clone()])?,
        case("softmax", |t, v| { let y = t.softmax(v[0], 1)?; project(t, y, p) }, &[a.clone()])?,
        case("layer_norm", |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?; project(t, y, p) }, &[a.clone(), gamma.clone(), beta.clone()])?,
        case("l2_norm", |t, v| t.l2_norm(v[0]), &[a.clone()])?,
        case("normalize_rows", |t, v| { let (y, _) = t.normalize_rows(v[0], 1e-12)?; project(t, y, p) }, &[a.clone()])?,
        case("transpose_reshape", |t, v| {
            let y = t.transpose(v[0])?;
            let y = t.reshape(y, &[2, 6])?;
            project(t, y, p)
        }, &[a.clone()])?,
        case("sum_mean", |t, v| {
            let x = t.mul(v[0], v[0])?;
            let s = t.sum(x)?;
            let m = t.mean(v[0])?;
            let m = t.mul(m, m)?;
            t.add(s, m)
        }, &[a.clone()])?,
        case("slice_concat", |t, v| {
            let l = t.slice(v[0], 0, 3, 0, 2)?;
            let r = t.slice(v[0], 1, 2, 2, 2)?;
            let top = t.slice(l, 0, 2, 0, 2)?;
            let cc = t.concat_cols(&[top, r])?;
            let cr = t.concat_rows(&[top, l])?;
            let x = project(t, cr, p)?;
            let y = project(t, cc, p + 1)?;
            t.add(x, y)
        }, &[a.clone()])?,
        case("gather_scatter", |t, v| {
            let g = t.gather_rows(v[0], &[2, 0, 2])?;
            let e = t.gather_elems(v[0], &[1, 5, 5, 11])?;
            let sc = t.scatter_rows(g, &[1, 1, 3], 4)?;
            let sr = t.sum_rows(sc)?;
            let x = project(t, sr, p)?;
            let y = project(t, e, p + 1)?;
            t.add(x, y)
        }, &[a.clone()])?,
        case("scale_rows_mean_groups", |t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            let y = t.concat_rows(&[y, v[0]])?;
            let y = t.mean_groups(y, 2)?;
            project(t, y, p)
        }, &[a.clone(), s.clone()])?,
        case("normal_cdf", |t, v| { let y = t.normal_cdf(v[0])?; project(t, y, p) }, &[a.clone()])?,
        case("cross_entropy", |t, v| t.cross_entropy(v[0], &[1, 3, 0]), &[a.clone()])?,
        composed_case("balance_loss", |t, v| {
            let g = t.mul(v[0], v[0])?;
            let cls = t.cross_entropy(v[1], &[2, 0, 1])?;
            let aux = losses::balance_var(t, g)?;
            losses::total_var(t, cls, Some(aux), losses::DEFAULT_LAMBDA)
        }, &[pos.clone(), a.clone()])?,
    ])
}

/// One check per layer: feed-forward, attention, patch embedding and an MoE
/// layer (through gates and load probabilities).
pub fn layer_cases(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = SeedTree::new(seed).stream("layers");
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "ffn", 4, 6, Activation::Gelu, &mut rng);
    let theta = jitter(&store, 0.5, &mut rng);
    let x = gaussian(&[2, 4], 1.0, &mut rng);
    out.push(composed_case("feed_forward", |t, v| {
        let mut ctx = Ctx::on_leaves(t, v)?;
        let xv = ctx.tape.constant(x.clone());
        let y = ffn.forward(&mut ctx, xv)?;
        project(ctx.tape, y, seed)
    }, &theta)?);

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", 4, 2, &mut rng)?;
    let theta = jitter(&store, 0.5, &mut rng);
    let x = gaussian(&[6, 4], 1.0, &mut rng);
    out.push(composed_case("attention", |t, v| {
        let mut ctx = Ctx::on_leaves(t, v)?;
        let xv = ctx.tape.constant(x.clone());
        let y = mha.forward(&mut ctx, xv, 3)?;
        project(ctx.tape, y, seed)
    }, &theta)?);

    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "embed", 2, (4, 4), 2, 3, &mut rng)?;
    let theta = jitter(&store, 0.5, &mut rng);
    let patches = extract_patches(&gaussian(&[2, 2, 4, 4], 1.0, &mut rng), 2)?;
    out.push(composed_case("patch_embed", |t, v| {
        let mut ctx = Ctx::on_leaves(t, v)?;
        let xv = ctx.tape.constant(patches.clone());
        let y = pe.forward(&mut ctx, xv)?;
        project(ctx.tape, y, seed)
    }, &theta)?);

    for (name, kind) in [("moe_cosine", RouterKind::Cosine), ("moe_linear", RouterKind::Linear)] {
        let mut store = ParamStore::new();
        let cfg = RouterConfig::new(kind, 3, 2);
        let moe = MoELayer::new(&mut store, "moe", 4, 6, Activation::Gelu, cfg, &mut rng)?;
        let x = gaussian(&[5, 4], 1.0, &mut rng);
        let mut probe = store.clone();
        let theta = loop {
            let theta = jitter(&store, 0.3, &mut rng);
            probe.tensors_mut().clone_from_slice(&theta);
            if routing_margin(&moe.router.decide(&probe, &x, None)?.raw_logits) >= MIN_ROUTING_MARGIN {
                break theta;
            }
        };
        out.push(composed_case(name, |t, v| {
            let mut ctx = Ctx::on_leaves(t, v)?.training_without_noise();
            let xv = ctx.tape.constant(x.clone());
            let o = moe.forward(&mut ctx, xv)?;
            let a = project(ctx.tape, o.output, seed)?;
            let b = project(ctx.tape, o.route.load, seed + 1)?;
            ctx.tape.add(a, b)
        }, &theta)?);
    }
    Ok(out)
}

/// Full forward pass of the tiny GMoE (two blocks of width 8, three experts,
/// top-2 cosine routing in block 0) with cross-entropy plus the balancing
/// losses at `λ = 0.01`. Uses Romberg differences with step
/// [`MODEL_STEP`] at a point whose routing margin is at least
/// [`MIN_ROUTING_MARGIN`].
pub fn model_case(seed: u64) -> Result<SuiteCase> {
    let cfg = ModelConfig::tiny(3, 2, Placement::EveryTwo);
    let model = build_gmoe::<f64>(&cfg, seed)?;
    let mut rng = SeedTree::new(seed).stream("model-case");
    let x = gaussian(&[2, 1, 4, 4], 1.0, &mut rng);
    let mut probe = model.clone();
    let theta = loop {
        let theta = jitter(&model.params, 0.3, &mut rng);
        probe.params.tensors_mut().clone_from_slice(&theta);
        let (_, trace) = probe.predict(&x, None)?;
        if trace.layers.iter().all(|l| routing_margin(&l.decision.raw_logits) >= MIN_ROUTING_MARGIN) {
            break theta;
        }
    };
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let mut ctx = Ctx::on_leaves(t, v)?.training_without_noise();
        let out = model.forward(&mut ctx, &x)?;
        let cls = ctx.tape.cross_entropy(out.logits, &[0, 2])?;
        let mut aux = None;
        for rec in &out.moe {
            let i = losses::balance_var(ctx.tape, rec.route.gates)?;
            let l = losses::balance_var(ctx.tape, rec.route.load)?;
            let both = ctx.tape.add(i, l)?;
            aux = Some(match aux {
                Some(a) => ctx.tape.add(a, both)?,
                None => both,
            });
        }
        losses::total_var(ctx.tape, cls, aux, losses::DEFAULT_LAMBDA)
    };
    let r = gradient_check_with(f, &theta, MODEL_STEP, Difference::Romberg)?;
    Ok(SuiteCase {
        name: "gmoe_tiny",
        max_rel_error: r.max_rel_error,
        worst: r.worst,
        checked: r.checked,
    })
}

/// Smallest distance between two logits of the same token divided by the
/// largest logit magnitude.
pub fn routing_margin(logits: &Tensor<f64>) -> f64 {
    let scale = logits.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut gap = f64::INFINITY;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        for i in 0..row.len() {
            for j in 0..i {
                gap = gap.min((row[i] - row[j]).abs());
            }
        }
    }
    gap / scale
}

/// Operations, layers and the tiny model.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = operation_cases(seed)?;
    cases.extend(layer_cases(seed)?);
    cases.push(model_case(seed)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in 0..5 {
            for c in run_suite(seed).unwrap() {
                assert!(c.passed(), "seed {seed}: {c:?}");
                assert!(c.checked > 0);
            }
        }
    }

    #[test]
    fn operations_pass_over_many_draws() {
        for seed in 100..200 {
            for c in operation_cases(seed).unwrap() {
                assert!(c.passed(), "seed {seed}: {c:?}");
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        // relu has a kink at 0; an input exactly there is reported.
        let r = case("kink", |t, v| { let y = t.relu(v[0])?; t.sum(y) }, &[Tensor::vector(vec![0.0])]).unwrap();
        assert!(!r.passed());
    }
}
