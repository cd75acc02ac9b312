//! Deterministic mini-batch training with Adam, evaluation and
//! train-validation checkpoint selection.
//!
//! Batches come from the `shuffle` stream and routing noise from the
//! `routing-noise` stream of the run seed, so toggling noise never changes
//! the data order. A run is a pure function of its inputs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::losses::{self, LossBreakdown};
use crate::model::{Classifier, RoutingTrace};
use crate::nn::{Ctx, ParamStore};
use crate::rng::{SeedTree, StreamRng, STREAM_NOISE, STREAM_SHUFFLE};
use crate::{DType, Error, Result, Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 1024;

/// Per-dataset optimizer settings; every profile uses 32 samples per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Pacs,
    Vlcs,
    OfficeHome,
    TerraIncognita,
    DomainNet,
}

impl Profile {
    pub const ALL: [Profile; 5] = [
        Profile::Pacs,
        Profile::Vlcs,
        Profile::OfficeHome,
        Profile::TerraIncognita,
        Profile::DomainNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Pacs => "pacs",
            Profile::Vlcs => "vlcs",
            Profile::OfficeHome => "office_home",
            Profile::TerraIncognita => "terra_incognita",
            Profile::DomainNet => "domain_net",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn learning_rate(self) -> f64 {
        match self {
            Profile::Pacs | Profile::Vlcs => 3e-5,
            Profile::OfficeHome => 1e-5,
            Profile::TerraIncognita | Profile::DomainNet => 5e-5,
        }
    }

    pub fn weight_decay(self) -> f64 {
        match self {
            Profile::Pacs | Profile::DomainNet => 0.0,
            Profile::Vlcs | Profile::OfficeHome => 1e-6,
            Profile::TerraIncognita => 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Pacs)
    }
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        TrainConfig {
            learning_rate: p.learning_rate(),
            weight_decay: p.weight_decay(),
            batch_size: 32,
            iterations: 5000,
            lambda: losses::DEFAULT_LAMBDA,
            eval_every: 500,
            seed: 0,
            precision: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be positive".to_string());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f64> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam step with bias correction. Weight decay is decoupled:
/// `θ ← θ − lr·wd·θ` before the moment update.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = T::of(1.0 - libm::pow(BETA1, t as f64));
    let c2 = T::of(1.0 - libm::pow(BETA2, t as f64));
    let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPSILON));
    let (lr, decay) = (T::of(lr), T::of(lr * weight_decay));
    let one = T::one();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
        for ((w, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
            if weight_decay != 0.0 {
                *w -= decay * *w;
            }
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A named set of labeled samples; `inputs` is `[n × …]`.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a, T: Scalar> {
    pub name: &'a str,
    pub inputs: &'a Tensor<T>,
    pub labels: &'a [usize],
}

impl<'a, T: Scalar> Labeled<'a, T> {
    pub fn new(name: &'a str, inputs: &'a Tensor<T>, labels: &'a [usize]) -> Result<Self> {
        if inputs.rank() == 0 || inputs.outer() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "Labeled::new",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Labeled { name, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Balancing statistics of one MoE layer over an evaluated split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerBalance {
    pub block: usize,
    pub importance: f64,
    pub load: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitMetrics {
    pub split: String,
    pub samples: usize,
    pub accuracy: f64,
    /// Mean cross-entropy; the balancing terms are computed over the whole
    /// split and summed over layers.
    pub loss: LossBreakdown,
    pub layers: Vec<LayerBalance>,
}

/// Argmax of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode accuracy, mean loss and balance statistics (routing noise
/// off).
pub fn evaluate<T: Scalar, M: Classifier<T> + ?Sized>(model: &M, split: Labeled<'_, T>, lambda: f64) -> Result<SplitMetrics> {
    if split.is_empty() {
        return Err(Error::EmptySplit(split.name.to_string()));
    }
    let n = split.len();
    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    let mut gate_sums: Vec<Vec<f64>> = Vec::new();
    let mut load_sums: Vec<Vec<f64>> = Vec::new();
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = split.inputs.select(&idx)?;
        let y = &split.labels[start..end];
        let (logits, trace) = model.predict(&x, None)?;
        correct += argmax_rows(&logits).iter().zip(y).filter(|(p, t)| p == t).count();
        ce_sum += losses::cross_entropy(&logits, y)?.as_f64() * (end - start) as f64;
        accumulate_columns(&trace, &mut blocks, &mut gate_sums, &mut load_sums)?;
        start = end;
    }
    let mut layers = Vec::with_capacity(blocks.len());
    for ((block, g), l) in blocks.into_iter().zip(&gate_sums).zip(&load_sums) {
        layers.push(LayerBalance {
            block,
            importance: losses::squared_cv(&Tensor::vector(g.clone()))?,
            load: losses::squared_cv(&Tensor::vector(l.clone()))?,
        });
    }
    let imp = layers.iter().map(|l| l.importance).sum();
    let load = layers.iter().map(|l| l.load).sum();
    Ok(SplitMetrics {
        split: split.name.to_string(),
        samples: n,
        accuracy: correct as f64 / n as f64,
        loss: LossBreakdown::new(ce_sum / n as f64, imp, load, lambda),
        layers,
    })
}

fn accumulate_columns<T: Scalar>(
    trace: &RoutingTrace<T>,
    blocks: &mut Vec<usize>,
    gates: &mut Vec<Vec<f64>>,
    load: &mut Vec<Vec<f64>>,
) -> Result<()> {
    if blocks.is_empty() {
        for layer in &trace.layers {
            blocks.push(layer.block);
            gates.push(vec![0.0; layer.decision.num_experts()]);
            load.push(vec![0.0; layer.decision.num_experts()]);
        }
    }
    for (i, layer) in trace.layers.iter().enumerate() {
        let g = losses::column_sums(&layer.decision.gate_weights)?;
        let l = losses::column_sums(&layer.decision.load_prob)?;
        gates[i].iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b.as_f64());
        load[i].iter_mut().zip(l.data()).for_each(|(a, &b)| *a += b.as_f64());
    }
    Ok(())
}

/// Model parameters and optimizer state after `iteration` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar = f64> {
    pub iteration: usize,
    pub params: ParamStore<T>,
    pub optimizer: AdamState<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMetrics {
    pub iteration: usize,
    /// Mean training objective over the steps since the previous checkpoint;
    /// `None` at iteration 0.
    pub train_loss: Option<LossBreakdown>,
    pub splits: Vec<SplitMetrics>,
}

impl CheckpointMetrics {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T: Scalar = f64> {
    pub checkpoints: Vec<Checkpoint<T>>,
    pub metrics: Vec<CheckpointMetrics>,
    /// Training objective of every step.
    pub step_losses: Vec<LossBreakdown>,
}

/// Epoch-wise shuffled mini-batches; the tail of an epoch shorter than a
/// batch is dropped.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: StreamRng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: StreamRng) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n).max(1),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        out
    }
}

/// Training objective for one batch: cross-entropy, plus the weighted
/// balancing losses of every MoE layer when the model has any. Returns the
/// breakdown and the parameter gradients.
pub fn objective<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    inputs: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    noise: Option<&mut StreamRng>,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let ctx = Ctx::new(&mut tape, model.params(), true);
    let mut ctx = match noise {
        Some(rng) => ctx.training(rng),
        None => ctx.training_without_noise(),
    };
    let bound = ctx.bound();
    let fwd = model.forward(&mut ctx, inputs)?;
    let cls = tape.cross_entropy(fwd.logits, labels)?;
    let (mut imp, mut load) = (0.0, 0.0);
    let mut aux = None;
    if !fwd.moe.is_empty() && lambda != 0.0 {
        for rec in &fwd.moe {
            let i = losses::balance_var(&mut tape, rec.route.gates)?;
            let l = losses::balance_var(&mut tape, rec.route.load)?;
            imp += tape.value(i).item().as_f64();
            load += tape.value(l).item().as_f64();
            let both = tape.add(i, l)?;
            aux = Some(match aux {
                Some(a) => tape.add(a, both)?,
                None => both,
            });
        }
    } else {
        for rec in &fwd.moe {
            imp += losses::importance_loss(&rec.decision.gate_weights)?.as_f64();
            load += losses::load_loss(&rec.decision.load_prob)?.as_f64();
        }
    }
    let total = losses::total_var(&mut tape, cls, aux, lambda)?;
    let breakdown = LossBreakdown::new(tape.value(cls).item().as_f64(), imp, load, lambda);
    let grads = tape.backward(total)?;
    Ok((breakdown, model.params().gradients(&grads, bound)))
}

/// Runs `cfg.iterations` Adam steps on `train`, evaluating every split of
/// `evals` and storing a checkpoint at iteration 0, every `eval_every` steps
/// and at the end.
pub fn train<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &mut M,
    train: Labeled<'_, T>,
    evals: &[Labeled<'_, T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cfg.precision != T::DTYPE {
        return Err(Error::config(format!(
            "precision {} does not match element type {}",
            cfg.precision.name(),
            T::DTYPE.name()
        )));
    }
    if train.is_empty() {
        return Err(Error::EmptySplit(train.name.to_string()));
    }
    let seeds = SeedTree::new(cfg.seed);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, seeds.stream(STREAM_SHUFFLE));
    let mut noise = seeds.stream(STREAM_NOISE);
    let mut state = AdamState::new(model.params());
    let mut out = TrainOutcome {
        checkpoints: Vec::new(),
        metrics: Vec::new(),
        step_losses: Vec::with_capacity(cfg.iterations),
    };
    let mut since = 0;
    let checkpoint = |model: &M, state: &AdamState<T>, iteration: usize, recent: &[LossBreakdown], out: &mut TrainOutcome<T>| -> Result<()> {
        let splits = evals.iter().map(|s| evaluate(model, *s, cfg.lambda)).collect::<Result<Vec<_>>>()?;
        out.metrics.push(CheckpointMetrics {
            iteration,
            train_loss: mean_breakdown(recent, cfg.lambda),
            splits,
        });
        out.checkpoints.push(Checkpoint {
            iteration,
            params: model.params().clone(),
            optimizer: state.clone(),
        });
        Ok(())
    };
    checkpoint(model, &state, 0, &[], &mut out)?;
    for it in 1..=cfg.iterations {
        let idx = sampler.next_batch().to_vec();
        let x = train.inputs.select(&idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let (breakdown, grads) = objective(model, &x, &y, cfg.lambda, Some(&mut noise)).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { iteration: it },
            e => e,
        })?;
        if !breakdown.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        adam_step(model.params_mut().tensors_mut(), &grads, &mut state, cfg.learning_rate, cfg.weight_decay)?;
        out.step_losses.push(breakdown);
        since += 1;
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let recent = &out.step_losses[out.step_losses.len() - since..];
            let recent = recent.to_vec();
            checkpoint(model, &state, it, &recent, &mut out)?;
            since = 0;
        }
    }
    Ok(out)
}

fn mean_breakdown(steps: &[LossBreakdown], lambda: f64) -> Option<LossBreakdown> {
    if steps.is_empty() {
        return None;
    }
    let n = steps.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
    Some(LossBreakdown::new(
        mean(|b| b.classification),
        mean(|b| b.importance),
        mean(|b| b.load),
        lambda,
    ))
}

/// Index of the checkpoint with the best pooled accuracy over the splits in
/// `val_splits` (sample-weighted); ties go to the earliest.
pub fn train_validation_select(metrics: &[CheckpointMetrics], val_splits: &[&str]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in metrics.iter().enumerate() {
        let (mut correct, mut total) = (0.0, 0usize);
        for name in val_splits {
            if let Some(s) = m.split(name) {
                correct += s.accuracy * s.samples as f64;
                total += s.samples;
            }
        }
        if total == 0 {
            continue;
        }
        let acc = correct / total as f64;
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((i, acc));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoCheckpoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_fcn, build_mlp};
    use crate::rng::standard_normal;
    use crate::synthetic::{generate, SyntheticSpec};

    fn store(values: &[&[f64]]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::vector(v.to_vec()));
        }
        s
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = store(&[&[1.0, -2.0], &[0.5]]);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        let grads: Vec<Tensor<f64>> = s.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        for _ in 0..5 {
            adam_step(s.tensors_mut(), &grads, &mut st, 1e-2, 0.0).unwrap();
        }
        assert_eq!(s, before);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        for (theta, g, lr, wd) in [(0.3, 1.0, 1e-3, 0.0), (-1.5, -0.25, 5e-2, 1e-2), (2.0, 3.0, 1e-4, 0.1)] {
            let mut s = store(&[&[theta]]);
            let mut st = AdamState::new(&s);
            adam_step(s.tensors_mut(), &[Tensor::vector(vec![g])], &mut st, lr, wd).unwrap();
            // m̂ = g and v̂ = g² after one step.
            let decayed = theta - lr * wd * theta;
            let want = decayed - lr * g / (libm::fabs(g) + EPSILON);
            assert!((s.tensors()[0].data()[0] - want).abs() <= 1e-10);
        }
        let mut s = store(&[&[0.0]]);
        let mut st = AdamState::new(&s);
        adam_step(s.tensors_mut(), &[Tensor::vector(vec![1.0])], &mut st, 1e-3, 0.0).unwrap();
        assert!((s.tensors()[0].data()[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn second_step_matches_hand_formula() {
        let (lr, g1, g2) = (0.01, 0.5, -2.0);
        let mut s = store(&[&[1.0]]);
        let mut st = AdamState::new(&s);
        adam_step(s.tensors_mut(), &[Tensor::vector(vec![g1])], &mut st, lr, 0.0).unwrap();
        adam_step(s.tensors_mut(), &[Tensor::vector(vec![g2])], &mut st, lr, 0.0).unwrap();
        let mut theta = 1.0 - lr * g1 / (g1.abs() + EPSILON);
        let m = BETA1 * (1.0 - BETA1) * g1 + (1.0 - BETA1) * g2;
        let v = BETA2 * (1.0 - BETA2) * g1 * g1 + (1.0 - BETA2) * g2 * g2;
        let mhat = m / (1.0 - BETA1 * BETA1);
        let vhat = v / (1.0 - BETA2 * BETA2);
        theta -= lr * mhat / (libm::sqrt(vhat) + EPSILON);
        assert!((s.tensors()[0].data()[0] - theta).abs() <= 1e-12);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut s = store(&[&[1.0, 2.0]]);
        let mut st = AdamState::new(&s);
        let err = adam_step(s.tensors_mut(), &[Tensor::vector(vec![1.0])], &mut st, 1e-3, 0.0);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = store(&[&[0.1, 0.2, 0.3]]);
            let mut st = AdamState::new(&s);
            let mut rng = SeedTree::new(3).stream("g");
            for _ in 0..100 {
                let g = Tensor::from_fn([3], |_| standard_normal::<f64, _>(&mut rng));
                adam_step(s.tensors_mut(), &[g], &mut st, 1e-2, 1e-3).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::profile(Profile::Pacs).learning_rate, 3e-5);
        assert_eq!(TrainConfig::profile(Profile::OfficeHome).learning_rate, 1e-5);
        assert_eq!(TrainConfig::profile(Profile::TerraIncognita).weight_decay, 1e-4);
        let bad = TrainConfig {
            learning_rate: 0.0,
            batch_size: 0,
            eval_every: 0,
            lambda: -1.0,
            ..TrainConfig::default()
        };
        let Err(Error::InvalidConfig(msg)) = bad.validate() else {
            panic!("expected config error");
        };
        for key in ["learning_rate", "batch_size", "eval_every", "lambda"] {
            assert!(msg.contains(key));
        }
    }

    #[test]
    fn selection_rules() {
        let m = |accs: &[f64]| -> Vec<CheckpointMetrics> {
            accs.iter()
                .enumerate()
                .map(|(i, &a)| CheckpointMetrics {
                    iteration: i * 10,
                    train_loss: None,
                    splits: vec![SplitMetrics {
                        split: "val".into(),
                        samples: 100,
                        accuracy: a,
                        loss: LossBreakdown::default(),
                        layers: Vec::new(),
                    }],
                })
                .collect()
        };
        assert_eq!(train_validation_select(&m(&[0.5, 0.9, 0.7]), &["val"]).unwrap(), 1);
        assert_eq!(train_validation_select(&m(&[0.6, 0.6, 0.6]), &["val"]).unwrap(), 0);
        assert_eq!(train_validation_select(&m(&[0.3]), &["val"]).unwrap(), 0);
        assert_eq!(train_validation_select(&[], &["val"]), Err(Error::NoCheckpoints));
        assert_eq!(train_validation_select(&m(&[0.3]), &["other"]), Err(Error::NoCheckpoints));
    }

    #[test]
    fn selection_pools_by_sample_count() {
        let split = |name: &str, n, a| SplitMetrics {
            split: String::from(name),
            samples: n,
            accuracy: a,
            loss: LossBreakdown::default(),
            layers: Vec::new(),
        };
        let ms = vec![
            CheckpointMetrics {
                iteration: 0,
                train_loss: None,
                splits: vec![split("a", 100, 0.9), split("b", 900, 0.5)],
            },
            CheckpointMetrics {
                iteration: 1,
                train_loss: None,
                splits: vec![split("a", 100, 0.5), split("b", 900, 0.6)],
            },
        ];
        // Pooled: 0.54 versus 0.59.
        assert_eq!(train_validation_select(&ms, &["a", "b"]).unwrap(), 1);
    }

    #[test]
    fn evaluate_matches_argmax_oracle() {
        let ds = generate(
            &SyntheticSpec {
                n_train: 10,
                n_eval: 1500,
                ..SyntheticSpec::default()
            },
            &mut SeedTree::new(1).stream("d"),
        )
        .unwrap();
        let model = build_fcn::<f64>(4, 20, 4, 2).unwrap();
        let split = Labeled::new("val", &ds.val.inputs, &ds.val.labels).unwrap();
        let m = evaluate(&model, split, 0.0).unwrap();
        let (logits, _) = model.predict(&ds.val.inputs, None).unwrap();
        let mut correct = 0;
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let best = (0..4).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            correct += usize::from(best == ds.val.labels[r]);
        }
        assert_eq!(m.accuracy, correct as f64 / 1500.0);
        let ce = losses::cross_entropy(&logits, &ds.val.labels).unwrap();
        assert!((m.loss.classification - ce).abs() < 1e-12);
        assert!(m.layers.is_empty());
    }

    #[test]
    fn evaluate_one_hot_and_constant_models() {
        // A one-layer MLP with identity weights reads a one-hot input back.
        let mut mlp = build_mlp::<f64>(&[4, 4], 0).unwrap();
        *mlp.params.get_mut(mlp.layers[0].weight) = Tensor::eye(4);
        *mlp.params.get_mut(mlp.layers[0].bias.unwrap()) = Tensor::zeros([4]);
        let labels: Vec<usize> = (0..400).map(|i| (i * 7) % 4).collect();
        let x = Tensor::from_fn([400, 4], |idx| if labels[idx / 4] == idx % 4 { 1.0 } else { 0.0 });
        let m = evaluate(&mlp, Labeled::new("s", &x, &labels).unwrap(), 0.0).unwrap();
        assert_eq!(m.accuracy, 1.0);

        // Zero weights give constant logits: argmax picks class 0.
        *mlp.params.get_mut(mlp.layers[0].weight) = Tensor::zeros([4, 4]);
        let n = 4000;
        let mut rng = SeedTree::new(5).stream("labels");
        let labels: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
        let x = Tensor::<f64>::zeros([n, 4]);
        let m = evaluate(&mlp, Labeled::new("s", &x, &labels).unwrap(), 0.0).unwrap();
        let sigma = libm::sqrt(0.25 * 0.75 / n as f64);
        assert!((m.accuracy - 0.25).abs() <= 3.0 * sigma);
    }

    #[test]
    fn empty_split_is_an_error() {
        let mlp = build_mlp::<f64>(&[4, 2], 0).unwrap();
        let x = Tensor::<f64>::zeros([0, 4]);
        let split = Labeled::new("val", &x, &[]).unwrap();
        assert_eq!(evaluate(&mlp, split, 0.0), Err(Error::EmptySplit("val".into())));
    }

    fn toy(n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        // Two Gaussian blobs with a margin around the line x0 + x1 = 0.
        let mut rng = SeedTree::new(seed).stream("toy");
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        while labels.len() < n {
            let a: f64 = standard_normal(&mut rng);
            let b: f64 = standard_normal(&mut rng);
            let s = a + b;
            if s.abs() < 0.5 {
                continue;
            }
            data.extend([a, b]);
            labels.push(usize::from(s > 0.0));
        }
        (Tensor::new([n, 2], data).unwrap(), labels)
    }

    /// Perceptron; returns a separating hyperplane if one is found, which
    /// certifies linear separability.
    fn perceptron(x: &Tensor<f64>, y: &[usize]) -> Option<[f64; 3]> {
        let mut w = [0.0; 3];
        for _ in 0..1000 {
            let mut clean = true;
            for (i, &yi) in y.iter().enumerate() {
                let s = if yi == 1 { 1.0 } else { -1.0 };
                let r = x.row(i);
                if s * (w[0] * r[0] + w[1] * r[1] + w[2]) <= 0.0 {
                    w = [w[0] + s * r[0], w[1] + s * r[1], w[2] + s];
                    clean = false;
                }
            }
            if clean {
                return Some(w);
            }
        }
        None
    }

    #[test]
    fn learns_a_separable_toy() {
        let (x, y) = toy(1000, 1);
        assert!(perceptron(&x, &y).is_some(), "toy must be separable");
        let mut mlp = build_mlp::<f64>(&[2, 2], 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-2,
            weight_decay: 0.0,
            batch_size: 32,
            iterations: 500,
            eval_every: 500,
            precision: DType::F64,
            ..TrainConfig::default()
        };
        let split = Labeled::new("train", &x, &y).unwrap();
        let out = train(&mut mlp, split, &[split], &cfg).unwrap();
        let acc = out.metrics.last().unwrap().split("train").unwrap().accuracy;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn zero_iterations_keep_the_model() {
        let (x, y) = toy(50, 2);
        let mut mlp = build_mlp::<f64>(&[2, 3, 2], 3).unwrap();
        let before = mlp.clone();
        let cfg = TrainConfig {
            iterations: 0,
            precision: DType::F64,
            ..TrainConfig::default()
        };
        let split = Labeled::new("train", &x, &y).unwrap();
        let out = train(&mut mlp, split, &[split], &cfg).unwrap();
        assert_eq!(mlp, before);
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.checkpoints[0].params, before.params);
        assert!(out.step_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_on_schedule() {
        let (x, y) = toy(200, 3);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            iterations: 25,
            eval_every: 10,
            seed: 9,
            precision: DType::F64,
            ..TrainConfig::default()
        };
        let run = || {
            let mut mlp = build_mlp::<f64>(&[2, 8, 2], 1).unwrap();
            let split = Labeled::new("train", &x, &y).unwrap();
            (train(&mut mlp, split, &[split], &cfg).unwrap(), mlp)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let its: Vec<usize> = a.metrics.iter().map(|m| m.iteration).collect();
        assert_eq!(its, vec![0, 10, 20, 25]);
        assert_eq!(a.checkpoints.last().unwrap().params, ma.params);
        assert_eq!(a.checkpoints.last().unwrap().optimizer.t, 25);
    }

    #[test]
    fn precision_must_match() {
        let (x, y) = toy(20, 4);
        let mut mlp = build_mlp::<f64>(&[2, 2], 0).unwrap();
        let cfg = TrainConfig {
            precision: DType::F32,
            ..TrainConfig::default()
        };
        let split = Labeled::new("train", &x, &y).unwrap();
        assert!(matches!(train(&mut mlp, split, &[], &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn non_finite_loss_reports_the_iteration() {
        let (x, y) = toy(20, 5);
        let mut mlp = build_mlp::<f64>(&[2, 2], 0).unwrap();
        let w = mlp.layers[0].weight;
        mlp.params.get_mut(w).data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            iterations: 3,
            precision: DType::F64,
            ..TrainConfig::default()
        };
        let split = Labeled::new("train", &x, &y).unwrap();
        let err = train(&mut mlp, split, &[], &cfg).unwrap_err();
        assert_eq!(err, Error::NonFiniteLoss { iteration: 1 });
    }

    #[test]
    fn synthetic_loss_moving_average_decreases() {
        let spec = SyntheticSpec {
            n_train: 20_000,
            n_eval: 10,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec, &mut SeedTree::new(0).stream("d")).unwrap();
        let mut mlp = build_mlp::<f64>(&crate::model::MLP_WIDTHS, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            iterations: 50,
            eval_every: 50,
            precision: DType::F64,
            ..TrainConfig::default()
        };
        let split = Labeled::new("train", &ds.train.inputs, &ds.train.labels).unwrap();
        let out = train(&mut mlp, split, &[], &cfg).unwrap();
        let losses: Vec<f64> = out.step_losses.iter().map(|b| b.total).collect();
        let avg: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for w in avg.windows(2) {
            assert!(w[1] <= w[0], "{avg:?}");
        }
    }
}
