//! End-to-end experiment runners on the synthetic datasets.
//!
//! The alignment runner trains an MLP or an FCN on the patch dataset and
//! reports accuracies on the shifted test splits at the checkpoint chosen by
//! train-validation selection. The balancing runner trains a small GMoE on
//! the token-cluster set and reports the per-layer balance and the
//! specialization of its routers.

use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{build_fcn, build_gmoe, build_mlp, Classifier, ModelConfig, Placement, MLP_WIDTHS, FCN_FILTERS};
use crate::moe::{RouterConfig, RouterKind};
use crate::rng::{SeedTree, STREAM_DATA};
use crate::synthetic::{generate, generate_token_clusters, SyntheticSpec};
use crate::telemetry::{self, BalanceReport, ExpertHistogram};
use crate::tensor::Activation;
use crate::train::{self, CheckpointMetrics, Labeled, TrainConfig};
use crate::{DType, Error, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    Noiseless,
    /// Both cues correct with probability 0.9.
    Noisy,
}

impl Variant {
    pub const NOISY_P: f64 = 0.9;

    pub fn name(self) -> &'static str {
        match self {
            Variant::Noiseless => "noiseless",
            Variant::Noisy => "noisy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Variant::Noiseless, Variant::Noisy].into_iter().find(|v| v.name() == s)
    }

    pub fn spec(self, seed: u64) -> SyntheticSpec {
        let p = match self {
            Variant::Noiseless => 1.0,
            Variant::Noisy => Self::NOISY_P,
        };
        SyntheticSpec {
            seed,
            ..SyntheticSpec::noisy(p, p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Backbone {
    Mlp,
    Fcn,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Mlp => "mlp",
            Backbone::Fcn => "fcn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Backbone::Mlp, Backbone::Fcn].into_iter().find(|b| b.name() == s)
    }
}

/// Optimizer settings for the synthetic patch task. The FCN shares its
/// weights across patches and sees each cue through one filter bank, so it
/// needs larger batches and a longer schedule to converge.
pub fn alignment_train_config(backbone: Backbone, seed: u64, precision: DType) -> TrainConfig {
    let (learning_rate, batch_size, iterations, eval_every) = match backbone {
        Backbone::Mlp => (1e-3, 128, 4000, 250),
        Backbone::Fcn => (1e-2, 512, 40_000, 2000),
    };
    TrainConfig {
        learning_rate,
        weight_decay: 0.0,
        batch_size,
        iterations,
        lambda: 0.0,
        eval_every,
        seed,
        precision,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub backbone: Backbone,
    pub spec: SyntheticSpec,
    pub selected: usize,
    pub metrics: Vec<CheckpointMetrics>,
}

impl AlignmentResult {
    pub fn selected_metrics(&self) -> &CheckpointMetrics {
        &self.metrics[self.selected]
    }

    /// Accuracy on `split` at the selected checkpoint.
    pub fn accuracy(&self, split: &str) -> f64 {
        self.selected_metrics().split(split).map_or(f64::NAN, |s| s.accuracy)
    }

    /// Accuracy on `split` at the last checkpoint.
    pub fn final_accuracy(&self, split: &str) -> f64 {
        self.metrics
            .last()
            .and_then(|m| m.split(split))
            .map_or(f64::NAN, |s| s.accuracy)
    }
}

/// Generates the dataset of `spec` from its seed, trains `backbone` with
/// `cfg` and selects the checkpoint with the best validation accuracy.
pub fn run_alignment<T: Scalar>(backbone: Backbone, spec: &SyntheticSpec, cfg: &TrainConfig) -> Result<AlignmentResult> {
    let ds = generate(spec, &mut SeedTree::new(spec.seed).stream(STREAM_DATA))?;
    let inputs: Vec<Tensor<T>> = ds.splits().iter().map(|s| s.inputs.cast()).collect();
    let split = |i: usize| Labeled::new(ds.splits()[i].kind.name(), &inputs[i], &ds.splits()[i].labels);
    let evals = [split(1)?, split(2)?, split(3)?];
    let k = spec.classes;
    let outcome = match backbone {
        Backbone::Mlp => {
            let mut widths = MLP_WIDTHS.to_vec();
            widths[0] = spec.patches * k;
            *widths.last_mut().unwrap_or(&mut 0) = k;
            let mut m = build_mlp::<T>(&widths, cfg.seed)?;
            train::train(&mut m, split(0)?, &evals, cfg)?
        }
        Backbone::Fcn => {
            let mut m = build_fcn::<T>(k, FCN_FILTERS, k, cfg.seed)?;
            train::train(&mut m, split(0)?, &evals, cfg)?
        }
    };
    let selected = train::train_validation_select(&outcome.metrics, &["val"])?;
    Ok(AlignmentResult {
        backbone,
        spec: spec.clone(),
        selected,
        metrics: outcome.metrics,
    })
}

/// Token-cluster balancing experiment.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BalanceConfig {
    pub clusters: usize,
    pub experts: usize,
    pub k: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub model_dim: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            clusters: 4,
            experts: 4,
            k: 1,
            tokens: 8,
            token_dim: 8,
            model_dim: 16,
            n_train: 2000,
            n_eval: 500,
            lambda: 0.01,
            iterations: 400,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl BalanceConfig {
    /// Two blocks with one MoE layer (block 0) on `1×T` images whose
    /// channels are the token coordinates; patch size 1 makes every token a
    /// patch.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            depth: 2,
            dim: self.model_dim,
            heads: 2,
            patch_size: 1,
            channels: self.token_dim,
            image_height: 1,
            image_width: self.tokens,
            num_classes: self.clusters,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            placement: Placement::EveryTwo,
            moe: RouterConfig::new(RouterKind::Cosine, self.experts, self.k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceResult {
    pub config: BalanceConfig,
    pub accuracy: f64,
    pub balance: BalanceReport,
    /// Cluster × expert histograms of top-1 choices over the evaluation set
    /// (class token excluded).
    pub histograms: Vec<ExpertHistogram>,
    pub purity: Vec<f64>,
}

impl BalanceResult {
    pub fn mean_importance(&self) -> f64 {
        let n = self.balance.layers.len().max(1) as f64;
        self.balance.layers.iter().map(|l| l.importance).sum::<f64>() / n
    }
}

/// Trains the token-cluster GMoE in 64-bit and measures routing on a fresh
/// evaluation set with routing noise off.
pub fn run_balance(cfg: &BalanceConfig) -> Result<BalanceResult> {
    let seeds = SeedTree::new(cfg.seed);
    let mut data_rng = seeds.stream(STREAM_DATA);
    let all = generate_token_clusters(cfg.clusters, cfg.tokens, cfg.token_dim, cfg.n_train + cfg.n_eval, &mut data_rng)?;
    let images = all.as_images();
    let train_idx: Vec<usize> = (0..cfg.n_train).collect();
    let eval_idx: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_eval).collect();
    let (x_train, x_eval) = (images.select(&train_idx)?, images.select(&eval_idx)?);
    let (y_train, y_eval) = (&all.labels[..cfg.n_train], &all.labels[cfg.n_train..]);

    let mut model = build_gmoe::<f64>(&cfg.model(), cfg.seed)?;
    let tc = TrainConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        batch_size: cfg.batch_size,
        iterations: cfg.iterations,
        lambda: cfg.lambda,
        eval_every: cfg.iterations.max(1),
        seed: cfg.seed,
        precision: DType::F64,
    };
    let eval = Labeled::new("eval", &x_eval, y_eval)?;
    let out = train::train(&mut model, Labeled::new("train", &x_train, y_train)?, &[eval], &tc)?;
    let accuracy = out
        .metrics
        .last()
        .and_then(|m| m.split("eval"))
        .map(|s| s.accuracy)
        .ok_or(Error::NoCheckpoints)?;

    let (_, trace) = model.predict(&x_eval, None)?;
    let seq = trace.tokens_per_sample;
    let token_labels: Vec<Option<usize>> = (0..trace.tokens())
        .map(|t| {
            let (s, pos) = (t / seq, t % seq);
            // Position 0 is the class token.
            (pos > 0).then(|| all.token_clusters[(cfg.n_train + s) * cfg.tokens + pos - 1])
        })
        .collect();
    let histograms = telemetry::record_routing(&trace, &token_labels, cfg.clusters)?;
    let purity = histograms.iter().map(telemetry::specialization_purity).collect::<Result<Vec<_>>>()?;
    let balance = telemetry::balance_report(core::slice::from_ref(&trace))?;
    Ok(BalanceResult {
        config: cfg.clone(),
        accuracy,
        balance,
        histograms,
        purity,
    })
}

/// Labels `cluster0..` for histogram rows.
pub fn cluster_labels(n: usize) -> Vec<String> {
    (0..n).map(|c| alloc::format!("cluster{c}")).collect()
}
