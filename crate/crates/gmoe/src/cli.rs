//! Command-line front end. [`run`] maps every outcome to an exit status:
//! 0 on success, 1 when the invocation or its inputs are invalid (including
//! failed checks), 2 when a computation or write fails.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gmoe_core::experiments::{alignment_train_config, run_alignment, Backbone, Variant};
use gmoe_core::gradsuite;
use gmoe_core::model::{Architecture, Classifier};
use gmoe_core::rng::{SeedTree, STREAM_DATA};
use gmoe_core::synthetic::{generate, Split, SplitKind, SyntheticDataset, SyntheticSpec};
use gmoe_core::telemetry::{self, ExpertHistogram};
use gmoe_core::train::{self, evaluate, Labeled, TrainConfig, EVAL_BATCH};
use gmoe_core::{DType, Scalar, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{checkpoint_meta, checkpoint_from_container, read_checkpoint, save_checkpoint, CheckpointFile};
use crate::config::{self, assignment, nested, ConfigError, RunConfig};
use crate::container::ContainerError;
use crate::dataset::{load_dataset, save_dataset, DATASET_FILE};
use crate::manifest::RunManifest;
use crate::plot;
use crate::report::{self, MetricsWriter, SplitRecord, TrainSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Splits evaluated during training; `val` drives checkpoint selection.
pub const EVAL_SPLITS: [SplitKind; 3] = [SplitKind::Val, SplitKind::Test1, SplitKind::Test2];
/// Histogram rows of `analyze-routing`, indexed by patch role.
pub const PATCH_ROLES: [&str; 3] = ["pixel", "feature", "noise"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        invalid(e)
    }
}

/// Configuration mistakes are the caller's; anything else went wrong while
/// computing.
fn core_err(e: gmoe_core::Error) -> CliError {
    match e {
        gmoe_core::Error::InvalidConfig(_) => invalid(e),
        e => runtime(e),
    }
}

fn input_err(path: &Path) -> impl Fn(ContainerError) -> CliError + '_ {
    move |e| invalid(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "gmoe", version, about = "Sparse mixture-of-experts vision transformers on synthetic distribution-shift data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic patch dataset as a GMDS file.
    SynthGen(SynthGenArgs),
    /// Train a model on a GMDS dataset, writing metrics and GMCK checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the splits of a dataset.
    Eval(EvalArgs),
    /// Histogram top-1 expert choices per patch role and report balance.
    AnalyzeRouting(AnalyzeArgs),
    /// Run the finite-difference gradient suite at 64-bit.
    Gradcheck(GradcheckArgs),
    /// Train an MLP or FCN on the patch task and report shifted-test accuracy.
    AlignmentExp(AlignmentArgs),
    /// Render a histogram report as a PNG heatmap.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    /// Dataset specification (TOML or JSON); flags override its keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub p1: Option<f64>,
    #[arg(long)]
    pub p2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any specification key as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML, JSON, or a previous run's manifest).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `dataset.gmds`, or the file itself.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model kind: gmoe, mlp or fcn.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Any configuration key as `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Splits to evaluate; defaults to val, test1 and test2.
    #[arg(long = "split")]
    pub splits: Vec<String>,
    /// Directory for `eval.json` and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `gradcheck.csv` and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignmentArgs {
    /// noiseless or noisy.
    #[arg(long)]
    pub variant: String,
    /// mlp or fcn.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// f32 or f64.
    #[arg(long, default_value = "f32")]
    pub precision: String,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Training samples; defaults to the full-size task.
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// Directory for metrics, summary and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Histogram report (CSV, or the JSON written alongside it).
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command, writing human
/// output to `out` and diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_VALIDATION
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let kind = if e.exit_code() == EXIT_VALIDATION { "invalid input" } else { "failed" };
            let _ = writeln!(err, "error ({kind}): {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::SynthGen(a) => synth_gen(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::AnalyzeRouting(a) => analyze_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::AlignmentExp(a) => alignment_cmd(a, out),
        Command::Plot(a) => plot_cmd(a, out),
    }
}

/// Named flags become nested overrides in the order given, followed by the
/// generic `--set` assignments.
fn overrides(named: Vec<(&str, Option<Value>)>, sets: &[String]) -> CliResult<Vec<Value>> {
    let mut v: Vec<Value> = named.into_iter().filter_map(|(k, x)| x.map(|x| nested(k, x))).collect();
    for s in sets {
        v.push(assignment(s)?);
    }
    Ok(v)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> CliResult {
    writeln!(out, "{line}").map_err(runtime)
}

fn synth_gen(a: SynthGenArgs, out: &mut dyn Write) -> CliResult {
    let flags = overrides(
        vec![
            ("patches", a.patches.map(Value::from)),
            ("classes", a.classes.map(Value::from)),
            ("n_train", a.n_train.map(Value::from)),
            ("n_eval", a.n_eval.map(Value::from)),
            ("p1", a.p1.map(Value::from)),
            ("p2", a.p2.map(Value::from)),
            ("seed", a.seed.map(Value::from)),
        ],
        &a.set,
    )?;
    let (spec, resolved): (SyntheticSpec, Value) = config::resolve(a.spec.as_deref(), flags)?;
    spec.validate().map_err(invalid)?;
    create_dir(&a.out)?;
    let path = a.out.join(DATASET_FILE);
    let mut manifest = RunManifest::new("synth-gen", resolved, spec.seed);
    if let Some(p) = &a.spec {
        manifest.input(p).map_err(invalid)?;
    }
    manifest.output(&path);
    manifest.write(&a.out).map_err(runtime)?;

    let ds = generate(&spec, &mut SeedTree::new(spec.seed).stream(STREAM_DATA)).map_err(core_err)?;
    save_dataset(&ds, &path).map_err(runtime)?;
    say(
        out,
        format!(
            "wrote {} (P={}, K={}, train={}, eval={}, p1={}, p2={}, seed={})",
            path.display(),
            spec.patches,
            spec.classes,
            spec.n_train,
            spec.n_eval,
            spec.p1,
            spec.p2,
            spec.seed
        ),
    )
}

fn dataset_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(DATASET_FILE)
    } else {
        data.to_path_buf()
    }
}

/// Model inputs for a patch split: `[n × P × K]` as is for the MLP and FCN,
/// transposed to `[n × K × 1 × P]` images for the GMoE.
pub fn model_inputs<T: Scalar>(arch: &Architecture, inputs: &Tensor<f64>) -> gmoe_core::Result<Tensor<T>> {
    match arch {
        Architecture::Gmoe(_) => {
            let (n, p, k) = (inputs.shape()[0], inputs.shape()[1], inputs.shape()[2]);
            let src = inputs.data();
            let mut data = Vec::with_capacity(src.len());
            for s in 0..n {
                for c in 0..k {
                    for q in 0..p {
                        data.push(T::of(src[(s * p + q) * k + c]));
                    }
                }
            }
            Tensor::new([n, k, 1, p], data)
        }
        _ => Ok(inputs.cast()),
    }
}

fn parse_precision(s: &str) -> CliResult<DType> {
    DType::parse(s).ok_or_else(|| invalid(format!("precision must be f32 or f64, got `{s}`")))
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let named = vec![
        ("model.kind", a.model.clone().map(Value::from)),
        ("train.learning_rate", a.learning_rate.map(Value::from)),
        ("train.weight_decay", a.weight_decay.map(Value::from)),
        ("train.batch_size", a.batch_size.map(Value::from)),
        ("train.iterations", a.iterations.map(Value::from)),
        ("train.lambda", a.lambda.map(Value::from)),
        ("train.eval_every", a.eval_every.map(Value::from)),
        ("train.seed", a.seed.map(Value::from)),
        ("train.precision", a.precision.clone().map(Value::from)),
    ];
    let (cfg, resolved): (RunConfig, Value) = config::resolve(a.config.as_deref(), overrides(named, &a.set)?)?;
    cfg.train.validate().map_err(core_err)?;
    let data = dataset_path(&a.data);
    let ds = load_dataset(&data).map_err(input_err(&data))?;
    let arch = cfg.model.architecture(ds.spec.patches, ds.spec.classes);
    if let Architecture::Gmoe(m) = &arch {
        m.validate().map_err(core_err)?;
    }

    create_dir(&a.out)?;
    let ckpt_dir = a.out.join("checkpoints");
    let mut manifest = RunManifest::new("train", resolved, cfg.train.seed);
    manifest.input(&data).map_err(invalid)?;
    if let Some(c) = &a.config {
        manifest.input(c).map_err(invalid)?;
    }
    for f in ["metrics.csv", "layers.csv", "summary.json"] {
        manifest.output(&a.out.join(f));
    }
    manifest.output(&ckpt_dir);
    manifest.write(&a.out).map_err(runtime)?;
    create_dir(&ckpt_dir)?;

    match cfg.train.precision {
        DType::F32 => train_run::<f32>(&cfg, &arch, &ds, &a.out, &ckpt_dir, out),
        DType::F64 => train_run::<f64>(&cfg, &arch, &ds, &a.out, &ckpt_dir, out),
    }
}

fn train_run<T: Scalar>(cfg: &RunConfig, arch: &Architecture, ds: &SyntheticDataset, dir: &Path, ckpt_dir: &Path, out: &mut dyn Write) -> CliResult {
    let inputs: Vec<Tensor<T>> = ds
        .splits()
        .iter()
        .map(|s| model_inputs(arch, &s.inputs))
        .collect::<gmoe_core::Result<_>>()
        .map_err(core_err)?;
    let labeled = |i: usize| Labeled::new(ds.splits()[i].kind.name(), &inputs[i], &ds.splits()[i].labels).map_err(core_err);
    let evals = [labeled(1)?, labeled(2)?, labeled(3)?];
    let mut model = arch.build::<T>(cfg.train.seed).map_err(core_err)?;
    let parameters = model.params().num_elements();
    let outcome = train::train(&mut model, labeled(0)?, &evals, &cfg.train).map_err(core_err)?;

    let mut writer = MetricsWriter::create(&dir.join("metrics.csv"), &dir.join("layers.csv")).map_err(runtime)?;
    for m in &outcome.metrics {
        writer.append(m).map_err(runtime)?;
    }
    let mut names = Vec::with_capacity(outcome.checkpoints.len());
    for c in &outcome.checkpoints {
        let name = checkpoint_name(c.iteration);
        save_checkpoint(&ckpt_dir.join(&name), arch, &cfg.train, c).map_err(runtime)?;
        names.push(name);
    }
    let selected = train::train_validation_select(&outcome.metrics, &["val"]).map_err(core_err)?;
    let summary = TrainSummary {
        architecture: arch.name().to_string(),
        parameters,
        selected_iteration: outcome.metrics[selected].iteration,
        selected_checkpoint: format!("checkpoints/{}", names[selected]),
        selection_splits: vec!["val".into()],
        checkpoints: outcome.metrics.iter().map(Into::into).collect(),
    };
    report::write_json(&dir.join("summary.json"), &summary).map_err(runtime)?;

    let m = &outcome.metrics[selected];
    let acc = |s: &str| m.split(s).map_or(f64::NAN, |x| x.accuracy);
    say(
        out,
        format!(
            "trained {} ({} parameters) for {} iterations; selected iteration {}: val {:.4} test1 {:.4} test2 {:.4}",
            arch.name(),
            parameters,
            cfg.train.iterations,
            m.iteration,
            acc("val"),
            acc("test1"),
            acc("test2")
        ),
    )
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter-{iteration:08}.gmck")
}

fn split_by_name<'a>(ds: &'a SyntheticDataset, name: &str) -> CliResult<&'a Split> {
    SplitKind::parse(name)
        .map(|k| ds.split(k))
        .ok_or_else(|| invalid(format!("unknown split `{name}`; expected train, val, test1 or test2")))
}

#[derive(Debug, Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    iteration: usize,
    architecture: String,
    splits: Vec<SplitRecord>,
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let container = read_checkpoint(&a.checkpoint).map_err(input_err(&a.checkpoint))?;
    let meta = checkpoint_meta(&container).map_err(input_err(&a.checkpoint))?;
    let data = dataset_path(&a.data);
    let ds = load_dataset(&data).map_err(input_err(&data))?;
    let names: Vec<String> = if a.splits.is_empty() {
        EVAL_SPLITS.iter().map(|k| k.name().to_string()).collect()
    } else {
        a.splits.clone()
    };
    let splits = names.iter().map(|n| split_by_name(&ds, n)).collect::<CliResult<Vec<_>>>()?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let mut manifest = RunManifest::new("eval", json!({"splits": names}), meta.train.seed);
        manifest.input(&a.checkpoint).map_err(invalid)?;
        manifest.input(&data).map_err(invalid)?;
        manifest.output(&dir.join("eval.json"));
        manifest.write(dir).map_err(runtime)?;
    }
    let records = match meta.dtype {
        DType::F32 => eval_run::<f32>(&container, &splits, &a.checkpoint)?,
        DType::F64 => eval_run::<f64>(&container, &splits, &a.checkpoint)?,
    };
    say(out, "split,samples,accuracy,classification,importance,load,total")?;
    for r in &records {
        say(
            out,
            format!(
                "{},{},{},{},{},{},{}",
                r.split,
                r.samples,
                report::fmt(r.accuracy),
                report::fmt(r.loss.classification),
                report::fmt(r.loss.importance),
                report::fmt(r.loss.load),
                report::fmt(r.loss.total)
            ),
        )?;
    }
    if let Some(dir) = &a.out {
        let rep = EvalReport {
            checkpoint: a.checkpoint.clone(),
            iteration: meta.iteration,
            architecture: meta.architecture.name().to_string(),
            splits: records,
        };
        report::write_json(&dir.join("eval.json"), &rep).map_err(runtime)?;
    }
    Ok(())
}

fn load_model<T: Scalar>(container: &crate::container::Container, path: &Path) -> CliResult<(CheckpointFile<T>, gmoe_core::model::Model<T>)> {
    let file = checkpoint_from_container::<T>(container).map_err(input_err(path))?;
    let model = file.model().map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((file, model))
}

fn eval_run<T: Scalar>(container: &crate::container::Container, splits: &[&Split], path: &Path) -> CliResult<Vec<SplitRecord>> {
    let (file, model) = load_model::<T>(container, path)?;
    splits
        .iter()
        .map(|s| {
            let x = model_inputs::<T>(&file.architecture, &s.inputs).map_err(core_err)?;
            let l = Labeled::new(s.kind.name(), &x, &s.labels).map_err(core_err)?;
            let m = evaluate(&model, l, file.train.lambda).map_err(core_err)?;
            Ok(SplitRecord::from(&m))
        })
        .collect()
}

/// Role of every token of a patch-dataset sample: the class token has none,
/// patch 0 carries the pixel cue, the feature patch the patch cue, the rest
/// noise.
pub fn patch_role_labels(split: &Split, samples: std::ops::Range<usize>) -> Vec<Option<usize>> {
    let p = split.inputs.shape()[1];
    let mut labels = Vec::with_capacity(samples.len() * (p + 1));
    for s in samples {
        labels.push(None);
        for q in 0..p {
            labels.push(Some(if q == 0 {
                0
            } else if q == split.feature_patch[s] {
                1
            } else {
                2
            }));
        }
    }
    labels
}

#[derive(Debug, Serialize)]
struct RoutingSummary {
    split: String,
    samples: usize,
    purity: Vec<(usize, f64)>,
    histograms: Vec<ExpertHistogram>,
    balance: telemetry::BalanceReport,
}

fn analyze_cmd(a: AnalyzeArgs, out: &mut dyn Write) -> CliResult {
    let container = read_checkpoint(&a.checkpoint).map_err(input_err(&a.checkpoint))?;
    let meta = checkpoint_meta(&container).map_err(input_err(&a.checkpoint))?;
    if !matches!(meta.architecture, Architecture::Gmoe(_)) {
        return Err(invalid(format!(
            "{} holds a {} model; routing analysis needs a gmoe checkpoint",
            a.checkpoint.display(),
            meta.architecture.name()
        )));
    }
    let data = dataset_path(&a.data);
    let ds = load_dataset(&data).map_err(input_err(&data))?;
    let split = split_by_name(&ds, &a.split)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("analyze-routing", json!({"split": a.split}), meta.train.seed);
    manifest.input(&a.checkpoint).map_err(invalid)?;
    manifest.input(&data).map_err(invalid)?;
    for f in ["histograms.csv", "balance.csv", "routing.json"] {
        manifest.output(&a.out.join(f));
    }
    manifest.write(&a.out).map_err(runtime)?;

    let summary = match meta.dtype {
        DType::F32 => analyze_run::<f32>(&container, split, &a.checkpoint)?,
        DType::F64 => analyze_run::<f64>(&container, split, &a.checkpoint)?,
    };
    report::write_histograms_csv(&a.out.join("histograms.csv"), &summary.histograms).map_err(runtime)?;
    report::write_balance_csv(&a.out.join("balance.csv"), &summary.balance).map_err(runtime)?;
    report::write_json(&a.out.join("routing.json"), &summary).map_err(runtime)?;
    for (l, (block, purity)) in summary.balance.layers.iter().zip(&summary.purity) {
        say(
            out,
            format!(
                "block {block}: importance CV² {:.4}, load CV² {:.4}, purity {purity:.4}, shares {:?}",
                l.importance, l.load, l.shares
            ),
        )?;
    }
    Ok(())
}

fn analyze_run<T: Scalar>(container: &crate::container::Container, split: &Split, path: &Path) -> CliResult<RoutingSummary> {
    let (file, model) = load_model::<T>(container, path)?;
    let x = model_inputs::<T>(&file.architecture, &split.inputs).map_err(core_err)?;
    let n = split.len();
    let mut hists: Vec<ExpertHistogram> = Vec::new();
    let mut traces = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (_, trace) = model.predict(&x.select(&idx).map_err(core_err)?, None).map_err(core_err)?;
        let labels = patch_role_labels(split, start..end);
        if hists.is_empty() {
            hists = telemetry::record_routing(&trace, &labels, PATCH_ROLES.len()).map_err(core_err)?;
        } else {
            telemetry::accumulate(&mut hists, &trace, &labels).map_err(core_err)?;
        }
        traces.push(trace);
        start = end;
    }
    for h in &mut hists {
        h.row_labels = PATCH_ROLES.iter().map(|s| s.to_string()).collect();
    }
    let purity = hists
        .iter()
        .map(|h| Ok((h.block, telemetry::specialization_purity(h).map_err(core_err)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let balance = telemetry::balance_report(&traces).map_err(core_err)?;
    Ok(RoutingSummary {
        split: split.kind.name().to_string(),
        samples: n,
        purity,
        histograms: hists,
        balance,
    })
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> CliResult {
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let mut manifest = RunManifest::new("gradcheck", json!({"seed": a.seed, "tolerance": gradsuite::TOLERANCE}), a.seed);
        manifest.output(&dir.join("gradcheck.csv"));
        manifest.write(dir).map_err(runtime)?;
    }
    let cases = gradsuite::run_suite(a.seed).map_err(core_err)?;
    say(out, format!("{:<24} {:>8} {:>12}  result", "check", "entries", "max rel err"))?;
    for c in &cases {
        say(
            out,
            format!(
                "{:<24} {:>8} {:>12.3e}  {}",
                c.name,
                c.checked,
                c.max_rel_error,
                if c.passed() { "pass" } else { "FAIL" }
            ),
        )?;
    }
    if let Some(dir) = &a.out {
        let mut w = csv::Writer::from_path(dir.join("gradcheck.csv")).map_err(runtime)?;
        w.write_record(["check", "entries", "max_rel_error", "passed"]).map_err(runtime)?;
        for c in &cases {
            w.write_record([c.name.to_string(), c.checked.to_string(), report::fmt(c.max_rel_error), c.passed().to_string()])
                .map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
    }
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_ref()).collect();
    if failed.is_empty() {
        say(out, format!("all {} checks below {:e}", cases.len(), gradsuite::TOLERANCE))
    } else {
        Err(invalid(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

#[derive(Debug, Serialize)]
struct AlignmentSummary {
    variant: String,
    model: String,
    spec: SyntheticSpec,
    train: TrainConfig,
    selected_iteration: usize,
    selected: Vec<(String, f64)>,
    last: Vec<(String, f64)>,
}

fn alignment_cmd(a: AlignmentArgs, out: &mut dyn Write) -> CliResult {
    let variant = Variant::parse(&a.variant).ok_or_else(|| invalid(format!("variant must be noiseless or noisy, got `{}`", a.variant)))?;
    let backbone = Backbone::parse(&a.model).ok_or_else(|| invalid(format!("model must be mlp or fcn, got `{}`", a.model)))?;
    let precision = parse_precision(&a.precision)?;
    let mut spec = variant.spec(a.seed);
    spec.n_train = a.n_train.unwrap_or(spec.n_train);
    spec.n_eval = a.n_eval.unwrap_or(spec.n_eval);
    spec.validate().map_err(invalid)?;
    let mut cfg = alignment_train_config(backbone, a.seed, precision);
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.eval_every = a.eval_every.unwrap_or(cfg.eval_every);
    cfg.validate().map_err(core_err)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let resolved = json!({"variant": variant.name(), "model": backbone.name(), "spec": spec, "train": cfg});
        let mut manifest = RunManifest::new("alignment-exp", resolved, a.seed);
        for f in ["metrics.csv", "layers.csv", "alignment.json"] {
            manifest.output(&dir.join(f));
        }
        manifest.write(dir).map_err(runtime)?;
    }
    let result = match precision {
        DType::F32 => run_alignment::<f32>(backbone, &spec, &cfg),
        DType::F64 => run_alignment::<f64>(backbone, &spec, &cfg),
    }
    .map_err(core_err)?;
    let names = ["val", "test1", "test2"];
    let selected: Vec<(String, f64)> = names.iter().map(|s| (s.to_string(), result.accuracy(s))).collect();
    let last: Vec<(String, f64)> = names.iter().map(|s| (s.to_string(), result.final_accuracy(s))).collect();
    let sel_it = result.selected_metrics().iteration;
    say(
        out,
        format!("{} / {} (seed {}), selected iteration {sel_it}", backbone.name(), variant.name(), a.seed),
    )?;
    say(out, "split,selected,last")?;
    for ((s, x), (_, y)) in selected.iter().zip(&last) {
        say(out, format!("{s},{x:.4},{y:.4}"))?;
    }
    if let Some(dir) = &a.out {
        let mut w = MetricsWriter::create(&dir.join("metrics.csv"), &dir.join("layers.csv")).map_err(runtime)?;
        for m in &result.metrics {
            w.append(m).map_err(runtime)?;
        }
        let summary = AlignmentSummary {
            variant: variant.name().into(),
            model: backbone.name().into(),
            spec,
            train: cfg,
            selected_iteration: sel_it,
            selected,
            last,
        };
        report::write_json(&dir.join("alignment.json"), &summary).map_err(runtime)?;
    }
    Ok(())
}

fn plot_cmd(a: PlotArgs, out: &mut dyn Write) -> CliResult {
    let hists: Vec<ExpertHistogram> = if a.report.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(&a.report).map_err(|e| invalid(format!("{}: {e}", a.report.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", a.report.display())))?;
        // Either a bare histogram list or a routing summary holding one.
        let list = v.get("histograms").cloned().unwrap_or(v);
        serde_json::from_value(list).map_err(|e| invalid(format!("{}: {e}", a.report.display())))?
    } else {
        report::read_histograms_csv(&a.report).map_err(|e| invalid(format!("{}: {e}", a.report.display())))?
    };
    match plot::write_heatmap(&hists, &a.out) {
        Ok(()) => say(out, format!("wrote {}", a.out.display())),
        Err(plot::PlotError::Empty) => Err(invalid(format!("{}: no histogram cells to plot", a.report.display()))),
        Err(e) => Err(runtime(e)),
    }
}
