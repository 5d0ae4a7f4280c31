//! Command-line pipeline: data generation, head and metamodel training,
//! evaluation and reporting.
//!
//! Every run derives all randomness from one seed: head `i` uses
//! `seed + 1 + i`, dataset splits use `seed + 1000` and metamodel kind `k`
//! uses `seed + 2000 + tag(k)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::combiners::{
    build_metamodel, combine_average, combine_vote, metamodel_predict, train_metamodel,
    HeadOutputs, MetaKind, MetaTrainConfig, Metamodel, OutputKind,
};
use crate::data::{
    load_probs, probs_to_bytes, split, synth_clusters, synth_miscalibrated_probs, FeatureDataset,
    MiscalSpec, SynthSpec,
};
use crate::error::{Error, Result};
use crate::heads::{train_head_family, EpochRecord, HeadTrainConfig, LinearHead};
use crate::metrics::{
    predictions_from_probs, write_reliability_csv, CalibrationReport, PredictionSet, DEFAULT_BINS,
    DEFAULT_NORM_DEGREE,
};
use crate::numerics::Matrix;

pub const JOBS_ENV: &str = "CALIB_ENSEMBLE_JOBS";
pub const HEAD_SEED_OFFSET: u64 = 1;
pub const SPLIT_SEED_OFFSET: u64 = 1000;
pub const META_SEED_OFFSET: u64 = 2000;

pub const HEADS_MANIFEST: &str = "heads.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(
    name = "calib-ensemble",
    version,
    about = "Calibrated classifier-head ensembles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a family of linear heads on a feature dataset.
    TrainHeads(RunArgs),
    /// Train metamodels on the outputs of trained heads.
    TrainMeta(RunArgs),
    /// Evaluate heads and combiners on the test set.
    Evaluate(RunArgs),
    /// Print an evaluation summary as a table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    /// Gaussian clusters, written as `train.fds` and `test.fds`.
    Clusters,
    /// Constant-confidence predictions, written as `probs.prb` and `labels.fds`.
    Miscal,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "clusters")]
    pub kind: GenKind,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 8.0)]
    pub sep: f64,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    /// Fraction of the cluster samples held out as the test set.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Confidence of every prediction (miscal only).
    #[arg(long, default_value_t = 0.8)]
    pub confidence: f64,
    /// Fraction of correct predictions (miscal only).
    #[arg(long, default_value_t = 0.6)]
    pub accuracy: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by the training and evaluation commands. Each one overrides
/// the matching field of the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Probability files (PRB1) evaluated as pass-through heads instead of
    /// trained heads.
    #[arg(long)]
    pub probs: Vec<PathBuf>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Number of heads.
    #[arg(short = 'm', long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub head_lr: Option<f64>,
    #[arg(long)]
    pub head_epochs: Option<usize>,
    /// Comma-separated metamodel kinds (SL, DL, DLL, SLpC).
    #[arg(long, value_delimiter = ',')]
    pub meta_kinds: Option<Vec<MetaKind>>,
    /// Disable all metamodels.
    #[arg(long, conflicts_with = "meta_kinds")]
    pub no_meta: bool,
    #[arg(long)]
    pub meta_lr: Option<f64>,
    #[arg(long)]
    pub meta_epochs: Option<usize>,
    #[arg(long)]
    pub meta_dropout: Option<f64>,
    /// Metamodel input: probs or logits.
    #[arg(long)]
    pub meta_input: Option<OutputKind>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub norm_degree: Option<f64>,
    /// Artifact directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for head training.
    #[arg(long, env = JOBS_ENV, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Path to a `summary.json`.
    pub summary: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub probs: Vec<PathBuf>,
    pub val_fraction: f64,
    pub heads: usize,
    pub seed: u64,
    pub head: HeadTrainConfig,
    pub meta_kinds: Vec<MetaKind>,
    pub meta: MetaTrainConfig,
    pub meta_input: OutputKind,
    pub bins: usize,
    pub norm_degree: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            test: None,
            probs: Vec::new(),
            val_fraction: 0.1,
            heads: 5,
            seed: 0,
            head: HeadTrainConfig::default(),
            meta_kinds: MetaKind::ALL.to_vec(),
            meta: MetaTrainConfig::default(),
            meta_input: OutputKind::Probabilities,
            bins: DEFAULT_BINS,
            norm_degree: DEFAULT_NORM_DEGREE,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Loads `--config` when given, applies flag overrides and validates.
    pub fn resolve(args: &RunArgs) -> Result<RunConfig> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if args.train.is_some() {
            cfg.train.clone_from(&args.train);
        }
        if args.test.is_some() {
            cfg.test.clone_from(&args.test);
        }
        if !args.probs.is_empty() {
            cfg.probs.clone_from(&args.probs);
        }
        if let Some(v) = args.val_fraction {
            cfg.val_fraction = v;
        }
        if let Some(v) = args.heads {
            cfg.heads = v;
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        if let Some(v) = args.head_lr {
            cfg.head.initial_lr = v;
        }
        if let Some(v) = args.head_epochs {
            cfg.head.max_epochs = v;
        }
        if let Some(v) = &args.meta_kinds {
            cfg.meta_kinds.clone_from(v);
        }
        if args.no_meta {
            cfg.meta_kinds.clear();
        }
        if let Some(v) = args.meta_lr {
            cfg.meta.initial_lr = v;
        }
        if let Some(v) = args.meta_epochs {
            cfg.meta.epochs = v;
        }
        if let Some(v) = args.meta_dropout {
            cfg.meta.dropout_p = v;
        }
        if let Some(v) = args.meta_input {
            cfg.meta_input = v;
        }
        if let Some(v) = args.bins {
            cfg.bins = v;
        }
        if let Some(v) = args.norm_degree {
            cfg.norm_degree = v;
        }
        if let Some(v) = &args.out {
            cfg.out.clone_from(v);
        }
        if !cfg.probs.is_empty() {
            cfg.heads = cfg.probs.len();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("head count must be at least 1".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("bin count must be at least 1".into()));
        }
        if !(self.norm_degree >= 1.0 && self.norm_degree.is_finite()) {
            return Err(Error::Config(format!(
                "norm degree {} must be ≥ 1",
                self.norm_degree
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} not in (0, 1)",
                self.val_fraction
            )));
        }
        for (i, k) in self.meta_kinds.iter().enumerate() {
            if self.meta_kinds[..i].contains(k) {
                return Err(Error::Config(format!("metamodel kind {k} listed twice")));
            }
        }
        self.head.validate()?;
        self.meta.validate()
    }

    pub fn head_path(&self, index: usize) -> PathBuf {
        self.out.join(format!("head_{index}.hdw"))
    }

    pub fn meta_path(&self, kind: MetaKind) -> PathBuf {
        self.out.join(format!("meta_{kind}.mmd"))
    }

    pub fn meta_sidecar_path(&self, kind: MetaKind) -> PathBuf {
        self.out.join(format!("meta_{kind}.json"))
    }

    fn train_path(&self) -> Result<&Path> {
        self.train
            .as_deref()
            .ok_or_else(|| Error::Config("a training dataset (--train) is required".into()))
    }

    fn test_path(&self) -> Result<&Path> {
        self.test
            .as_deref()
            .ok_or_else(|| Error::Config("a test dataset (--test) is required".into()))
    }

    /// Loads the training set and carves off the validation split.
    fn train_val(&self) -> Result<(FeatureDataset, FeatureDataset)> {
        let full = FeatureDataset::load(self.train_path()?)?;
        split(
            &full,
            self.val_fraction,
            self.seed.wrapping_add(SPLIT_SEED_OFFSET),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub index: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

/// Contents of `heads.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsManifest {
    pub seed: u64,
    pub input_dim: usize,
    pub classes: usize,
    pub heads: Vec<HeadRecord>,
}

/// Contents of `meta_{kind}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSidecar {
    pub kind: MetaKind,
    pub input: OutputKind,
    pub heads: usize,
    pub classes: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowRole {
    Head,
    Combiner,
}

/// One evaluated model. Rates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub role: RowRole,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub params: usize,
    pub reliability_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub test_samples: usize,
    pub config: RunConfig,
    pub rows: Vec<SummaryRow>,
}

impl EvaluationSummary {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(&args).map(|paths| {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }),
        Command::TrainHeads(args) => {
            let cfg = RunConfig::resolve(&args)?;
            let heads = cmd_train_heads(&cfg, args.jobs)?;
            println!("trained {} heads into {}", heads.len(), cfg.out.display());
            Ok(())
        }
        Command::TrainMeta(args) => {
            let cfg = RunConfig::resolve(&args)?;
            let metas = cmd_train_meta(&cfg)?;
            println!(
                "trained {} metamodels into {}",
                metas.len(),
                cfg.out.display()
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let cfg = RunConfig::resolve(&args)?;
            let summary = cmd_evaluate(&cfg)?;
            print!("{}", render_table(&summary));
            Ok(())
        }
        Command::Report(args) => {
            print!("{}", cmd_report(&args.summary)?);
            Ok(())
        }
    }
}

fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (path, bytes) in files {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s.into_bytes()
}

/// Generates a dataset and returns the written paths.
pub fn cmd_gen(args: &GenArgs) -> Result<Vec<PathBuf>> {
    let files = match args.kind {
        GenKind::Clusters => {
            let spec = SynthSpec {
                classes: args.classes,
                dim: args.dim,
                samples: args.n,
                cluster_separation: args.sep,
                label_noise: args.noise,
                seed: args.seed,
            };
            spec.validate()?;
            let full = synth_clusters(&spec)?;
            let (train, test) = split(
                &full,
                args.test_fraction,
                args.seed.wrapping_add(SPLIT_SEED_OFFSET),
            )?;
            vec![
                (args.out.join("train.fds"), train.to_bytes()),
                (args.out.join("test.fds"), test.to_bytes()),
            ]
        }
        GenKind::Miscal => {
            let spec = MiscalSpec {
                samples: args.n,
                classes: args.classes,
                confidence_level: args.confidence,
                true_accuracy: args.accuracy,
                seed: args.seed,
            };
            spec.validate()?;
            let (probs, labels) = synth_miscalibrated_probs(&spec)?;
            let labels_only = FeatureDataset::new(
                Matrix::zeros(labels.len(), 0),
                labels,
                args.classes,
                "labels",
            )?;
            vec![
                (args.out.join("probs.prb"), probs_to_bytes(&probs)),
                (args.out.join("labels.fds"), labels_only.to_bytes()),
            ]
        }
    };
    write_all(&files)?;
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Trains `cfg.heads` heads and writes `head_{i}.hdw` plus `heads.json`.
pub fn cmd_train_heads(cfg: &RunConfig, jobs: usize) -> Result<Vec<LinearHead>> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let (train, val) = cfg.train_val()?;
    let heads = train_head_family(
        &train,
        &val,
        cfg.heads,
        cfg.seed.wrapping_add(HEAD_SEED_OFFSET),
        &cfg.head,
        jobs,
    )?;
    let manifest = HeadsManifest {
        seed: cfg.seed,
        input_dim: train.dim(),
        classes: train.classes(),
        heads: heads
            .iter()
            .enumerate()
            .map(|(index, h)| HeadRecord {
                index,
                seed: h.seed,
                history: h.history.clone(),
            })
            .collect(),
    };
    let mut files: Vec<(PathBuf, Vec<u8>)> = heads
        .iter()
        .enumerate()
        .map(|(i, h)| (cfg.head_path(i), h.to_bytes()))
        .collect();
    files.push((cfg.out.join(HEADS_MANIFEST), json_bytes(&manifest)));
    write_all(&files)?;
    Ok(heads)
}

fn require_present(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Missing(missing))
    }
}

fn head_paths(cfg: &RunConfig) -> Vec<PathBuf> {
    (0..cfg.heads).map(|i| cfg.head_path(i)).collect()
}

fn load_heads(cfg: &RunConfig) -> Result<Vec<LinearHead>> {
    head_paths(cfg).iter().map(LinearHead::load).collect()
}

pub fn meta_seed(base: u64, kind: MetaKind) -> u64 {
    base.wrapping_add(META_SEED_OFFSET + u64::from(kind.tag()))
}

/// Trains every configured metamodel kind on the trained heads and writes
/// `meta_{kind}.mmd` with a `meta_{kind}.json` sidecar.
pub fn cmd_train_meta(cfg: &RunConfig) -> Result<Vec<Metamodel>> {
    if cfg.meta_kinds.is_empty() {
        return Err(Error::Config("no metamodel kinds selected".into()));
    }
    require_present(&head_paths(cfg))?;
    let (train, val) = cfg.train_val()?;
    let heads = load_heads(cfg)?;
    let train_out = HeadOutputs::from_heads(&heads, train.features(), cfg.meta_input)?;
    let val_out = HeadOutputs::from_heads(&heads, val.features(), cfg.meta_input)?;
    let mut metas = Vec::with_capacity(cfg.meta_kinds.len());
    let mut files = Vec::new();
    for &kind in &cfg.meta_kinds {
        let seed = meta_seed(cfg.seed, kind);
        let init = build_metamodel(kind, cfg.heads, train.classes(), seed)?;
        let meta_cfg = MetaTrainConfig {
            seed,
            ..cfg.meta.clone()
        };
        let meta = train_metamodel(
            &init,
            &train_out,
            train.labels(),
            &val_out,
            val.labels(),
            &meta_cfg,
        )?;
        let sidecar = MetaSidecar {
            kind,
            input: cfg.meta_input,
            heads: cfg.heads,
            classes: train.classes(),
            seed,
            history: meta.history.clone(),
        };
        files.push((cfg.meta_path(kind), meta.to_bytes()));
        files.push((cfg.meta_sidecar_path(kind), json_bytes(&sidecar)));
        metas.push(meta);
    }
    write_all(&files)?;
    Ok(metas)
}

fn slug(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == ' ')
        .map(|c| {
            if c == ' ' {
                '_'
            } else {
                c.to_ascii_lowercase()
            }
        })
        .collect()
}

struct Evaluated {
    row: SummaryRow,
    csv: Vec<u8>,
}

fn evaluate_row(
    name: &str,
    role: RowRole,
    pred: &PredictionSet,
    params: usize,
    cfg: &RunConfig,
) -> Result<Evaluated> {
    let report = CalibrationReport::compute(pred, cfg.bins, cfg.norm_degree)?;
    let mut csv = Vec::new();
    write_reliability_csv(&report.bins, &mut csv)?;
    Ok(Evaluated {
        row: SummaryRow {
            name: name.to_string(),
            role,
            accuracy: 100.0 * report.accuracy,
            ece: 100.0 * report.ece,
            mce: 100.0 * report.mce,
            params,
            reliability_csv: format!("reliability_{}.csv", slug(name)),
        },
        csv,
    })
}

/// Evaluates every head, averaging, voting and each configured metamodel on
/// the test set; writes `summary.json` and one reliability CSV per row.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluationSummary> {
    let pass_through = !cfg.probs.is_empty();
    let mut expected = if pass_through {
        cfg.probs.clone()
    } else {
        head_paths(cfg)
    };
    for &k in &cfg.meta_kinds {
        expected.push(cfg.meta_path(k));
        expected.push(cfg.meta_sidecar_path(k));
    }
    let test_path = cfg.test_path()?;
    expected.push(test_path.to_path_buf());
    require_present(&expected)?;

    let test = FeatureDataset::load(test_path)?;
    let labels = test.labels();
    let (heads, prob_outputs) = if pass_through {
        let mats = cfg
            .probs
            .iter()
            .map(load_probs)
            .collect::<Result<Vec<_>>>()?;
        for (m, path) in mats.iter().zip(&cfg.probs) {
            if m.shape() != (test.len(), test.classes()) {
                return Err(Error::dim(
                    "evaluate",
                    format!("{} is {}", path.display(), m.shape_string()),
                    format!("test set {}x{}", test.len(), test.classes()),
                ));
            }
        }
        (Vec::new(), HeadOutputs::new(mats)?)
    } else {
        let heads = load_heads(cfg)?;
        let outputs = HeadOutputs::from_heads(&heads, test.features(), OutputKind::Probabilities)?;
        (heads, outputs)
    };
    let head_params: Vec<usize> = if pass_through {
        vec![0; cfg.heads]
    } else {
        heads.iter().map(LinearHead::param_count).collect()
    };
    let family_params: usize = head_params.iter().sum();

    let mut evaluated = Vec::new();
    for (i, &params) in head_params.iter().enumerate() {
        let pred = predictions_from_probs(prob_outputs.head(i), labels)?;
        evaluated.push(evaluate_row(
            &format!("Head {}", i + 1),
            RowRole::Head,
            &pred,
            params,
            cfg,
        )?);
    }
    let avg = combine_average(&prob_outputs, labels)?;
    evaluated.push(evaluate_row(
        "Avg.",
        RowRole::Combiner,
        &avg,
        family_params,
        cfg,
    )?);
    let vote = combine_vote(&prob_outputs, labels)?;
    evaluated.push(evaluate_row(
        "Vot.",
        RowRole::Combiner,
        &vote,
        family_params,
        cfg,
    )?);

    let mut logit_outputs = None;
    for &kind in &cfg.meta_kinds {
        let meta = Metamodel::load(cfg.meta_path(kind))?;
        let sidecar_path = cfg.meta_sidecar_path(kind);
        let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sidecar: MetaSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", sidecar_path.display())))?;
        if meta.kind != kind || sidecar.kind != kind {
            return Err(Error::Data(format!(
                "{} does not hold a {kind} metamodel",
                cfg.meta_path(kind).display()
            )));
        }
        let outputs = match sidecar.input {
            OutputKind::Probabilities => &prob_outputs,
            OutputKind::Logits => {
                if pass_through {
                    return Err(Error::Config(format!(
                        "{kind} was trained on logits, which pass-through heads cannot provide"
                    )));
                }
                if logit_outputs.is_none() {
                    logit_outputs = Some(HeadOutputs::from_heads(
                        &heads,
                        test.features(),
                        OutputKind::Logits,
                    )?);
                }
                logit_outputs.as_ref().expect("just computed")
            }
        };
        let pred = metamodel_predict(&meta, outputs, labels)?;
        evaluated.push(evaluate_row(
            kind.name(),
            RowRole::Combiner,
            &pred,
            family_params + meta.param_count(),
            cfg,
        )?);
    }

    let summary = EvaluationSummary {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        test_samples: test.len(),
        config: cfg.clone(),
        rows: evaluated.iter().map(|e| e.row.clone()).collect(),
    };
    let mut files: Vec<(PathBuf, Vec<u8>)> = evaluated
        .into_iter()
        .map(|e| (cfg.out.join(&e.row.reliability_csv), e.csv))
        .collect();
    files.push((cfg.out.join(SUMMARY_FILE), json_bytes(&summary)));
    write_all(&files)?;
    Ok(summary)
}

/// Byte offset of a 1-based line/column position.
fn offset_of(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn load_summary(path: &Path) -> Result<EvaluationSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: offset_of(&text, e.line(), e.column()),
        message: format!("{}: {e}", path.display()),
    })
}

/// Renders the table printed by `report`.
pub fn cmd_report(path: &Path) -> Result<String> {
    Ok(render_table(&load_summary(path)?))
}

/// Fixed-width table with columns Name, Acc, ECE, MCE, Params; heads first,
/// then combiners, each group in summary order.
pub fn render_table(summary: &EvaluationSummary) -> String {
    let mut rows: Vec<&SummaryRow> = summary.rows.iter().collect();
    rows.sort_by_key(|r| match r.role {
        RowRole::Head => 0,
        RowRole::Combiner => 1,
    });
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} {:>8} {:>8} {:>8} {:>12}",
        "Name", "Acc", "ECE", "MCE", "Params"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$} {:>8.2} {:>8.2} {:>8.2} {:>12}",
            r.name, r.accuracy, r.ece, r.mce, r.params
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Head 3"), "head_3");
        assert_eq!(slug("Avg."), "avg");
        assert_eq!(slug("SLpC"), "slpc");
    }

    #[test]
    fn offsets_from_line_and_column() {
        let text = "ab\ncde\nf";
        assert_eq!(offset_of(text, 1, 1), 0);
        assert_eq!(offset_of(text, 2, 2), 4);
        assert_eq!(offset_of(text, 3, 1), 7);
    }

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"heads": 3, "bins": 10, "meta": {"epochs": 7}}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            bins: Some(20),
            ..RunArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.heads, 3);
        assert_eq!(cfg.bins, 20);
        assert_eq!(cfg.meta.epochs, 7);
        assert_eq!(cfg.meta.initial_lr, MetaTrainConfig::default().initial_lr);
    }

    #[test]
    fn unknown_config_field_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"hedas": 3}"#).unwrap();
        let err = RunConfig::resolve(&RunArgs {
            config: Some(path),
            ..RunArgs::default()
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn duplicate_meta_kind_rejected() {
        let cfg = RunConfig {
            meta_kinds: vec![MetaKind::Sl, MetaKind::Sl],
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn table_puts_heads_first() {
        let row = |name: &str, role| SummaryRow {
            name: name.into(),
            role,
            accuracy: 75.08,
            ece: 4.41,
            mce: 27.47,
            params: 51300,
            reliability_csv: String::new(),
        };
        let summary = EvaluationSummary {
            tool: "t".into(),
            version: "0".into(),
            seed: 0,
            test_samples: 1,
            config: RunConfig::default(),
            rows: vec![row("SL", RowRole::Combiner), row("Head 1", RowRole::Head)],
        };
        let table = render_table(&summary);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "Name          Acc      ECE      MCE       Params");
        assert!(lines[1].starts_with("Head 1"));
        assert_eq!(lines[1], "Head 1      75.08     4.41    27.47        51300");
        assert!(lines[2].starts_with("SL "));
    }
}
