//! Command-line front end: `gen-data`, `pretrain`, `adapt`, `eval`, `project`.
//!
//! Settings come from an optional flat JSON config file; flags override it and
//! anything unset falls back to the defaults below. Each command writes the
//! resolved config into its output directory as `<command>_config.json`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_pair, load_corpus, save_corpus, ShiftSpec};
use crate::error::{EcanError, Result};
use crate::eval::{evaluate, project_2d, write_projection};
use crate::losses::HyperParams;
use crate::model::{EcanModel, ModelSpec};
use crate::trainer::{adapt_observed, pretrain, Ablation};

pub const SOURCE_MODEL_FILE: &str = "source_model.json";
pub const ADAPTED_MODEL_FILE: &str = "adapted_model.json";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PROJECTION_FILE: &str = "projection.csv";

/// Every setting any command reads, as flat JSON keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tau: f64,
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_adapt: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub seed: u64,

    pub hidden: Vec<usize>,
    pub feature_dim: usize,

    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub rotation: f64,
    pub translation: f64,
    pub scale: f64,
    pub noise_sigma: f64,
    pub class_imbalance: Option<Vec<f64>>,

    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub disable_ncl: bool,
    pub disable_scl: bool,
    pub disable_div: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        let shift = ShiftSpec::canonical(hp.seed);
        RunConfig {
            tau: hp.tau,
            k: hp.k,
            lambda: hp.lambda,
            beta: hp.beta,
            batch_size: hp.batch_size,
            epochs: hp.epochs,
            pretrain_epochs: hp.pretrain_epochs,
            lr_pretrain: hp.lr_pretrain,
            lr_adapt: hp.lr_adapt,
            momentum: hp.momentum,
            label_smoothing: hp.label_smoothing,
            seed: hp.seed,
            hidden: vec![64],
            feature_dim: 32,
            classes: shift.class_count,
            dim: shift.dim,
            samples_per_class: shift.samples_per_class,
            rotation: PI / 6.0,
            translation: 0.5,
            scale: shift.scale,
            noise_sigma: shift.noise_sigma,
            class_imbalance: None,
            source: None,
            target: None,
            model: None,
            corpus: None,
            out_dir: PathBuf::from("."),
            disable_ncl: false,
            disable_scl: false,
            disable_div: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EcanError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            EcanError::format(path.display().to_string(), format!("line {}", e.line()), e.to_string())
        })
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            tau: self.tau,
            k: self.k,
            lambda: self.lambda,
            beta: self.beta,
            batch_size: self.batch_size,
            epochs: self.epochs,
            pretrain_epochs: self.pretrain_epochs,
            lr_pretrain: self.lr_pretrain,
            lr_adapt: self.lr_adapt,
            momentum: self.momentum,
            label_smoothing: self.label_smoothing,
            seed: self.seed,
        }
    }

    pub fn shift_spec(&self) -> ShiftSpec {
        ShiftSpec {
            class_count: self.classes,
            dim: self.dim,
            samples_per_class: self.samples_per_class,
            rotation: self.rotation,
            translation: vec![self.translation; self.dim],
            scale: self.scale,
            noise_sigma: self.noise_sigma,
            class_imbalance: self.class_imbalance.clone(),
            seed: self.seed,
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            disable_ncl: self.disable_ncl,
            disable_scl: self.disable_scl,
            disable_div: self.disable_div,
        }
    }

    fn echo(&self, command: &str) -> Result<()> {
        let path = self.out_dir.join(format!("{command}_config.json"));
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        fs::write(&path, text).map_err(|e| EcanError::io(&path, e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ecan", version, about = "Source-free domain adaptation with contrastive memory banks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target corpus pair
    GenData(GenDataArgs),
    /// Train a source model on a labeled corpus
    Pretrain(PretrainArgs),
    /// Adapt a source model to an unlabeled target corpus
    Adapt(AdaptArgs),
    /// Compute UAR and a confusion matrix on a labeled corpus
    Eval(EvalArgs),
    /// Export a 2-D PCA projection of extracted features
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat JSON config; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    /// Radians
    #[arg(long, allow_hyphen_values = true)]
    pub rotation: Option<f64>,
    /// Added to every coordinate of the target
    #[arg(long, allow_hyphen_values = true)]
    pub translation: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Comma-separated per-class size multipliers
    #[arg(long, value_delimiter = ',')]
    pub class_imbalance: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Labeled source corpus CSV
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Comma-separated hidden layer widths
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub lr_pretrain: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
}

/// There is deliberately no way to pass source data here.
#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    /// Target corpus CSV; labels, if present, only feed the per-epoch UAR
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Pre-trained source model
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_adapt: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub disable_ncl: bool,
    #[arg(long)]
    pub disable_scl: bool,
    #[arg(long)]
    pub disable_div: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Labeled corpus CSV
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.out_dir, common.out_dir.clone());
    Ok(cfg)
}

fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| EcanError::Usage(format!("missing --{what} (or \"{what}\" in the config file)")))
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| EcanError::io(&cfg.out_dir, e))
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    set(&mut cfg.classes, args.classes);
    set(&mut cfg.dim, args.dim);
    set(&mut cfg.samples_per_class, args.samples_per_class);
    set(&mut cfg.rotation, args.rotation);
    set(&mut cfg.translation, args.translation);
    set(&mut cfg.scale, args.scale);
    set(&mut cfg.noise_sigma, args.noise_sigma);
    if args.class_imbalance.is_some() {
        cfg.class_imbalance = args.class_imbalance;
    }
    let (source, target) = generate_pair(&cfg.shift_spec())?;
    prepare_out_dir(&cfg)?;
    save_corpus(&source, cfg.out_dir.join("source.csv"))?;
    save_corpus(&target, cfg.out_dir.join("target.csv"))?;
    cfg.echo("gen-data")?;
    println!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    if args.source.is_some() {
        cfg.source = args.source;
    }
    set(&mut cfg.hidden, args.hidden);
    set(&mut cfg.feature_dim, args.feature_dim);
    set(&mut cfg.pretrain_epochs, args.pretrain_epochs);
    set(&mut cfg.lr_pretrain, args.lr_pretrain);
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.momentum, args.momentum);
    set(&mut cfg.label_smoothing, args.label_smoothing);

    let source = load_corpus(required(&cfg.source, "source")?)?;
    let spec = ModelSpec::new(source.dim(), cfg.hidden.clone(), cfg.feature_dim, source.class_count());
    let model = pretrain(&source, spec, &cfg.hyper_params())?;
    prepare_out_dir(&cfg)?;
    let out = cfg.out_dir.join(SOURCE_MODEL_FILE);
    model.save(&out)?;
    cfg.echo("pretrain")?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_adapt(args: AdaptArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    if args.target.is_some() {
        cfg.target = args.target;
    }
    if args.model.is_some() {
        cfg.model = args.model;
    }
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.lr_adapt, args.lr_adapt);
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.momentum, args.momentum);
    set(&mut cfg.tau, args.tau);
    set(&mut cfg.k, args.k);
    set(&mut cfg.lambda, args.lambda);
    set(&mut cfg.beta, args.beta);
    cfg.disable_ncl |= args.disable_ncl;
    cfg.disable_scl |= args.disable_scl;
    cfg.disable_div |= args.disable_div;

    let target = load_corpus(required(&cfg.target, "target")?)?;
    let model = EcanModel::load(required(&cfg.model, "model")?)?;
    if target.dim() != model.input_dim() {
        return Err(EcanError::Dimension(format!(
            "target width {} against model input_dim {}",
            target.dim(),
            model.input_dim()
        )));
    }

    // The adaptation loop only ever sees the unlabeled copy; labels stay here
    // for the per-epoch evaluation.
    let unlabeled = target.without_labels();
    let mut observer = |m: &EcanModel| -> Result<Option<f64>> {
        if target.is_labeled() {
            Ok(Some(evaluate(m, &target)?.uar))
        } else {
            Ok(None)
        }
    };
    let (adapted, log) = adapt_observed(model, &unlabeled, &cfg.hyper_params(), cfg.ablation(), &mut observer)?;

    prepare_out_dir(&cfg)?;
    let model_out = cfg.out_dir.join(ADAPTED_MODEL_FILE);
    adapted.save(&model_out)?;
    let log_out = cfg.out_dir.join(RUN_LOG_FILE);
    fs::write(&log_out, log.to_jsonl()).map_err(|e| EcanError::io(&log_out, e))?;
    cfg.echo("adapt")?;
    println!("wrote {} and {}", model_out.display(), log_out.display());
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    if args.model.is_some() {
        cfg.model = args.model;
    }
    if args.corpus.is_some() {
        cfg.corpus = args.corpus;
    }
    let model = EcanModel::load(required(&cfg.model, "model")?)?;
    let corpus = load_corpus(required(&cfg.corpus, "corpus")?)?;
    if corpus.dim() != model.input_dim() {
        return Err(EcanError::Dimension(format!(
            "corpus width {} against model input_dim {}",
            corpus.dim(),
            model.input_dim()
        )));
    }
    let report = evaluate(&model, &corpus)?;
    prepare_out_dir(&cfg)?;
    let out = cfg.out_dir.join(REPORT_FILE);
    fs::write(&out, report.to_json()).map_err(|e| EcanError::io(&out, e))?;
    cfg.echo("eval")?;
    println!("uar {:.4} accuracy {:.4} -> {}", report.uar, report.accuracy, out.display());
    Ok(())
}

pub fn cmd_project(args: ProjectArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    if args.model.is_some() {
        cfg.model = args.model;
    }
    if args.corpus.is_some() {
        cfg.corpus = args.corpus;
    }
    let model = EcanModel::load(required(&cfg.model, "model")?)?;
    let corpus = load_corpus(required(&cfg.corpus, "corpus")?)?;
    if corpus.dim() != model.input_dim() {
        return Err(EcanError::Dimension(format!(
            "corpus width {} against model input_dim {}",
            corpus.dim(),
            model.input_dim()
        )));
    }
    let points = project_2d(&model, &corpus)?;
    prepare_out_dir(&cfg)?;
    let out = cfg.out_dir.join(PROJECTION_FILE);
    write_projection(&points, &out)?;
    cfg.echo("project")?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Project(a) => cmd_project(a),
    }
}
