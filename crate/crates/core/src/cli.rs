//! The `advforge` command line: JSON experiment configs with flag
//! overrides, one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration or protocol
//! error, 3 data error, 4 training divergence. Diagnostics go to stderr;
//! stdout carries only the paths of written artifacts, one per line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, EvalReport, ModelAccuracy, DEFAULT_EPS1, DEFAULT_EPS2};
use crate::attacks::{self, AdversarialSet, AttackConfig};
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{accuracy, build_model, Architecture, Model, ModelSpec};
use crate::synth::{self, GlyphConfig};
use crate::training::{self, DefenseVariant, TrainConfig};

pub const SEED_ENV: &str = "ADVFORGE_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Idx,
    Cifar,
    #[default]
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    /// IDX image file.
    pub images: Option<PathBuf>,
    /// IDX label file.
    pub labels: Option<PathBuf>,
    /// CIFAR-10 binary batch files.
    pub files: Vec<PathBuf>,
    pub synthetic: GlyphConfig,
    pub train_fraction: f64,
    /// Keep exactly this many images per class before splitting.
    pub per_class: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            format: DatasetFormat::Synthetic,
            images: None,
            labels: None,
            files: Vec::new(),
            synthetic: GlyphConfig::default(),
            train_fraction: 0.8,
            per_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub width: Option<usize>,
    pub depth: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Minivgg,
            width: None,
            depth: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_shape: [usize; 3], classes: usize) -> ModelSpec {
        let mut spec = match self.architecture {
            Architecture::Minivgg => ModelSpec::minivgg(input_shape, classes),
            Architecture::Miniresnet => ModelSpec::miniresnet(input_shape, classes),
            Architecture::Linear => ModelSpec::linear(input_shape, classes),
        };
        if let Some(w) = self.width {
            spec.width = w;
        }
        if let Some(d) = self.depth {
            spec.depth = d;
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSettings {
    pub epsilon: f32,
    pub step_size: f32,
    /// Defaults to the schedule for `epsilon`.
    pub iterations: Option<usize>,
    /// Number of validation images to attack; all when absent.
    pub images: Option<usize>,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            epsilon: 16.0,
            step_size: 1.0,
            iterations: None,
            images: None,
        }
    }
}

impl AttackSettings {
    pub fn config(&self) -> Result<AttackConfig> {
        AttackConfig::new(
            self.epsilon,
            self.step_size,
            self.iterations
                .unwrap_or_else(|| attacks::iteration_count(self.epsilon as f64)),
            (data::PIXEL_MIN, data::PIXEL_MAX),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSettings {
    pub eps1: (f64, f64),
    pub eps2: (f64, f64),
    pub step: f64,
    pub curve_max_eps: f64,
    pub curve_step: f64,
    pub curve_images: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            eps1: DEFAULT_EPS1,
            eps2: DEFAULT_EPS2,
            step: 1.0,
            curve_max_eps: 128.0,
            curve_step: 1.0,
            curve_images: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackSettings,
    pub analysis: AnalysisSettings,
    /// Checkpoint paths used as the crafting ensemble by `attack`.
    pub ensemble: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Falls back to `ADVFORGE_SEED`, then 0.
    pub seed: Option<u64>,
    /// Models trained per architecture by `reproduce`.
    pub models: usize,
    pub ensemble_sizes: Vec<usize>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attack: AttackSettings::default(),
            analysis: AnalysisSettings::default(),
            ensemble: Vec::new(),
            output_dir: PathBuf::from("out"),
            seed: None,
            models: 6,
            ensemble_sizes: vec![1, 3, 5],
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    /// Loads the dataset and splits it into train and validation parts.
    pub fn load_data(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let d = &self.dataset;
        let full = match d.format {
            DatasetFormat::Idx => {
                let (Some(i), Some(l)) = (&d.images, &d.labels) else {
                    return Err(Error::Config(
                        "idx dataset needs `images` and `labels` paths".into(),
                    ));
                };
                data::load_idx(i, l)?
            }
            DatasetFormat::Cifar => {
                if d.files.is_empty() {
                    return Err(Error::Config("cifar dataset needs `files`".into()));
                }
                data::load_cifar_binary(&d.files)?
            }
            DatasetFormat::Synthetic => synth::glyphs(&d.synthetic, seed)?,
        };
        let full = match d.per_class {
            Some(k) => data::balance_classes(&full, k, seed)?,
            None => full,
        };
        data::holdout_split(&full, d.train_fraction, seed)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "advforge",
    version,
    about = "Ensemble adversaries, alpha-mix defenses and loss landscapes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// JSON experiment config; flags override its keys.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for crafting.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<DatasetFormat>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long = "cifar-file")]
    pub cifar_files: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum DefenseFlag {
    None,
    FixedAlpha,
    FixedAlphaKl,
    BetaAlphaKl,
    Vat,
    Pgd,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub architecture: Option<ArchFlag>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub defense: Option<DefenseFlag>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long = "kl-weight")]
    pub kl_weight: Option<f64>,
    /// VAT or PGD budget.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f32>,
    /// Base name of the written checkpoint and report.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ArchFlag {
    Minivgg,
    Miniresnet,
    Linear,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: Common,
    /// Crafting-ensemble checkpoint; repeat for more members.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub step_size: Option<f32>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Number of validation images to attack.
    #[arg(long = "count")]
    pub count: Option<usize>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub holdout: PathBuf,
    /// Adversarial-set manifest; repeat for more sets.
    #[arg(long = "set")]
    pub sets: Vec<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct LandscapeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub subject: PathBuf,
    /// Model giving the first direction; the subject itself when absent.
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    /// Validation image index.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_range)]
    pub eps1: Option<(f64, f64)>,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_range)]
    pub eps2: Option<(f64, f64)>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct CurveArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "count")]
    pub count: Option<usize>,
    #[arg(long)]
    pub max_eps: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write its checkpoint and report.
    Train(TrainArgs),
    /// Craft an adversarial set against an ensemble of checkpoints.
    Attack(AttackArgs),
    /// Evaluate a held-out model on adversarial sets.
    Eval(EvalArgs),
    /// Two-direction loss landscape of one validation image.
    Landscape(LandscapeArgs),
    /// Loss and fool rate versus FGSM epsilon.
    Curve(CurveArgs),
    /// Train the models, attack with every ensemble size and evaluate the holdout.
    Reproduce(Common),
    /// Write the synthetic glyph dataset as IDX files.
    Synth(SynthArgs),
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Protocol(_)
        | Error::Json(_)
        | Error::InvalidSpec(_)
        | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("advforge: {e}");
            exit_code(&e)
        }
    }
}

fn base_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(f) = c.format {
        cfg.dataset.format = f;
    }
    if c.images.is_some() {
        cfg.dataset.images = c.images.clone();
    }
    if c.labels.is_some() {
        cfg.dataset.labels = c.labels.clone();
    }
    if !c.cifar_files.is_empty() {
        cfg.dataset.files = c.cifar_files.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::Config(format!("{}: {e}", cfg.output_dir.display())))?;
    Ok(cfg.output_dir.clone())
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn dispatch(cmd: Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Landscape(a) => cmd_landscape(&a),
        Command::Curve(a) => cmd_curve(&a),
        Command::Reproduce(c) => cmd_reproduce(&c),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn defense_from_flags(a: &TrainArgs, current: DefenseVariant) -> Result<DefenseVariant> {
    let Some(flag) = a.defense else {
        return Ok(current);
    };
    let need = |v: Option<f64>, name: &str, default: Option<f64>| {
        v.or(default)
            .ok_or_else(|| Error::Config(format!("--defense needs --{name}")))
    };
    Ok(match flag {
        DefenseFlag::None => DefenseVariant::None,
        DefenseFlag::FixedAlpha => DefenseVariant::FixedAlpha {
            alpha: need(a.alpha, "alpha", None)?,
        },
        DefenseFlag::FixedAlphaKl => DefenseVariant::FixedAlphaKl {
            alpha: need(a.alpha, "alpha", None)?,
            lambda: need(a.kl_weight, "kl-weight", None)?,
        },
        DefenseFlag::BetaAlphaKl => DefenseVariant::BetaAlphaKl {
            p: need(a.p, "p", Some(2.0))?,
            q: need(a.q, "q", Some(4.0))?,
            lambda: need(a.kl_weight, "kl-weight", Some(10.0))?,
        },
        DefenseFlag::Vat => DefenseVariant::Vat {
            epsilon: a.epsilon.unwrap_or(15.0),
            iterations: a.iterations.unwrap_or(3),
            lambda: a.kl_weight.unwrap_or(1.0),
        },
        DefenseFlag::Pgd => DefenseVariant::Pgd {
            epsilon: a.epsilon.unwrap_or(8.0) as f32,
            step_size: a.step_size.unwrap_or(2.0),
            iterations: a.iterations.unwrap_or(7),
        },
    })
}

/// Trains one model, writing `<id>.advf` and `<id>.report.json`.
pub fn train_one(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &(LabeledDataset, LabeledDataset),
    id: &str,
) -> Result<(Model, Vec<PathBuf>)> {
    let dir = out_dir(cfg)?;
    let spec = model_cfg.spec(data.0.image_shape(), data.0.num_classes());
    let mut model = build_model(&spec, train_cfg.seed)?;
    let ckpt = dir.join(format!("{id}.advf"));
    let mut tc = train_cfg.clone();
    tc.checkpoint = Some(ckpt.clone());
    eprintln!(
        "training {id} ({:?}, {})",
        spec.architecture,
        tc.defense.name()
    );
    let report = training::train(&mut model, &data.0, &data.1, &tc)?;
    model.save(&ckpt)?;
    let rep = write(dir.join(format!("{id}.report.json")), report.to_json()?)?;
    eprintln!(
        "{id}: best val acc {:.4} at epoch {}",
        report.best_val_acc, report.best_epoch
    );
    Ok((model, vec![ckpt, rep]))
}

fn cmd_train(a: &TrainArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = base_config(&a.common)?;
    let seed = cfg.resolved_seed()?;
    if let Some(arch) = a.architecture {
        cfg.model.architecture = match arch {
            ArchFlag::Minivgg => Architecture::Minivgg,
            ArchFlag::Miniresnet => Architecture::Miniresnet,
            ArchFlag::Linear => Architecture::Linear,
        };
    }
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = a.lr {
        tc.learning_rate = lr;
    }
    tc.defense = defense_from_flags(a, tc.defense)?;
    tc.validate()?;
    let data = cfg.load_data(seed)?;
    let id = a.id.clone().unwrap_or_else(|| format!("model-{seed}"));
    let model_cfg = cfg.model.clone();
    Ok(train_one(&cfg, &model_cfg, &tc, &data, &id)?.1)
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model>> {
    let models: Vec<Model> = paths.iter().map(Model::load).collect::<Result<_>>()?;
    if let Some(first) = models.first() {
        for (m, p) in models.iter().zip(paths) {
            if m.spec().input_shape != first.spec().input_shape
                || m.spec().num_classes != first.spec().num_classes
            {
                return Err(Error::Config(format!(
                    "{} expects {:?} inputs with {} classes, {} expects {:?} with {}",
                    p.display(),
                    m.spec().input_shape,
                    m.spec().num_classes,
                    paths[0].display(),
                    first.spec().input_shape,
                    first.spec().num_classes
                )));
            }
        }
    }
    Ok(models)
}

fn attack_images(val: &LabeledDataset, count: Option<usize>) -> Result<LabeledDataset> {
    let n = count.unwrap_or(val.len()).min(val.len());
    if n == 0 {
        return Err(Error::Config("no images to attack".into()));
    }
    val.subset(&(0..n).collect::<Vec<_>>())
}

/// Crafts and extracts a set, writing `<name>.json` and `<name>.advf`.
pub fn attack_one(
    cfg: &ExperimentConfig,
    models: &[&Model],
    ids: &[String],
    images: &LabeledDataset,
    acfg: &AttackConfig,
    name: &str,
) -> Result<(AdversarialSet, Vec<PathBuf>)> {
    if let Some(m) = models.first() {
        if m.spec().input_shape != images.image_shape() {
            return Err(Error::Config(format!(
                "checkpoints expect {:?} inputs, dataset has {:?}",
                m.spec().input_shape,
                images.image_shape()
            )));
        }
    }
    let dir = out_dir(cfg)?;
    eprintln!(
        "crafting {name}: {} images, eps {}, {} iterations, ensemble {:?}",
        images.len(),
        acfg.epsilon,
        acfg.iterations,
        ids
    );
    let cand =
        attacks::craft_adversaries(models, images.images(), images.labels(), acfg, cfg.workers)?;
    let set = attacks::extract_adversarial_set(
        models,
        ids,
        images.images(),
        &cand,
        images.labels(),
        acfg,
    )?;
    if set.is_empty() {
        eprintln!("{name}: empty adversarial set");
    }
    let manifest = dir.join(format!("{name}.json"));
    let payload = set.save(&manifest)?;
    Ok((set, vec![manifest, payload]))
}

fn cmd_attack(a: &AttackArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = base_config(&a.common)?;
    let seed = cfg.resolved_seed()?;
    if !a.checkpoints.is_empty() {
        cfg.ensemble = a.checkpoints.clone();
    }
    if cfg.ensemble.is_empty() {
        return Err(Error::Config(
            "attack needs at least one --checkpoint".into(),
        ));
    }
    if let Some(e) = a.epsilon {
        cfg.attack.epsilon = e;
        if a.iterations.is_none() {
            cfg.attack.iterations = None;
        }
    }
    if let Some(s) = a.step_size {
        cfg.attack.step_size = s;
    }
    if a.iterations.is_some() {
        cfg.attack.iterations = a.iterations;
    }
    if a.count.is_some() {
        cfg.attack.images = a.count;
    }
    let acfg = cfg.attack.config()?;
    let models = load_models(&cfg.ensemble)?;
    let ids: Vec<String> = cfg.ensemble.iter().map(|p| stem(p)).collect();
    let (_, val) = cfg.load_data(seed)?;
    let images = attack_images(&val, cfg.attack.images)?;
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| format!("adv-{}x{}", ids.len(), acfg.epsilon));
    let refs: Vec<&Model> = models.iter().collect();
    Ok(attack_one(&cfg, &refs, &ids, &images, &acfg, &name)?.1)
}

fn cmd_eval(a: &EvalArgs) -> Result<Vec<PathBuf>> {
    let cfg = base_config(&a.common)?;
    if a.sets.is_empty() {
        return Err(Error::Config("eval needs at least one --set".into()));
    }
    let holdout = Model::load(&a.holdout)?;
    let id = stem(&a.holdout);
    let mut report = EvalReport::default();
    for s in &a.sets {
        let set = AdversarialSet::load(s)?;
        report
            .transfer
            .push(analysis::evaluate_transfer(&holdout, &id, &set)?);
    }
    let dir = out_dir(&cfg)?;
    let name = a.name.clone().unwrap_or_else(|| format!("eval-{id}"));
    Ok(vec![write(
        dir.join(format!("{name}.json")),
        report.to_json()?,
    )?])
}

fn cmd_landscape(a: &LandscapeArgs) -> Result<Vec<PathBuf>> {
    let cfg = base_config(&a.common)?;
    let seed = cfg.resolved_seed()?;
    let subject = Model::load(&a.subject)?;
    let surrogate_path = a.surrogate.clone().unwrap_or_else(|| a.subject.clone());
    let surrogate = Model::load(&surrogate_path)?;
    let (_, val) = cfg.load_data(seed)?;
    if a.index >= val.len() {
        return Err(Error::Config(format!(
            "image index {} out of {}",
            a.index,
            val.len()
        )));
    }
    let x = val.images().slice_outer(a.index, a.index + 1)?;
    let grid = analysis::landscape_grid(
        &subject,
        &stem(&a.subject),
        &surrogate,
        &stem(&surrogate_path),
        &x,
        val.labels()[a.index],
        a.eps1.unwrap_or(cfg.analysis.eps1),
        a.eps2.unwrap_or(cfg.analysis.eps2),
        a.step.unwrap_or(cfg.analysis.step),
    )?;
    let dir = out_dir(&cfg)?;
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| format!("landscape-{}-{}", stem(&a.subject), a.index));
    Ok(vec![write(dir.join(format!("{name}.csv")), grid.to_csv())?])
}

fn cmd_curve(a: &CurveArgs) -> Result<Vec<PathBuf>> {
    let cfg = base_config(&a.common)?;
    let seed = cfg.resolved_seed()?;
    let model = Model::load(&a.checkpoint)?;
    let (_, val) = cfg.load_data(seed)?;
    let images = attack_images(&val, Some(a.count.unwrap_or(cfg.analysis.curve_images)))?;
    let eps = analysis::eps_range(
        a.max_eps.unwrap_or(cfg.analysis.curve_max_eps),
        a.step.unwrap_or(cfg.analysis.curve_step),
    )?;
    let curve = analysis::loss_curve(&model, images.images(), images.labels(), &eps)?;
    let dir = out_dir(&cfg)?;
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| format!("curve-{}", stem(&a.checkpoint)));
    Ok(vec![write(
        dir.join(format!("{name}.csv")),
        curve.to_csv(),
    )?])
}

fn cmd_reproduce(c: &Common) -> Result<Vec<PathBuf>> {
    let cfg = base_config(c)?;
    let seed = cfg.resolved_seed()?;
    let max_size = cfg.ensemble_sizes.iter().copied().max().unwrap_or(0);
    if cfg.models < 2 || max_size >= cfg.models || cfg.ensemble_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "{} models cannot hold ensembles of {:?} plus a holdout",
            cfg.models, cfg.ensemble_sizes
        )));
    }
    cfg.train.validate()?;
    let acfg = cfg.attack.config()?;
    let data = cfg.load_data(seed)?;
    let mut paths = Vec::new();
    let mut models = Vec::new();
    let mut ids = Vec::new();
    for k in 0..cfg.models {
        let id = format!("model-{k}");
        let mut tc = cfg.train.clone();
        tc.seed = seed.wrapping_add(k as u64);
        let (m, p) = train_one(&cfg, &cfg.model, &tc, &data, &id)?;
        paths.extend(p);
        models.push(m);
        ids.push(id);
    }
    let holdout = cfg.models - 1;
    let images = attack_images(&data.1, cfg.attack.images)?;
    let mut report = EvalReport::default();
    for (m, id) in models.iter().zip(&ids) {
        report.original.push(ModelAccuracy {
            model_id: id.clone(),
            train_acc: Some(accuracy(m, &data.0)?),
            val_acc: Some(accuracy(m, &data.1)?),
        });
    }
    for &size in &cfg.ensemble_sizes {
        let ens: Vec<&Model> = models[..size].iter().collect();
        let (set, p) = attack_one(
            &cfg,
            &ens,
            &ids[..size],
            &images,
            &acfg,
            &format!("adv-{size}"),
        )?;
        paths.extend(p);
        report.transfer.push(analysis::evaluate_transfer(
            &models[holdout],
            &ids[holdout],
            &set,
        )?);
    }
    let dir = out_dir(&cfg)?;
    paths.push(write(dir.join("eval.json"), report.to_json()?)?);
    paths.push(write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?);
    Ok(paths)
}

fn cmd_synth(a: &SynthArgs) -> Result<Vec<PathBuf>> {
    let seed = ExperimentConfig {
        seed: a.seed,
        ..Default::default()
    }
    .resolved_seed()?;
    let ds = synth::glyphs(
        &GlyphConfig {
            per_class: a.per_class,
            ..Default::default()
        },
        seed,
    )?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| Error::Config(format!("{}: {e}", a.out.display())))?;
    let images = a.out.join("glyphs-images-idx3-ubyte");
    let labels = a.out.join("glyphs-labels-idx1-ubyte");
    data::save_idx(&ds, &images, &labels)?;
    Ok(vec![images, labels])
}
