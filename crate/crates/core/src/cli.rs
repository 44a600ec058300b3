//! The `dcsnet` command line: teacher training, distillation, temperature
//! and alpha sweeps, evaluation, Grad-CAM explanations and result reports.
//!
//! Every command resolves a [`RunConfig`] from built-in defaults, an
//! optional JSON file of flat dotted keys (`"train.epochs": 5`) and flags,
//! in that order, validates all of it, and only then touches the disk.

use std::cmp::Ordering;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{self, load_image_dir, read_image, split, synth_generate, AugmentPolicy, DatasetSplit, Quadrant, Sample, SynthSpec};
use crate::distill::{DistillConfig, SoftVariant};
use crate::error::{Error, Result};
use crate::explain::{grad_cam, render_overlay, upsample, ExplainEntry};
use crate::metrics::{read_result_rows, write_result_rows, Averaging, ConfusionMatrix, MetricsReport, ResultRow};
use crate::models::{
    build_dcsnet, build_teacher, load_checkpoint, save_checkpoint, CheckpointMeta, ModelGraph, TeacherArchetype, TeacherConfig,
};
use crate::tensor::Tensor;
use crate::train::{distill_student, evaluate_metrics, train_teacher, Precision, TrainConfig, TrainHistory};

/// Environment variable naming the default output directory.
pub const OUTPUT_ROOT_ENV: &str = "DCSNET_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT: &str = "dcsnet-out";
/// Alpha grid of the sweep.
pub const SWEEP_ALPHAS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Inclusive temperature range searched by the sweep.
pub const SWEEP_T_RANGE: (u32, u32) = (1, 100);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    #[default]
    Test,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected train, val or test"))),
        }
    }
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    pub fn of(self, data: &DatasetSplit) -> &[Sample] {
        match self {
            Self::Train => &data.train,
            Self::Val => &data.val,
            Self::Test => &data.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    /// Class-per-directory image tree.
    pub dir: Option<PathBuf>,
    /// Use the synthetic generator instead of `dir`.
    pub synth: bool,
    /// Seed of the generator and of the split; independent of the run seed
    /// so that every run sees the same partition.
    pub seed: u64,
    pub classes: usize,
    /// Square side images are generated at or resized to; defaults to the
    /// checkpoint's input size, else 32.
    pub image_size: Option<usize>,
    pub per_class: usize,
    pub noise: f64,
    pub clutter: f64,
    /// Train/validation/test fractions; 80/10/10 for folders, 200/50/50 of
    /// 300 for synthetic data.
    pub split: Option<[f64; 3]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            dir: None,
            synth: false,
            seed: 0,
            classes: s.classes,
            image_size: None,
            per_class: s.per_class,
            noise: s.noise,
            clutter: s.clutter,
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherSection {
    pub archetype: TeacherArchetype,
    pub width: Option<usize>,
    pub depth: Option<usize>,
    /// Trained teacher used by `distill` and `sweep`.
    pub checkpoint: Option<PathBuf>,
}

impl TeacherSection {
    pub fn config(&self) -> TeacherConfig {
        let d = TeacherConfig::default_for(self.archetype);
        TeacherConfig {
            width: self.width.unwrap_or(d.width),
            depth: self.depth.unwrap_or(d.depth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    /// Random temperatures per alpha in the first phase.
    pub coarse: usize,
    /// Temperatures per alpha around the best coarse one.
    pub fine: usize,
    pub alphas: Vec<f64>,
    /// Half-width of the refinement window.
    pub radius: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            coarse: 8,
            fine: 5,
            alphas: SWEEP_ALPHAS.to_vec(),
            radius: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Model evaluated or explained.
    pub checkpoint: Option<PathBuf>,
    pub split: Partition,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExplainConfig {
    pub layer: Option<String>,
    /// Folder of unlabelled images to explain instead of a dataset split.
    pub images: Option<PathBuf>,
    pub limit: Option<usize>,
}

/// Fully resolved settings of one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub output: PathBuf,
    pub data: DataConfig,
    pub teacher: TeacherSection,
    /// `train.seed` is also the model initialisation seed.
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
    pub inputs: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let output = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
        Self {
            output,
            data: DataConfig::default(),
            teacher: TeacherSection {
                archetype: TeacherArchetype::Residual,
                width: None,
                depth: None,
                checkpoint: None,
            },
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
            explain: ExplainConfig::default(),
            inputs: Vec::new(),
        }
    }
}

type Field<T> = std::result::Result<T, String>;

fn num(v: &Value) -> Field<f64> {
    v.as_f64().ok_or_else(|| format!("expected a number, got {v}"))
}

fn count(v: &Value) -> Field<u64> {
    v.as_u64().ok_or_else(|| format!("expected a non-negative integer, got {v}"))
}

fn flag(v: &Value) -> Field<bool> {
    v.as_bool().ok_or_else(|| format!("expected true or false, got {v}"))
}

fn text(v: &Value) -> Field<&str> {
    v.as_str().ok_or_else(|| format!("expected a string, got {v}"))
}

fn parsed<T: std::str::FromStr<Err = Error>>(v: &Value) -> Field<T> {
    text(v)?.parse().map_err(|e: Error| e.to_string())
}

fn numbers(v: &Value) -> Field<Vec<f64>> {
    match v {
        Value::Array(items) => items.iter().map(num).collect(),
        Value::String(s) => s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("{p:?} is not a number")))
            .collect(),
        _ => Err(format!("expected a list of numbers, got {v}")),
    }
}

fn paths(v: &Value) -> Field<Vec<PathBuf>> {
    match v {
        Value::Array(items) => items.iter().map(|i| text(i).map(PathBuf::from)).collect(),
        Value::String(s) => Ok(vec![PathBuf::from(s)]),
        _ => Err(format!("expected a list of paths, got {v}")),
    }
}

impl RunConfig {
    /// Assign one dotted key.
    pub fn set(&mut self, key: &str, v: &Value) -> Field<()> {
        match key {
            "output" => self.output = text(v)?.into(),
            "checkpoint" => self.eval.checkpoint = Some(text(v)?.into()),
            "inputs" => self.inputs = paths(v)?,
            "seed" | "train.seed" => self.train.seed = count(v)?,
            "data.dir" => self.data.dir = Some(text(v)?.into()),
            "data.synth" => self.data.synth = flag(v)?,
            "data.seed" => self.data.seed = count(v)?,
            "data.classes" => self.data.classes = count(v)? as usize,
            "data.image_size" => self.data.image_size = Some(count(v)? as usize),
            "data.per_class" => self.data.per_class = count(v)? as usize,
            "data.noise" => self.data.noise = num(v)?,
            "data.clutter" => self.data.clutter = num(v)?,
            "data.split" => {
                let r = numbers(v)?;
                let r: [f64; 3] = r.try_into().map_err(|r: Vec<f64>| format!("expected 3 fractions, got {}", r.len()))?;
                self.data.split = Some(r);
            }
            "teacher.archetype" => self.teacher.archetype = parsed(v)?,
            "teacher.width" => self.teacher.width = Some(count(v)? as usize),
            "teacher.depth" => self.teacher.depth = Some(count(v)? as usize),
            "teacher.checkpoint" => self.teacher.checkpoint = Some(text(v)?.into()),
            "train.epochs" => self.train.epochs = count(v)? as usize,
            "train.batch_size" => self.train.batch_size = count(v)? as usize,
            "train.lr" => self.train.lr = num(v)?,
            "train.precision" => self.train.precision = parsed::<Precision>(v)?,
            "train.shuffle" => self.train.shuffle = flag(v)?,
            "train.augment" => self.train.augment = flag(v)?.then(AugmentPolicy::default),
            "distill.alpha" => self.distill.alpha = num(v)?,
            "distill.temperature" => self.distill.temperature = num(v)?,
            "distill.soft_variant" => self.distill.soft_variant = parsed::<SoftVariant>(v)?,
            "distill.t_squared" => self.distill.t_squared_scaling = flag(v)?,
            "sweep.coarse" => self.sweep.coarse = count(v)? as usize,
            "sweep.fine" => self.sweep.fine = count(v)? as usize,
            "sweep.alphas" => self.sweep.alphas = numbers(v)?,
            "sweep.radius" => self.sweep.radius = count(v)?.min(u32::MAX as u64) as u32,
            "eval.split" => self.eval.split = parsed(v)?,
            "eval.averaging" => self.eval.averaging = parsed(v)?,
            "explain.layer" => self.explain.layer = Some(text(v)?.to_string()),
            "explain.images" => self.explain.images = Some(text(v)?.into()),
            "explain.limit" => self.explain.limit = Some(count(v)? as usize),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Apply `pairs` in order, collecting every failure.
    fn apply(&mut self, pairs: &[(String, Value)], errors: &mut Vec<String>) {
        for (k, v) in pairs {
            if let Err(e) = self.set(k, v) {
                errors.push(format!("{k}: {e}"));
            }
        }
    }

    /// Every problem with the configuration for `command`, or nothing.
    pub fn problems(&self, command: CommandKind) -> Vec<String> {
        let mut out = Vec::new();
        let uses_data = command != CommandKind::Report && !(command == CommandKind::Explain && self.explain.images.is_some());
        if uses_data {
            match (&self.data.dir, self.data.synth) {
                (Some(_), true) => out.push("data: give either a directory or synthetic data, not both".into()),
                (None, false) => out.push("data: give a directory (--data) or --synth".into()),
                _ => {}
            }
            if self.data.synth {
                if let Err(e) = self.synth_spec(self.data.image_size.unwrap_or(32)).validate() {
                    out.push(format!("data: {e}"));
                }
            }
            if let Some(r) = self.data.split {
                if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    out.push(format!("data.split: {r:?} must be fractions summing to 1"));
                }
            }
            if self.data.image_size == Some(0) {
                out.push("data.image_size: must be >= 1".into());
            }
        }
        if matches!(command, CommandKind::TrainTeacher | CommandKind::Distill | CommandKind::Sweep) {
            let t = &self.train;
            if t.epochs == 0 {
                out.push("train.epochs: must be >= 1".into());
            }
            if t.batch_size == 0 {
                out.push("train.batch_size: must be >= 1".into());
            }
            if !(t.lr > 0.0 && t.lr.is_finite()) {
                out.push(format!("train.lr: must be positive, got {}", t.lr));
            }
        }
        if command == CommandKind::TrainTeacher {
            let c = self.teacher.config();
            if c.width == 0 || c.depth == 0 {
                out.push(format!("teacher: width and depth must be >= 1, got {c:?}"));
            }
        }
        if matches!(command, CommandKind::Distill | CommandKind::Sweep) && self.teacher.checkpoint.is_none() {
            out.push("teacher.checkpoint: required (--teacher)".into());
        }
        if command == CommandKind::Distill {
            let d = &self.distill;
            if !(0.0..=1.0).contains(&d.alpha) {
                out.push(format!("distill.alpha: must lie in [0, 1], got {}", d.alpha));
            }
            if !(d.temperature > 0.0 && d.temperature.is_finite()) {
                out.push(format!("distill.temperature: must be > 0, got {}", d.temperature));
            }
        }
        if command == CommandKind::Sweep {
            let s = &self.sweep;
            if s.coarse == 0 {
                out.push("sweep.coarse: the trial budget needs at least one coarse trial".into());
            }
            if s.alphas.is_empty() {
                out.push("sweep.alphas: at least one alpha is required".into());
            }
            if let Some(a) = s.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                out.push(format!("sweep.alphas: {a} is outside [0, 1]"));
            }
        }
        if matches!(command, CommandKind::Eval | CommandKind::Explain) && self.eval.checkpoint.is_none() {
            out.push("checkpoint: required (--checkpoint)".into());
        }
        if command == CommandKind::Explain && self.explain.limit == Some(0) {
            out.push("explain.limit: must be >= 1".into());
        }
        if command == CommandKind::Report && self.inputs.is_empty() {
            out.push("inputs: at least one result CSV is required".into());
        }
        out
    }

    pub fn validate(&self, command: CommandKind) -> Result<()> {
        let p = self.problems(command);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    fn synth_spec(&self, size: usize) -> SynthSpec {
        SynthSpec {
            classes: self.data.classes,
            height: size,
            width: size,
            per_class: self.data.per_class,
            noise: self.data.noise,
            clutter: self.data.clutter,
            seed: self.data.seed,
        }
    }
}

/// Flatten nested objects into dotted keys.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Dotted keys of a JSON config file.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
    }
    let mut out = Vec::new();
    flatten("", &v, &mut out);
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "dcsnet", version, about = "Knowledge distillation into the DCSNet student, with Grad-CAM explanations")]
pub struct Cli {
    /// JSON config of flat dotted keys, e.g. {"train.epochs": 5}; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory [default: $DCSNET_OUTPUT_ROOT or ./dcsnet-out].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed of model initialisation, batching and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a teacher archetype from scratch.
    TrainTeacher(TrainTeacherArgs),
    /// Distil a trained teacher into a fresh DCSNet.
    Distill(DistillArgs),
    /// Random-search the temperature at every alpha, then refine.
    Sweep(SweepArgs),
    /// Metrics, confusion matrix and false negatives of a checkpoint.
    Eval(EvalArgs),
    /// Grad-CAM overlays for a checkpoint.
    Explain(ExplainArgs),
    /// Merge result CSVs and name the best configuration.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    TrainTeacher,
    Distill,
    Sweep,
    Eval,
    Explain,
    Report,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::TrainTeacher => "train-teacher",
            Self::Distill => "distill",
            Self::Sweep => "sweep",
            Self::Eval => "eval",
            Self::Explain => "explain",
            Self::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Class-per-directory image folder.
    #[arg(long = "data", value_name = "DIR")]
    pub dir: Option<PathBuf>,
    /// Use the synthetic quadrant-texture dataset.
    #[arg(long)]
    pub synth: bool,
    /// Seed of the synthetic generator and of the split.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Number of synthetic classes (2-4).
    #[arg(long)]
    pub classes: Option<u64>,
    /// Square image side.
    #[arg(long)]
    pub image_size: Option<u64>,
    /// Synthetic images per class.
    #[arg(long)]
    pub per_class: Option<u64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub clutter: Option<f64>,
    /// Train,val,test fractions.
    #[arg(long, value_name = "T,V,E")]
    pub split_ratios: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Keep the training order fixed.
    #[arg(long)]
    pub no_shuffle: bool,
    /// Random rotations up to 25 degrees and flips with probability 0.5.
    #[arg(long)]
    pub augment: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct LossArgs {
    /// kl or ce.
    #[arg(long)]
    pub soft_variant: Option<String>,
    /// Multiply the soft term by T^2.
    #[arg(long)]
    pub t_squared: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// residual or silu_net.
    #[arg(long)]
    pub archetype: Option<String>,
    #[arg(long)]
    pub width: Option<u64>,
    #[arg(long)]
    pub depth: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DistillArgs {
    /// Teacher checkpoint.
    #[arg(long, value_name = "FILE")]
    pub teacher: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Weight of the hard loss [default: 0.3].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Softmax temperature [default: 10].
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Teacher checkpoint.
    #[arg(long, value_name = "FILE")]
    pub teacher: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Random temperatures per alpha [default: 8].
    #[arg(long)]
    pub coarse: Option<u64>,
    /// Refinement temperatures per alpha [default: 5].
    #[arg(long)]
    pub fine: Option<u64>,
    /// Comma-separated alpha values [default: 0.1,0.2,0.3,0.4,0.5].
    #[arg(long)]
    pub alphas: Option<String>,
    /// Refinement half-width [default: 10].
    #[arg(long)]
    pub radius: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// train, val or test [default: test].
    #[arg(long)]
    pub split: Option<String>,
    /// macro or weighted [default: macro].
    #[arg(long)]
    pub averaging: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Dataset split to explain [default: test].
    #[arg(long)]
    pub split: Option<String>,
    /// Folder of unlabelled images to explain instead of a split.
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Capture layer [default: the model's last spatial layer].
    #[arg(long)]
    pub layer: Option<String>,
    /// Explain at most this many images.
    #[arg(long)]
    pub limit: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Result CSVs to merge.
    #[arg(value_name = "CSV")]
    pub inputs: Vec<PathBuf>,
}

struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn opt<T: Serialize>(&mut self, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            self.0.push((key.into(), json!(v)));
        }
    }

    fn on(&mut self, key: &str, set: bool, value: bool) {
        if set {
            self.0.push((key.into(), json!(value)));
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        self.opt(key, &v.as_ref().map(|p| p.to_string_lossy().into_owned()));
    }

    fn data(&mut self, a: &DataArgs) {
        self.path("data.dir", &a.dir);
        self.on("data.synth", a.synth, true);
        self.opt("data.seed", &a.data_seed);
        self.opt("data.classes", &a.classes);
        self.opt("data.image_size", &a.image_size);
        self.opt("data.per_class", &a.per_class);
        self.opt("data.noise", &a.noise);
        self.opt("data.clutter", &a.clutter);
        self.opt("data.split", &a.split_ratios);
    }

    fn train(&mut self, a: &TrainArgs) {
        self.opt("train.epochs", &a.epochs);
        self.opt("train.batch_size", &a.batch_size);
        self.opt("train.lr", &a.lr);
        self.opt("train.precision", &a.precision);
        self.on("train.shuffle", a.no_shuffle, false);
        self.on("train.augment", a.augment, true);
    }

    fn loss(&mut self, a: &LossArgs) {
        self.opt("distill.soft_variant", &a.soft_variant);
        self.on("distill.t_squared", a.t_squared, true);
    }
}

impl Cli {
    fn kind(&self) -> CommandKind {
        match self.command {
            Command::TrainTeacher(_) => CommandKind::TrainTeacher,
            Command::Distill(_) => CommandKind::Distill,
            Command::Sweep(_) => CommandKind::Sweep,
            Command::Eval(_) => CommandKind::Eval,
            Command::Explain(_) => CommandKind::Explain,
            Command::Report(_) => CommandKind::Report,
        }
    }

    /// Flag values as dotted keys, in the order they are applied.
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Overrides(Vec::new());
        o.path("output", &self.out);
        o.opt("seed", &self.seed);
        match &self.command {
            Command::TrainTeacher(a) => {
                o.data(&a.data);
                o.train(&a.train);
                o.opt("teacher.archetype", &a.archetype);
                o.opt("teacher.width", &a.width);
                o.opt("teacher.depth", &a.depth);
            }
            Command::Distill(a) => {
                o.path("teacher.checkpoint", &a.teacher);
                o.data(&a.data);
                o.train(&a.train);
                o.loss(&a.loss);
                o.opt("distill.alpha", &a.alpha);
                o.opt("distill.temperature", &a.temperature);
            }
            Command::Sweep(a) => {
                o.path("teacher.checkpoint", &a.teacher);
                o.data(&a.data);
                o.train(&a.train);
                o.loss(&a.loss);
                o.opt("sweep.coarse", &a.coarse);
                o.opt("sweep.fine", &a.fine);
                o.opt("sweep.alphas", &a.alphas);
                o.opt("sweep.radius", &a.radius);
            }
            Command::Eval(a) => {
                o.path("checkpoint", &a.checkpoint);
                o.data(&a.data);
                o.opt("eval.split", &a.split);
                o.opt("eval.averaging", &a.averaging);
            }
            Command::Explain(a) => {
                o.path("checkpoint", &a.checkpoint);
                o.data(&a.data);
                o.opt("eval.split", &a.split);
                o.path("explain.images", &a.images);
                o.opt("explain.layer", &a.layer);
                o.opt("explain.limit", &a.limit);
            }
            Command::Report(a) => {
                if !a.inputs.is_empty() {
                    let list: Vec<String> = a.inputs.iter().map(|p| p.to_string_lossy().into_owned()).collect();
                    o.0.push(("inputs".into(), json!(list)));
                }
            }
        }
        o.0
    }

    /// Defaults, then the config file, then flags; validated as a whole.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut errors = Vec::new();
        if let Some(path) = &self.config {
            cfg.apply(&read_config_file(path)?, &mut errors);
        }
        cfg.apply(&self.overrides(), &mut errors);
        errors.extend(cfg.problems(self.kind()));
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }
}

/// Process exit status for an error: 2 configuration or contract, 3 data
/// or I/O, 4 checkpoint or file format, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Format { .. } => 4,
        Error::Numeric(_) => 1,
    }
}

/// A dataset plus, for synthetic data, the signal quadrant of each class.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub split: DatasetSplit,
    pub quadrants: Option<Vec<Quadrant>>,
}

/// Build the configured dataset. `model_shape` fixes the image size when
/// the configuration leaves it open and must agree with it otherwise.
pub fn load_data(cfg: &RunConfig, model_shape: Option<[usize; 3]>) -> Result<LoadedData> {
    let size = match (cfg.data.image_size, model_shape) {
        (Some(s), Some(m)) if (s, s) != (m[1], m[2]) => {
            return Err(Error::contract(format!(
                "image size {s} does not match the model's {}x{} input",
                m[1], m[2]
            )))
        }
        (Some(s), _) => s,
        (None, Some(m)) => {
            if m[1] != m[2] {
                return Err(Error::contract(format!("model input {}x{} is not square", m[1], m[2])));
            }
            m[1]
        }
        (None, None) => 32,
    };
    if cfg.data.synth {
        let d = synth_generate(&cfg.synth_spec(size))?;
        let ratios = cfg.data.split.unwrap_or(data::SYNTH_SPLIT);
        let s = split(&d.samples, ratios, cfg.data.seed, &d.class_names)?;
        return Ok(LoadedData {
            split: s,
            quadrants: Some(d.quadrants),
        });
    }
    let dir = cfg.data.dir.as_ref().ok_or_else(|| Error::Config("no data source".into()))?;
    let loaded = load_image_dir(dir, Some((size, size)))?;
    let ratios = cfg.data.split.unwrap_or(data::DEFAULT_SPLIT);
    let s = split(&loaded.samples, ratios, cfg.data.seed, &loaded.class_names).map_err(|e| match e {
        Error::Contract(m) => Error::Data(m),
        other => other,
    })?;
    Ok(LoadedData {
        split: s,
        quadrants: None,
    })
}

/// Load a checkpoint; unreadable files count as format errors.
pub fn open_checkpoint(path: &Path) -> Result<(ModelGraph<f32>, CheckpointMeta)> {
    let ck = load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::format(0, format!("cannot read checkpoint {}: {io}", path.display())),
        Error::Format { offset, msg } => Error::format(offset, format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok((ck.model, ck.meta))
}

fn check_classes(model: &ModelGraph<f32>, data: &DatasetSplit) -> Result<()> {
    if model.num_classes() != data.num_classes() {
        return Err(Error::contract(format!(
            "checkpoint {} has {} classes but the dataset has {}",
            model.name(),
            model.num_classes(),
            data.num_classes()
        )));
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Contents of a `*_metrics.json` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub model: String,
    pub parameters: usize,
    pub split: String,
    pub class_names: Vec<String>,
    #[serde(flatten)]
    pub report: MetricsReport,
}

fn meta_for(history: &TrainHistory, seed: u64, report: &MetricsReport) -> CheckpointMeta {
    let mut meta = CheckpointMeta {
        epoch: history.best_epoch,
        seed,
        ..Default::default()
    };
    if let Some(best) = history.best() {
        meta.metrics.insert("val_accuracy".into(), best.val_acc);
        meta.metrics.insert("val_loss".into(), best.val_loss);
    }
    meta.metrics.insert("test_accuracy".into(), report.accuracy);
    meta.metrics.insert("test_f1".into(), report.f1);
    meta
}

fn write_metrics(dir: &Path, stem: &str, model: &ModelGraph<f32>, split: Partition, cm: &ConfusionMatrix, report: &MetricsReport) -> Result<()> {
    let file = MetricsFile {
        model: model.name().to_string(),
        parameters: model.param_count(),
        split: split.name().into(),
        class_names: cm.class_names.clone(),
        report: report.clone(),
    };
    write(&dir.join(format!("{stem}_metrics.json")), to_json(&file))?;
    write(&dir.join(format!("{stem}_confusion.csv")), cm.to_csv())
}

fn prepare_output(cfg: &RunConfig, command: CommandKind) -> Result<()> {
    fs::create_dir_all(&cfg.output).map_err(|e| Error::Data(format!("cannot create {}: {e}", cfg.output.display())))?;
    write(&cfg.output.join(format!("{}_config.json", command.name())), to_json(cfg))
}

/// `Model` column value of a distilled student.
pub fn model_label(student: &str, teacher: &str) -> String {
    format!("{student}|{teacher}")
}

/// A trained model with its history and test-split evaluation.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: ModelGraph<f32>,
    pub history: TrainHistory,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

/// Writes `teacher.ckpt`, `teacher_history.csv`, `teacher_metrics.json`
/// and `teacher_confusion.csv`.
pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<TrainedRun> {
    cfg.validate(CommandKind::TrainTeacher)?;
    let data = load_data(cfg, None)?;
    let shape = data.split.image_shape().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let model = build_teacher(cfg.teacher.archetype, cfg.teacher.config(), shape, data.split.num_classes(), cfg.train.seed)?;
    prepare_output(cfg, CommandKind::TrainTeacher)?;
    let (model, history) = train_teacher(model, &data.split, &cfg.train)?;
    let (cm, report) = evaluate_metrics(&model, &data.split.test, &data.split.class_names, cfg.eval.averaging)?;
    let dir = &cfg.output;
    save_checkpoint(&model, &meta_for(&history, cfg.train.seed, &report), dir.join("teacher.ckpt"))?;
    history.write_csv(dir.join("teacher_history.csv"))?;
    write_metrics(dir, "teacher", &model, Partition::Test, &cm, &report)?;
    Ok(TrainedRun {
        model,
        history,
        confusion: cm,
        report,
    })
}

/// Writes `student.ckpt`, `student_history.csv`, `student_metrics.json`,
/// `student_confusion.csv` and the one-row `student_result.csv`.
pub fn cmd_distill(cfg: &RunConfig) -> Result<(TrainedRun, ResultRow)> {
    cfg.validate(CommandKind::Distill)?;
    let (teacher, _) = open_checkpoint(cfg.teacher.checkpoint.as_deref().expect("validated"))?;
    let data = load_data(cfg, Some(teacher.input_shape()))?;
    check_classes(&teacher, &data.split)?;
    prepare_output(cfg, CommandKind::Distill)?;
    let student = build_dcsnet(teacher.input_shape(), teacher.num_classes(), cfg.train.seed)?;
    let (model, history) = distill_student(&teacher, student, &data.split, &cfg.distill, &cfg.train)?;
    let (cm, report) = evaluate_metrics(&model, &data.split.test, &data.split.class_names, cfg.eval.averaging)?;
    let row = ResultRow::new(
        model_label(model.name(), teacher.name()),
        model.param_count(),
        cfg.distill.alpha,
        cfg.distill.temperature,
        &report,
    );
    let dir = &cfg.output;
    save_checkpoint(&model, &meta_for(&history, cfg.train.seed, &report), dir.join("student.ckpt"))?;
    history.write_csv(dir.join("student_history.csv"))?;
    write_metrics(dir, "student", &model, Partition::Test, &cm, &report)?;
    write(&dir.join("student_result.csv"), write_result_rows(std::slice::from_ref(&row))?)?;
    Ok((
        TrainedRun {
            model,
            history,
            confusion: cm,
            report,
        },
        row,
    ))
}

/// One distillation run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub index: usize,
    /// `coarse` or `fine`.
    pub phase: String,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub row: ResultRow,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub trials: Vec<SweepTrial>,
    /// Index into `trials` of the best configuration.
    pub best: usize,
    pub best_model: ModelGraph<f32>,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.trials.iter().map(|t| t.row.clone()).collect()
    }
}

/// Sweep order on rows: higher accuracy first, then smaller temperature,
/// then smaller alpha.
pub fn sweep_order(a: &ResultRow, b: &ResultRow) -> Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then(a.temperature.total_cmp(&b.temperature))
        .then(a.alpha.total_cmp(&b.alpha))
}

/// Index of the best row under [`sweep_order`]; the first on exact ties.
pub fn select_best(rows: &[ResultRow]) -> Option<usize> {
    (0..rows.len()).reduce(|best, i| if sweep_order(&rows[i], &rows[best]) == Ordering::Less { i } else { best })
}

const SWEEP_SALT: u64 = 0x7e_3a_5e_ed;

/// Two-phase search. For each alpha, `coarse` integer temperatures are drawn
/// uniformly from [`SWEEP_T_RANGE`]; then `fine` more are drawn within
/// `radius` of that alpha's best coarse temperature. Trial `i` trains its
/// student with seed `seed + 1 + i`.
pub fn run_sweep(
    teacher: &ModelGraph<f32>,
    data: &DatasetSplit,
    plan: &SweepConfig,
    base: &DistillConfig,
    train: &TrainConfig,
    averaging: Averaging,
) -> Result<SweepResult> {
    if plan.coarse == 0 {
        return Err(Error::contract("sweep budget needs at least one coarse trial"));
    }
    if plan.alphas.is_empty() {
        return Err(Error::contract("sweep needs at least one alpha"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ SWEEP_SALT);
    let mut trials: Vec<SweepTrial> = Vec::new();
    let mut best: Option<(usize, ModelGraph<f32>)> = None;
    let (lo, hi) = SWEEP_T_RANGE;
    for &alpha in &plan.alphas {
        let first = trials.len();
        let mut run = |phase: &str, t: u32, trials: &mut Vec<SweepTrial>| -> Result<()> {
            let index = trials.len();
            let seed = train.seed.wrapping_add(1 + index as u64);
            let dcfg = DistillConfig {
                alpha,
                temperature: t as f64,
                ..*base
            };
            let tcfg = TrainConfig { seed, ..*train };
            let student = build_dcsnet(teacher.input_shape(), teacher.num_classes(), seed)?;
            let (model, history) = distill_student(teacher, student, data, &dcfg, &tcfg)?;
            let (_, report) = evaluate_metrics(&model, &data.test, &data.class_names, averaging)?;
            let row = ResultRow::new(model_label(model.name(), teacher.name()), model.param_count(), alpha, t as f64, &report);
            log::info!("sweep trial {index}: alpha {alpha} T {t} accuracy {:.4}", row.accuracy);
            let better = best
                .as_ref()
                .is_none_or(|(b, _)| sweep_order(&row, &trials[*b].row) == Ordering::Less);
            trials.push(SweepTrial {
                index,
                phase: phase.into(),
                alpha,
                temperature: t as f64,
                seed,
                best_epoch: history.best_epoch,
                row,
            });
            if better {
                best = Some((index, model));
            }
            Ok(())
        };
        for _ in 0..plan.coarse {
            let t = rng.gen_range(lo..=hi);
            run("coarse", t, &mut trials)?;
        }
        let coarse_rows: Vec<ResultRow> = trials[first..].iter().map(|t| t.row.clone()).collect();
        let centre = coarse_rows[select_best(&coarse_rows).expect("coarse >= 1")].temperature as u32;
        let (a, b) = (centre.saturating_sub(plan.radius).max(lo), centre.saturating_add(plan.radius).min(hi));
        for _ in 0..plan.fine {
            let t = rng.gen_range(a..=b);
            run("fine", t, &mut trials)?;
        }
    }
    let (best, best_model) = best.expect("at least one trial");
    Ok(SweepResult {
        trials,
        best,
        best_model,
    })
}

/// Best configuration of a sweep, as written to `sweep_best.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub model: String,
    pub alpha: f64,
    pub temperature: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub seed: u64,
}

/// Writes `sweep.csv` (one row per trial, in run order), `sweep_trials.json`,
/// `sweep_best.json` and the best student as `sweep_best.ckpt`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    cfg.validate(CommandKind::Sweep)?;
    let (teacher, _) = open_checkpoint(cfg.teacher.checkpoint.as_deref().expect("validated"))?;
    let data = load_data(cfg, Some(teacher.input_shape()))?;
    check_classes(&teacher, &data.split)?;
    prepare_output(cfg, CommandKind::Sweep)?;
    let result = run_sweep(&teacher, &data.split, &cfg.sweep, &cfg.distill, &cfg.train, cfg.eval.averaging)?;
    let dir = &cfg.output;
    write(&dir.join("sweep.csv"), write_result_rows(&result.rows())?)?;
    write(&dir.join("sweep_trials.json"), to_json(&result.trials))?;
    let b = &result.trials[result.best];
    let best = BestConfig {
        model: b.row.model.clone(),
        alpha: b.alpha,
        temperature: b.temperature,
        accuracy: b.row.accuracy,
        f1: b.row.f1,
        seed: b.seed,
    };
    write(&dir.join("sweep_best.json"), to_json(&best))?;
    let meta = CheckpointMeta {
        epoch: b.best_epoch,
        seed: b.seed,
        metrics: [("test_accuracy".to_string(), b.row.accuracy), ("test_f1".to_string(), b.row.f1)].into(),
    };
    save_checkpoint(&result.best_model, &meta, dir.join("sweep_best.ckpt"))?;
    Ok(result)
}

/// Writes `eval_metrics.json` and `eval_confusion.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(ConfusionMatrix, MetricsReport)> {
    cfg.validate(CommandKind::Eval)?;
    let (model, _) = open_checkpoint(cfg.eval.checkpoint.as_deref().expect("validated"))?;
    let data = load_data(cfg, Some(model.input_shape()))?;
    check_classes(&model, &data.split)?;
    let samples = cfg.eval.split.of(&data.split);
    if samples.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", cfg.eval.split.name())));
    }
    prepare_output(cfg, CommandKind::Eval)?;
    let (cm, report) = evaluate_metrics(&model, samples, &data.split.class_names, cfg.eval.averaging)?;
    write_metrics(&cfg.output, "eval", &model, cfg.eval.split, &cm, &report)?;
    Ok((cm, report))
}

/// Contents of `explain_index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainIndex {
    pub model: String,
    pub layer: String,
    pub entries: Vec<ExplainEntry>,
    /// Correctly classified images with a known signal region.
    pub correct_with_region: usize,
    /// Of those, images with at least half the heatmap mass in the region.
    pub localization_hits: usize,
    pub hit_rate: Option<f64>,
}

/// Share of heatmap mass that counts as a localisation hit.
pub const HIT_MASS: f64 = 0.5;

fn image_files(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut out = Vec::new();
    for path in files {
        if let Some(img) = read_image(&path)? {
            out.push((path.file_name().unwrap_or_default().to_string_lossy().into_owned(), img));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} contains no readable images", dir.display())));
    }
    Ok(out)
}

/// Writes one overlay per image to `overlays/` and `explain_index.json`.
/// The target of every map is the predicted class.
pub fn cmd_explain(cfg: &RunConfig) -> Result<ExplainIndex> {
    cfg.validate(CommandKind::Explain)?;
    let (model, _) = open_checkpoint(cfg.eval.checkpoint.as_deref().expect("validated"))?;
    let layer = cfg.explain.layer.clone().unwrap_or_else(|| model.default_capture().to_string());
    if !model.capture_points().contains(&layer.as_str()) {
        return Err(Error::contract(format!(
            "layer {layer:?} is not a spatial layer of {}; choose one of {:?}",
            model.name(),
            model.capture_points()
        )));
    }
    let shape = model.input_shape();
    // (name, original image, model-sized image, true class, signal box)
    let mut inputs: Vec<(String, Tensor<f32>, Tensor<f32>, Option<usize>, Option<Quadrant>)> = Vec::new();
    if let Some(dir) = &cfg.explain.images {
        for (name, img) in image_files(dir)? {
            let resized = data::resize_image(&img, shape[1], shape[2]);
            inputs.push((name, img, resized, None, None));
        }
    } else {
        let data = load_data(cfg, Some(shape))?;
        check_classes(&model, &data.split)?;
        for s in cfg.eval.split.of(&data.split) {
            let q = data.quadrants.as_ref().map(|q| q[s.label]);
            inputs.push((s.source_id.clone(), s.image.clone(), s.image.clone(), Some(s.label), q));
        }
    }
    if let Some(limit) = cfg.explain.limit {
        inputs.truncate(limit);
    }
    if inputs.is_empty() {
        return Err(Error::Data("nothing to explain".into()));
    }
    prepare_output(cfg, CommandKind::Explain)?;
    let overlay_dir = cfg.output.join("overlays");
    fs::create_dir_all(&overlay_dir)?;
    let mut entries = Vec::with_capacity(inputs.len());
    let (mut correct, mut hits) = (0, 0);
    for (i, (name, original, image, truth, quadrant)) in inputs.iter().enumerate() {
        if image.shape() != shape.as_slice() {
            return Err(Error::Data(format!("{name} has shape {:?}, model expects {shape:?}", image.shape())));
        }
        let logits = model.logits(&image.clone().reshape(&[1, shape[0], shape[1], shape[2]])?)?;
        let predicted = logits.argmax_rows()[0];
        let hm = grad_cam(&model, image, predicted, Some(&layer))?;
        let (h, w) = (original.shape()[1], original.shape()[2]);
        let up = upsample(&hm, h, w)?;
        let file = format!("{i:04}.ppm");
        render_overlay(&up, original, overlay_dir.join(&file))?;
        let region_mass = quadrant.map(|q| up.mass_fraction(q.bounds(h, w)));
        let hit = region_mass.map(|m| m >= HIT_MASS);
        if *truth == Some(predicted) {
            if let Some(hit) = hit {
                correct += 1;
                hits += hit as usize;
            }
        }
        entries.push(ExplainEntry {
            input: name.clone(),
            heatmap: format!("overlays/{file}"),
            predicted_class: predicted,
            target_class: predicted,
            true_class: *truth,
            region_mass,
            localization_hit: hit,
        });
    }
    let index = ExplainIndex {
        model: model.name().to_string(),
        layer,
        entries,
        correct_with_region: correct,
        localization_hits: hits,
        hit_rate: (correct > 0).then(|| hits as f64 / correct as f64),
    };
    write(&cfg.output.join("explain_index.json"), to_json(&index))?;
    Ok(index)
}

/// Report order: higher accuracy, then higher F1, then smaller temperature,
/// then smaller alpha.
pub fn report_order(a: &ResultRow, b: &ResultRow) -> Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then(b.f1.total_cmp(&a.f1))
        .then(a.temperature.total_cmp(&b.temperature))
        .then(a.alpha.total_cmp(&b.alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Merged rows in [`report_order`].
    pub rows: Vec<ResultRow>,
    pub summary: String,
}

/// Merge result CSV texts (named for error messages) and rank them.
pub fn merge_results(sources: &[(String, String)]) -> Result<Report> {
    let mut rows = Vec::new();
    for (name, text) in sources {
        let parsed = read_result_rows(text).map_err(|e| match e {
            Error::Format { offset, msg } => Error::format(offset, format!("{name} line {offset}: {msg}")),
            other => other,
        })?;
        rows.extend(parsed);
    }
    rows.sort_by(report_order);
    let mut summary = String::new();
    let _ = writeln!(summary, "rows: {} from {} file(s)", rows.len(), sources.len());
    match rows.first() {
        Some(b) => {
            let (student, teacher) = b.model.split_once('|').unwrap_or((b.model.as_str(), "-"));
            let _ = writeln!(
                summary,
                "best: teacher {teacher}, student {student}, alpha {}, T {} (accuracy {:.4}, F1 {:.4})",
                b.alpha, b.temperature, b.accuracy, b.f1
            );
        }
        None => {
            let _ = writeln!(summary, "best: none");
        }
    }
    Ok(Report { rows, summary })
}

/// Writes `report.csv` and `report_summary.txt`.
pub fn cmd_report(cfg: &RunConfig) -> Result<Report> {
    cfg.validate(CommandKind::Report)?;
    let mut sources = Vec::new();
    for p in &cfg.inputs {
        let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        sources.push((p.display().to_string(), text));
    }
    let report = merge_results(&sources)?;
    prepare_output(cfg, CommandKind::Report)?;
    write(&cfg.output.join("report.csv"), write_result_rows(&report.rows)?)?;
    write(&cfg.output.join("report_summary.txt"), &report.summary)?;
    Ok(report)
}

fn dispatch(cli: &Cli) -> Result<String> {
    let cfg = cli.resolve()?;
    let out = cfg.output.display().to_string();
    Ok(match cli.kind() {
        CommandKind::TrainTeacher => {
            let r = cmd_train_teacher(&cfg)?;
            format!("teacher test accuracy {:.4}; wrote {out}/teacher.ckpt", r.report.accuracy)
        }
        CommandKind::Distill => {
            let (r, _) = cmd_distill(&cfg)?;
            format!("student test accuracy {:.4}; wrote {out}/student.ckpt", r.report.accuracy)
        }
        CommandKind::Sweep => {
            let r = cmd_sweep(&cfg)?;
            let b = &r.trials[r.best];
            format!(
                "{} trials; best alpha {} T {} accuracy {:.4}; wrote {out}/sweep.csv",
                r.trials.len(),
                b.alpha,
                b.temperature,
                b.row.accuracy
            )
        }
        CommandKind::Eval => {
            let (_, r) = cmd_eval(&cfg)?;
            format!(
                "accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}; false negatives {:?}",
                r.accuracy, r.precision, r.recall, r.f1, r.false_negatives
            )
        }
        CommandKind::Explain => {
            let idx = cmd_explain(&cfg)?;
            let rate = idx.hit_rate.map_or("n/a".to_string(), |r| format!("{r:.3}"));
            format!("{} overlays at layer {}; localization hit rate {rate}", idx.entries.len(), idx.layer)
        }
        CommandKind::Report => cmd_report(&cfg)?.summary.trim_end().to_string(),
    })
}

/// Parse `args` (program name first), run the command and return the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
