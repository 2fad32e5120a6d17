//! Experiment configuration: a line-oriented `key = value` file plus
//! command-line overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Keys mirror the
//! [`KdHyperParams`] field names; every key has a default, and unknown keys
//! are rejected with their line number. [`ExperimentConfig::to_text`] writes
//! every key in a fixed order, so the echo of a run parses back to the same
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};

use crate::losses::{AuxLabels, AuxRetention, DivergenceSpace, KdHyperParams, LossForm};
use crate::nn::Activation;
use crate::data::Spacing;
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "BKD_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Mnist,
    Synthetic,
    Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Scratch,
    VanillaKd,
    BackwardKd,
}

/// How many epochs the single-phase baselines get.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    /// Baselines run `e·(h+2)` epochs, matching the pipeline's epoch count.
    Equal,
    /// Baselines run `e` epochs.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub mode: Mode,
    pub kd: KdHyperParams,
    pub budget: Budget,
    pub output_dir: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,

    pub data_dir: PathBuf,
    pub subsample_fraction: f64,
    pub stratified: bool,
    pub activation: Activation,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub teacher_epochs: usize,
    pub teacher_learning_rate: f64,
    pub teacher_momentum: f64,
    pub teacher_batch_size: usize,
    pub teacher_seed: u64,

    pub teacher_degree: usize,
    pub student_degree: usize,
    pub samples: usize,
    pub interval: (f64, f64),
    pub spacing: Spacing,

    pub vocab: usize,
    pub seq_len: usize,
    pub teacher_embed: usize,
    pub student_embed: usize,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Mnist,
            mode: Mode::BackwardKd,
            kd: KdHyperParams::default(),
            budget: Budget::Equal,
            output_dir: None,
            teacher_checkpoint: None,
            data_dir: PathBuf::from("data/mnist"),
            subsample_fraction: 1.0,
            stratified: true,
            activation: Activation::Relu,
            teacher_hidden: vec![800],
            student_hidden: vec![5],
            teacher_epochs: 10,
            teacher_learning_rate: 0.05,
            teacher_momentum: 0.9,
            teacher_batch_size: 64,
            teacher_seed: 0,
            teacher_degree: 20,
            student_degree: 15,
            samples: 8,
            interval: (-1.0, 1.0),
            spacing: Spacing::Random,
            vocab: 20,
            seq_len: 4,
            teacher_embed: 8,
            student_embed: 4,
            train_samples: 40_000,
            test_samples: 1000,
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "task",
    "mode",
    "budget",
    "output_dir",
    "teacher_checkpoint",
    "alpha",
    "lambda",
    "temperature",
    "perturb_rate",
    "train_epochs",
    "hyper_epochs",
    "perturb_steps",
    "learning_rate",
    "momentum",
    "batch_size",
    "seed",
    "aux_retention",
    "input_clip",
    "loss_form",
    "divergence_space",
    "aux_labels",
    "data_dir",
    "subsample_fraction",
    "stratified",
    "activation",
    "teacher_hidden",
    "student_hidden",
    "teacher_epochs",
    "teacher_learning_rate",
    "teacher_momentum",
    "teacher_batch_size",
    "teacher_seed",
    "teacher_degree",
    "student_degree",
    "samples",
    "interval",
    "spacing",
    "vocab",
    "seq_len",
    "teacher_embed",
    "student_embed",
    "train_samples",
    "test_samples",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for `{key}`, expected true/false"))),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("`{key}` expects `lo,hi`, got `{v}`")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn parse_widths(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|w| parse(key, w.trim())).collect()
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn choose<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("invalid value `{v}` for `{key}`, expected one of {}", names.join("|")))
    })
}

const TASKS: &[(&str, Task)] = &[("mnist", Task::Mnist), ("synthetic", Task::Synthetic), ("token", Task::Token)];
const MODES: &[(&str, Mode)] = &[
    ("scratch", Mode::Scratch),
    ("vanilla_kd", Mode::VanillaKd),
    ("backward_kd", Mode::BackwardKd),
];
const BUDGETS: &[(&str, Budget)] = &[("equal", Budget::Equal), ("raw", Budget::Raw)];
const RETENTION: &[(&str, AuxRetention)] = &[
    ("reset_each_hyper_epoch", AuxRetention::ResetEachHyperEpoch),
    ("accumulate", AuxRetention::Accumulate),
];
const FORMS: &[(&str, LossForm)] = &[("lambda", LossForm::Lambda), ("alpha", LossForm::Alpha)];
const SPACES: &[(&str, DivergenceSpace)] = &[
    ("logits", DivergenceSpace::Logits),
    ("probabilities", DivergenceSpace::Probabilities),
];
const AUX_LABELS: &[(&str, AuxLabels)] = &[("teacher_argmax", AuxLabels::TeacherArgmax), ("soft_only", AuxLabels::SoftOnly)];
const SPACINGS: &[(&str, Spacing)] = &[("random", Spacing::Random), ("even", Spacing::Even)];
const ACTIVATIONS: &[(&str, Activation)] = &[
    ("relu", Activation::Relu),
    ("tanh", Activation::Tanh),
    ("identity", Activation::Identity),
];

fn name<T: PartialEq>(options: &[(&'static str, T)], value: &T) -> &'static str {
    options.iter().find(|(_, t)| t == value).map(|(n, _)| *n).expect("every variant is listed")
}

fn widths(w: &[usize]) -> String {
    if w.is_empty() {
        return "none".into();
    }
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl ExperimentConfig {
    /// Reads `path`, then applies `overrides` (`key=value`) in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::ConfigLine { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let kd = &mut self.kd;
        match key {
            "task" => self.task = choose(key, v, TASKS)?,
            "mode" => self.mode = choose(key, v, MODES)?,
            "budget" => self.budget = choose(key, v, BUDGETS)?,
            "output_dir" => self.output_dir = parse_path(v),
            "teacher_checkpoint" => self.teacher_checkpoint = parse_path(v),
            "alpha" => kd.alpha = parse(key, v)?,
            "lambda" => kd.lambda = parse(key, v)?,
            "temperature" => kd.temperature = parse(key, v)?,
            "perturb_rate" => kd.perturb_rate = parse(key, v)?,
            "train_epochs" => kd.train_epochs = parse(key, v)?,
            "hyper_epochs" => kd.hyper_epochs = parse(key, v)?,
            "perturb_steps" => kd.perturb_steps = parse(key, v)?,
            "learning_rate" => kd.learning_rate = parse(key, v)?,
            "momentum" => kd.momentum = parse(key, v)?,
            "batch_size" => kd.batch_size = parse(key, v)?,
            "seed" => kd.seed = parse(key, v)?,
            "aux_retention" => kd.aux_retention = choose(key, v, RETENTION)?,
            "input_clip" => kd.input_clip = if v == "none" { None } else { Some(parse_pair(key, v)?) },
            "loss_form" => kd.loss_form = choose(key, v, FORMS)?,
            "divergence_space" => kd.divergence_space = choose(key, v, SPACES)?,
            "aux_labels" => kd.aux_labels = choose(key, v, AUX_LABELS)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "subsample_fraction" => self.subsample_fraction = parse(key, v)?,
            "stratified" => self.stratified = parse_bool(key, v)?,
            "activation" => self.activation = choose(key, v, ACTIVATIONS)?,
            "teacher_hidden" => self.teacher_hidden = parse_widths(key, v)?,
            "student_hidden" => self.student_hidden = parse_widths(key, v)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, v)?,
            "teacher_learning_rate" => self.teacher_learning_rate = parse(key, v)?,
            "teacher_momentum" => self.teacher_momentum = parse(key, v)?,
            "teacher_batch_size" => self.teacher_batch_size = parse(key, v)?,
            "teacher_seed" => self.teacher_seed = parse(key, v)?,
            "teacher_degree" => self.teacher_degree = parse(key, v)?,
            "student_degree" => self.student_degree = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "interval" => self.interval = parse_pair(key, v)?,
            "spacing" => self.spacing = choose(key, v, SPACINGS)?,
            "vocab" => self.vocab = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "teacher_embed" => self.teacher_embed = parse(key, v)?,
            "student_embed" => self.student_embed = parse(key, v)?,
            "train_samples" => self.train_samples = parse(key, v)?,
            "test_samples" => self.test_samples = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.kd.validate().map_err(|e| Error::Config(e.to_string()))?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad(format!("subsample_fraction must be in (0, 1], got {}", self.subsample_fraction));
        }
        if self.teacher_epochs == 0 || self.teacher_batch_size == 0 || !(self.teacher_learning_rate > 0.0) {
            return bad("teacher_epochs, teacher_batch_size and teacher_learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.teacher_momentum) {
            return bad(format!("teacher_momentum must be in [0, 1), got {}", self.teacher_momentum));
        }
        if !(self.interval.0 < self.interval.1) {
            return bad(format!("interval needs lo < hi, got {:?}", self.interval));
        }
        if self.task == Task::Token && (self.student_embed == 0 || self.teacher_embed == 0 || self.vocab < 2) {
            return bad("token task needs positive embedding sizes and vocab ≥ 2".into());
        }
        if self.task == Task::Token && self.student_embed > self.vocab {
            return bad(format!(
                "student_embed {} exceeds vocab {}; the embedding transform needs full row rank",
                self.student_embed, self.vocab
            ));
        }
        Ok(())
    }

    /// Epochs the single-phase baselines run under the configured budget.
    pub fn baseline_epochs(&self) -> usize {
        match self.budget {
            Budget::Equal => self.kd.train_epochs * (self.kd.hyper_epochs + 2),
            Budget::Raw => self.kd.train_epochs,
        }
    }

    /// Hyperparameters for the configured mode with the budget applied.
    pub fn run_params(&self) -> KdHyperParams {
        match self.mode {
            Mode::BackwardKd => self.kd.clone(),
            Mode::Scratch | Mode::VanillaKd => KdHyperParams {
                train_epochs: self.baseline_epochs(),
                ..self.kd.clone()
            },
        }
    }

    /// Hyperparameters for supervised teacher training.
    pub fn teacher_params(&self) -> KdHyperParams {
        KdHyperParams {
            train_epochs: self.teacher_epochs,
            learning_rate: self.teacher_learning_rate,
            momentum: self.teacher_momentum,
            batch_size: self.teacher_batch_size,
            seed: self.teacher_seed,
            ..self.kd.clone()
        }
    }

    /// Output directory: explicit setting, else `$BKD_OUTPUT_ROOT/<task>-<mode>-seed<seed>`,
    /// else `runs/<...>`.
    pub fn resolve_output_dir(&self, command: &str) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!(
            "{}-{}-{command}-seed{}",
            name(TASKS, &self.task),
            name(MODES, &self.mode),
            self.kd.seed
        ))
    }

    /// Canonical `key = value` rendering of every field.
    pub fn to_text(&self) -> String {
        let kd = &self.kd;
        let clip = kd.input_clip.map_or_else(|| "none".into(), |(a, b)| format!("{a},{b}"));
        let values: Vec<String> = vec![
            name(TASKS, &self.task).into(),
            name(MODES, &self.mode).into(),
            name(BUDGETS, &self.budget).into(),
            path(&self.output_dir),
            path(&self.teacher_checkpoint),
            kd.alpha.to_string(),
            kd.lambda.to_string(),
            kd.temperature.to_string(),
            kd.perturb_rate.to_string(),
            kd.train_epochs.to_string(),
            kd.hyper_epochs.to_string(),
            kd.perturb_steps.to_string(),
            kd.learning_rate.to_string(),
            kd.momentum.to_string(),
            kd.batch_size.to_string(),
            kd.seed.to_string(),
            name(RETENTION, &kd.aux_retention).into(),
            clip,
            name(FORMS, &kd.loss_form).into(),
            name(SPACES, &kd.divergence_space).into(),
            name(AUX_LABELS, &kd.aux_labels).into(),
            self.data_dir.display().to_string(),
            self.subsample_fraction.to_string(),
            self.stratified.to_string(),
            name(ACTIVATIONS, &self.activation).into(),
            widths(&self.teacher_hidden),
            widths(&self.student_hidden),
            self.teacher_epochs.to_string(),
            self.teacher_learning_rate.to_string(),
            self.teacher_momentum.to_string(),
            self.teacher_batch_size.to_string(),
            self.teacher_seed.to_string(),
            self.teacher_degree.to_string(),
            self.student_degree.to_string(),
            self.samples.to_string(),
            format!("{},{}", self.interval.0, self.interval.1),
            name(SPACINGS, &self.spacing).into(),
            self.vocab.to_string(),
            self.seq_len.to_string(),
            self.teacher_embed.to_string(),
            self.student_embed.to_string(),
            self.train_samples.to_string(),
            self.test_samples.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("input_clip", "0,1").unwrap();
        cfg.set("teacher_hidden", "32,16").unwrap();
        cfg.set("mode", "vanilla_kd").unwrap();
        cfg.set("temperature", "0.1").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::parse("# comment\nseed = 3\n\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 4, .. }), "{err}");
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        fs::write(&p, "seed = 3\nlambda = 0.2\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &["seed=9".into()]).unwrap();
        assert_eq!((cfg.kd.seed, cfg.kd.lambda), (9, 0.2));
    }

    #[test]
    fn missing_file_names_path() {
        let err = ExperimentConfig::load(Some(Path::new("/nonexistent/x.conf")), &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.conf"));
    }

    #[test]
    fn budget_scales_baselines() {
        let mut cfg = ExperimentConfig::default();
        cfg.kd.train_epochs = 3;
        cfg.kd.hyper_epochs = 2;
        cfg.mode = Mode::VanillaKd;
        assert_eq!(cfg.run_params().train_epochs, 12);
        cfg.budget = Budget::Raw;
        assert_eq!(cfg.run_params().train_epochs, 3);
    }
}
