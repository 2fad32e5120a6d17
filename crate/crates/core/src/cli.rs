//! Command implementations behind the `bkd` binary.
//!
//! Every command resolves an [`ExperimentConfig`], writes `config.txt` (the
//! full echo) into its output directory, and then its own artifacts:
//!
//! | command         | artifacts |
//! |-----------------|-----------|
//! | `train-teacher` | `teacher.bkd`, `report.csv`, `summary.txt` |
//! | `distill`       | `student.bkd`, `report.csv`, `summary.txt` |
//! | `gen-aux`       | `aux.csv`, `aux.bkdd` |
//! | `eval`          | `eval.csv` |
//! | `export-curve`  | `curve.csv` |
//!
//! CSV layouts:
//!
//! - `report.csv`: `phase,epoch,samples,steps,train_loss,eval_accuracy,eval_loss,aux_samples,aux_div_before,aux_div_after`
//! - `aux.csv`: `origin,x0..x{d-1},l_bkd_before,l_bkd_after`
//! - `eval.csv`: `checkpoint,samples,accuracy,loss`
//! - `curve.csv`: `x,teacher,student,l_bkd`
//!
//! `summary.txt` holds the only wall-clock figure; everything else is a pure
//! function of the echoed configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::auxgen::{self, AuxiliaryBatch, OutputKind};
use crate::config::{ExperimentConfig, Mode, Task};
use crate::data::{self, Dataset, Inputs, Targets};
use crate::distill::{self, ascent_config, evaluate, Student, TrainReport};
use crate::nn::{self, EmbeddingModel, LayerSpec, Model, Network, PolynomialModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const MNIST_PIXELS: usize = 784;
const MNIST_CLASSES: usize = 10;
const TOKEN_TEST_SEED_OFFSET: u64 = 0x9E37_79B9;

#[derive(Parser, Debug)]
#[command(name = "bkd", version, about = "Backward knowledge distillation experiments")]
#[command(after_help = "Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric abort.\n\
Output directory: `output_dir` key, else $BKD_OUTPUT_ROOT/<task>-<mode>-<command>-seed<seed>, else runs/...")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Line-oriented `key = value` configuration file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable, applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (same as `--set output_dir=...`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train (or, for the synthetic task, sample) a teacher and save it.
    TrainTeacher(Common),
    /// Train a student in the configured mode against a teacher checkpoint.
    /// report.csv columns: phase,epoch,samples,steps,train_loss,eval_accuracy,
    /// eval_loss,aux_samples,aux_div_before,aux_div_after
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint (same as `--set teacher_checkpoint=...`).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Dump auxiliary samples grown from the training set.
    /// aux.csv columns: origin,x0..x{d-1},l_bkd_before,l_bkd_after
    GenAux {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Student checkpoint the samples are grown against.
        #[arg(long)]
        student: PathBuf,
    },
    /// Evaluate a checkpoint. eval.csv columns: checkpoint,samples,accuracy,loss
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset dump to evaluate on instead of the task's test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sample a 1-D teacher/student pair on a grid. curve.csv columns: x,teacher,student,l_bkd
    ExportCurve {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Student checkpoint.
        #[arg(long)]
        student: PathBuf,
        /// Grid as `lo,hi,points`; defaults to the configured interval with 1000 points.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ConfigLine { .. } | Error::InvalidParam(_) | Error::Contract(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::Diverged(_) | Error::Singular { .. } => EXIT_NUMERIC,
        Error::Dimension { .. } | Error::Format(_) | Error::EmptyDataset | Error::File { .. } | Error::Io(_) => {
            EXIT_DATA
        }
    }
}

/// Runs a parsed command line, printing errors to stderr. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::TrainTeacher(c) => resolve(&c, None).and_then(|cfg| cmd_train_teacher(&cfg)).map(|_| ()),
        Command::Distill { common, teacher } => resolve(&common, teacher).and_then(|cfg| cmd_distill(&cfg)).map(|_| ()),
        Command::GenAux { common, teacher, student } => {
            resolve(&common, None).and_then(|cfg| cmd_gen_aux(&cfg, &teacher, &student)).map(|_| ())
        }
        Command::Eval { common, checkpoint, data } => {
            resolve(&common, None).and_then(|cfg| cmd_eval(&cfg, &checkpoint, data.as_deref())).map(|_| ())
        }
        Command::ExportCurve { common, teacher, student, grid } => resolve(&common, None)
            .and_then(|cfg| {
                let grid = match grid {
                    Some(g) => parse_grid(&g)?,
                    None => (cfg.interval.0, cfg.interval.1, 1000),
                };
                cmd_export_curve(&cfg, &teacher, &student, grid)
            })
            .map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(c: &Common, teacher: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(o) = &c.out {
        overrides.push(format!("output_dir={}", o.display()));
    }
    if let Some(t) = teacher {
        overrides.push(format!("teacher_checkpoint={}", t.display()));
    }
    ExperimentConfig::load(c.config.as_deref(), &overrides)
}

fn parse_grid(s: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("grid must be `lo,hi,points`, got `{s}`"));
    match parts.as_slice() {
        [lo, hi, n] => {
            let (lo, hi, n): (f64, f64, usize) = (
                lo.parse().map_err(|_| bad())?,
                hi.parse().map_err(|_| bad())?,
                n.parse().map_err(|_| bad())?,
            );
            if !(lo < hi) || n < 2 {
                return Err(bad());
            }
            Ok((lo, hi, n))
        }
        _ => Err(bad()),
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| Error::file(&p, e))?;
    Ok(p)
}

fn prepare_output(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.resolve_output_dir(command);
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    write(&dir, "config.txt", cfg.to_text())?;
    Ok(dir)
}

fn poly_scale(cfg: &ExperimentConfig) -> f64 {
    cfg.interval.0.abs().max(cfg.interval.1.abs())
}

/// Train and test splits for the configured task. The synthetic task needs
/// its teacher to label points.
pub fn load_task_data(cfg: &ExperimentConfig, teacher: Option<&Model>) -> Result<(Dataset, Dataset)> {
    match cfg.task {
        Task::Mnist => {
            let (train, test) = data::load_mnist_dir(&cfg.data_dir)?;
            let train = if cfg.subsample_fraction < 1.0 {
                data::subsample(&train, cfg.subsample_fraction, cfg.kd.seed, cfg.stratified)?
            } else {
                train
            };
            Ok((train, test))
        }
        Task::Synthetic => {
            let Some(Model::Polynomial(t)) = teacher else {
                return Err(Error::Contract("synthetic task needs a polynomial teacher checkpoint".into()));
            };
            let train = data::gen_synthetic(t, cfg.samples, cfg.interval, cfg.kd.seed, cfg.spacing)?;
            let grid = data::gen_synthetic(t, cfg.test_samples, cfg.interval, 0, data::Spacing::Even)?;
            Ok((train, grid))
        }
        Task::Token => {
            let train = data::gen_token_task(cfg.vocab, cfg.seq_len, cfg.train_samples, cfg.kd.seed)?;
            let test = data::gen_token_task(
                cfg.vocab,
                cfg.seq_len,
                cfg.test_samples,
                cfg.kd.seed.wrapping_add(TOKEN_TEST_SEED_OFFSET),
            )?;
            Ok((train, test))
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain([output]).collect()
}

/// Freshly initialized teacher architecture for the task.
pub fn build_teacher(cfg: &ExperimentConfig) -> Result<Model> {
    Ok(match cfg.task {
        Task::Mnist => Model::Mlp(Network::init(
            &LayerSpec::chain(&widths(MNIST_PIXELS, &cfg.teacher_hidden, MNIST_CLASSES), cfg.activation),
            cfg.teacher_seed,
        )?),
        Task::Synthetic => Model::Polynomial(PolynomialModel::init(cfg.teacher_degree, poly_scale(cfg), cfg.teacher_seed)?),
        Task::Token => Model::Embedding(EmbeddingModel::init(
            cfg.vocab,
            cfg.teacher_embed,
            cfg.seq_len,
            &cfg.teacher_hidden,
            2,
            cfg.activation,
            cfg.teacher_seed,
        )?),
    })
}

/// Freshly initialized student architecture for the task.
pub fn build_student(cfg: &ExperimentConfig) -> Result<Model> {
    Ok(match cfg.task {
        Task::Mnist => Model::Mlp(Network::init(
            &LayerSpec::chain(&widths(MNIST_PIXELS, &cfg.student_hidden, MNIST_CLASSES), cfg.activation),
            cfg.kd.seed,
        )?),
        Task::Synthetic => Model::Polynomial(PolynomialModel::init(cfg.student_degree, poly_scale(cfg), cfg.kd.seed)?),
        Task::Token => Model::Embedding(EmbeddingModel::init(
            cfg.vocab,
            cfg.student_embed,
            cfg.seq_len,
            &cfg.student_hidden,
            2,
            cfg.activation,
            cfg.kd.seed,
        )?),
    })
}

fn as_student(m: &Model) -> &dyn Student {
    match m {
        Model::Mlp(n) => n,
        Model::Polynomial(p) => p,
        Model::Embedding(e) => e,
    }
}

fn write_report(dir: &Path, report: &TrainReport) -> Result<()> {
    write(dir, "report.csv", report.to_csv())?;
    write(dir, "summary.txt", format!("{}\n", report.summary()))?;
    log::info!("{}", report.summary());
    Ok(())
}

/// Trains the task's teacher. The synthetic teacher is a seeded random
/// polynomial and is saved without training.
pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<(PathBuf, Option<TrainReport>)> {
    let dir = prepare_output(cfg, "teacher")?;
    let mut teacher = build_teacher(cfg)?;
    let report = match &mut teacher {
        Model::Polynomial(_) => None,
        Model::Mlp(net) => {
            let (train, test) = load_task_data(cfg, None)?;
            Some(distill::train_scratch(net, &train, &cfg.teacher_params(), Some(&test))?)
        }
        Model::Embedding(emb) => {
            let (train, test) = load_task_data(cfg, None)?;
            Some(distill::train_scratch(emb, &train, &cfg.teacher_params(), Some(&test))?)
        }
    };
    if let Some(r) = &report {
        write_report(&dir, r)?;
    }
    let path = dir.join("teacher.bkd");
    nn::save(&teacher, &path)?;
    Ok((path, report))
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Model> {
    let path = cfg
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("`teacher_checkpoint` is required".into()))?;
    let teacher = nn::load(path)?;
    let expected = build_teacher(cfg)?.kind();
    if teacher.kind() != expected {
        return Err(Error::Config(format!(
            "teacher checkpoint holds a {:?} model, task needs {:?}",
            teacher.kind(),
            expected
        )));
    }
    Ok(teacher)
}

/// Trains a student in the configured mode. Baselines follow the configured
/// epoch budget; the token task uses the embedding-space pipeline.
pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<(PathBuf, TrainReport)> {
    let teacher = load_teacher(cfg)?;
    let (train, test) = load_task_data(cfg, Some(&teacher))?;
    let dir = prepare_output(cfg, "distill")?;
    let params = cfg.run_params();
    let mut student = build_student(cfg)?;
    let t = as_student(&teacher);
    let eval = Some(&test);
    let report = match (&mut student, cfg.mode) {
        (Model::Mlp(s), Mode::Scratch) => distill::train_scratch(s, &train, &params, eval)?,
        (Model::Polynomial(s), Mode::Scratch) => distill::train_scratch(s, &train, &params, eval)?,
        (Model::Embedding(s), Mode::Scratch) => distill::train_scratch(s, &train, &params, eval)?,
        (Model::Mlp(s), Mode::VanillaKd) => distill::vanilla_kd(s, t, &train, &params, eval)?,
        (Model::Polynomial(s), Mode::VanillaKd) => distill::vanilla_kd(s, t, &train, &params, eval)?,
        (Model::Embedding(s), Mode::VanillaKd) => distill::vanilla_kd(s, t, &train, &params, eval)?,
        (Model::Mlp(s), Mode::BackwardKd) => distill::backward_kd(s, t, &train, &params, eval)?,
        (Model::Polynomial(s), Mode::BackwardKd) => distill::backward_kd(s, t, &train, &params, eval)?,
        (Model::Embedding(s), Mode::BackwardKd) => {
            let Model::Embedding(te) = &teacher else { unreachable!("kind checked in load_teacher") };
            distill::backward_kd_embedding(s, te, &train, &params, eval)?
        }
    };
    write_report(&dir, &report)?;
    let path = dir.join("student.bkd");
    nn::save(&student, &path)?;
    Ok((path, report))
}

fn aux_csv(batch: &AuxiliaryBatch) -> String {
    let d = batch.inputs.cols();
    let mut s = String::from("origin");
    for j in 0..d {
        let _ = write!(s, ",x{j}");
    }
    s.push_str(",l_bkd_before,l_bkd_after\n");
    for i in 0..batch.len() {
        let _ = write!(s, "{}", batch.origin[i]);
        for v in batch.inputs.row(i) {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{}", batch.divergence_before[i], batch.divergence[i]);
    }
    s
}

/// One round of auxiliary generation from the training split, dumped as
/// `aux.csv` plus a dataset file labelled by the teacher.
pub fn cmd_gen_aux(cfg: &ExperimentConfig, teacher: &Path, student: &Path) -> Result<(PathBuf, AuxiliaryBatch)> {
    let teacher = nn::load(teacher)?;
    let student = nn::load(student)?;
    let (train, _) = load_task_data(cfg, Some(&teacher))?;
    let acfg = ascent_config(&cfg.kd);
    let batch = match (&student, &teacher, &train.inputs) {
        (Model::Embedding(s), Model::Embedding(t), Inputs::Tokens { ids, .. }) => {
            let q = auxgen::compute_transform(&s.embedding, &t.embedding)?;
            auxgen::generate_auxiliary_embedding(ids, s, t, &q, &acfg, cfg.kd.temperature)?
        }
        (Model::Embedding(_), _, _) | (_, Model::Embedding(_), _) | (_, _, Inputs::Tokens { .. }) => {
            return Err(Error::Config("token models need a token task and two embedding checkpoints".into()))
        }
        (s, t, Inputs::Dense(x)) => {
            let kind = match train.kind() {
                data::DatasetKind::Regression => OutputKind::Regression,
                _ => OutputKind::Classification {
                    temperature: cfg.kd.temperature,
                },
            };
            auxgen::generate_auxiliary(x, s.as_module(), t.as_module(), &acfg, kind)?
        }
    };
    let dir = prepare_output(cfg, "aux")?;
    write(&dir, "aux.csv", aux_csv(&batch))?;
    let targets = if batch.pseudo_labels.is_empty() {
        Targets::Values(batch.teacher_outputs.clone())
    } else {
        Targets::Classes {
            labels: batch.pseudo_labels.clone(),
            classes: batch.teacher_outputs.cols(),
        }
    };
    let ds = Dataset::new(Inputs::Dense(batch.inputs.clone()), targets, format!("aux:{}", train.provenance))?;
    data::save_dataset(&ds, dir.join("aux.bkdd"))?;
    Ok((dir, batch))
}

/// Metrics of a checkpoint on a dataset dump or the task's test split.
pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: &Path, data_path: Option<&Path>) -> Result<distill::Metrics> {
    let model = nn::load(ckpt)?;
    let ds = match data_path {
        Some(p) => data::load_dataset(p)?,
        None => {
            let teacher = match cfg.task {
                Task::Synthetic => Some(load_teacher(cfg)?),
                _ => None,
            };
            load_task_data(cfg, teacher.as_ref())?.1
        }
    };
    let m = evaluate(as_student(&model), &ds)?;
    let dir = prepare_output(cfg, "eval")?;
    let acc = m.accuracy.map(|a| a.to_string()).unwrap_or_default();
    write(
        &dir,
        "eval.csv",
        format!("checkpoint,samples,accuracy,loss\n{},{},{acc},{}\n", ckpt.display(), ds.len(), m.loss),
    )?;
    println!("samples={} accuracy={} loss={}", ds.len(), if acc.is_empty() { "-" } else { &acc }, m.loss);
    Ok(m)
}

/// Teacher, student and squared gap on an even grid for 1-D models.
pub fn cmd_export_curve(cfg: &ExperimentConfig, teacher: &Path, student: &Path, grid: (f64, f64, usize)) -> Result<PathBuf> {
    let t = nn::load(teacher)?;
    let s = nn::load(student)?;
    for m in [&t, &s] {
        let module = m.as_module();
        if module.in_dim() != 1 || module.out_dim() != 1 || m.kind() == nn::ModelKind::Embedding {
            return Err(Error::Config("export-curve needs models with one input and one output".into()));
        }
    }
    let (lo, hi, n) = grid;
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let x = Tensor::new(&[n, 1], xs.clone())?;
    let ty = t.as_module().forward(&x)?;
    let sy = s.as_module().forward(&x)?;
    let mut out = String::from("x,teacher,student,l_bkd\n");
    for i in 0..n {
        let (a, b) = (ty.data()[i], sy.data()[i]);
        let _ = writeln!(out, "{},{a},{b},{}", xs[i], (b - a) * (b - a));
    }
    let dir = prepare_output(cfg, "curve")?;
    write(&dir, "curve.csv", out)
}
