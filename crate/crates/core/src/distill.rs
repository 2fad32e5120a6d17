//! Training orchestration: supervised baselines, vanilla KD, and the
//! backward-KD min-max pipeline for dense and token inputs.
//!
//! The pipeline runs three phases over one shared random stream and one
//! optimizer: pre-training on `X` for `e` epochs, `h` hyper epochs that each
//! regenerate auxiliary samples from the current student and train on
//! `X ∪ X′` for `e` epochs, and fine-tuning on `X` for `e` epochs. With
//! `h = 0` it therefore consumes exactly the same random numbers as a `2e`
//! epoch vanilla run.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::auxgen::{self, AscentConfig, AuxiliaryBatch, EmbeddingTransform, OutputKind};
use crate::data::{Dataset, DatasetKind, Inputs};
use crate::losses::{
    bkd_on, cross_entropy_on, kd_loss_on, regression_kd_on, soft_targets, AuxLabels, AuxRetention, KdHyperParams, LossForm,
};
use crate::nn::{EmbeddingModel, Module, Network, PolynomialModel};
use crate::tensor::{softmax_rows, Gradients, Graph, Tensor, Var};
use crate::{Error, Result};

/// A model the pipelines can train. Token inputs are only understood by
/// embedding models.
pub trait Student: Module {
    fn forward_tokens_on(&self, _g: &mut Graph, _params: &[Var], _ids: &[usize]) -> Result<Var> {
        Err(Error::Contract("model does not accept token inputs".into()))
    }

    /// Untracked outputs for every row of `data`.
    fn predict(&self, data: &Dataset) -> Result<Tensor> {
        match &data.inputs {
            Inputs::Dense(x) => self.forward(x),
            Inputs::Tokens { .. } => Err(Error::Contract("model does not accept token inputs".into())),
        }
    }
}

impl Student for Network {}
impl Student for PolynomialModel {}

impl Student for EmbeddingModel {
    fn forward_tokens_on(&self, g: &mut Graph, params: &[Var], ids: &[usize]) -> Result<Var> {
        EmbeddingModel::forward_tokens_on(self, g, params, ids)
    }

    fn predict(&self, data: &Dataset) -> Result<Tensor> {
        match &data.inputs {
            Inputs::Dense(z) => self.forward_from_embedding(z),
            Inputs::Tokens { ids, .. } => self.forward_tokens(ids),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Classification accuracy in `[0, 1]`; `None` for regression.
    pub accuracy: Option<f64>,
    /// Mean cross-entropy for classifiers, mean squared error for regressors.
    pub loss: f64,
}

/// Accuracy and mean loss of `model` on `data`. Pure.
pub fn evaluate(model: &dyn Student, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let out = model.predict(data)?;
    match data.kind() {
        DatasetKind::Regression => {
            let y = data.values().expect("regression targets");
            let mut g = Graph::new();
            let (s, t) = (g.constant(out), g.constant(y.clone()));
            let mse = bkd_on(&mut g, s, t)?;
            Ok(Metrics {
                accuracy: None,
                loss: g.value(mse).item(),
            })
        }
        _ => {
            let labels = data.labels().expect("class labels");
            let hits = out
                .argmax_rows()
                .iter()
                .zip(labels)
                .filter(|(p, l)| p == l)
                .count();
            let probs = softmax_rows(&out)?;
            let mut g = Graph::new();
            let p = g.constant(probs);
            let ce = cross_entropy_on(&mut g, p, labels)?;
            Ok(Metrics {
                accuracy: Some(hits as f64 / labels.len() as f64),
                loss: g.value(ce).item(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Scratch,
    Vanilla,
    PreTrain,
    MinMax(usize),
    FineTune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Scratch => f.write_str("scratch"),
            Phase::Vanilla => f.write_str("vanilla"),
            Phase::PreTrain => f.write_str("pretrain"),
            Phase::MinMax(h) => write!(f, "minmax{h}"),
            Phase::FineTune => f.write_str("finetune"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Global epoch index across phases.
    pub epoch: usize,
    pub samples: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub eval: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperRecord {
    pub hyper_epoch: usize,
    /// Auxiliary samples trained on this round (after retention).
    pub aux_in_training: usize,
    pub generated: usize,
    pub aborted: usize,
    pub divergence_before: f64,
    pub divergence_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub mode: String,
    pub params: KdHyperParams,
    pub epochs: Vec<EpochRecord>,
    pub hyper: Vec<HyperRecord>,
    pub optimizer_steps: usize,
    pub final_metrics: Option<Metrics>,
    pub wall_seconds: f64,
}

impl TrainReport {
    fn new(mode: &str, params: &KdHyperParams) -> Self {
        Self {
            mode: mode.to_string(),
            params: params.clone(),
            epochs: Vec::new(),
            hyper: Vec::new(),
            optimizer_steps: 0,
            final_metrics: None,
            wall_seconds: 0.0,
        }
    }

    pub const CSV_HEADER: &'static str =
        "phase,epoch,samples,steps,train_loss,eval_accuracy,eval_loss,aux_samples,aux_div_before,aux_div_after";

    /// One row per epoch. Auxiliary columns are filled on the last epoch of
    /// each min-max round.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (i, e) in self.epochs.iter().enumerate() {
            let (acc, loss) = match e.eval {
                Some(m) => (m.accuracy.map(|a| a.to_string()).unwrap_or_default(), m.loss.to_string()),
                None => (String::new(), String::new()),
            };
            let last_of_round = match e.phase {
                Phase::MinMax(h) => self.epochs.get(i + 1).map_or(true, |n| n.phase != Phase::MinMax(h)),
                _ => false,
            };
            let aux = match e.phase {
                Phase::MinMax(h) if last_of_round => self
                    .hyper
                    .iter()
                    .find(|r| r.hyper_epoch == h)
                    .map(|r| format!("{},{},{}", r.aux_in_training, r.divergence_before, r.divergence_after))
                    .unwrap_or_else(|| ",,".into()),
                _ => ",,".into(),
            };
            let _ = writeln!(s, "{},{},{},{},{},{acc},{loss},{aux}", e.phase, e.epoch, e.samples, e.steps, e.train_loss);
        }
        s
    }

    /// Single-line summary of the run.
    pub fn summary(&self) -> String {
        let m = self.final_metrics;
        format!(
            "mode={} epochs={} optimizer_steps={} final_accuracy={} final_loss={} seed={} wall_seconds={:.3}",
            self.mode,
            self.epochs.len(),
            self.optimizer_steps,
            m.and_then(|m| m.accuracy).map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
            m.map(|m| m.loss.to_string()).unwrap_or_else(|| "-".into()),
            self.params.seed,
            self.wall_seconds,
        )
    }
}

/// Optimizer steps for a full pipeline run: `2e` epochs over `n` samples plus
/// `e` epochs over `n + aux_h` samples for each hyper epoch `h`.
pub fn expected_optimizer_steps(n: usize, batch: usize, epochs: usize, aux_per_hyper: &[usize]) -> usize {
    let per = |m: usize| m.div_ceil(batch);
    2 * epochs * per(n) + aux_per_hyper.iter().map(|&a| epochs * per(n + a)).sum::<usize>()
}

/// Mini-batch SGD with optional heavy-ball momentum and the run's random stream.
struct Trainer {
    rng: ChaCha8Rng,
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
    steps: usize,
}

impl Trainer {
    fn new(params: &KdHyperParams) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            lr: params.learning_rate,
            momentum: params.momentum,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    fn apply(&mut self, model: &mut dyn Student, vars: &[Var], grads: &Gradients) {
        let params = model.parameters_mut();
        if self.velocity.is_empty() && self.momentum != 0.0 {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (k, (p, v)) in params.into_iter().zip(vars).enumerate() {
            let g = grads.get(*v).expect("bound parameter has a gradient");
            if self.momentum == 0.0 {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= self.lr * d;
                }
            } else {
                let vel = &mut self.velocity[k];
                for ((w, d), m) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                    *m = self.momentum * *m + d;
                    *w -= self.lr * *m;
                }
            }
        }
        self.steps += 1;
    }
}

#[derive(Clone, Copy, Debug)]
enum Objective {
    Supervised,
    Kd { form: LossForm, weight: f64, tau: f64 },
    Regression { lambda: f64 },
}

impl Objective {
    fn from_params(p: &KdHyperParams, kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::Regression => Objective::Regression { lambda: p.lambda },
            _ => Objective::Kd {
                form: p.loss_form,
                weight: match p.loss_form {
                    LossForm::Lambda => p.lambda,
                    LossForm::Alpha => p.alpha,
                },
                tau: p.temperature,
            },
        }
    }
}

/// Training targets for a set of rows.
struct Targets {
    labels: Option<Vec<usize>>,
    values: Option<Tensor>,
    teacher_out: Option<Tensor>,
    teacher_soft: Option<Tensor>,
}

impl Targets {
    fn select(&self, idx: &[usize]) -> Result<Targets> {
        Ok(Targets {
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            values: self.values.as_ref().map(|v| v.select_rows(idx)).transpose()?,
            teacher_out: self.teacher_out.as_ref().map(|v| v.select_rows(idx)).transpose()?,
            teacher_soft: self.teacher_soft.as_ref().map(|v| v.select_rows(idx)).transpose()?,
        })
    }
}

fn record_loss(g: &mut Graph, objective: Objective, out: Var, t: &Targets) -> Result<Var> {
    match objective {
        Objective::Supervised => match (&t.labels, &t.values) {
            (Some(labels), _) => {
                let p = g.softmax(out)?;
                cross_entropy_on(g, p, labels)
            }
            (None, Some(y)) => regression_kd_on(g, 0.0, out, y, Some(y)),
            (None, None) => Err(Error::Contract("supervised rows need targets".into())),
        },
        Objective::Kd { form, weight, tau } => {
            let soft = t
                .teacher_soft
                .as_ref()
                .ok_or_else(|| Error::Contract("KD rows need teacher targets".into()))?;
            kd_loss_on(g, form, weight, tau, out, soft, t.labels.as_deref())
        }
        Objective::Regression { lambda } => {
            let teacher = t
                .teacher_out
                .as_ref()
                .ok_or_else(|| Error::Contract("KD rows need teacher outputs".into()))?;
            regression_kd_on(g, lambda, out, teacher, t.values.as_ref())
        }
    }
}

/// The original training rows with precomputed teacher targets.
struct BaseSet<'a> {
    data: &'a Dataset,
    targets: Targets,
}

impl<'a> BaseSet<'a> {
    fn new(data: &'a Dataset, teacher: Option<&dyn Student>, params: &KdHyperParams) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let teacher_out = teacher.map(|t| t.predict(data)).transpose()?;
        let teacher_soft = match (data.kind(), &teacher_out) {
            (DatasetKind::Regression, _) | (_, None) => None,
            (_, Some(out)) => Some(soft_targets(out, params.temperature)?),
        };
        Ok(Self {
            data,
            targets: Targets {
                labels: data.labels().map(<[usize]>::to_vec),
                values: data.values().cloned(),
                teacher_out,
                teacher_soft,
            },
        })
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    fn record(&self, g: &mut Graph, student: &dyn Student, params: &[Var], idx: &[usize]) -> Result<Var> {
        match &self.data.inputs {
            Inputs::Dense(x) => {
                let xv = g.constant(x.select_rows(idx)?);
                student.forward_on(g, params, xv)
            }
            Inputs::Tokens { ids, seq_len, .. } => {
                let rows: Vec<usize> = idx
                    .iter()
                    .flat_map(|&i| ids[i * seq_len..(i + 1) * seq_len].iter().copied())
                    .collect();
                student.forward_tokens_on(g, params, &rows)
            }
        }
    }
}

/// Auxiliary rows flattened into one pool for a training phase.
struct AuxPool {
    inputs: Tensor,
    targets: Targets,
}

impl AuxPool {
    fn new(batches: &[AuxiliaryBatch], kind: DatasetKind, aux_labels: AuxLabels) -> Result<Option<Self>> {
        if batches.is_empty() || batches.iter().all(AuxiliaryBatch::is_empty) {
            return Ok(None);
        }
        let inputs = Tensor::concat_rows(&batches.iter().map(|b| &b.inputs).collect::<Vec<_>>())?;
        let outs = Tensor::concat_rows(&batches.iter().map(|b| &b.teacher_outputs).collect::<Vec<_>>())?;
        let soft = Tensor::concat_rows(&batches.iter().map(|b| &b.soft_targets).collect::<Vec<_>>())?;
        let keep_hard = aux_labels == AuxLabels::TeacherArgmax;
        let targets = match kind {
            DatasetKind::Regression => Targets {
                labels: None,
                values: keep_hard.then(|| outs.clone()),
                teacher_out: Some(outs),
                teacher_soft: None,
            },
            _ => Targets {
                labels: keep_hard.then(|| batches.iter().flat_map(|b| b.pseudo_labels.iter().copied()).collect()),
                values: None,
                teacher_out: Some(outs),
                teacher_soft: Some(soft),
            },
        };
        Ok(Some(Self { inputs, targets }))
    }

    fn len(&self) -> usize {
        self.inputs.rows()
    }
}

struct Run<'a, S: Student> {
    student: &'a mut S,
    trainer: Trainer,
    objective: Objective,
    base: BaseSet<'a>,
    eval: Option<&'a Dataset>,
    params: KdHyperParams,
    report: TrainReport,
    started: Instant,
}

impl<'a, S: Student> Run<'a, S> {
    fn new(
        mode: &str,
        student: &'a mut S,
        teacher: Option<&dyn Student>,
        data: &'a Dataset,
        params: &KdHyperParams,
        eval: Option<&'a Dataset>,
    ) -> Result<Self> {
        params.validate()?;
        let base = BaseSet::new(data, teacher, params)?;
        let objective = match teacher {
            None => Objective::Supervised,
            Some(_) => Objective::from_params(params, data.kind()),
        };
        Ok(Self {
            student,
            trainer: Trainer::new(params),
            objective,
            base,
            eval,
            params: params.clone(),
            report: TrainReport::new(mode, params),
            started: Instant::now(),
        })
    }

    fn epochs(&mut self, phase: Phase, count: usize, aux: Option<&AuxPool>) -> Result<()> {
        let n_base = self.base.len();
        let n_aux = aux.map_or(0, AuxPool::len);
        let batch = self.params.batch_size;
        for _ in 0..count {
            let mut order: Vec<usize> = (0..n_base + n_aux).collect();
            order.shuffle(&mut self.trainer.rng);
            let steps_before = self.trainer.steps;
            let mut loss_sum = 0.0;
            for chunk in order.chunks(batch) {
                let loss = self.step(chunk, n_base, aux).map_err(|e| match e {
                    Error::NonFinite(op) => Error::Diverged(format!(
                        "{phase} epoch {} step {}: non-finite value in {op}",
                        self.report.epochs.len(),
                        self.trainer.steps
                    )),
                    other => other,
                })?;
                loss_sum += loss * chunk.len() as f64;
            }
            let eval = self.eval.map(|d| evaluate(&*self.student, d)).transpose()?;
            self.report.epochs.push(EpochRecord {
                phase,
                epoch: self.report.epochs.len(),
                samples: order.len(),
                steps: self.trainer.steps - steps_before,
                train_loss: loss_sum / order.len() as f64,
                eval,
            });
            log::debug!("{phase} epoch {} loss {}", self.report.epochs.len() - 1, loss_sum / order.len() as f64);
        }
        Ok(())
    }

    fn step(&mut self, chunk: &[usize], n_base: usize, aux: Option<&AuxPool>) -> Result<f64> {
        let base_idx: Vec<usize> = chunk.iter().copied().filter(|&i| i < n_base).collect();
        let aux_idx: Vec<usize> = chunk.iter().filter(|&&i| i >= n_base).map(|&i| i - n_base).collect();
        let mut g = Graph::new();
        let vars = self.student.bind(&mut g, true);
        let mut parts = Vec::with_capacity(2);
        if !base_idx.is_empty() {
            let out = self.base.record(&mut g, &*self.student, &vars, &base_idx)?;
            let t = self.base.targets.select(&base_idx)?;
            parts.push((record_loss(&mut g, self.objective, out, &t)?, base_idx.len()));
        }
        if let (Some(pool), false) = (aux, aux_idx.is_empty()) {
            let x = g.constant(pool.inputs.select_rows(&aux_idx)?);
            let out = self.student.forward_on(&mut g, &vars, x)?;
            let t = pool.targets.select(&aux_idx)?;
            parts.push((record_loss(&mut g, self.objective, out, &t)?, aux_idx.len()));
        }
        let loss = match parts.as_slice() {
            [(l, _)] => *l,
            [(a, na), (b, nb)] => {
                let total = (na + nb) as f64;
                let a = g.scale(*a, *na as f64 / total)?;
                let b = g.scale(*b, *nb as f64 / total)?;
                g.add(a, b)?
            }
            _ => unreachable!("a batch has at least one row"),
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let grads = g.backward(loss)?;
        self.trainer.apply(&mut *self.student, &vars, &grads);
        Ok(value)
    }

    fn finish(mut self) -> Result<TrainReport> {
        self.report.optimizer_steps = self.trainer.steps;
        self.report.final_metrics = self.eval.map(|d| evaluate(&*self.student, d)).transpose()?;
        self.report.wall_seconds = self.started.elapsed().as_secs_f64();
        Ok(self.report)
    }

    /// The three-phase schedule; `maximize` produces the round's auxiliary batch
    /// from the current student.
    fn min_max(
        &mut self,
        mut maximize: impl FnMut(&S, usize) -> Result<AuxiliaryBatch>,
    ) -> Result<()> {
        let e = self.params.train_epochs;
        let kind = self.base.data.kind();
        self.epochs(Phase::PreTrain, e, None)?;
        let mut kept: Vec<AuxiliaryBatch> = Vec::new();
        for h in 0..self.params.hyper_epochs {
            let batch = maximize(&*self.student, h)?;
            let record = HyperRecord {
                hyper_epoch: h,
                aux_in_training: 0,
                generated: batch.len(),
                aborted: batch.aborted.iter().filter(|&&a| a).count(),
                divergence_before: batch.mean_divergence_before(),
                divergence_after: batch.mean_divergence(),
            };
            log::info!(
                "hyper epoch {h}: {} aux samples, mean divergence {:.6} -> {:.6}",
                record.generated,
                record.divergence_before,
                record.divergence_after
            );
            if self.params.aux_retention == AuxRetention::ResetEachHyperEpoch {
                kept.clear();
            }
            kept.push(batch);
            let pool = AuxPool::new(&kept, kind, self.params.aux_labels)?;
            self.report.hyper.push(HyperRecord {
                aux_in_training: pool.as_ref().map_or(0, AuxPool::len),
                ..record
            });
            self.epochs(Phase::MinMax(h), e, pool.as_ref())?;
        }
        self.epochs(Phase::FineTune, e, None)
    }
}

/// Supervised training on ground-truth targets for `train_epochs` epochs.
pub fn train_scratch<S: Student>(model: &mut S, data: &Dataset, params: &KdHyperParams, eval: Option<&Dataset>) -> Result<TrainReport> {
    let mut run = Run::new("scratch", model, None, data, params, eval)?;
    run.epochs(Phase::Scratch, params.train_epochs, None)?;
    run.finish()
}

/// `train_epochs` epochs of KD against a frozen teacher.
pub fn vanilla_kd<S: Student>(
    student: &mut S,
    teacher: &dyn Student,
    data: &Dataset,
    params: &KdHyperParams,
    eval: Option<&Dataset>,
) -> Result<TrainReport> {
    let mut run = Run::new("vanilla_kd", student, Some(teacher), data, params, eval)?;
    run.epochs(Phase::Vanilla, params.train_epochs, None)?;
    run.finish()
}

pub(crate) fn ascent_config(params: &KdHyperParams) -> AscentConfig {
    AscentConfig::new(params.perturb_rate, params.perturb_steps)
        .with_clip(params.input_clip)
        .with_space(params.divergence_space)
}

/// Backward KD over dense inputs.
pub fn backward_kd<S: Student>(
    student: &mut S,
    teacher: &dyn Student,
    data: &Dataset,
    params: &KdHyperParams,
    eval: Option<&Dataset>,
) -> Result<TrainReport> {
    backward_kd_observed(student, teacher, data, params, eval, |_, _| {})
}

/// [`backward_kd`] with a callback receiving each round's auxiliary batch.
pub fn backward_kd_observed<S: Student>(
    student: &mut S,
    teacher: &dyn Student,
    data: &Dataset,
    params: &KdHyperParams,
    eval: Option<&Dataset>,
    mut observe: impl FnMut(usize, &AuxiliaryBatch),
) -> Result<TrainReport> {
    let x = data
        .dense()
        .ok_or_else(|| Error::Contract("backward_kd needs dense inputs; use backward_kd_embedding for tokens".into()))?;
    let kind = match data.kind() {
        DatasetKind::Regression => OutputKind::Regression,
        _ => OutputKind::Classification {
            temperature: params.temperature,
        },
    };
    let cfg = ascent_config(params);
    let mut run = Run::new("backward_kd", student, Some(teacher), data, params, eval)?;
    run.min_max(|s, h| {
        let batch = auxgen::generate_auxiliary(x, s, teacher, &cfg, kind)?;
        observe(h, &batch);
        Ok(batch)
    })?;
    run.finish()
}

/// Backward KD for token models: ascent in the student's embedding space,
/// with `Q` recomputed from the current embedding matrices every round.
pub fn backward_kd_embedding(
    student: &mut EmbeddingModel,
    teacher: &EmbeddingModel,
    data: &Dataset,
    params: &KdHyperParams,
    eval: Option<&Dataset>,
) -> Result<TrainReport> {
    backward_kd_embedding_observed(student, teacher, data, params, eval, |_, _, _, _| {})
}

/// [`backward_kd_embedding`] with a callback receiving each round's batch,
/// the transform it used, and the student it was grown from.
pub fn backward_kd_embedding_observed(
    student: &mut EmbeddingModel,
    teacher: &EmbeddingModel,
    data: &Dataset,
    params: &KdHyperParams,
    eval: Option<&Dataset>,
    mut observe: impl FnMut(usize, &AuxiliaryBatch, &EmbeddingTransform, &EmbeddingModel),
) -> Result<TrainReport> {
    let ids = data
        .tokens()
        .ok_or_else(|| Error::Contract("backward_kd_embedding needs a token dataset".into()))?;
    // Fail before any training if the student matrix is already singular.
    auxgen::compute_transform(&student.embedding, &teacher.embedding)?;
    let cfg = ascent_config(params);
    let tau = params.temperature;
    let mut run = Run::new("backward_kd_embedding", student, Some(teacher), data, params, eval)?;
    run.min_max(|s, h| {
        let q = auxgen::compute_transform(&s.embedding, &teacher.embedding)?;
        let batch = auxgen::generate_auxiliary_embedding(ids, s, teacher, &q, &cfg, tau)?;
        observe(h, &batch, &q, s);
        Ok(batch)
    })?;
    run.finish()
}
