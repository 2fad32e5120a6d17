//! Maximization step: push samples towards regions where student and teacher
//! disagree most, by gradient ascent on `‖S(x) − T(x)‖²` with respect to the
//! input.
//!
//! Token models are perturbed in the student's embedding space; the teacher
//! sees `z_T = Q·z_S` per token, where `Q` is the least-squares map between
//! the two embedding matrices ([`compute_transform`]).
//!
//! Rows are independent: the batched engine evaluates many samples per
//! forward pass, but each row keeps its own step size, acceptance decisions
//! and trace, so results do not depend on how rows are grouped.

use crate::losses::{bkd_per_sample_on, soft_targets, DivergenceSpace};
use crate::nn::{EmbeddingModel, Module};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Maximum number of step-halvings tried before a sample stops early.
pub const MAX_HALVINGS: usize = 10;
/// Samples whose divergence gradient norm falls below this stop ascending.
pub const GRAD_NORM_FLOOR: f64 = 1e-8;
/// Rows per forward pass during generation.
const GEN_CHUNK: usize = 500;
/// Condition number above which `W_S W_Sᵀ` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentConfig {
    pub rate: f64,
    pub steps: usize,
    pub clip: Option<(f64, f64)>,
    pub space: DivergenceSpace,
}

impl AscentConfig {
    pub fn new(rate: f64, steps: usize) -> Self {
        Self {
            rate,
            steps,
            clip: None,
            space: DivergenceSpace::Logits,
        }
    }

    pub fn with_clip(mut self, clip: Option<(f64, f64)>) -> Self {
        self.clip = clip;
        self
    }

    pub fn with_space(mut self, space: DivergenceSpace) -> Self {
        self.space = space;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0) || !self.rate.is_finite() {
            return Err(Error::InvalidParam(format!("perturbation rate must be ≥ 0, got {}", self.rate)));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo < hi) {
                return Err(Error::InvalidParam(format!("clip range needs lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Result of ascending a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbOutcome {
    pub input: Vec<f64>,
    /// Divergence at the origin followed by the value after every accepted step.
    pub trace: Vec<f64>,
    /// Set when a non-finite gradient or loss was hit; `input` is then the origin.
    pub aborted: bool,
}

impl PerturbOutcome {
    pub fn initial(&self) -> f64 {
        self.trace[0]
    }

    pub fn achieved(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }

    pub fn accepted_steps(&self) -> usize {
        self.trace.len() - 1
    }
}

/// Per-row divergence objective over a dense input matrix.
pub trait Divergence {
    fn dim(&self) -> usize;
    /// Records per-row divergence for the rows of `x`, shape `[n]`.
    fn record(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

fn divergence_values(div: &dyn Divergence, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let per = div.record(&mut g, xv)?;
    Ok(g.value(per).data().to_vec())
}

fn divergence_grads(div: &dyn Divergence, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let per = div.record(&mut g, xv)?;
    let values = g.value(per).data().to_vec();
    // Rows are independent, so the gradient of the sum is the stack of
    // per-row gradients.
    let total = g.sum(per)?;
    let mut grads = g.backward(total)?;
    let gx = grads.take(xv).expect("input is a differentiable leaf");
    Ok((values, gx))
}

/// Row-by-row fallback so one bad sample cannot fail its neighbours.
fn values_isolating(div: &dyn Divergence, x: &Tensor) -> Vec<f64> {
    match divergence_values(div, x) {
        Ok(v) => v,
        Err(_) => (0..x.rows())
            .map(|i| {
                x.select_rows(&[i])
                    .and_then(|r| divergence_values(div, &r))
                    .map_or(f64::NAN, |v| v[0])
            })
            .collect(),
    }
}

fn grads_isolating(div: &dyn Divergence, x: &Tensor) -> Vec<Option<(f64, Vec<f64>)>> {
    match divergence_grads(div, x) {
        Ok((v, g)) => (0..x.rows()).map(|i| Some((v[i], g.row(i).to_vec()))).collect(),
        Err(_) => (0..x.rows())
            .map(|i| {
                let r = x.select_rows(&[i]).ok()?;
                let (v, g) = divergence_grads(div, &r).ok()?;
                Some((v[0], g.into_data()))
            })
            .collect(),
    }
}

/// Batched gradient ascent with a per-row step-halving safeguard.
///
/// Each accepted step is `x ← clip(x + η_eff·∇ₓL)` with `η_eff = η / 2^j` for
/// the smallest `j ≤ MAX_HALVINGS` that strictly increases `L`; a row stops
/// when no such `j` exists, when its gradient norm drops below
/// [`GRAD_NORM_FLOOR`], or after `steps` accepted steps.
pub fn ascend(div: &dyn Divergence, x0: &Tensor, cfg: &AscentConfig) -> Result<Vec<PerturbOutcome>> {
    cfg.validate()?;
    if x0.shape().len() != 2 || x0.cols() != div.dim() {
        return Err(Error::dim("perturb", x0.shape(), &[x0.rows(), div.dim()]));
    }
    if let Some((lo, hi)) = cfg.clip {
        if x0.data().iter().any(|&v| v < lo || v > hi) {
            return Err(Error::Contract(format!("input outside clip range [{lo}, {hi}]")));
        }
    }
    let n = x0.rows();
    let d = x0.cols();
    let mut out: Vec<PerturbOutcome> = (0..n)
        .map(|i| PerturbOutcome {
            input: x0.row(i).to_vec(),
            trace: Vec::new(),
            aborted: false,
        })
        .collect();

    if cfg.steps == 0 || cfg.rate == 0.0 {
        for (o, v) in out.iter_mut().zip(values_isolating(div, x0)) {
            o.aborted = !v.is_finite();
            o.trace.push(v);
        }
        return Ok(out);
    }

    let mut active: Vec<usize> = (0..n).collect();
    for step in 0..cfg.steps {
        if active.is_empty() {
            break;
        }
        let cur = rows_tensor(&out, &active, d)?;
        let mut pending = Vec::new();
        let mut base = Vec::new();
        let mut grads = Vec::new();
        for (&i, res) in active.iter().zip(grads_isolating(div, &cur)) {
            let o = &mut out[i];
            match res {
                Some((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => {
                    if step == 0 {
                        o.trace.push(v);
                    }
                    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm >= GRAD_NORM_FLOOR {
                        pending.push(i);
                        base.push(v);
                        grads.push(g);
                    }
                }
                other => {
                    o.input = x0.row(i).to_vec();
                    o.aborted = true;
                    if o.trace.is_empty() {
                        o.trace.push(other.map_or(f64::NAN, |(v, _)| v));
                    }
                }
            }
        }

        let mut eta = vec![cfg.rate; pending.len()];
        let mut accepted = vec![false; pending.len()];
        let mut candidates: Vec<Vec<f64>> = vec![Vec::new(); pending.len()];
        for _attempt in 0..=MAX_HALVINGS {
            let open: Vec<usize> = (0..pending.len()).filter(|&k| !accepted[k]).collect();
            if open.is_empty() {
                break;
            }
            let mut cand = Vec::with_capacity(open.len() * d);
            for &k in &open {
                let row: Vec<f64> = out[pending[k]]
                    .input
                    .iter()
                    .zip(&grads[k])
                    .map(|(x, g)| clip(x + eta[k] * g, cfg.clip))
                    .collect();
                cand.extend_from_slice(&row);
                candidates[k] = row;
            }
            let cand = Tensor::new(&[open.len(), d], cand)?;
            let vals = values_isolating(div, &cand);
            for (&k, v) in open.iter().zip(vals) {
                if v > base[k] {
                    accepted[k] = true;
                    let o = &mut out[pending[k]];
                    o.input = std::mem::take(&mut candidates[k]);
                    o.trace.push(v);
                } else {
                    eta[k] *= 0.5;
                }
            }
        }
        active = pending
            .iter()
            .zip(&accepted)
            .filter_map(|(&i, &a)| a.then_some(i))
            .collect();
    }
    Ok(out)
}

fn clip(v: f64, range: Option<(f64, f64)>) -> f64 {
    match range {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    }
}

fn rows_tensor(out: &[PerturbOutcome], idx: &[usize], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&out[i].input);
    }
    Tensor::new(&[idx.len(), d], data)
}

fn space_outputs(g: &mut Graph, space: DivergenceSpace, s: Var, t: Var) -> Result<(Var, Var)> {
    match space {
        DivergenceSpace::Logits => Ok((s, t)),
        DivergenceSpace::Probabilities => Ok((g.softmax(s)?, g.softmax(t)?)),
    }
}

/// Divergence between two models that read the same input.
pub struct InputDivergence<'a> {
    pub student: &'a dyn Module,
    pub teacher: &'a dyn Module,
    pub space: DivergenceSpace,
}

impl<'a> InputDivergence<'a> {
    pub fn new(student: &'a dyn Module, teacher: &'a dyn Module, space: DivergenceSpace) -> Result<Self> {
        if student.in_dim() != teacher.in_dim() || student.out_dim() != teacher.out_dim() {
            return Err(Error::dim(
                "divergence",
                &[student.in_dim(), student.out_dim()],
                &[teacher.in_dim(), teacher.out_dim()],
            ));
        }
        Ok(Self { student, teacher, space })
    }
}

impl Divergence for InputDivergence<'_> {
    fn dim(&self) -> usize {
        self.student.in_dim()
    }

    fn record(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let sp = self.student.bind(g, false);
        let tp = self.teacher.bind(g, false);
        let s = self.student.forward_on(g, &sp, x)?;
        let t = self.teacher.forward_on(g, &tp, x)?;
        let (s, t) = space_outputs(g, self.space, s, t)?;
        bkd_per_sample_on(g, s, t)
    }
}

/// Divergence over student embedding vectors; the teacher reads `Q·z_S` per
/// token position.
pub struct EmbeddingDivergence<'a> {
    pub student: &'a EmbeddingModel,
    pub teacher: &'a EmbeddingModel,
    pub transform: &'a EmbeddingTransform,
    pub space: DivergenceSpace,
}

impl<'a> EmbeddingDivergence<'a> {
    pub fn new(student: &'a EmbeddingModel, teacher: &'a EmbeddingModel, transform: &'a EmbeddingTransform, space: DivergenceSpace) -> Result<Self> {
        if transform.student_dim != student.embed_dim()
            || transform.teacher_dim != teacher.embed_dim()
            || student.seq_len != teacher.seq_len
        {
            return Err(Error::dim(
                "embedding divergence",
                &[transform.student_dim, transform.teacher_dim],
                &[student.embed_dim(), teacher.embed_dim()],
            ));
        }
        Ok(Self {
            student,
            teacher,
            transform,
            space,
        })
    }
}

impl Divergence for EmbeddingDivergence<'_> {
    fn dim(&self) -> usize {
        self.student.in_dim()
    }

    fn record(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let sp = self.student.bind(g, false);
        let tp = self.teacher.bind(g, false);
        let s = self.student.forward_on(g, &sp, z)?;
        let zt = self.transform.apply_on(g, z, self.student.seq_len)?;
        let t = self.teacher.forward_on(g, &tp, zt)?;
        let (s, t) = space_outputs(g, self.space, s, t)?;
        bkd_per_sample_on(g, s, t)
    }
}

/// Ascends a single sample against a student/teacher pair.
pub fn perturb_sample(x: &[f64], student: &dyn Module, teacher: &dyn Module, cfg: &AscentConfig) -> Result<PerturbOutcome> {
    let div = InputDivergence::new(student, teacher, cfg.space)?;
    let x0 = Tensor::new(&[1, x.len()], x.to_vec())?;
    Ok(ascend(&div, &x0, cfg)?.remove(0))
}

/// Ascent over student embedding vectors. Returns the outcomes (whose
/// `input` is the final `z_S′`) and the matching teacher vectors `z_T′ = Q·z_S′`.
pub fn perturb_embedding(
    z_student: &Tensor,
    student: &EmbeddingModel,
    teacher: &EmbeddingModel,
    transform: &EmbeddingTransform,
    cfg: &AscentConfig,
) -> Result<(Vec<PerturbOutcome>, Tensor)> {
    let div = EmbeddingDivergence::new(student, teacher, transform, cfg.space)?;
    let outcomes = ascend(&div, z_student, cfg)?;
    let zs = rows_tensor(&outcomes, &(0..outcomes.len()).collect::<Vec<_>>(), z_student.cols())?;
    let zt = transform.apply(&zs, student.seq_len)?;
    Ok((outcomes, zt))
}

/// Least-squares map from student to teacher embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTransform {
    /// `[d_teacher × d_student]`
    pub q: Tensor,
    pub student_dim: usize,
    pub teacher_dim: usize,
    pub vocab: usize,
    /// Estimated condition number of `W_S W_Sᵀ`.
    pub condition: f64,
}

impl EmbeddingTransform {
    /// Maps `[n × L·d_S]` student vectors to `[n × L·d_T]` teacher vectors.
    pub fn apply(&self, z: &Tensor, seq_len: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.apply_on(&mut g, zv, seq_len)?;
        Ok(g.value(out).clone())
    }

    pub fn apply_on(&self, g: &mut Graph, z: Var, seq_len: usize) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != seq_len * self.student_dim {
            return Err(Error::dim("embedding transform", &shape, &[shape[0], seq_len * self.student_dim]));
        }
        let n = shape[0];
        let tokens = g.reshape(z, &[n * seq_len, self.student_dim])?;
        let qt = g.constant(self.q.transpose()?);
        let mapped = g.matmul(tokens, qt)?;
        g.reshape(mapped, &[n, seq_len * self.teacher_dim])
    }

    /// `‖Q·(W_S W_Sᵀ) − W_T W_Sᵀ‖_F` relative to `‖W_T W_Sᵀ‖_F`.
    pub fn normal_equation_residual(&self, w_student: &Tensor, w_teacher: &Tensor) -> Result<f64> {
        let wst = w_student.transpose()?;
        let a = w_student.matmul(&wst)?;
        let b = w_teacher.matmul(&wst)?;
        let qa = self.q.matmul(&a)?;
        let diff: f64 = qa.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(diff.sqrt() / b.norm().max(f64::MIN_POSITIVE))
    }
}

/// `Q = W_T W_Sᵀ (W_S W_Sᵀ)⁻¹`, the minimizer of `‖W_T − Q·W_S‖²_F`.
///
/// Solved as `(W_S W_Sᵀ)·Qᵀ = W_S W_Tᵀ` by Cholesky factorization; the inverse
/// is never formed.
pub fn compute_transform(w_student: &Tensor, w_teacher: &Tensor) -> Result<EmbeddingTransform> {
    let (d1, v) = w_student.as_matrix("compute_transform")?;
    let (d2, v2) = w_teacher.as_matrix("compute_transform")?;
    if v != v2 {
        return Err(Error::dim("compute_transform", w_student.shape(), w_teacher.shape()));
    }
    if d1 > v {
        return Err(Error::Singular { condition: f64::INFINITY });
    }
    let wst = w_student.transpose()?;
    let gram = w_student.matmul(&wst)?;
    let cross = w_teacher.matmul(&wst)?;
    let chol = cholesky(gram.data(), d1).ok_or(Error::Singular { condition: f64::INFINITY })?;
    let condition = condition_estimate(gram.data(), &chol, d1);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let mut q = vec![0.0; d2 * d1];
    for r in 0..d2 {
        // Row r of Q solves gram · q_r = cross_r (gram is symmetric).
        let sol = cholesky_solve(&chol, d1, cross.row(r));
        q[r * d1..(r + 1) * d1].copy_from_slice(&sol);
    }
    Ok(EmbeddingTransform {
        q: Tensor::new(&[d2, d1], q)?,
        student_dim: d1,
        teacher_dim: d2,
        vocab: v,
        condition,
    })
}

/// Lower-triangular `L` with `A = L·Lᵀ`, or `None` if `A` is not positive definite.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

/// Ratio of the extreme eigenvalues of the SPD matrix `a`, by power
/// iteration on `a` and on `a⁻¹` (through the Cholesky factor).
fn condition_estimate(a: &[f64], l: &[f64], n: usize) -> f64 {
    const ITERS: usize = 100;
    let start: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let normalize = |v: &mut Vec<f64>| {
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= s);
        s
    };
    let mut v = start.clone();
    normalize(&mut v);
    let mut lmax = 0.0;
    for _ in 0..ITERS {
        let mut w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect();
        lmax = normalize(&mut w);
        v = w;
    }
    let mut v = start;
    normalize(&mut v);
    let mut inv_max = 0.0;
    for _ in 0..ITERS {
        let mut w = cholesky_solve(l, n, &v);
        inv_max = normalize(&mut w);
        v = w;
    }
    lmax * inv_max
}

/// Divergence-maximizing auxiliary samples with teacher labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryBatch {
    /// Perturbed inputs `x′` (student embedding vectors for token models).
    pub inputs: Tensor,
    /// Teacher-side inputs `z_T′ = Q·z_S′`, present for token models only.
    pub teacher_inputs: Option<Tensor>,
    /// Row of the source dataset each sample was grown from.
    pub origin: Vec<usize>,
    /// Raw teacher outputs at `x′`.
    pub teacher_outputs: Tensor,
    /// `σ(T(x′)/τ)` for classifiers; equal to the raw outputs for regressors.
    pub soft_targets: Tensor,
    /// `argmax T(x′)` for classifiers, empty for regressors.
    pub pseudo_labels: Vec<usize>,
    pub divergence_before: Vec<f64>,
    pub divergence: Vec<f64>,
    pub accepted_steps: Vec<usize>,
    pub aborted: Vec<bool>,
    /// Per-sample divergence after every accepted step, origin first.
    pub traces: Vec<Vec<f64>>,
}

impl AuxiliaryBatch {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn mean_divergence_before(&self) -> f64 {
        mean(&self.divergence_before)
    }

    pub fn mean_divergence(&self) -> f64 {
        mean(&self.divergence)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Whether teacher outputs are class logits or regression values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputKind {
    Classification { temperature: f64 },
    Regression,
}

fn teacher_targets(outputs: &Tensor, kind: OutputKind) -> Result<(Tensor, Vec<usize>)> {
    match kind {
        OutputKind::Classification { temperature } => Ok((soft_targets(outputs, temperature)?, outputs.argmax_rows())),
        OutputKind::Regression => Ok((outputs.clone(), Vec::new())),
    }
}

struct Collected {
    inputs: Tensor,
    before: Vec<f64>,
    after: Vec<f64>,
    steps: Vec<usize>,
    aborted: Vec<bool>,
    traces: Vec<Vec<f64>>,
}

fn collect(outcomes: Vec<PerturbOutcome>, d: usize) -> Result<Collected> {
    let n = outcomes.len();
    let mut inputs = Vec::with_capacity(n * d);
    let mut before = Vec::with_capacity(n);
    let mut after = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);
    let mut aborted = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for o in outcomes {
        before.push(o.initial());
        after.push(if o.aborted { o.initial() } else { o.achieved() });
        steps.push(o.accepted_steps());
        aborted.push(o.aborted);
        inputs.extend(o.input);
        traces.push(o.trace);
    }
    Ok(Collected {
        inputs: Tensor::new(&[n, d], inputs)?,
        before,
        after,
        steps,
        aborted,
        traces,
    })
}

fn ascend_chunked(div: &dyn Divergence, x: &Tensor, cfg: &AscentConfig) -> Result<Vec<PerturbOutcome>> {
    let n = x.rows();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(GEN_CHUNK) {
        let idx: Vec<usize> = (start..(start + GEN_CHUNK).min(n)).collect();
        out.extend(ascend(div, &x.select_rows(&idx)?, cfg)?);
    }
    Ok(out)
}

/// One auxiliary sample per row of `inputs`, labelled by the teacher at the
/// perturbed point. Per-sample aborts are reported in `aborted`.
pub fn generate_auxiliary(
    inputs: &Tensor,
    student: &dyn Module,
    teacher: &dyn Module,
    cfg: &AscentConfig,
    kind: OutputKind,
) -> Result<AuxiliaryBatch> {
    let div = InputDivergence::new(student, teacher, cfg.space)?;
    let outcomes = ascend_chunked(&div, inputs, cfg)?;
    let c = collect(outcomes, inputs.cols())?;
    let t_out = teacher.forward(&c.inputs)?;
    let (soft, labels) = teacher_targets(&t_out, kind)?;
    Ok(AuxiliaryBatch {
        origin: (0..c.inputs.rows()).collect(),
        inputs: c.inputs,
        teacher_inputs: None,
        teacher_outputs: t_out,
        soft_targets: soft,
        pseudo_labels: labels,
        divergence_before: c.before,
        divergence: c.after,
        accepted_steps: c.steps,
        aborted: c.aborted,
        traces: c.traces,
    })
}

/// Embedding-space generation for token models: ascend `z_S = W_S·x`, map
/// with `Q`, and label with the teacher at `z_T′`.
pub fn generate_auxiliary_embedding(
    tokens: &[usize],
    student: &EmbeddingModel,
    teacher: &EmbeddingModel,
    transform: &EmbeddingTransform,
    cfg: &AscentConfig,
    temperature: f64,
) -> Result<AuxiliaryBatch> {
    let zs = student.embed(tokens)?;
    let div = EmbeddingDivergence::new(student, teacher, transform, cfg.space)?;
    let outcomes = ascend_chunked(&div, &zs, cfg)?;
    let c = collect(outcomes, zs.cols())?;
    let zt = transform.apply(&c.inputs, student.seq_len)?;
    let t_out = teacher.forward_from_embedding(&zt)?;
    let (soft, labels) = teacher_targets(&t_out, OutputKind::Classification { temperature })?;
    Ok(AuxiliaryBatch {
        origin: (0..c.inputs.rows()).collect(),
        inputs: c.inputs,
        teacher_inputs: Some(zt),
        teacher_outputs: t_out,
        soft_targets: soft,
        pseudo_labels: labels,
        divergence_before: c.before,
        divergence: c.after,
        accepted_steps: c.steps,
        aborted: c.aborted,
        traces: c.traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer, LayerSpec, Network};

    fn linear(w: f64) -> Network {
        Network::from_layers(vec![Layer {
            spec: LayerSpec::new(1, 1, Activation::Identity),
            weight: Tensor::new(&[1, 1], vec![w]).unwrap(),
            bias: Tensor::new(&[1], vec![0.0]).unwrap(),
        }])
        .unwrap()
    }

    #[test]
    fn one_step_linear_pair() {
        let (s, t) = (linear(2.0), linear(1.0));
        let out = perturb_sample(&[1.0], &s, &t, &AscentConfig::new(0.1, 1)).unwrap();
        assert!((out.input[0] - 1.2).abs() < 1e-15);
        assert_eq!(out.trace.len(), 2);
        assert!((out.trace[0] - 1.0).abs() < 1e-15);
        assert!((out.trace[1] - 1.44).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_and_identical_models_are_fixed_points() {
        let (s, t) = (linear(2.0), linear(1.0));
        let out = perturb_sample(&[0.7], &s, &t, &AscentConfig::new(0.0, 5)).unwrap();
        assert_eq!(out.input, vec![0.7]);
        let out = perturb_sample(&[0.7], &t, &t, &AscentConfig::new(0.3, 5)).unwrap();
        assert_eq!(out.input, vec![0.7]);
        assert_eq!(out.accepted_steps(), 0);
    }

    #[test]
    fn clip_is_enforced_and_trace_monotone() {
        let (s, t) = (linear(3.0), linear(1.0));
        let cfg = AscentConfig::new(0.5, 10).with_clip(Some((0.0, 1.0)));
        let out = perturb_sample(&[0.5], &s, &t, &cfg).unwrap();
        assert_eq!(out.input, vec![1.0]);
        assert!(out.trace.windows(2).all(|w| w[1] > w[0]));
        assert!(perturb_sample(&[1.5], &s, &t, &cfg).is_err());
    }

    #[test]
    fn identity_transform() {
        let w_t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let q = compute_transform(&Tensor::identity(3), &w_t).unwrap();
        assert_eq!(q.q, w_t);
    }

    #[test]
    fn rank_deficient_student_matrix() {
        let w_s = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        let w_t = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        match compute_transform(&w_s, &w_t) {
            Err(Error::Singular { condition }) => assert!(condition > MAX_CONDITION),
            other => panic!("expected singular error, got {other:?}"),
        }
        let wide = Tensor::zeros(&[4, 3]);
        assert!(matches!(compute_transform(&wide, &Tensor::zeros(&[2, 3])), Err(Error::Singular { .. })));
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = cholesky_solve(&l, 2, &[2.0, 1.0]);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
        let cond = condition_estimate(&a, &l, 2);
        let (e1, e2) = ((7.0 + 17f64.sqrt()) / 2.0, (7.0 - 17f64.sqrt()) / 2.0);
        assert!((cond - e1 / e2).abs() < 1e-9);
    }
}
