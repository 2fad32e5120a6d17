//! Training and divergence objectives.
//!
//! Every loss exists in two forms: a recording form (`*_on`) that builds the
//! computation on a [`Graph`] so it can be differentiated, and a plain form
//! over [`Tensor`]s for evaluation. Batch reductions are means over rows.

use crate::tensor::{softmax_rows, Graph, Tensor, Var};
use crate::{Error, Result};

/// Probability floor. Distributions are mixed as `(1 − c·ε)·p + ε`, which
/// keeps rows normalized and every entry at least `ε` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which KD objective the minimization step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    /// `(1−λ)·H(σ(S), y) + τ²λ·KL(σ(S/τ) ‖ σ(T/τ))`
    Lambda,
    /// `α·H(σ(S), y) + (1−α)·KL(σ(S/τ) ‖ σ(T/τ))`
    Alpha,
}

/// Space in which the student/teacher gap is measured during ascent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceSpace {
    /// Raw outputs: logits for classifiers, values for regressors.
    Logits,
    /// Post-softmax probabilities.
    Probabilities,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxRetention {
    /// Discard the previous hyper epoch's auxiliary samples.
    ResetEachHyperEpoch,
    /// Keep every generated auxiliary sample (few-sample mode).
    Accumulate,
}

/// How auxiliary samples are labelled for the hard-label term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxLabels {
    /// argmax of the teacher output at the perturbed input.
    TeacherArgmax,
    /// No hard-label term on auxiliary samples (λ = 1 on them).
    SoftOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdHyperParams {
    pub alpha: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub perturb_rate: f64,
    pub train_epochs: usize,
    pub hyper_epochs: usize,
    pub perturb_steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub aux_retention: AuxRetention,
    pub input_clip: Option<(f64, f64)>,
    pub loss_form: LossForm,
    pub divergence_space: DivergenceSpace,
    pub aux_labels: AuxLabels,
}

impl Default for KdHyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.5,
            temperature: 2.0,
            perturb_rate: 0.05,
            train_epochs: 1,
            hyper_epochs: 1,
            perturb_steps: 10,
            learning_rate: 0.05,
            momentum: 0.0,
            batch_size: 64,
            seed: 0,
            aux_retention: AuxRetention::ResetEachHyperEpoch,
            input_clip: None,
            loss_form: LossForm::Lambda,
            divergence_space: DivergenceSpace::Logits,
            aux_labels: AuxLabels::TeacherArgmax,
        }
    }
}

impl KdHyperParams {
    pub fn validate(&self) -> Result<()> {
        check_weight("alpha", self.alpha)?;
        check_weight("lambda", self.lambda)?;
        check_temperature(self.temperature)?;
        if !(self.perturb_rate >= 0.0) || !self.perturb_rate.is_finite() {
            return Err(Error::InvalidParam(format!("perturb_rate must be ≥ 0, got {}", self.perturb_rate)));
        }
        if self.train_epochs == 0 {
            return Err(Error::InvalidParam("train_epochs must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParam(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be ≥ 1".into()));
        }
        if let Some((lo, hi)) = self.input_clip {
            if !(lo < hi) {
                return Err(Error::InvalidParam(format!("input_clip needs lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidParam(format!("{name} must be in [0, 1], got {w}")));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParam(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim("labels", &[labels.len()], &[rows]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidParam(format!("label {bad} outside {classes} classes")));
    }
    Ok(())
}

fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

/// `log((1 − c·ε)·p + ε)`
fn floored_log_on(g: &mut Graph, p: Var) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    let c = shape[1] as f64;
    let mixed = g.scale(p, 1.0 - c * PROB_FLOOR)?;
    let eps = g.constant(Tensor::filled(&shape, PROB_FLOOR));
    let shifted = g.add(mixed, eps)?;
    g.log(shifted)
}

/// Mean over rows of `−log p[label]` for probability rows `probs`.
pub fn cross_entropy_on(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("cross_entropy", &shape, &[]));
    }
    check_labels(labels, shape[0], shape[1])?;
    let logp = floored_log_on(g, probs)?;
    let mask = g.constant(onehot(labels, shape[1]));
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / shape[0] as f64)
}

/// Mean over rows of `Σ_j p_j log(p_j / q_j)`; `p` is the first argument.
pub fn kl_div_on(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let n = g.shape(p)[0] as f64;
    let lp = floored_log_on(g, p)?;
    let lq = floored_log_on(g, q)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, 1.0 / n)
}

/// Per-row `Σ_j (s_j − t_j)²`, shape `[n]`.
pub fn bkd_per_sample_on(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    let d = g.sub(student, teacher)?;
    let sq = g.square(d)?;
    g.row_sums(sq)
}

/// `‖S(x) − T(x)‖²₂` summed over output dims, averaged over the batch.
pub fn bkd_on(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    let per = bkd_per_sample_on(g, student, teacher)?;
    g.mean(per)
}

fn soft_on(g: &mut Graph, logits: Var, tau: f64) -> Result<Var> {
    let scaled = if tau == 1.0 { logits } else { g.scale(logits, 1.0 / tau)? };
    g.softmax(scaled)
}

/// KD objective against fixed teacher soft targets `σ(T/τ)`.
///
/// `hard_labels` may be `None` for rows that carry no hard label; the hard
/// term is then dropped. Zero-weight terms are not recorded at all, so λ = 0
/// reproduces plain cross-entropy training exactly.
pub fn kd_loss_on(
    g: &mut Graph,
    form: LossForm,
    weight: f64,
    tau: f64,
    student_logits: Var,
    teacher_soft: &Tensor,
    hard_labels: Option<&[usize]>,
) -> Result<Var> {
    check_weight(match form {
        LossForm::Lambda => "lambda",
        LossForm::Alpha => "alpha",
    }, weight)?;
    check_temperature(tau)?;
    if g.shape(student_logits) != teacher_soft.shape() {
        return Err(Error::dim("kd_loss", g.shape(student_logits), teacher_soft.shape()));
    }
    let (hard_w, soft_w) = match form {
        LossForm::Lambda => (1.0 - weight, tau * tau * weight),
        LossForm::Alpha => (weight, 1.0 - weight),
    };
    let mut terms = Vec::new();
    if let Some(labels) = hard_labels {
        if hard_w != 0.0 {
            let p = g.softmax(student_logits)?;
            let ce = cross_entropy_on(g, p, labels)?;
            terms.push(if hard_w == 1.0 { ce } else { g.scale(ce, hard_w)? });
        }
    }
    if soft_w != 0.0 {
        let ps = soft_on(g, student_logits, tau)?;
        let pt = g.constant(teacher_soft.clone());
        let kl = kl_div_on(g, ps, pt)?;
        terms.push(if soft_w == 1.0 { kl } else { g.scale(kl, soft_w)? });
    }
    match terms.as_slice() {
        [] => {
            let zero = g.constant(Tensor::scalar(0.0));
            Ok(zero)
        }
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Regression analogue of the λ-form: `(1−λ)·‖S − y‖² + λ·‖S − T‖²`, each
/// averaged over the batch.
pub fn regression_kd_on(
    g: &mut Graph,
    lambda: f64,
    student: Var,
    teacher_out: &Tensor,
    targets: Option<&Tensor>,
) -> Result<Var> {
    check_weight("lambda", lambda)?;
    let mut terms = Vec::new();
    if let Some(y) = targets {
        if lambda != 1.0 {
            let yv = g.constant(y.clone());
            let mse = bkd_on(g, student, yv)?;
            terms.push(if lambda == 0.0 { mse } else { g.scale(mse, 1.0 - lambda)? });
        }
    }
    if lambda != 0.0 {
        let tv = g.constant(teacher_out.clone());
        let gap = bkd_on(g, student, tv)?;
        terms.push(if lambda == 1.0 { gap } else { g.scale(gap, lambda)? });
    }
    match terms.as_slice() {
        [] => Ok(g.constant(Tensor::scalar(0.0))),
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Softened teacher targets `σ(T/τ)`.
pub fn soft_targets(teacher_logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    softmax_rows(&teacher_logits.map(|x| x / tau))
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.value(v).item())
}

fn check_distribution(name: &'static str, p: &Tensor) -> Result<()> {
    p.as_matrix(name)?;
    if p.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidParam(format!("{name}: probabilities must be finite and non-negative")));
    }
    Ok(())
}

pub fn kl_div(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_distribution("kl_div", p)?;
    check_distribution("kl_div", q)?;
    if p.shape() != q.shape() {
        return Err(Error::dim("kl_div", p.shape(), q.shape()));
    }
    eval_scalar(|g| {
        let (a, b) = (g.constant(p.clone()), g.constant(q.clone()));
        kl_div_on(g, a, b)
    })
}

pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_distribution("cross_entropy", probs)?;
    eval_scalar(|g| {
        let p = g.constant(probs.clone());
        cross_entropy_on(g, p, labels)
    })
}

pub fn kd_loss_lambda(student: &Tensor, teacher: &Tensor, labels: &[usize], lambda: f64, tau: f64) -> Result<f64> {
    kd_loss(LossForm::Lambda, student, teacher, labels, lambda, tau)
}

pub fn kd_loss_alpha(student: &Tensor, teacher: &Tensor, labels: &[usize], alpha: f64, tau: f64) -> Result<f64> {
    kd_loss(LossForm::Alpha, student, teacher, labels, alpha, tau)
}

fn kd_loss(form: LossForm, student: &Tensor, teacher: &Tensor, labels: &[usize], w: f64, tau: f64) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim("kd_loss", student.shape(), teacher.shape()));
    }
    let soft = soft_targets(teacher, tau)?;
    eval_scalar(|g| {
        let s = g.constant(student.clone());
        kd_loss_on(g, form, w, tau, s, &soft, Some(labels))
    })
}

pub fn bkd_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim("bkd_loss", student.shape(), teacher.shape()));
    }
    eval_scalar(|g| {
        let (s, t) = (g.constant(student.clone()), g.constant(teacher.clone()));
        bkd_on(g, s, t)
    })
}

/// Per-sample divergence in the chosen space.
pub fn bkd_per_sample(student: &Tensor, teacher: &Tensor, space: DivergenceSpace) -> Result<Vec<f64>> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim("bkd_loss", student.shape(), teacher.shape()));
    }
    let (s, t) = match space {
        DivergenceSpace::Logits => (student.clone(), teacher.clone()),
        DivergenceSpace::Probabilities => (softmax_rows(student)?, softmax_rows(teacher)?),
    };
    Ok((0..s.rows())
        .map(|i| s.row(i).iter().zip(t.row(i)).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn kl_identity_and_value() {
        let p = t(&[&[0.5, 0.5]]);
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        let q = t(&[&[0.25, 0.75]]);
        let oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((kl_div(&p, &q).unwrap() - oracle).abs() < 1e-10);
        assert!((oracle - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_negative() {
        let p = t(&[&[1.5, -0.5]]);
        assert!(kl_div(&p, &p).is_err());
    }

    #[test]
    fn cross_entropy_floor_on_onehot() {
        let p = t(&[&[1.0, 0.0, 0.0]]);
        let ce = cross_entropy(&p, &[0]).unwrap();
        let expected = -(1.0 - 2.0 * PROB_FLOOR).ln();
        assert!((ce - expected).abs() < 1e-15);
        let wrong = cross_entropy(&p, &[1]).unwrap();
        assert!((wrong + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn lambda_endpoints() {
        let s = t(&[&[0.3, -1.0, 2.0], &[1.0, 0.0, 0.5]]);
        let tt = t(&[&[1.0, 0.2, 0.1], &[-0.5, 0.0, 0.9]]);
        let labels = [2, 0];
        let ce = cross_entropy(&softmax_rows(&s).unwrap(), &labels).unwrap();
        assert_eq!(kd_loss_lambda(&s, &tt, &labels, 0.0, 3.0).unwrap(), ce);
        let same = kd_loss_lambda(&s, &s, &labels, 0.4, 2.0).unwrap();
        assert!((same - 0.6 * ce).abs() < 1e-15);
    }

    #[test]
    fn lambda_one_two_class_oracle() {
        let s = t(&[&[0.0, 1.0]]);
        let tt = t(&[&[1.0, 0.0]]);
        let p = [1.0 / (1.0 + 0.5f64.exp()), 0.5f64.exp() / (1.0 + 0.5f64.exp())];
        let q = [p[1], p[0]];
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let got = kd_loss_lambda(&s, &tt, &[0], 1.0, 2.0).unwrap();
        assert!((got - 4.0 * kl).abs() < 1e-10, "{got} vs {}", 4.0 * kl);
    }

    #[test]
    fn alpha_endpoints_and_errors() {
        let s = t(&[&[0.3, -1.0], &[1.0, 0.0]]);
        let labels = [1, 0];
        let ce = cross_entropy(&softmax_rows(&s).unwrap(), &labels).unwrap();
        assert_eq!(kd_loss_alpha(&s, &s, &labels, 1.0, 2.0).unwrap(), ce);
        assert_eq!(kd_loss_alpha(&s, &s, &labels, 0.0, 2.0).unwrap(), 0.0);
        assert!(kd_loss_alpha(&s, &s, &labels, 1.5, 2.0).is_err());
        assert!(kd_loss_lambda(&s, &s, &labels, 0.5, 0.0).is_err());
        assert!(kd_loss_lambda(&s, &s, &[0, 2], 0.5, 1.0).is_err());
    }

    #[test]
    fn bkd_values() {
        let s = t(&[&[1.0, 2.0]]);
        let z = t(&[&[0.0, 0.0]]);
        assert_eq!(bkd_loss(&s, &z).unwrap(), 5.0);
        assert_eq!(bkd_loss(&s, &s).unwrap(), 0.0);
        assert!(bkd_loss(&s, &t(&[&[1.0]])).is_err());
    }

    #[test]
    fn hyperparam_validation() {
        assert!(KdHyperParams::default().validate().is_ok());
        let bad = KdHyperParams { temperature: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = KdHyperParams { lambda: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = KdHyperParams { input_clip: Some((1.0, 0.0)), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
