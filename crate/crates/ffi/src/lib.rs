//! C interface to `bkd`.
//!
//! Models and datasets are opaque handles created by `bkd_*_new` / `bkd_*_load`
//! and released with the matching `*_free`. Every fallible call returns a
//! [`BkdStatus`]; on failure `bkd_last_error()` describes the most recent
//! error on the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bkd::auxgen::{self, AscentConfig, OutputKind};
use bkd::data::{self, Dataset, Inputs, Targets};
use bkd::distill::{self, Student};
use bkd::losses::{AuxRetention, DivergenceSpace, KdHyperParams};
use bkd::nn::{self, Activation, LayerSpec, Model, Network, PolynomialModel};
use bkd::tensor::Tensor;
use bkd::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BkdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Format = 4,
    Io = 5,
    Numeric = 6,
    EmptyDataset = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BkdModelKind {
    Mlp = 0,
    Polynomial = 1,
    Embedding = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BkdActivation {
    Relu = 0,
    Tanh = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BkdMode {
    Scratch = 0,
    VanillaKd = 1,
    BackwardKd = 2,
}

/// Training hyperparameters. Start from `bkd_params_default()`.
///
/// `clip_lo > clip_hi` disables input clipping.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct BkdParams {
    pub lambda: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub perturb_rate: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub train_epochs: u32,
    pub hyper_epochs: u32,
    pub perturb_steps: u32,
    pub batch_size: u32,
    pub seed: u64,
    /// Nonzero keeps auxiliary samples from every round.
    pub accumulate_aux: u8,
    /// Nonzero measures the gap on probabilities instead of logits.
    pub probability_space: u8,
}

/// Opaque model handle.
pub struct BkdModel(Model);

/// Opaque dataset handle.
pub struct BkdDataset(Dataset);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BkdStatus {
    match e {
        Error::Dimension { .. } => BkdStatus::Dimension,
        Error::NonFinite(_) | Error::Singular { .. } | Error::Diverged(_) => BkdStatus::Numeric,
        Error::Contract(_) | Error::InvalidParam(_) | Error::Config(_) | Error::ConfigLine { .. } => {
            BkdStatus::InvalidArgument
        }
        Error::Format(_) => BkdStatus::Format,
        Error::EmptyDataset => BkdStatus::EmptyDataset,
        Error::File { .. } | Error::Io(_) => BkdStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BkdStatus::Ok,
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("null pointer passed for `{name}`"));
            BkdStatus::NullArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            BkdStatus::Panic
        }
    }
}

unsafe fn req<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

unsafe fn req_mut<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidParam("path is not valid UTF-8".into())))
}

fn out<T>(dst: *mut T, v: T, name: &'static str) -> Result<(), Fail> {
    if dst.is_null() {
        return Err(Fail::Null(name));
    }
    // SAFETY: checked non-null; the caller guarantees it points to writable storage.
    unsafe { dst.write(v) };
    Ok(())
}

fn boxed<T>(dst: *mut *mut T, v: T) -> Result<(), Fail> {
    out(dst, Box::into_raw(Box::new(v)), "out")
}

fn student(m: &Model) -> &dyn Student {
    match m {
        Model::Mlp(n) => n,
        Model::Polynomial(p) => p,
        Model::Embedding(e) => e,
    }
}

impl BkdParams {
    fn to_kd(self) -> KdHyperParams {
        KdHyperParams {
            lambda: self.lambda,
            temperature: self.temperature,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            perturb_rate: self.perturb_rate,
            input_clip: (self.clip_lo <= self.clip_hi).then_some((self.clip_lo, self.clip_hi)),
            train_epochs: self.train_epochs as usize,
            hyper_epochs: self.hyper_epochs as usize,
            perturb_steps: self.perturb_steps as usize,
            batch_size: self.batch_size as usize,
            seed: self.seed,
            aux_retention: if self.accumulate_aux != 0 {
                AuxRetention::Accumulate
            } else {
                AuxRetention::ResetEachHyperEpoch
            },
            divergence_space: if self.probability_space != 0 {
                DivergenceSpace::Probabilities
            } else {
                DivergenceSpace::Logits
            },
            ..KdHyperParams::default()
        }
    }
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bkd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn bkd_params_default() -> BkdParams {
    let d = KdHyperParams::default();
    BkdParams {
        lambda: d.lambda,
        temperature: d.temperature,
        learning_rate: d.learning_rate,
        momentum: d.momentum,
        perturb_rate: d.perturb_rate,
        clip_lo: 1.0,
        clip_hi: 0.0,
        train_epochs: d.train_epochs as u32,
        hyper_epochs: d.hyper_epochs as u32,
        perturb_steps: d.perturb_steps as u32,
        batch_size: d.batch_size as u32,
        seed: d.seed,
        accumulate_aux: 0,
        probability_space: 0,
    }
}

/// Creates an MLP with layer widths `widths[0..n_widths]` (input first).
///
/// # Safety
/// `widths` must point to `n_widths` values and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn bkd_mlp_new(
    widths: *const usize,
    n_widths: usize,
    activation: BkdActivation,
    seed: u64,
    out: *mut *mut BkdModel,
) -> BkdStatus {
    guard(|| {
        let w = slice(widths, n_widths, "widths")?;
        let act = match activation {
            BkdActivation::Relu => Activation::Relu,
            BkdActivation::Tanh => Activation::Tanh,
        };
        if w.len() < 2 {
            return Err(Error::InvalidParam("an MLP needs at least two widths".into()).into());
        }
        let net = Network::init(&LayerSpec::chain(w, act), seed)?;
        boxed(out, BkdModel(Model::Mlp(net)))
    })
}

/// Creates a polynomial regressor with explicit coefficients (constant term first).
///
/// # Safety
/// `coefficients` must point to `n` values and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn bkd_polynomial_new(
    coefficients: *const f64,
    n: usize,
    scale: f64,
    out: *mut *mut BkdModel,
) -> BkdStatus {
    guard(|| {
        let c = slice(coefficients, n, "coefficients")?;
        let p = PolynomialModel::new(c.to_vec(), scale)?;
        boxed(out, BkdModel(Model::Polynomial(p)))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bkd_model_load(path_: *const c_char, out: *mut *mut BkdModel) -> BkdStatus {
    guard(|| boxed(out, BkdModel(nn::load(path(path_)?)?)))
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bkd_model_save(model: *const BkdModel, path_: *const c_char) -> BkdStatus {
    guard(|| Ok(nn::save(&req(model, "model")?.0, path(path_)?)?))
}

/// Duplicates a model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bkd_model_clone(model: *const BkdModel, out: *mut *mut BkdModel) -> BkdStatus {
    guard(|| boxed(out, BkdModel(req(model, "model")?.0.clone())))
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bkd_model_free(model: *mut BkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model kind, input width, output width and parameter count.
/// Any output pointer may be NULL.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bkd_model_info(
    model: *const BkdModel,
    kind: *mut BkdModelKind,
    in_dim: *mut usize,
    out_dim: *mut usize,
    param_count: *mut usize,
) -> BkdStatus {
    guard(|| {
        let m = &req(model, "model")?.0;
        let k = match m.kind() {
            nn::ModelKind::Mlp => BkdModelKind::Mlp,
            nn::ModelKind::Polynomial => BkdModelKind::Polynomial,
            nn::ModelKind::Embedding => BkdModelKind::Embedding,
        };
        let module = m.as_module();
        for (dst, v) in [(in_dim, module.in_dim()), (out_dim, module.out_dim()), (param_count, m.param_count())] {
            if !dst.is_null() {
                dst.write(v);
            }
        }
        if !kind.is_null() {
            kind.write(k);
        }
        Ok(())
    })
}

/// Forward pass on `rows` row-major inputs of the model's input width. Writes
/// `rows * out_dim` outputs.
///
/// # Safety
/// `x` must hold `rows * in_dim` values and `y` room for `rows * out_dim`.
#[no_mangle]
pub unsafe extern "C" fn bkd_model_forward(
    model: *const BkdModel,
    x: *const f64,
    rows: usize,
    y: *mut f64,
    y_len: usize,
) -> BkdStatus {
    guard(|| {
        let m = req(model, "model")?.0.as_module();
        let x = Tensor::new(&[rows, m.in_dim()], slice(x, rows * m.in_dim(), "x")?.to_vec())?;
        let r = m.forward(&x)?;
        write_into(r.data(), y, y_len, "y")
    })
}

unsafe fn write_into(src: &[f64], dst: *mut f64, len: usize, name: &'static str) -> Result<(), Fail> {
    if len != src.len() {
        return Err(Error::Dimension { op: name, lhs: vec![len], rhs: vec![src.len()] }.into());
    }
    if len > 0 {
        if dst.is_null() {
            return Err(Fail::Null(name));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    }
    Ok(())
}

/// Builds a classification dataset from `rows` row-major feature vectors.
///
/// # Safety
/// `x` must hold `rows * cols` values and `labels` `rows` values.
#[no_mangle]
pub unsafe extern "C" fn bkd_dataset_classification(
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *const u32,
    classes: usize,
    out: *mut *mut BkdDataset,
) -> BkdStatus {
    guard(|| {
        if rows == 0 {
            return Err(Error::EmptyDataset.into());
        }
        let x = Tensor::new(&[rows, cols], slice(x, rows * cols, "x")?.to_vec())?;
        let labels = slice(labels, rows, "labels")?.iter().map(|&l| l as usize).collect();
        let ds = Dataset::new(Inputs::Dense(x), Targets::Classes { labels, classes }, "ffi")?;
        boxed(out, BkdDataset(ds))
    })
}

/// Builds a regression dataset with `out_cols` targets per row.
///
/// # Safety
/// `x` must hold `rows * cols` values and `y` `rows * out_cols` values.
#[no_mangle]
pub unsafe extern "C" fn bkd_dataset_regression(
    x: *const f64,
    rows: usize,
    cols: usize,
    y: *const f64,
    out_cols: usize,
    out: *mut *mut BkdDataset,
) -> BkdStatus {
    guard(|| {
        if rows == 0 {
            return Err(Error::EmptyDataset.into());
        }
        let x = Tensor::new(&[rows, cols], slice(x, rows * cols, "x")?.to_vec())?;
        let y = Tensor::new(&[rows, out_cols], slice(y, rows * out_cols, "y")?.to_vec())?;
        let ds = Dataset::new(Inputs::Dense(x), Targets::Values(y), "ffi")?;
        boxed(out, BkdDataset(ds))
    })
}

/// Loads a dataset written by `bkd gen-aux` or `bkd_dataset_save`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bkd_dataset_load(path_: *const c_char, out: *mut *mut BkdDataset) -> BkdStatus {
    guard(|| boxed(out, BkdDataset(data::load_dataset(path(path_)?)?)))
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bkd_dataset_save(ds: *const BkdDataset, path_: *const c_char) -> BkdStatus {
    guard(|| Ok(data::save_dataset(&req(ds, "dataset")?.0, path(path_)?)?))
}

/// Number of rows, or 0 for a NULL handle.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bkd_dataset_len(ds: *const BkdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bkd_dataset_free(ds: *mut BkdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains `student` in place. `teacher` may be NULL for `Scratch`; `eval` may
/// be NULL. Writes the final evaluation loss and accuracy (NaN for regression)
/// when the pointers are non-NULL and an eval set is given.
///
/// # Safety
/// All non-NULL handles must be live; `student` must not alias `teacher`.
#[no_mangle]
pub unsafe extern "C" fn bkd_train(
    mode: BkdMode,
    student: *mut BkdModel,
    teacher: *const BkdModel,
    train: *const BkdDataset,
    eval: *const BkdDataset,
    params: *const BkdParams,
    eval_loss: *mut f64,
    eval_accuracy: *mut f64,
) -> BkdStatus {
    guard(|| {
        let s = &mut req_mut(student, "student")?.0;
        let train = &req(train, "train")?.0;
        let p = req(params, "params")?.to_kd();
        let eval = eval.as_ref().map(|d| &d.0);
        let teacher = match mode {
            BkdMode::Scratch => None,
            _ => Some(&req(teacher, "teacher")?.0),
        };
        let report = match (s, teacher) {
            (Model::Mlp(s), t) => run(mode, s, t, train, eval, &p)?,
            (Model::Polynomial(s), t) => run(mode, s, t, train, eval, &p)?,
            (Model::Embedding(s), Some(Model::Embedding(t))) if mode == BkdMode::BackwardKd => {
                distill::backward_kd_embedding(s, t, train, &p, eval)?
            }
            (Model::Embedding(s), t) => run(mode, s, t, train, eval, &p)?,
        };
        if let Some(m) = report.final_metrics {
            if !eval_loss.is_null() {
                eval_loss.write(m.loss);
            }
            if !eval_accuracy.is_null() {
                eval_accuracy.write(m.accuracy.unwrap_or(f64::NAN));
            }
        }
        Ok(())
    })
}

fn run<S: Student>(
    mode: BkdMode,
    s: &mut S,
    teacher: Option<&Model>,
    train: &Dataset,
    eval: Option<&Dataset>,
    p: &KdHyperParams,
) -> bkd::Result<distill::TrainReport> {
    match (mode, teacher) {
        (BkdMode::Scratch, _) => distill::train_scratch(s, train, p, eval),
        (BkdMode::VanillaKd, Some(t)) => distill::vanilla_kd(s, student(t), train, p, eval),
        (BkdMode::BackwardKd, Some(t)) => distill::backward_kd(s, student(t), train, p, eval),
        (_, None) => Err(Error::Contract("teacher required".into())),
    }
}

/// Evaluates `model` on `ds`. Accuracy is NaN for regression data.
///
/// # Safety
/// Handles must be live and output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn bkd_evaluate(
    model: *const BkdModel,
    ds: *const BkdDataset,
    loss: *mut f64,
    accuracy: *mut f64,
) -> BkdStatus {
    guard(|| {
        let m = distill::evaluate(student(&req(model, "model")?.0), &req(ds, "dataset")?.0)?;
        out(loss, m.loss, "loss")?;
        out(accuracy, m.accuracy.unwrap_or(f64::NAN), "accuracy")
    })
}

/// Moves each input row uphill on the student/teacher output gap and writes
/// the perturbed rows to `x_out` and the per-row gap before and after.
/// `temperature <= 0` treats the models as regressors.
///
/// # Safety
/// `x` and `x_out` must hold `rows * in_dim` values; `before` and `after`
/// must each hold `rows` values or be NULL.
#[no_mangle]
pub unsafe extern "C" fn bkd_generate_auxiliary(
    student_: *const BkdModel,
    teacher: *const BkdModel,
    x: *const f64,
    rows: usize,
    params: *const BkdParams,
    temperature: f64,
    x_out: *mut f64,
    before: *mut f64,
    after: *mut f64,
) -> BkdStatus {
    guard(|| {
        let s = &req(student_, "student")?.0;
        let t = &req(teacher, "teacher")?.0;
        let p = req(params, "params")?.to_kd();
        if s.kind() == nn::ModelKind::Embedding || t.kind() == nn::ModelKind::Embedding {
            return Err(Error::Contract("auxiliary generation over the C API takes dense models".into()).into());
        }
        let d = s.as_module().in_dim();
        let x = Tensor::new(&[rows, d], slice(x, rows * d, "x")?.to_vec())?;
        let cfg = AscentConfig::new(p.perturb_rate, p.perturb_steps)
            .with_clip(p.input_clip)
            .with_space(p.divergence_space);
        let kind = if temperature > 0.0 {
            OutputKind::Classification { temperature }
        } else {
            OutputKind::Regression
        };
        let aux = auxgen::generate_auxiliary(&x, s.as_module(), t.as_module(), &cfg, kind)?;
        write_into(aux.inputs.data(), x_out, rows * d, "x_out")?;
        if !before.is_null() {
            write_into(&aux.divergence_before, before, rows, "before")?;
        }
        if !after.is_null() {
            write_into(&aux.divergence, after, rows, "after")?;
        }
        Ok(())
    })
}
