//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use bkd::losses::{bkd_on, cross_entropy_on, kd_loss_on, kl_div_on, LossForm};
use bkd::nn::{Activation, LayerSpec, Module, Network};
use bkd::tensor::{Graph, Tensor, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_INSTANCES: usize = 50;
pub const GRADCHECK_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform draws on `±[0.05, 1.5]`, keeping clear of kinks at zero.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rand_distribution(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = rand_tensor(rng, &[rows, cols], 0.1, 1.0);
    for r in 0..rows {
        let row = t.row_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> bkd::Result<Var> + 'a;

/// Scalar objective: non-scalar outputs are contracted with fixed random
/// weights so every output element contributes.
fn objective(g: &mut Graph, build: &Builder<'_>, inputs: &[Var], weights: &Option<Tensor>) -> bkd::Result<Var> {
    let out = build(g, inputs)?;
    match weights {
        None => Ok(out),
        Some(w) => {
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv)?;
            g.sum(prod)
        }
    }
}

fn eval(build: &Builder<'_>, inputs: &[Tensor], weights: &Option<Tensor>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = objective(&mut g, build, &vars, weights).unwrap();
    g.value(loss).item()
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the tape gradient and
/// central differences, over all inputs of one instance.
pub fn gradcheck(build: &Builder<'_>, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let weights = (!g.value(out).is_scalar()).then(|| {
        let shape = g.shape(out).to_vec();
        rand_tensor(rng, &shape, -1.0, 1.0)
    });
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = objective(&mut g, build, &vars, &weights).unwrap();
    let grads = g.backward(loss).unwrap();

    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(build, &plus, &weights) - eval(build, &minus, &weights)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-10 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

pub struct GradcheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

/// Finite-difference checks for every tape primitive, the three training
/// objectives and the input gradient of a network divergence.
pub fn gradcheck_suite() -> Vec<GradcheckResult> {
    type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> f64>);
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|r| {
            let (m, k, n) = dims(r);
            let a = rand_tensor(r, &[m, k], -1.0, 1.0);
            let b = rand_tensor(r, &[k, n], -1.0, 1.0);
            gradcheck(&|g, v| g.matmul(v[0], v[1]), &[a, b], r)
        })),
        ("add", Box::new(|r| {
            let (m, n, _) = dims(r);
            let (a, b) = (rand_tensor(r, &[m, n], -1.0, 1.0), rand_tensor(r, &[m, n], -1.0, 1.0));
            gradcheck(&|g, v| g.add(v[0], v[1]), &[a, b], r)
        })),
        ("sub", Box::new(|r| {
            let (m, n, _) = dims(r);
            let (a, b) = (rand_tensor(r, &[m, n], -1.0, 1.0), rand_tensor(r, &[m, n], -1.0, 1.0));
            gradcheck(&|g, v| g.sub(v[0], v[1]), &[a, b], r)
        })),
        ("mul", Box::new(|r| {
            let (m, n, _) = dims(r);
            let (a, b) = (rand_tensor(r, &[m, n], -1.0, 1.0), rand_tensor(r, &[m, n], -1.0, 1.0));
            gradcheck(&|g, v| g.mul(v[0], v[1]), &[a, b], r)
        })),
        ("add_row", Box::new(|r| {
            let (m, n, _) = dims(r);
            let (a, b) = (rand_tensor(r, &[m, n], -1.0, 1.0), rand_tensor(r, &[n], -1.0, 1.0));
            gradcheck(&|g, v| g.add_row(v[0], v[1]), &[a, b], r)
        })),
        ("scale", Box::new(|r| {
            let (m, n, _) = dims(r);
            let c = r.gen_range(-3.0..3.0);
            let a = rand_tensor(r, &[m, n], -1.0, 1.0);
            gradcheck(&move |g, v| g.scale(v[0], c), &[a], r)
        })),
        ("tanh", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&|g, v| g.tanh(v[0]), &[a], r)
        })),
        ("relu", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_away_from_zero(r, &[m, n]);
            gradcheck(&|g, v| g.relu(v[0]), &[a], r)
        })),
        ("log", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], 0.2, 3.0);
            gradcheck(&|g, v| g.log(v[0]), &[a], r)
        })),
        ("exp", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&|g, v| g.exp(v[0]), &[a], r)
        })),
        ("clamp_min", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_away_from_zero(r, &[m, n]);
            gradcheck(&|g, v| g.clamp_min(v[0], 0.0), &[a], r)
        })),
        ("square", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&|g, v| g.square(v[0]), &[a], r)
        })),
        ("sum", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&|g, v| g.sum(v[0]), &[a], r)
        })),
        ("mean", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&|g, v| g.mean(v[0]), &[a], r)
        })),
        ("row_sums", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&|g, v| g.row_sums(v[0]), &[a], r)
        })),
        ("transpose", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&|g, v| g.transpose(v[0]), &[a], r)
        })),
        ("reshape", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&move |g, v| g.reshape(v[0], &[n, m]), &[a], r)
        })),
        ("gather_rows", Box::new(|r| {
            let (m, n, k) = dims(r);
            let idx: Vec<usize> = (0..k + 2).map(|_| r.gen_range(0..m)).collect();
            let a = rand_tensor(r, &[m, n], -2.0, 2.0);
            gradcheck(&move |g, v| g.gather_rows(v[0], &idx), &[a], r)
        })),
        ("softmax", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n + 1], -3.0, 3.0);
            gradcheck(&|g, v| g.softmax(v[0]), &[a], r)
        })),
        ("log_softmax", Box::new(|r| {
            let (m, n, _) = dims(r);
            let a = rand_tensor(r, &[m, n + 1], -3.0, 3.0);
            gradcheck(&|g, v| g.log_softmax(v[0]), &[a], r)
        })),
        ("powers", Box::new(|r| {
            let (m, d, _) = dims(r);
            let scale = r.gen_range(0.5..2.0);
            let a = rand_tensor(r, &[m, 1], -1.0, 1.0);
            gradcheck(&move |g, v| g.powers(v[0], d + 2, scale), &[a], r)
        })),
        ("cross_entropy", Box::new(|r| {
            let (m, n, _) = dims(r);
            let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..n + 1)).collect();
            let p = rand_distribution(r, m, n + 1);
            gradcheck(&move |g, v| cross_entropy_on(g, v[0], &labels), &[p], r)
        })),
        ("kl_div", Box::new(|r| {
            let (m, n, _) = dims(r);
            let (p, q) = (rand_distribution(r, m, n + 1), rand_distribution(r, m, n + 1));
            gradcheck(&|g, v| kl_div_on(g, v[0], v[1]), &[p, q], r)
        })),
        ("kd_loss_lambda", Box::new(|r| kd_case(r, LossForm::Lambda))),
        ("kd_loss_alpha", Box::new(|r| kd_case(r, LossForm::Alpha))),
        ("bkd_loss", Box::new(|r| {
            let (m, n, _) = dims(r);
            let (s, t) = (rand_tensor(r, &[m, n], -3.0, 3.0), rand_tensor(r, &[m, n], -3.0, 3.0));
            gradcheck(&|g, v| bkd_on(g, v[0], v[1]), &[s, t], r)
        })),
        ("network_input_divergence", Box::new(|r| {
            let (m, d, h) = dims(r);
            let act = if r.gen_bool(0.5) { Activation::Tanh } else { Activation::Identity };
            let s = Network::init(&LayerSpec::chain(&[d, h + 1, 3], act), r.gen()).unwrap();
            let t = Network::init(&LayerSpec::chain(&[d, h + 3, 3], Activation::Tanh), r.gen()).unwrap();
            let x = rand_tensor(r, &[m, d], -1.0, 1.0);
            gradcheck(
                &move |g, v| {
                    let sp = s.bind(g, false);
                    let tp = t.bind(g, false);
                    let so = s.forward_on(g, &sp, v[0])?;
                    let to = t.forward_on(g, &tp, v[0])?;
                    bkd_on(g, so, to)
                },
                &[x],
                r,
            )
        })),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut r = rng(1000 + i as u64);
            let max_rel_err = (0..GRADCHECK_INSTANCES).map(|_| case(&mut r)).fold(0.0, f64::max);
            GradcheckResult {
                name,
                instances: GRADCHECK_INSTANCES,
                max_rel_err,
            }
        })
        .collect()
}

fn kd_case(r: &mut ChaCha8Rng, form: LossForm) -> f64 {
    let (m, n, _) = dims(r);
    let c = n + 1;
    let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..c)).collect();
    let weight = r.gen_range(0.05..0.95);
    let tau = r.gen_range(0.5..4.0);
    let teacher = rand_distribution(r, m, c);
    let logits = rand_tensor(r, &[m, c], -3.0, 3.0);
    gradcheck(
        &move |g, v| kd_loss_on(g, form, weight, tau, v[0], &teacher, Some(&labels)),
        &[logits],
        r,
    )
}

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub struct TransformOracle {
    pub pairs: usize,
    /// Largest `|‖QW_S − W_T‖_F − ‖Q*W_S − W_T‖_F|` against the SVD solution.
    pub max_residual_gap: f64,
    /// Largest entry-wise gap to `W_T·W_S⁻¹` over the square cases.
    pub max_square_gap: f64,
}

/// Compares the Cholesky transform with nalgebra's SVD least squares on
/// random wide pairs, and with the explicit inverse on square ones.
pub fn transform_oracle(pairs: usize) -> TransformOracle {
    let mut r = rng(77);
    let mut max_residual_gap: f64 = 0.0;
    let mut max_square_gap: f64 = 0.0;
    for _ in 0..pairs {
        let d1 = r.gen_range(1..6);
        let d2 = r.gen_range(1..9);
        let v = r.gen_range(d1..d1 + 15);
        let ws = rand_tensor(&mut r, &[d1, v], -1.0, 1.0);
        let wt = rand_tensor(&mut r, &[d2, v], -1.0, 1.0);
        let q = bkd::auxgen::compute_transform(&ws, &wt).unwrap();
        let (ws_n, wt_n, q_n) = (to_na(&ws), to_na(&wt), to_na(&q.q));
        // Q* = argmin ‖Q W_S − W_T‖_F  ⇔  W_Sᵀ Q*ᵀ = W_Tᵀ in the least-squares sense.
        let svd = ws_n.transpose().svd(true, true);
        let oracle = svd.solve(&wt_n.transpose(), 1e-14).unwrap().transpose();
        let ours = (&q_n * &ws_n - &wt_n).norm();
        let theirs = (&oracle * &ws_n - &wt_n).norm();
        max_residual_gap = max_residual_gap.max((ours - theirs).abs());

        let ws_sq = rand_tensor(&mut r, &[d1, d1], -1.0, 1.0);
        let ws_sq_n = to_na(&ws_sq);
        if ws_sq_n.clone().svd(false, false).singular_values.min() < 1e-2 {
            continue;
        }
        let wt_sq = rand_tensor(&mut r, &[d2, d1], -1.0, 1.0);
        let q = bkd::auxgen::compute_transform(&ws_sq, &wt_sq).unwrap();
        let exact = to_na(&wt_sq) * ws_sq_n.try_inverse().unwrap();
        let gap = (to_na(&q.q) - exact).abs().max();
        max_square_gap = max_square_gap.max(gap);
    }
    TransformOracle {
        pairs,
        max_residual_gap,
        max_square_gap,
    }
}

/// MNIST directory from `MNIST_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}
