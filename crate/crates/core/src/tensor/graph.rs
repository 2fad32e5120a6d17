use std::collections::BTreeMap;

use super::{gemm, MatRef, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    Powers(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so replaying backwards in index
/// order is a valid reverse topological sweep. One graph is meant to be
/// driven from a single thread; independent graphs can run concurrently.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_leaf.remove(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_leaf.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`m` bias to every row of an `[n×m]` matrix. This is the
    /// only broadcasting primitive.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let (_, m) = x.as_matrix("add_row")?;
        if b.shape() != [m] {
            return Err(Error::dim("add_row", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let value = Tensor::new(x.shape(), data)?;
        self.push("add_row", value, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `[n×c] -> [n]`, summing each row.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.as_matrix("row_sums")?;
        let data = x.data().chunks(c).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(&[n], data)?;
        self.push("row_sums", value, Op::RowSums(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::dim("reshape", x.shape(), shape));
        }
        let value = x.reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Row lookup: `out[r] = table[idx[r]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(table).select_rows(idx)?;
        self.push("gather_rows", value, Op::GatherRows(table, idx.to_vec()), &[table])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.as_matrix("softmax")?;
        let value = super::softmax_rows(x)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, c) = x.as_matrix("log_softmax")?;
        if !x.all_finite() {
            return Err(Error::NonFinite("log_softmax"));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(x.shape(), data)?;
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    /// Monomial features: `[n×1] -> [n×(degree+1)]` with
    /// `out[i][j] = (x_i / scale)^j`.
    pub fn powers(&mut self, a: Var, degree: usize, scale: f64) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.as_matrix("powers")?;
        if c != 1 {
            return Err(Error::dim("powers", x.shape(), &[n, 1]));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidParam(format!("feature scale must be positive, got {scale}")));
        }
        let w = degree + 1;
        let mut data = vec![0.0; n * w];
        for (i, &xi) in x.data().iter().enumerate() {
            let u = xi / scale;
            let mut p = 1.0;
            for j in 0..w {
                data[i * w + j] = p;
                p *= u;
            }
        }
        let value = Tensor::new(&[n, w], data)?;
        self.push("powers", value, Op::Powers(a, scale), &[a])
    }

    /// Reverse sweep from a scalar. Every leaf created with `requires_grad`
    /// gets an entry, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut by_leaf = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_leaf.insert(Var(i), Tensor::new(node.value.shape(), data)?);
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, MatRef::row_major(g, n), MatRef::transposed(bd, n), da, true);
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, MatRef::transposed(ad, k), MatRef::row_major(g, n), db, true);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |i| g[i] * z[i]);
                self.acc(grads, *b, |i| g[i] * x[i]);
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, |i| g[i]);
                if self.wants(*bias) {
                    let m = self.value(*bias).len();
                    let db = slot(grads, *bias, m);
                    for row in g.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, |i| g[i] * c),
            Op::Tanh(a) => self.acc(grads, *a, |i| g[i] * (1.0 - y[i] * y[i])),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |i| if x[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |i| g[i] / x[i])
            }
            Op::Exp(a) => self.acc(grads, *a, |i| g[i] * y[i]),
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |i| if x[i] > *floor { g[i] } else { 0.0 })
            }
            Op::Sum(a) => self.acc(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |_| g[0] / n)
            }
            Op::RowSums(a) => {
                let c = self.value(*a).cols();
                self.acc(grads, *a, |i| g[i / c])
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                // g is [c×r]; element (i, j) of the input maps to g[j*r + i].
                self.acc(grads, *a, |idx| g[(idx % c) * r + idx / c])
            }
            Op::Reshape(a) => self.acc(grads, *a, |i| g[i]),
            Op::GatherRows(table, idx) => {
                if self.wants(*table) {
                    let t = self.value(*table);
                    let d = t.cols();
                    let dt = slot(grads, *table, t.len());
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[src * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, |i| dx[i])
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.acc(grads, *a, |i| dx[i])
            }
            Op::Powers(a, scale) => {
                let w = node.value.cols();
                self.acc(grads, *a, |i| {
                    let row = &y[i * w..(i + 1) * w];
                    let grow = &g[i * w..(i + 1) * w];
                    (1..w).map(|j| grow[j] * j as f64 * row[j - 1]).sum::<f64>() / scale
                })
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        let n = self.value(v).len();
        let dst = slot(grads, v, n);
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(i);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2, 3], vec![0.5; 6]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn untouched_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.param(Tensor::new(&[3], vec![1.0; 3]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_have_no_gradient_entry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let w = g.param(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let p = g.mul(x, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        assert!(matches!(g.log(x), Err(Error::NonFinite("log"))));
    }

    #[test]
    fn add_row_rejects_wrong_bias() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.add_row(x, b), Err(Error::Dimension { .. })));
    }
}
