//! Model definitions: fully connected networks, polynomial regressors and
//! embedding-headed token classifiers.

mod checkpoint;

pub use checkpoint::{load, save, read_model, write_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Rows per chunk for untracked inference; bounds intermediate memory.
const INFERENCE_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            _ => Err(Error::Format(format!("unknown activation code {code}"))),
        }
    }

    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            _ => Err(Error::InvalidParam(format!("unknown activation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    /// Hidden layers use `hidden`, the output layer is linear.
    pub fn chain(widths: &[usize], hidden: Activation) -> Vec<LayerSpec> {
        let last = widths.len().saturating_sub(2);
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { hidden };
                LayerSpec::new(w[0], w[1], act)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// How a model's parameters were initialized; persisted in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in ±1/√fan_in, drawn from ChaCha8 with the given seed.
    UniformFanIn { seed: u64 },
    /// Built from explicit values.
    Explicit,
}

/// Differentiable function of a dense `[batch × in_dim]` input.
pub trait Module {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records the forward pass for `x` on `g` using previously bound `params`.
    fn forward_on(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var>;

    /// Puts the parameters on `g`, differentiable when `trainable`.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Untracked forward pass.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(self.in_dim(), x)?;
        let n = x.rows();
        let mut outs = Vec::new();
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = if start == 0 && end == n {
                x.clone()
            } else {
                x.select_rows(&idx)?
            };
            let mut g = Graph::new();
            let params = self.bind(&mut g, false);
            let input = g.constant(chunk);
            let out = self.forward_on(&mut g, &params, input)?;
            outs.push(g.value(out).clone());
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        Tensor::concat_rows(&refs)
    }
}

fn check_input(in_dim: usize, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != in_dim {
        return Err(Error::dim("forward", x.shape(), &[x.rows(), in_dim]));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

/// Fully connected network; weights are `[out × in]`, `y = x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub init: InitScheme,
}

impl Network {
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_chain(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.in_dim as f64).sqrt();
                Layer {
                    spec: *s,
                    weight: uniform(&mut rng, &[s.out_dim, s.in_dim], bound),
                    bias: uniform(&mut rng, &[s.out_dim], bound),
                }
            })
            .collect();
        Ok(Self {
            layers,
            init: InitScheme::UniformFanIn { seed },
        })
    }

    /// Builds a network from explicit layers, checking shapes.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_chain(&specs)?;
        for l in &layers {
            if l.weight.shape() != [l.spec.out_dim, l.spec.in_dim] || l.bias.shape() != [l.spec.out_dim] {
                return Err(Error::dim("layer", l.weight.shape(), &[l.spec.out_dim, l.spec.in_dim]));
            }
        }
        Ok(Self {
            layers,
            init: InitScheme::Explicit,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }
}

fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidParam("network needs at least one layer".into()));
    }
    for s in specs {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidParam(format!("layer dims must be positive: {s:?}")));
        }
    }
    for w in specs.windows(2) {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::InvalidParam(format!(
                "layer dims do not chain: {} -> {}",
                w[0].out_dim, w[1].in_dim
            )));
        }
    }
    Ok(())
}

impl Module for Network {
    fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn forward_on(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.in_dim() {
            return Err(Error::dim("forward", g.shape(x), &[g.shape(x)[0], self.in_dim()]));
        }
        let mut h = x;
        for (layer, p) in self.layers.iter().zip(params.chunks(2)) {
            let wt = g.transpose(p[0])?;
            let z = g.matmul(h, wt)?;
            let z = g.add_row(z, p[1])?;
            h = layer.spec.activation.apply(g, z)?;
        }
        Ok(h)
    }
}

/// `y = Σ_j c_j (x / scale)^j` over a single scalar input.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialModel {
    /// `[degree+1 × 1]`
    pub coefficients: Tensor,
    pub scale: f64,
    pub init: InitScheme,
}

impl PolynomialModel {
    pub fn new(coefficients: Vec<f64>, scale: f64) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::InvalidParam("polynomial needs at least one coefficient".into()));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParam(format!("feature scale must be positive, got {scale}")));
        }
        let n = coefficients.len();
        Ok(Self {
            coefficients: Tensor::new(&[n, 1], coefficients)?,
            scale,
            init: InitScheme::Explicit,
        })
    }

    pub fn init(degree: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / ((degree + 1) as f64).sqrt();
        let mut m = Self::new(vec![0.0; degree + 1], scale)?;
        m.coefficients = uniform(&mut rng, &[degree + 1, 1], bound);
        m.init = InitScheme::UniformFanIn { seed };
        Ok(m)
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Direct evaluation at a single point (Horner).
    pub fn eval(&self, x: f64) -> f64 {
        let u = x / self.scale;
        self.coefficients
            .data()
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * u + c)
    }
}

impl Module for PolynomialModel {
    fn in_dim(&self) -> usize {
        1
    }

    fn out_dim(&self) -> usize {
        1
    }

    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.coefficients]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.coefficients]
    }

    fn forward_on(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let feats = g.powers(x, self.degree(), self.scale)?;
        g.matmul(feats, params[0])
    }
}

/// Token classifier: embedding matrix `W [d × |V|]` followed by an MLP over
/// the concatenated embeddings of a fixed-length sequence.
///
/// As a [`Module`] it takes embedding vectors `z` (`[batch × d·seq_len]`)
/// directly; the first bound parameter is `W`, which that path leaves unused.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub embedding: Tensor,
    pub seq_len: usize,
    pub head: Network,
}

impl EmbeddingModel {
    pub fn init(vocab: usize, embed_dim: usize, seq_len: usize, hidden: &[usize], classes: usize, activation: Activation, seed: u64) -> Result<Self> {
        if vocab == 0 || embed_dim == 0 || seq_len == 0 {
            return Err(Error::InvalidParam("vocab, embedding dim and sequence length must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = uniform(&mut rng, &[embed_dim, vocab], 1.0);
        let mut widths = vec![embed_dim * seq_len];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let head = Network::init(&LayerSpec::chain(&widths, activation), rng.gen())?;
        Ok(Self {
            embedding,
            seq_len,
            head: Network {
                init: InitScheme::UniformFanIn { seed },
                ..head
            },
        })
    }

    pub fn new(embedding: Tensor, seq_len: usize, head: Network) -> Result<Self> {
        let (d, _) = embedding.as_matrix("embedding")?;
        if head.in_dim() != d * seq_len {
            return Err(Error::dim("embedding head", &[d * seq_len], &[head.in_dim()]));
        }
        Ok(Self {
            embedding,
            seq_len,
            head,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.shape()[0]
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<usize> {
        if ids.is_empty() || ids.len() % self.seq_len != 0 {
            return Err(Error::dim("tokens", &[ids.len()], &[self.seq_len]));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::InvalidParam(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        Ok(ids.len() / self.seq_len)
    }

    /// Records lookup + head for flattened token ids (`n · seq_len` of them).
    pub fn forward_tokens_on(&self, g: &mut Graph, params: &[Var], ids: &[usize]) -> Result<Var> {
        let z = self.embed_on(g, params[0], ids)?;
        self.head.forward_on(g, &params[1..], z)
    }

    /// Records `z = [W·onehot(x_1), …, W·onehot(x_L)]` per sequence.
    pub fn embed_on(&self, g: &mut Graph, embedding: Var, ids: &[usize]) -> Result<Var> {
        let n = self.check_tokens(ids)?;
        let table = g.transpose(embedding)?;
        let rows = g.gather_rows(table, ids)?;
        g.reshape(rows, &[n, self.seq_len * self.embed_dim()])
    }

    /// Untracked embedding lookup, `[n × d·seq_len]`.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let n = self.check_tokens(ids)?;
        let d = self.embed_dim();
        let v = self.vocab_size();
        let w = self.embedding.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &t in ids {
            out.extend((0..d).map(|k| w[k * v + t]));
        }
        Tensor::new(&[n, self.seq_len * d], out)
    }

    pub fn forward_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let z = self.embed(ids)?;
        self.head.forward(&z)
    }

    /// Head applied to precomputed embedding vectors.
    pub fn forward_from_embedding(&self, z: &Tensor) -> Result<Tensor> {
        self.head.forward(z)
    }
}

impl Module for EmbeddingModel {
    fn in_dim(&self) -> usize {
        self.head.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.embedding];
        p.extend(self.head.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.embedding];
        p.extend(self.head.parameters_mut());
        p
    }

    fn forward_on(&self, g: &mut Graph, params: &[Var], z: Var) -> Result<Var> {
        self.head.forward_on(g, &params[1..], z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Polynomial,
    Embedding,
}

/// Any model that can be stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Mlp(Network),
    Polynomial(PolynomialModel),
    Embedding(EmbeddingModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Mlp(_) => ModelKind::Mlp,
            Model::Polynomial(_) => ModelKind::Polynomial,
            Model::Embedding(_) => ModelKind::Embedding,
        }
    }

    pub fn param_count(&self) -> usize {
        self.as_module().param_count()
    }

    pub fn as_module(&self) -> &dyn Module {
        match self {
            Model::Mlp(m) => m,
            Model::Polynomial(m) => m,
            Model::Embedding(m) => m,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_teacher() -> Network {
        Network::init(&LayerSpec::chain(&[784, 800, 10], Activation::Relu), 0).unwrap()
    }

    #[test]
    fn mnist_parameter_counts() {
        assert_eq!(mnist_teacher().param_count(), 636010);
        let student = Network::init(&LayerSpec::chain(&[784, 5, 10], Activation::Relu), 0).unwrap();
        assert_eq!(student.param_count(), 3985);
    }

    #[test]
    fn zero_network_outputs_bias() {
        let mut net = Network::init(&LayerSpec::chain(&[3, 4, 2], Activation::Relu), 1).unwrap();
        for p in net.parameters_mut() {
            p.data_mut().fill(0.0);
        }
        net.layers[1].bias.data_mut().copy_from_slice(&[0.5, -1.0]);
        let y = net.forward(&Tensor::filled(&[2, 3], 7.0)).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn polynomial_direct_arithmetic() {
        let p = PolynomialModel::new(vec![1.0, 0.0, 2.0], 1.0).unwrap();
        let y = p.forward(&Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[19.0]);
        assert_eq!(p.eval(3.0), 19.0);
    }

    #[test]
    fn init_is_deterministic() {
        let specs = LayerSpec::chain(&[6, 5, 3], Activation::Tanh);
        assert_eq!(Network::init(&specs, 9).unwrap(), Network::init(&specs, 9).unwrap());
        assert_ne!(Network::init(&specs, 9).unwrap(), Network::init(&specs, 10).unwrap());
        for l in Network::init(&specs, 9).unwrap().layers {
            let bound = 1.0 / (l.spec.in_dim as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn bad_chain_rejected() {
        let specs = [LayerSpec::new(3, 4, Activation::Relu), LayerSpec::new(5, 2, Activation::Identity)];
        assert!(Network::init(&specs, 0).is_err());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Network::init(&LayerSpec::chain(&[3, 2], Activation::Relu), 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 4])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn chunked_forward_matches_single_pass() {
        let net = Network::init(&LayerSpec::chain(&[2, 3, 2], Activation::Tanh), 4).unwrap();
        let n = INFERENCE_CHUNK + 5;
        let x = Tensor::new(&[n, 2], (0..2 * n).map(|i| (i as f64 * 0.001).sin()).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let xv = g.constant(x);
        let out = net.forward_on(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(out), &y);
    }

    #[test]
    fn embedding_lookup_matches_onehot_product() {
        let m = EmbeddingModel::init(6, 3, 2, &[4], 2, Activation::Relu, 5).unwrap();
        let ids = [1usize, 4, 0, 5];
        let z = m.embed(&ids).unwrap();
        let mut onehot = Tensor::zeros(&[6, 1]);
        onehot.data_mut()[4] = 1.0;
        let col = m.embedding.matmul(&onehot).unwrap();
        assert_eq!(&z.row(0)[3..6], col.data());
        let a = m.forward_tokens(&ids).unwrap();
        let b = m.forward_from_embedding(&z).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(m.embed(&[6, 0]).is_err());
        assert!(m.embed(&[1, 2, 3]).is_err());
    }

    #[test]
    fn embedding_param_count_includes_matrix() {
        let m = EmbeddingModel::init(20, 4, 4, &[8], 2, Activation::Relu, 0).unwrap();
        assert_eq!(m.param_count(), 4 * 20 + (16 * 8 + 8) + (8 * 2 + 2));
    }
}
