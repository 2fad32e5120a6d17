//! Binary checkpoint container.
//!
//! ```text
//! magic    4 bytes  "BKD1"
//! version  u8       1
//! kind     u8       0 = mlp, 1 = polynomial, 2 = embedding
//! init     u8       0 = uniform ±1/√fan_in, 1 = explicit values
//! seed     u64
//! body     kind-specific, see below
//! ```
//!
//! All integers and floats are little-endian; floats are raw IEEE-754 f64 so
//! a round trip is bit-exact.
//!
//! - mlp: `u32 layers`, then per layer `u32 in, u32 out, u8 activation`,
//!   then per layer the weight (`out×in`, row-major) followed by the bias.
//! - polynomial: `u32 degree, f64 scale`, then `degree+1` coefficients.
//! - embedding: `u32 vocab, u32 dim, u32 seq_len`, the `dim×vocab` matrix,
//!   then an mlp body for the head.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, EmbeddingModel, InitScheme, Layer, LayerSpec, Model, Network, PolynomialModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BKD1";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    read_model(&mut bytes.as_slice())
}

pub fn write_model(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let kind = match model {
        Model::Mlp(_) => 0u8,
        Model::Polynomial(_) => 1,
        Model::Embedding(_) => 2,
    };
    let init = match model {
        Model::Mlp(m) => m.init,
        Model::Polynomial(m) => m.init,
        Model::Embedding(m) => m.head.init,
    };
    let (code, seed) = match init {
        InitScheme::UniformFanIn { seed } => (0u8, seed),
        InitScheme::Explicit => (1u8, 0),
    };
    w.write_all(&[CHECKPOINT_VERSION, kind, code])?;
    w.write_all(&seed.to_le_bytes())?;
    match model {
        Model::Mlp(net) => write_network(net, w)?,
        Model::Polynomial(p) => {
            write_u32(w, p.degree())?;
            w.write_all(&p.scale.to_le_bytes())?;
            write_floats(w, p.coefficients.data())?;
        }
        Model::Embedding(e) => {
            write_u32(w, e.vocab_size())?;
            write_u32(w, e.embed_dim())?;
            write_u32(w, e.seq_len)?;
            write_floats(w, e.embedding.data())?;
            write_network(&e.head, w)?;
        }
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {:?}",
            CHECKPOINT_MAGIC
        )));
    }
    let mut head = [0u8; 3];
    read_exact(r, &mut head)?;
    let [version, kind, code] = head;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let seed = read_u64(r)?;
    let init = match code {
        0 => InitScheme::UniformFanIn { seed },
        1 => InitScheme::Explicit,
        _ => return Err(Error::Format(format!("unknown init scheme {code}"))),
    };
    let model = match kind {
        0 => Model::Mlp(Network {
            init,
            ..read_network(r)?
        }),
        1 => {
            let degree = read_u32(r)?;
            let scale = read_f64(r)?;
            let coeffs = read_floats(r, degree + 1)?;
            let mut p = PolynomialModel::new(coeffs, scale)?;
            p.init = init;
            Model::Polynomial(p)
        }
        2 => {
            let vocab = read_u32(r)?;
            let dim = read_u32(r)?;
            let seq_len = read_u32(r)?;
            let w = Tensor::new(&[dim, vocab], read_floats(r, dim * vocab)?)?;
            let net = Network {
                init,
                ..read_network(r)?
            };
            Model::Embedding(EmbeddingModel::new(w, seq_len, net)?)
        }
        _ => return Err(Error::Format(format!("unknown model kind {kind}"))),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(model)
}

fn write_network(net: &Network, w: &mut impl Write) -> Result<()> {
    write_u32(w, net.layers.len())?;
    for l in &net.layers {
        write_u32(w, l.spec.in_dim)?;
        write_u32(w, l.spec.out_dim)?;
        w.write_all(&[l.spec.activation.code()])?;
    }
    for l in &net.layers {
        write_floats(w, l.weight.data())?;
        write_floats(w, l.bias.data())?;
    }
    Ok(())
}

fn read_network(r: &mut impl Read) -> Result<Network> {
    let n = read_u32(r)?;
    if n == 0 || n > 1 << 16 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let mut specs = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = read_u32(r)?;
        let out_dim = read_u32(r)?;
        let mut act = [0u8; 1];
        read_exact(r, &mut act)?;
        specs.push(LayerSpec::new(in_dim, out_dim, Activation::from_code(act[0])?));
    }
    let mut layers = Vec::with_capacity(n);
    for s in specs {
        let weight = Tensor::new(&[s.out_dim, s.in_dim], read_floats(r, s.out_dim * s.in_dim)?)?;
        let bias = Tensor::new(&[s.out_dim], read_floats(r, s.out_dim)?)?;
        layers.push(Layer { spec: s, weight, bias });
    }
    Network::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn write_floats(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_floats(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}
