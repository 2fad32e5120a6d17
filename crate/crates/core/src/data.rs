//! Dataset ingestion and generation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Module, PolynomialModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const DATASET_MAGIC: &[u8; 4] = b"BKDD";
pub const DATASET_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `[n × d]` feature rows.
    Dense(Tensor),
    /// Row-major `n × seq_len` token ids.
    Tokens {
        ids: Vec<usize>,
        seq_len: usize,
        vocab: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    /// `[n × out]` regression targets.
    Values(Tensor),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Classification,
    Regression,
    Token,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub targets: Targets,
    pub provenance: String,
}

impl Dataset {
    pub fn new(inputs: Inputs, targets: Targets, provenance: impl Into<String>) -> Result<Self> {
        let ds = Self {
            inputs,
            targets,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Inputs::Tokens { ids, seq_len, vocab } = &self.inputs {
            if *seq_len == 0 || ids.len() % seq_len != 0 {
                return Err(Error::InvalidParam("token matrix is ragged".into()));
            }
            if ids.iter().any(|&t| t >= *vocab) {
                return Err(Error::InvalidParam(format!("token id outside vocabulary of {vocab}")));
            }
        }
        let m = match &self.targets {
            Targets::Classes { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::InvalidParam(format!("label {bad} outside {classes} classes")));
                }
                labels.len()
            }
            Targets::Values(t) => t.rows(),
        };
        if m != n {
            return Err(Error::Format(format!("{n} inputs but {m} targets")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.inputs {
            Inputs::Dense(t) => t.rows(),
            Inputs::Tokens { ids, seq_len, .. } => ids.len() / seq_len.max(&1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> DatasetKind {
        match (&self.inputs, &self.targets) {
            (Inputs::Tokens { .. }, _) => DatasetKind::Token,
            (_, Targets::Classes { .. }) => DatasetKind::Classification,
            (_, Targets::Values(_)) => DatasetKind::Regression,
        }
    }

    pub fn dense(&self) -> Option<&Tensor> {
        match &self.inputs {
            Inputs::Dense(t) => Some(t),
            Inputs::Tokens { .. } => None,
        }
    }

    pub fn tokens(&self) -> Option<&[usize]> {
        match &self.inputs {
            Inputs::Tokens { ids, .. } => Some(ids),
            Inputs::Dense(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { classes, .. } => Some(*classes),
            Targets::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&Tensor> {
        match &self.targets {
            Targets::Values(t) => Some(t),
            Targets::Classes { .. } => None,
        }
    }

    /// Rows `idx`, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("row {bad} out of range for {n} rows")));
        }
        let inputs = match &self.inputs {
            Inputs::Dense(t) => Inputs::Dense(t.select_rows(idx)?),
            Inputs::Tokens { ids, seq_len, vocab } => Inputs::Tokens {
                ids: idx
                    .iter()
                    .flat_map(|&i| ids[i * seq_len..(i + 1) * seq_len].iter().copied())
                    .collect(),
                seq_len: *seq_len,
                vocab: *vocab,
            },
        };
        let targets = match &self.targets {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values(t) => Targets::Values(t.select_rows(idx)?),
        };
        Ok(Dataset {
            inputs,
            targets,
            provenance: self.provenance.clone(),
        })
    }

    /// Per-class counts for classification data.
    pub fn class_histogram(&self) -> Option<Vec<usize>> {
        let (labels, classes) = match &self.targets {
            Targets::Classes { labels, classes } => (labels, *classes),
            Targets::Values(_) => return None,
        };
        let mut h = vec![0; classes];
        for &l in labels {
            h[l] += 1;
        }
        Some(h)
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = read_be_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{what}: bad IDX magic {magic}, expected {expected}"
        )));
    }
    Ok(())
}

/// Parses an IDX image file into `[n × rows·cols]` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "images")?;
    let n = read_be_u32(bytes, 4, "images")? as usize;
    let rows = read_be_u32(bytes, 8, "images")? as usize;
    let cols = read_be_u32(bytes, 12, "images")? as usize;
    let d = rows * cols;
    let payload = &bytes[16..];
    if n == 0 || d == 0 {
        return Err(Error::EmptyDataset);
    }
    if payload.len() != n * d {
        return Err(Error::Format(format!(
            "images: payload has {} bytes, header promises {}",
            payload.len(),
            n * d
        )));
    }
    Tensor::new(&[n, d], payload.iter().map(|&p| f64::from(p) / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, "labels")?;
    let n = read_be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "labels: payload has {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label pair (e.g. MNIST) as a 10-class dataset.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let x = parse_idx_images(&fs::read(ip).map_err(|e| Error::file(ip, e))?)?;
    let y = parse_idx_labels(&fs::read(lp).map_err(|e| Error::file(lp, e))?)?;
    if x.rows() != y.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            x.rows(),
            y.len()
        )));
    }
    let classes = y.iter().copied().max().unwrap_or(0).max(9) + 1;
    Dataset::new(
        Inputs::Dense(x),
        Targets::Classes { labels: y, classes },
        format!("idx:{}", ip.display()),
    )
}

/// MNIST train and test splits from a directory holding the four standard files.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let train = load_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    /// Seeded uniform draws over the interval.
    Random,
    /// Evenly spaced points including both endpoints.
    Even,
}

/// `n` points on the teacher curve over `interval`.
pub fn gen_synthetic(teacher: &PolynomialModel, n: usize, interval: (f64, f64), seed: u64, spacing: Spacing) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 samples, got {n}")));
    }
    let (lo, hi) = interval;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParam(format!("degenerate interval [{lo}, {hi}]")));
    }
    let xs: Vec<f64> = match spacing {
        Spacing::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
        }
        Spacing::Even => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    };
    let x = Tensor::new(&[n, 1], xs)?;
    let y = teacher.forward(&x)?;
    Dataset::new(
        Inputs::Dense(x),
        Targets::Values(y),
        format!("synthetic:degree={}:n={n}:seed={seed}", teacher.degree()),
    )
}

/// Random token sequences labelled by the parity of their id sum.
pub fn gen_token_task(vocab: usize, seq_len: usize, n: usize, seed: u64) -> Result<Dataset> {
    if vocab < 2 {
        return Err(Error::InvalidParam(format!("vocab must be ≥ 2, got {vocab}")));
    }
    if seq_len == 0 || n == 0 {
        return Err(Error::InvalidParam("sequence length and sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..n * seq_len).map(|_| rng.gen_range(0..vocab)).collect();
    let labels = ids
        .chunks(seq_len)
        .map(|s| parity_label(s))
        .collect();
    Dataset::new(
        Inputs::Tokens { ids, seq_len, vocab },
        Targets::Classes { labels, classes: 2 },
        format!("tokens:vocab={vocab}:len={seq_len}:n={n}:seed={seed}"),
    )
}

pub fn parity_label(tokens: &[usize]) -> usize {
    tokens.iter().sum::<usize>() % 2
}

/// Seeded subset holding `round(fraction·n)` rows, kept in original order.
///
/// Stratified selection allocates per-class quotas by largest remainder, so
/// each class is within one sample of exact proportionality.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64, stratified: bool) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParam(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = ds.len();
    let total = (fraction * n as f64).round() as usize;
    if total == 0 {
        return Err(Error::InvalidParam(format!("fraction {fraction} of {n} rows selects nothing")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = match (stratified, ds.labels(), ds.classes()) {
        (true, Some(labels), Some(classes)) => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &l) in labels.iter().enumerate() {
                by_class[l].push(i);
            }
            let quotas = largest_remainder(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), total);
            let mut chosen = Vec::with_capacity(total);
            for (members, q) in by_class.iter_mut().zip(quotas) {
                members.shuffle(&mut rng);
                chosen.extend_from_slice(&members[..q]);
            }
            chosen
        }
        (true, _, _) => {
            return Err(Error::InvalidParam("stratified subsampling needs class labels".into()));
        }
        (false, _, _) => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(total);
            all
        }
    };
    chosen.sort_unstable();
    let mut out = ds.select(&chosen)?;
    out.provenance = format!("{}|subsample:{fraction}:seed={seed}:stratified={stratified}", ds.provenance);
    Ok(out)
}

fn largest_remainder(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * total as f64 / n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - quotas.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if quotas[i] < counts[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

/// Binary dump: `"BKDD"`, version, input kind (0 dense / 1 tokens), target
/// kind (0 classes / 1 values), then little-endian dims and payload.
pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    let ik = matches!(ds.inputs, Inputs::Tokens { .. }) as u8;
    let tk = matches!(ds.targets, Targets::Values(_)) as u8;
    w.write_all(&[DATASET_VERSION, ik, tk])?;
    let put = |w: &mut dyn Write, v: usize| w.write_all(&(v as u64).to_le_bytes());
    match &ds.inputs {
        Inputs::Dense(t) => {
            put(w, t.rows())?;
            put(w, t.cols())?;
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Inputs::Tokens { ids, seq_len, vocab } => {
            put(w, ids.len() / seq_len)?;
            put(w, *seq_len)?;
            put(w, *vocab)?;
            for &t in ids {
                put(w, t)?;
            }
        }
    }
    match &ds.targets {
        Targets::Classes { labels, classes } => {
            put(w, *classes)?;
            for &l in labels {
                put(w, l)?;
            }
        }
        Targets::Values(t) => {
            put(w, t.cols())?;
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    let prov = ds.provenance.as_bytes();
    put(w, prov.len())?;
    w.write_all(prov)?;
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated dataset header".into()))?;
    if &head[..4] != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    if head[4] != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", head[4])));
    }
    let mut get = || -> Result<usize> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated dataset".into()))?;
        Ok(u64::from_le_bytes(b) as usize)
    };
    let n = get()?;
    let inputs = if head[5] == 0 {
        let d = get()?;
        let data = (0..n * d).map(|_| get().map(|b| f64::from_bits(b as u64))).collect::<Result<_>>()?;
        Inputs::Dense(Tensor::new(&[n, d], data)?)
    } else {
        let seq_len = get()?;
        let vocab = get()?;
        let ids = (0..n * seq_len).map(|_| get()).collect::<Result<_>>()?;
        Inputs::Tokens { ids, seq_len, vocab }
    };
    let targets = if head[6] == 0 {
        let classes = get()?;
        let labels = (0..n).map(|_| get()).collect::<Result<_>>()?;
        Targets::Classes { labels, classes }
    } else {
        let m = get()?;
        let data = (0..n * m).map(|_| get().map(|b| f64::from_bits(b as u64))).collect::<Result<_>>()?;
        Targets::Values(Tensor::new(&[n, m], data)?)
    };
    let len = get()?;
    let mut prov = vec![0u8; len];
    r.read_exact(&mut prov).map_err(|_| Error::Format("truncated dataset".into()))?;
    let provenance = String::from_utf8(prov).map_err(|_| Error::Format("provenance is not UTF-8".into()))?;
    Dataset::new(inputs, targets, provenance)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::file(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    read_dataset(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new(
            Inputs::Dense(Tensor::new(&[n, 1], (0..n).map(|i| i as f64).collect()).unwrap()),
            Targets::Classes { labels, classes },
            "test",
        )
        .unwrap()
    }

    #[test]
    fn labels_magic_mismatch_is_named() {
        let mut bytes = 2051u32.to_be_bytes().to_vec();
        bytes.extend(1u32.to_be_bytes());
        bytes.push(3);
        let err = parse_idx_labels(&bytes).unwrap_err().to_string();
        assert!(err.contains("expected 2049"), "{err}");
    }

    #[test]
    fn truncated_images_rejected() {
        let mut bytes = Vec::new();
        for v in [2051u32, 2, 2, 2] {
            bytes.extend(v.to_be_bytes());
        }
        bytes.extend([0u8; 7]);
        assert!(parse_idx_images(&bytes).unwrap_err().to_string().contains("payload"));
    }

    #[test]
    fn synthetic_identity_teacher() {
        let id = PolynomialModel::new(vec![0.0, 1.0], 1.0).unwrap();
        let ds = gen_synthetic(&id, 2, (-1.0, 1.0), 3, Spacing::Random).unwrap();
        assert_eq!(ds.dense().unwrap().data(), ds.values().unwrap().data());
        assert_eq!(ds, gen_synthetic(&id, 2, (-1.0, 1.0), 3, Spacing::Random).unwrap());
        assert!(gen_synthetic(&id, 1, (-1.0, 1.0), 3, Spacing::Random).is_err());
        assert!(gen_synthetic(&id, 4, (1.0, 1.0), 3, Spacing::Random).is_err());
        let even = gen_synthetic(&id, 3, (-1.0, 1.0), 0, Spacing::Even).unwrap();
        assert_eq!(even.dense().unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn token_task_basics() {
        assert_eq!(parity_label(&[0, 0, 0, 0]), 0);
        assert_eq!(parity_label(&[1, 2, 0, 0]), 1);
        let a = gen_token_task(20, 4, 100, 7).unwrap();
        assert_eq!(a, gen_token_task(20, 4, 100, 7).unwrap());
        assert_eq!(a.kind(), DatasetKind::Token);
        assert!(gen_token_task(1, 4, 10, 0).is_err());
    }

    #[test]
    fn subsample_identity_and_errors() {
        let ds = labelled(vec![0, 1, 0, 1, 2, 2, 0], 3);
        assert_eq!(subsample(&ds, 1.0, 5, true).unwrap().dense(), ds.dense());
        assert!(subsample(&ds, 0.0, 5, false).is_err());
        assert!(subsample(&ds, 0.01, 5, false).is_err());
        assert_eq!(subsample(&ds, 0.5, 5, false).unwrap(), subsample(&ds, 0.5, 5, false).unwrap());
    }

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(&[5, 3, 2], 5), vec![3, 1, 1]);
        assert_eq!(largest_remainder(&[10, 10], 20), vec![10, 10]);
    }

    #[test]
    fn dataset_dump_roundtrip() {
        for ds in [
            labelled(vec![0, 1, 1], 2),
            gen_token_task(5, 3, 4, 1).unwrap(),
            gen_synthetic(&PolynomialModel::new(vec![1.0, 2.0], 1.0).unwrap(), 3, (0.0, 1.0), 2, Spacing::Random).unwrap(),
        ] {
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), ds);
        }
    }
}
