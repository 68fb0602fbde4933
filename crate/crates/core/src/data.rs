//! Datasets, non-i.i.d. partitioning into clients, federation weights, and
//! ingestion of IDX and CSV files.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{derive_stream, ProbabilityVector};
use crate::ot::DiscreteDistribution;

pub type EmpiricalDistribution = DiscreteDistribution;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Fraction of each client's shard used for training; the rest is held out.
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: Label,
}

impl LabeledExample {
    pub fn class(x: Vec<f64>, class: usize) -> Self {
        Self {
            x,
            y: Label::Class(class),
        }
    }

    pub fn value(x: Vec<f64>, value: f64) -> Self {
        Self {
            x,
            y: Label::Value(value),
        }
    }

    pub fn with_features(&self, x: Vec<f64>) -> Self {
        Self { x, y: self.y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl ClientDataset {
    /// Distinct class labels across train and test, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut labels: Vec<usize> = self
            .train
            .iter()
            .chain(&self.test)
            .filter_map(|e| e.y.class())
            .collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationData {
    pub clients: Vec<ClientDataset>,
    pub weights: ProbabilityVector,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl FederationData {
    /// Builds a federation with data-proportional weights.
    pub fn new(clients: Vec<ClientDataset>, feature_dim: usize, num_classes: usize) -> Result<Self> {
        let sizes: Vec<f64> = clients.iter().map(|c| c.train.len() as f64).collect();
        let weights = ProbabilityVector::from_weights(&sizes)?;
        let fed = Self {
            clients,
            weights,
            feature_dim,
            num_classes,
        };
        fed.validate()?;
        Ok(fed)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total_train(&self) -> usize {
        self.clients.iter().map(|c| c.train.len()).sum()
    }

    pub fn with_weights(mut self, weights: ProbabilityVector) -> Result<Self> {
        if weights.len() != self.clients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.clients.len(),
                got: weights.len(),
            });
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn all_test(&self) -> impl Iterator<Item = &LabeledExample> {
        self.clients.iter().flat_map(|c| c.test.iter())
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::invalid("federation has no clients"));
        }
        if self.weights.len() != self.clients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.clients.len(),
                got: self.weights.len(),
            });
        }
        if self.total_train() == 0 {
            return Err(Error::invalid("federation holds no training data"));
        }
        for client in &self.clients {
            if client.train.is_empty() {
                return Err(Error::invalid(format!(
                    "client {} has an empty training set",
                    client.client_id
                )));
            }
            for e in client.train.iter().chain(&client.test) {
                if e.x.len() != self.feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.feature_dim,
                        got: e.x.len(),
                    });
                }
                if e.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite);
                }
                if let Label::Class(c) = e.y {
                    if c >= self.num_classes {
                        return Err(Error::invalid(format!(
                            "label {c} outside {} classes",
                            self.num_classes
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `λ_i = n_i / n` over training set sizes.
pub fn default_weights(federation: &FederationData) -> ProbabilityVector {
    let sizes: Vec<f64> = federation
        .clients
        .iter()
        .map(|c| c.train.len() as f64)
        .collect();
    ProbabilityVector::from_weights(&sizes).expect("validated federation has training data")
}

// ---------------------------------------------------------------------------
// IDX

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_magic(path: &Path, bytes: &[u8], header_len: usize, magic: u32) -> Result<()> {
    if bytes.len() < header_len {
        return Err(Error::TruncatedHeader {
            path: path.to_owned(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected: magic,
            found,
        });
    }
    Ok(())
}

pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<IdxImages> {
    check_magic(path, bytes, 16, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_owned(),
            expected,
            found: payload.len(),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: payload[..expected].to_vec(),
    })
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(path, bytes, 8, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::TruncatedPayload {
            path: path.to_owned(),
            expected: count,
            found: payload.len(),
        });
    }
    Ok(payload[..count].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an IDX image/label pair (optionally gzip-compressed). Pixels are
/// scaled to `[0, 1]` and flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = parse_idx_images(images_path, &read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_maybe_gz(labels_path)?)?;
    if images.count() != labels.len() {
        return Err(Error::CountMismatch {
            images_path: images_path.to_owned(),
            labels_path: labels_path.to_owned(),
            images: images.count(),
            labels: labels.len(),
        });
    }
    let dim = images.rows * images.cols;
    Ok(images
        .pixels
        .chunks_exact(dim.max(1))
        .zip(&labels)
        .map(|(px, &y)| {
            LabeledExample::class(px.iter().map(|&b| f64::from(b) / 255.0).collect(), y as usize)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// CSV

/// Loads a CSV file with header `y,x0,x1,...`. With `classification` the
/// first column must hold nonnegative integer class ids.
pub fn load_csv(path: impl AsRef<Path>, classification: bool) -> Result<Vec<LabeledExample>> {
    let path: PathBuf = path.as_ref().to_owned();
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.clone(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(|e| csv_err(1, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    if headers.get(0) != Some("y") {
        return Err(csv_err(1, "first column must be named `y`".into()));
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("x{j}") {
            return Err(csv_err(1, format!("expected column `x{j}`, found `{h}`")));
        }
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_err(line, e.to_string()))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| csv_err(line, format!("`{s}`: {e}")))
        };
        let y_raw = record.get(0).unwrap_or_default();
        let y = if classification {
            Label::Class(
                y_raw
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| csv_err(line, format!("class `{y_raw}`: {e}")))?,
            )
        } else {
            Label::Value(parse(y_raw)?)
        };
        let x = record.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
        out.push(LabeledExample { x, y });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Unit directions for class means: coordinate axes when there are at least as
/// many features as classes, otherwise fixed pseudo-random unit vectors.
pub fn class_directions(num_classes: usize, feature_dim: usize) -> Vec<Vec<f64>> {
    if num_classes <= feature_dim {
        return (0..num_classes)
            .map(|c| {
                let mut u = vec![0.0; feature_dim];
                u[c] = 1.0;
                u
            })
            .collect();
    }
    let mut rng = derive_stream(0, &format!("synthetic:directions:{num_classes}:{feature_dim}"));
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::math::norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Gaussian blobs with identity covariance centered at `separation · u_c`.
/// Example `i` belongs to class `i mod num_classes`.
pub fn gen_synthetic_mixture(
    num_classes: usize,
    feature_dim: usize,
    n: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if num_classes < 2 {
        return Err(Error::invalid("synthetic mixture needs at least 2 classes"));
    }
    if feature_dim == 0 {
        return Err(Error::invalid("feature_dim must be positive"));
    }
    if n < num_classes {
        return Err(Error::invalid(format!(
            "n = {n} is smaller than num_classes = {num_classes}"
        )));
    }
    if !class_separation.is_finite() {
        return Err(Error::NonFinite);
    }
    let directions = class_directions(num_classes, feature_dim);
    let mut rng = derive_stream(seed, "synthetic:samples");
    Ok((0..n)
        .map(|i| {
            let c = i % num_classes;
            let x = directions[c]
                .iter()
                .map(|u| class_separation * u + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            LabeledExample::class(x, c)
        })
        .collect())
}

/// Shifts every feature vector by `offset`.
pub fn translate(examples: &[LabeledExample], offset: &[f64]) -> Vec<LabeledExample> {
    examples
        .iter()
        .map(|e| e.with_features(e.x.iter().zip(offset).map(|(a, b)| a + b).collect()))
        .collect()
}

// ---------------------------------------------------------------------------
// Partitioning

/// Splits a labelled pool among `m` clients so that each client sees exactly
/// `labels_per_client` classes. Relative client sizes are log-normal with
/// standard deviation `size_dispersion` (0 gives equal demand). Every example
/// is assigned to at most one client; each shard is split 75/25 into
/// train/test.
pub fn partition_noniid(
    examples: &[LabeledExample],
    m: usize,
    labels_per_client: usize,
    size_dispersion: f64,
    seed: u64,
) -> Result<FederationData> {
    if m == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if labels_per_client == 0 {
        return Err(Error::invalid("labels_per_client must be positive"));
    }
    if !(size_dispersion >= 0.0 && size_dispersion.is_finite()) {
        return Err(Error::invalid("size_dispersion must be a finite nonnegative number"));
    }
    let feature_dim = examples
        .first()
        .map(|e| e.x.len())
        .ok_or(Error::EmptyExamples)?;
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        let c = e
            .y
            .class()
            .ok_or_else(|| Error::invalid("label-skew partitioning needs class labels"))?;
        if e.x.len() != feature_dim {
            return Err(Error::DimensionMismatch {
                expected: feature_dim,
                got: e.x.len(),
            });
        }
        if by_class.len() <= c {
            by_class.resize(c + 1, Vec::new());
        }
        by_class[c].push(i);
    }
    let num_classes = by_class.len();
    let present: Vec<usize> = (0..num_classes).filter(|c| !by_class[*c].is_empty()).collect();
    if labels_per_client > present.len() {
        return Err(Error::invalid(format!(
            "labels_per_client = {labels_per_client} exceeds the {} labels present",
            present.len()
        )));
    }

    let mut perm = present.clone();
    perm.shuffle(&mut derive_stream(seed, "partition:labels"));
    let client_labels: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            (0..labels_per_client)
                .map(|j| perm[(i + j) % perm.len()])
                .collect()
        })
        .collect();

    let mut size_rng = derive_stream(seed, "partition:sizes");
    let demand: Vec<f64> = (0..m)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut size_rng);
            (size_dispersion * z).exp()
        })
        .collect();

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); m];
    for &c in &present {
        let requesters: Vec<usize> = (0..m).filter(|i| client_labels[*i].contains(&c)).collect();
        if requesters.is_empty() {
            continue;
        }
        let mut pool = by_class[c].clone();
        if pool.len() < requesters.len() {
            return Err(Error::InfeasiblePartition {
                label: c,
                available: pool.len(),
                required: requesters.len(),
            });
        }
        pool.shuffle(&mut derive_stream(seed, &format!("partition:class:{c}")));
        let weights: Vec<f64> = requesters.iter().map(|i| demand[*i]).collect();
        let counts = allocate_counts(pool.len(), &weights);
        let mut cursor = 0;
        for (client, count) in requesters.iter().zip(counts) {
            shards[*client].extend_from_slice(&pool[cursor..cursor + count]);
            cursor += count;
        }
    }

    let clients = shards
        .into_iter()
        .enumerate()
        .map(|(id, mut idx)| {
            idx.shuffle(&mut derive_stream(seed, &format!("partition:client:{id}")));
            let n_train = ((idx.len() as f64 * TRAIN_FRACTION).round() as usize).clamp(1, idx.len());
            let take = |ix: &[usize]| ix.iter().map(|&i| examples[i].clone()).collect();
            ClientDataset {
                client_id: id,
                train: take(&idx[..n_train]),
                test: take(&idx[n_train..]),
            }
        })
        .collect();
    FederationData::new(clients, feature_dim, num_classes)
}

/// Splits `total` items into one share per weight: one item each, the rest
/// by largest remainder (ties to the lower index).
fn allocate_counts(total: usize, weights: &[f64]) -> Vec<usize> {
    let k = weights.len();
    let spare = total - k;
    let wsum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| spare as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| {
        let ra = exact[*a] - exact[*a].floor();
        let rb = exact[*b] - exact[*b].floor();
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + 1).collect()
}

/// Deterministic subsample of at most `cap` items, order preserved.
pub fn subsample<T: Clone>(items: &[T], cap: usize, seed: u64, tag: &str) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut derive_stream(seed, tag));
    let mut keep = idx[..cap].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// Empirical distributions

/// Which coordinates form the support points of an empirical distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Embedding {
    FeaturesOnly,
    /// Features followed by `√κ · y`, so squared Euclidean distance between
    /// points equals the transport cost `‖x − x'‖² + κ|y − y'|²`.
    Joint { kappa: f64 },
}

pub fn embed(example: &LabeledExample, embedding: Embedding) -> Vec<f64> {
    match embedding {
        Embedding::FeaturesOnly => example.x.clone(),
        Embedding::Joint { kappa } => {
            let mut p = example.x.clone();
            p.push(kappa.sqrt() * example.y.as_f64());
            p
        }
    }
}

/// Uniform-mass empirical distribution over a dataset.
pub fn to_empirical(dataset: &[LabeledExample], embedding: Embedding) -> Result<EmpiricalDistribution> {
    if dataset.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let points = dataset.iter().map(|e| embed(e, embedding)).collect();
    DiscreteDistribution::uniform(points)
}

/// Draws a shuffled copy using `rng`; kept here so callers share one idiom.
pub(crate) fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
