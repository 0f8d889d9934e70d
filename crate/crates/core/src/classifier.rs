//! Per-region softmax-regression site classifiers.
//!
//! A [`RegionModel`] maps a feature distribution to a distribution over the
//! region's sites: `softmax(W f + b)`. Training is mini-batch SGD on mean
//! cross-entropy from a zero initialization. Shuffling uses ChaCha8 seeded
//! from [`TrainConfig::seed`], so a given config and dataset always produce
//! the same model bytes.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{FeatureDataset, FeatureDistribution};
use crate::numeric::{softmax_into, stable_sum};

/// Magic bytes of the model binary format.
pub const MODEL_MAGIC: &[u8; 4] = b"GRM1";

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const HASH_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("training needs at least 2 classes, found {found}")]
    TooFewClasses { found: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("site {0:?} is not a class of this model")]
    UnknownSite(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("corrupt model blob: {0}")]
    CorruptModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: u32,
    pub lr: f64,
    pub train_size: u64,
}

/// SGD hyperparameters.
///
/// `epochs` and `batch_size` defaults (100 and 32) are calibration choices.
/// With `standardize`, SGD runs on per-dimension z-scored features and the
/// learned affine map is folded back, so the resulting model still applies
/// to raw feature distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            shuffle: true,
            standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ClassifierError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(ClassifierError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A trained region classifier. Parameters are stored as `f32`, the same
/// precision as the wire format, so serialization round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionModel {
    region_id: String,
    site_ids: Arc<[String]>,
    dimension: usize,
    /// Row-major, one row of `dimension` weights per site.
    weights: Vec<f32>,
    biases: Vec<f32>,
    version: u64,
    training_meta: TrainingMeta,
}

impl RegionModel {
    pub fn new(
        region_id: impl Into<String>,
        site_ids: Vec<String>,
        dimension: usize,
        weights: Vec<f32>,
        biases: Vec<f32>,
        version: u64,
        training_meta: TrainingMeta,
    ) -> Result<Self, ClassifierError> {
        let k = site_ids.len();
        if k == 0 {
            return Err(ClassifierError::InvalidModel("model has no sites".into()));
        }
        if dimension == 0 {
            return Err(ClassifierError::InvalidModel("dimension must be positive".into()));
        }
        if weights.len() != k * dimension || biases.len() != k {
            return Err(ClassifierError::InvalidModel(format!(
                "{} weights and {} biases do not fit {k} sites x {dimension} dims",
                weights.len(),
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(ClassifierError::InvalidModel("non-finite parameter".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = site_ids.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(ClassifierError::InvalidModel(format!("duplicate site id {dup:?}")));
        }
        Ok(Self {
            region_id: region_id.into(),
            site_ids: site_ids.into(),
            dimension,
            weights,
            biases,
            version,
            training_meta,
        })
    }

    pub fn region_id(&self) -> &str {
        &self.region_id
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn num_sites(&self) -> usize {
        self.site_ids.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn training_meta(&self) -> &TrainingMeta {
        &self.training_meta
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn site_index(&self, site_id: &str) -> Option<usize> {
        self.site_ids.iter().position(|s| s == site_id)
    }

    /// Raw logits `W f + b`, summed in index order.
    pub fn logits_into(&self, feature: &[f64], out: &mut [f64]) -> Result<(), ClassifierError> {
        if feature.len() != self.dimension {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dimension,
                found: feature.len(),
            });
        }
        for ((o, row), &b) in out.iter_mut().zip(self.weights.chunks_exact(self.dimension)).zip(&self.biases) {
            let mut z = b as f64;
            for (&w, &x) in row.iter().zip(feature) {
                z += w as f64 * x;
            }
            *o = z;
        }
        Ok(())
    }

    /// Class probabilities for `feature` written into `out`.
    pub fn probs_into(&self, feature: &[f64], out: &mut [f64]) -> Result<(), ClassifierError> {
        let mut logits = vec![0.0; self.num_sites()];
        self.logits_into(feature, &mut logits)?;
        softmax_into(&logits, out);
        Ok(())
    }
}

/// A model's output for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    site_ids: Arc<[String]>,
    distribution: FeatureDistribution,
    top1: usize,
}

impl Prediction {
    /// Builds a prediction from probabilities aligned with `site_ids`.
    pub fn from_probs(site_ids: &[String], probs: Vec<f64>) -> Result<Self, ClassifierError> {
        if probs.len() != site_ids.len() {
            return Err(ClassifierError::DimensionMismatch {
                expected: site_ids.len(),
                found: probs.len(),
            });
        }
        let distribution = FeatureDistribution::with_tolerance(probs, 1e-9)
            .map_err(|e| ClassifierError::InvalidModel(format!("prediction not normalized: {e}")))?;
        Ok(Self::from_parts(site_ids.into(), distribution))
    }

    pub(crate) fn with_top1(site_ids: Arc<[String]>, distribution: FeatureDistribution, top1: usize) -> Self {
        Self {
            site_ids,
            distribution,
            top1,
        }
    }

    pub(crate) fn shared_site_ids(&self) -> Arc<[String]> {
        self.site_ids.clone()
    }

    fn from_parts(site_ids: Arc<[String]>, distribution: FeatureDistribution) -> Self {
        let top1 = argmax_lexicographic(distribution.probs(), &site_ids);
        Self {
            site_ids,
            distribution,
            top1,
        }
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn distribution(&self) -> &FeatureDistribution {
        &self.distribution
    }

    pub fn probs(&self) -> &[f64] {
        self.distribution.probs()
    }

    pub fn top1_index(&self) -> usize {
        self.top1
    }

    pub fn top1(&self) -> &str {
        &self.site_ids[self.top1]
    }

    pub fn probability_of(&self, site_id: &str) -> Option<f64> {
        self.site_ids.iter().position(|s| s == site_id).map(|i| self.probs()[i])
    }
}

/// Index of the largest value; ties go to the lexicographically smallest id.
pub fn argmax_lexicographic(values: &[f64], ids: &[String]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] || (values[i] == values[best] && ids[i] < ids[best]) {
            best = i;
        }
    }
    best
}

/// `-ln q[true_class]`, with `q` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy(true_class: usize, q: &[f64]) -> Result<f64, ClassifierError> {
    let p = *q.get(true_class).ok_or(ClassifierError::IndexOutOfRange {
        index: true_class,
        len: q.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Softmax forward pass of `model` on `feature`.
pub fn predict(model: &RegionModel, feature: &FeatureDistribution) -> Result<Prediction, ClassifierError> {
    let mut probs = vec![0.0; model.num_sites()];
    model.probs_into(feature.probs(), &mut probs)?;
    Ok(Prediction::from_parts(
        model.site_ids.clone(),
        FeatureDistribution::from_vec_unchecked(probs),
    ))
}

/// Fraction of `test` images whose top-1 site is their true site.
pub fn evaluate_top1(model: &RegionModel, test: &FeatureDataset) -> Result<f64, ClassifierError> {
    if test.is_empty() {
        return Err(ClassifierError::EmptyTestSet);
    }
    let mut probs = vec![0.0; model.num_sites()];
    let mut correct = 0usize;
    for img in test.images() {
        model.probs_into(img.feature.probs(), &mut probs)?;
        let top = argmax_lexicographic(&probs, &model.site_ids);
        if model.site_ids[top] == img.site_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Softmax-regression parameters in full precision, used during training.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    pub num_classes: usize,
    pub dimension: usize,
    /// Row-major `num_classes x dimension`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl SoftmaxHead {
    pub fn zeros(num_classes: usize, dimension: usize) -> Self {
        Self {
            num_classes,
            dimension,
            weights: vec![0.0; num_classes * dimension],
            biases: vec![0.0; num_classes],
        }
    }

    fn probs_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), &b) in out.iter_mut().zip(self.weights.chunks_exact(self.dimension)).zip(&self.biases) {
            let mut z = b;
            for (&w, &xi) in row.iter().zip(x) {
                z += w * xi;
            }
            *o = z;
        }
        let logits = out.to_vec();
        softmax_into(&logits, out);
    }

    /// Mean cross-entropy over the given samples.
    pub fn loss(&self, xs: &[&[f64]], ys: &[usize]) -> f64 {
        let mut q = vec![0.0; self.num_classes];
        let losses = xs.iter().zip(ys).map(|(x, &y)| {
            self.probs_into(x, &mut q);
            -q[y].max(PROB_FLOOR).ln()
        });
        stable_sum(losses) / xs.len() as f64
    }

    /// Mean cross-entropy and its gradient with respect to weights and biases.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
        let (k, d) = (self.num_classes, self.dimension);
        let n = xs.len() as f64;
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        let mut q = vec![0.0; k];
        let mut losses = Vec::with_capacity(xs.len());
        for (x, &y) in xs.iter().zip(ys) {
            self.probs_into(x, &mut q);
            losses.push(-q[y].max(PROB_FLOOR).ln());
            for c in 0..k {
                let g = (q[c] - if c == y { 1.0 } else { 0.0 }) / n;
                gb[c] += g;
                for (gwi, &xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x.iter()) {
                    *gwi += g * xi;
                }
            }
        }
        (stable_sum(losses) / n, gw, gb)
    }

    /// One SGD step on the mean cross-entropy of a batch.
    pub fn sgd_step(&mut self, xs: &[&[f64]], ys: &[usize], lr: f64) {
        let (k, d) = (self.num_classes, self.dimension);
        let n = xs.len() as f64;
        let mut residuals = vec![0.0; xs.len() * k];
        for ((x, &y), r) in xs.iter().zip(ys).zip(residuals.chunks_exact_mut(k)) {
            self.probs_into(x, r);
            r[y] -= 1.0;
        }
        let step = lr / n;
        for c in 0..k {
            let row = &mut self.weights[c * d..(c + 1) * d];
            let mut gb = 0.0;
            for (x, r) in xs.iter().zip(residuals.chunks_exact(k)) {
                let g = r[c];
                gb += g;
                for (w, &xi) in row.iter_mut().zip(x.iter()) {
                    *w -= step * g * xi;
                }
            }
            self.biases[c] -= step * gb;
        }
    }
}

/// Outcome of a training run with per-epoch diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub model: RegionModel,
    /// Mean training loss before the first step, then after each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains a model over the distinct sites of `train`, in lexicographic order.
pub fn train_region_model(
    train: &FeatureDataset,
    config: &TrainConfig,
    region_id: &str,
) -> Result<RegionModel, ClassifierError> {
    let mut classes = train.site_ids();
    classes.sort();
    train_region_model_with_classes(train, &classes, config, region_id)
}

/// Trains a model whose class order is given by `classes`.
pub fn train_region_model_with_classes(
    train: &FeatureDataset,
    classes: &[String],
    config: &TrainConfig,
    region_id: &str,
) -> Result<RegionModel, ClassifierError> {
    train_inner(train, classes, config, region_id, false).map(|run| run.model)
}

/// As [`train_region_model`], additionally recording the loss per epoch.
pub fn train_region_model_with_history(
    train: &FeatureDataset,
    config: &TrainConfig,
    region_id: &str,
) -> Result<TrainingRun, ClassifierError> {
    let mut classes = train.site_ids();
    classes.sort();
    train_inner(train, &classes, config, region_id, true)
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]], d: usize) -> Self {
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| stable_sum(rows.iter().map(|r| r[j])) / n).collect();
        let scale = (0..d)
            .map(|j| {
                let var = stable_sum(rows.iter().map(|r| (r[j] - mean[j]).powi(2))) / n;
                let sd = var.sqrt();
                if sd > 1e-9 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    /// Rewrites `W z + b` over standardized `z` as an affine map of raw features.
    fn fold(&self, head: &mut SoftmaxHead) {
        let d = head.dimension;
        for (row, b) in head.weights.chunks_exact_mut(d).zip(head.biases.iter_mut()) {
            let mut shift = Vec::with_capacity(d);
            for ((w, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *w /= s;
                shift.push(*w * m);
            }
            *b -= stable_sum(shift);
        }
    }
}

fn train_inner(
    train: &FeatureDataset,
    classes: &[String],
    config: &TrainConfig,
    region_id: &str,
    record_history: bool,
) -> Result<TrainingRun, ClassifierError> {
    config.validate()?;
    if classes.len() < 2 {
        return Err(ClassifierError::TooFewClasses { found: classes.len() });
    }
    if train.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet);
    }
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if index.len() != classes.len() {
        return Err(ClassifierError::InvalidModel("duplicate class id".into()));
    }
    let labels = train
        .images()
        .iter()
        .map(|img| index.get(img.site_id.as_str()).copied().ok_or_else(|| ClassifierError::UnknownSite(img.site_id.clone())))
        .collect::<Result<Vec<usize>, _>>()?;

    let d = train.dimension();
    let raw: Vec<&[f64]> = train.images().iter().map(|img| img.feature.probs()).collect();
    let standardizer = config.standardize.then(|| Standardizer::fit(&raw, d));
    let owned: Vec<Vec<f64>> = match &standardizer {
        Some(s) => raw.iter().map(|r| s.apply(r)).collect(),
        None => Vec::new(),
    };
    let rows: Vec<&[f64]> = if standardizer.is_some() {
        owned.iter().map(Vec::as_slice).collect()
    } else {
        raw
    };

    let mut head = SoftmaxHead::zeros(classes.len(), d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = Vec::new();
    if record_history {
        history.push(head.loss(&rows, &labels));
    }
    let mut bx: Vec<&[f64]> = Vec::with_capacity(config.batch_size);
    let mut by: Vec<usize> = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            bx.extend(batch.iter().map(|&i| rows[i]));
            by.extend(batch.iter().map(|&i| labels[i]));
            head.sgd_step(&bx, &by, config.lr);
        }
        if record_history {
            history.push(head.loss(&rows, &labels));
        }
    }
    if let Some(s) = &standardizer {
        s.fold(&mut head);
    }

    let model = RegionModel::new(
        region_id,
        classes.to_vec(),
        d,
        head.weights.iter().map(|&w| w as f32).collect(),
        head.biases.iter().map(|&b| b as f32).collect(),
        0,
        TrainingMeta {
            seed: config.seed,
            epochs: config.epochs,
            lr: config.lr,
            train_size: train.len() as u64,
        },
    )
    .map_err(|e| ClassifierError::InvalidModel(format!("training diverged: {e}")))?;
    Ok(TrainingRun {
        model,
        loss_history: history,
    })
}

/// SHA-256 of arbitrary bytes.
pub fn sha256(bytes: &[u8]) -> [u8; HASH_LEN] {
    Sha256::digest(bytes).into()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Encodes a model as a `GRM1` blob: magic, u64 version, region id, site
/// ids, u32 dimension, training metadata, f32 weights and biases (all little
/// endian, strings u32-length-prefixed), then a SHA-256 of everything before.
pub fn serialize_model(model: &RegionModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * (model.weights.len() + model.biases.len()) + HASH_LEN);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&model.version.to_le_bytes());
    put_str(&mut out, &model.region_id);
    out.extend_from_slice(&(model.site_ids.len() as u32).to_le_bytes());
    for s in model.site_ids.iter() {
        put_str(&mut out, s);
    }
    out.extend_from_slice(&(model.dimension as u32).to_le_bytes());
    let meta = &model.training_meta;
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.epochs.to_le_bytes());
    out.extend_from_slice(&meta.lr.to_le_bytes());
    out.extend_from_slice(&meta.train_size.to_le_bytes());
    for v in model.weights.iter().chain(&model.biases) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let hash = sha256(&out);
    out.extend_from_slice(&hash);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ClassifierError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ClassifierError::CorruptModel(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ClassifierError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, ClassifierError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ClassifierError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, ClassifierError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ClassifierError::CorruptModel("string is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ClassifierError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| ClassifierError::CorruptModel("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// Decodes and verifies a `GRM1` blob.
pub fn deserialize_model(blob: &[u8]) -> Result<RegionModel, ClassifierError> {
    if blob.len() < MODEL_MAGIC.len() + HASH_LEN {
        return Err(ClassifierError::CorruptModel(format!("blob too short ({} bytes)", blob.len())));
    }
    if &blob[..4] != MODEL_MAGIC {
        return Err(ClassifierError::CorruptModel("bad magic".into()));
    }
    let (body, hash) = blob.split_at(blob.len() - HASH_LEN);
    if sha256(body) != hash {
        return Err(ClassifierError::CorruptModel("content hash mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u64()?;
    let region_id = c.string()?;
    let k = c.u32()? as usize;
    // each site id needs at least its 4-byte length prefix
    if k > body.len() / 4 {
        return Err(ClassifierError::CorruptModel(format!("implausible site count {k}")));
    }
    let site_ids = (0..k).map(|_| c.string()).collect::<Result<Vec<_>, _>>()?;
    let dimension = c.u32()? as usize;
    let training_meta = TrainingMeta {
        seed: c.u64()?,
        epochs: c.u32()?,
        lr: f64::from_le_bytes(c.array()?),
        train_size: c.u64()?,
    };
    let weights = c.f32s(k.checked_mul(dimension).ok_or_else(|| ClassifierError::CorruptModel("size overflow".into()))?)?;
    let biases = c.f32s(k)?;
    if c.pos != body.len() {
        return Err(ClassifierError::CorruptModel(format!("{} trailing bytes", body.len() - c.pos)));
    }
    RegionModel::new(region_id, site_ids, dimension, weights, biases, version, training_meta)
        .map_err(|e| ClassifierError::CorruptModel(e.to_string()))
}
