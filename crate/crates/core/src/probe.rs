//! Single-layer logistic probe over final-block hidden states.
//!
//! Training is fully deterministic given the dataset and [`TrainConfig`]:
//! seeded rebalancing, a seeded shuffle per epoch, fixed-size mini-batches
//! (last one short) and Adam updates applied in batch order.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vectors::VectorTable;

pub const MODEL_MAGIC: [u8; 4] = *b"WSCM";
pub const MODEL_VERSION: u32 = 1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Downsample the majority class to a 1:1 ratio before training.
    pub rebalance: bool,
    /// Weight positives by the negative/positive count ratio.
    pub use_pos_weight: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 8192,
            seed: 41,
            rebalance: true,
            use_pos_weight: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub pos_weight: Option<f64>,
    #[serde(default)]
    pub train_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: ProbeMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub vectors: VectorTable,
    pub labels: Vec<bool>,
}

impl LabeledDataset {
    pub fn new(vectors: VectorTable, labels: Vec<bool>) -> Result<Self> {
        if vectors.count() != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} vectors but {} labels",
                vectors.count(),
                labels.len()
            )));
        }
        Ok(Self { vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    /// (positives, negatives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (pos, neg) = self.class_counts();
        if pos == 0 || neg == 0 {
            return Err(Error::DegenerateDataset(format!(
                "{pos} positive and {neg} negative examples"
            )));
        }
        Ok((pos, neg))
    }

    fn subset(&self, indices: &[usize]) -> Self {
        let mut vectors = VectorTable::new(self.dim()).expect("dim checked at construction");
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            vectors
                .push_row(self.vectors.row(i).unwrap())
                .expect("row from same table");
            labels.push(self.labels[i]);
        }
        Self { vectors, labels }
    }
}

fn pos_weight_for(pos: usize, neg: usize, enabled: bool) -> f64 {
    if enabled {
        neg as f64 / pos as f64
    } else {
        1.0
    }
}

/// Rebalances (when configured) and shuffles a raw dataset. Returns the
/// prepared data and the positive-class weight for the loss.
pub fn prepare_dataset(raw: &LabeledDataset, config: &TrainConfig) -> Result<(LabeledDataset, f64)> {
    raw.require_both_classes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut pos_idx, mut neg_idx): (Vec<usize>, Vec<usize>) =
        (0..raw.len()).partition(|&i| raw.labels[i]);
    if config.rebalance {
        let keep = pos_idx.len().min(neg_idx.len());
        for idx in [&mut pos_idx, &mut neg_idx] {
            if idx.len() > keep {
                // uniform subset of size `keep`, then restore original order
                idx.shuffle(&mut rng);
                idx.truncate(keep);
                idx.sort_unstable();
            }
        }
    }
    let pos_weight = pos_weight_for(pos_idx.len(), neg_idx.len(), config.use_pos_weight);
    let mut order: Vec<usize> = pos_idx.into_iter().chain(neg_idx).collect();
    order.sort_unstable();
    order.shuffle(&mut rng);
    Ok((raw.subset(&order), pos_weight))
}

fn softplus(z: f64) -> f64 {
    // log(1 + e^z) without overflow
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradient {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: f64,
}

/// Mean positive-weighted binary cross-entropy on logits and its exact
/// gradient over a batch.
pub fn loss_and_gradient<R: AsRef<[f32]>>(
    model: &ProbeModel,
    vectors: &[R],
    labels: &[bool],
    pos_weight: f64,
) -> Result<LossAndGradient> {
    if vectors.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    if vectors.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} vectors but {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    let dim = model.dim();
    let mut grad_w = vec![0.0; dim];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for (x, &y) in vectors.iter().zip(labels) {
        let x = x.as_ref();
        if x.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: x.len(),
            });
        }
        let z = dot(&model.weights, x) + model.bias;
        // -log sigma(z) = softplus(-z), -log(1 - sigma(z)) = softplus(z)
        let (l, dz) = if y {
            (pos_weight * softplus(-z), pos_weight * (sigmoid(z) - 1.0))
        } else {
            (softplus(z), sigmoid(z))
        };
        loss += l;
        grad_b += dz;
        for (g, &xi) in grad_w.iter_mut().zip(x) {
            *g += dz * f64::from(xi);
        }
    }
    let n = vectors.len() as f64;
    grad_w.iter_mut().for_each(|g| *g /= n);
    Ok(LossAndGradient {
        loss: loss / n,
        grad_w,
        grad_b: grad_b / n,
    })
}

struct Adam {
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update over `params`, with L2 weight decay folded into the gradient.
    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let g = g + weight_decay * *p;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Trains a probe from zero initialization. The positive-class weight is the
/// dataset's negative/positive ratio (1.0 on a balanced set) unless disabled.
pub fn fit(dataset: &LabeledDataset, config: &TrainConfig) -> Result<ProbeModel> {
    config.validate()?;
    let (pos, neg) = dataset.require_both_classes()?;
    let pos_weight = pos_weight_for(pos, neg, config.use_pos_weight);
    let dim = dataset.dim();

    let mut model = ProbeModel::zeros(dim);
    // weights followed by the bias, so one optimizer state covers both
    let mut params = vec![0.0; dim + 1];
    let mut grads = vec![0.0; dim + 1];
    let mut adam = Adam::new(dim + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let rows: Vec<&[f32]> = dataset.vectors.rows().collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&[f32]> = batch.iter().map(|&i| rows[i]).collect();
            let ys: Vec<bool> = batch.iter().map(|&i| dataset.labels[i]).collect();
            let lg = loss_and_gradient(&model, &xs, &ys, pos_weight)?;
            grads[..dim].copy_from_slice(&lg.grad_w);
            grads[dim] = lg.grad_b;
            adam.update(&mut params, &grads, config.learning_rate, config.weight_decay);
            model.weights.copy_from_slice(&params[..dim]);
            model.bias = params[dim];
        }
    }

    if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
        return Err(Error::DegenerateDataset("training diverged".into()));
    }
    model.meta = ProbeMeta {
        train: Some(config.clone()),
        pos_weight: Some(pos_weight),
        train_samples: Some(dataset.len()),
    };
    Ok(model)
}

/// Rebalance, shuffle and fit in one call.
pub fn train(raw: &LabeledDataset, config: &TrainConfig) -> Result<ProbeModel> {
    let (prepared, _) = prepare_dataset(raw, config)?;
    fit(&prepared, config)
}

impl ProbeModel {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidConfig("probe dim must be positive".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::InvalidConfig("probe parameters must be finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            meta: ProbeMeta::default(),
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            meta: ProbeMeta::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, h: &[f32]) -> Result<f64> {
        if h.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: h.len(),
            });
        }
        Ok(dot(&self.weights, h) + self.bias)
    }

    /// Repetition probability for one trailing-delimiter hidden state.
    pub fn predict(&self, h: &[f32]) -> Result<f64> {
        // keep the result strictly inside (0, 1)
        Ok(sigmoid(self.logit(h)?).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = u32::try_from(self.dim())
            .map_err(|_| Error::InvalidConfig("dim does not fit in u32".into()))?;
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::with_capacity(16 + self.dim() * 4 + meta.len());
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for &w in &self.weights {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        out.extend_from_slice(&(self.bias as f32).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MODEL_MAGIC {
            return Err(Error::NotModelFile);
        }
        let corrupt = |what: &str| Error::CorruptModel(what.to_owned());
        let u32_at = |off: usize| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| corrupt("truncated"))
        };
        let version = u32_at(4)?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = u32_at(8)? as usize;
        if dim == 0 {
            return Err(corrupt("dim = 0"));
        }
        let mut off = 12;
        let mut weights = Vec::with_capacity(dim);
        for _ in 0..=dim {
            weights.push(f64::from(f32::from_bits(u32_at(off)?)));
            off += 4;
        }
        let bias = weights.pop().unwrap();
        let meta_len = u32_at(off)? as usize;
        off += 4;
        let meta_bytes = bytes
            .get(off..off + meta_len)
            .ok_or_else(|| corrupt("metadata truncated"))?;
        if off + meta_len != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let meta: ProbeMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::CorruptModel(format!("metadata: {e}")))?;
        let mut model = ProbeModel::new(weights, bias).map_err(|_| corrupt("non-finite parameter"))?;
        model.meta = meta;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn predict(model: &ProbeModel, h: &[f32]) -> Result<f64> {
    model.predict(h)
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::AurocUndefined("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the Mann-Whitney U, kept integral so ties stay exact
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Absent when the dataset holds a single class.
    pub auroc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub threshold: f64,
}

/// Accuracy counts `p > threshold` as a positive prediction.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s > threshold) == y)
        .count();
    correct as f64 / scores.len() as f64
}

pub fn evaluate(model: &ProbeModel, dataset: &LabeledDataset, threshold: f64) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let scores = dataset
        .vectors
        .rows()
        .map(|h| model.predict(h))
        .collect::<Result<Vec<_>>>()?;
    let (positives, negatives) = dataset.class_counts();
    Ok(EvalReport {
        accuracy: accuracy(&scores, &dataset.labels, threshold),
        auroc: auroc(&scores, &dataset.labels).ok(),
        positives,
        negatives,
        threshold,
    })
}
