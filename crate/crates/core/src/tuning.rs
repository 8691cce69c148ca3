//! Prompt tuning by plain SGD with a per-epoch cosine learning rate.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::kv::{self, KvRecord};
use crate::model::{
    gaussian_matrix, loss_and_gradient, seeded_rng, BatchItem, ClassWeights, FrozenEncoder, ItemRole, LossSpec,
    ProbabilityDistribution, PromptVector, Temperature,
};

/// Standard deviation of the initial prompt entries.
pub const PROMPT_INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Entropy margin, only read by detector training.
    pub gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 0.002, batch_size: 32, seed: 0, gamma: 0.4 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        Ok(())
    }

    pub(crate) fn write(&self, rec: &mut KvRecord, prefix: &str) {
        rec.push(&format!("{prefix}.epochs"), self.epochs)
            .push(&format!("{prefix}.lr"), self.lr)
            .push(&format!("{prefix}.batch_size"), self.batch_size)
            .push(&format!("{prefix}.seed"), self.seed)
            .push(&format!("{prefix}.gamma"), self.gamma);
    }

    pub(crate) fn read(rec: &KvRecord, prefix: &str) -> Result<Self> {
        Ok(Self {
            epochs: rec.require(&format!("{prefix}.epochs"))?,
            lr: rec.require(&format!("{prefix}.lr"))?,
            batch_size: rec.require(&format!("{prefix}.batch_size"))?,
            seed: rec.require(&format!("{prefix}.seed"))?,
            gamma: rec.require(&format!("{prefix}.gamma"))?,
        })
    }
}

/// Learning rate of epoch `t` (0-based) out of `epochs`.
pub fn cosine_lr(lr: f64, t: usize, epochs: usize) -> f64 {
    lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / epochs as f64).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub prompt: PromptVector,
    pub support: Vec<usize>,
    /// Mean batch loss of every epoch.
    pub loss_history: Vec<f64>,
    pub config: TrainConfig,
}

impl TrainedClassifier {
    pub fn class_weights(&self, enc: &FrozenEncoder) -> Result<ClassWeights> {
        ClassWeights::from_prompt(enc, &self.prompt)
    }

    pub fn to_checkpoint(&self) -> String {
        let mut rec = KvRecord::new();
        rec.push("format", "owpt-prompt-v1").push("support", kv::join(&self.support));
        self.config.write(&mut rec, "train");
        rec.push("loss_history", kv::join(&self.loss_history));
        write_prompt(&mut rec, "prompt", &self.prompt);
        rec.to_text()
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let rec = KvRecord::parse(text)?;
        if rec.get("format") != Some("owpt-prompt-v1") {
            return Err(Error::Parse { line: 1, message: "not a prompt checkpoint".into() });
        }
        Ok(Self {
            prompt: read_prompt(&rec, "prompt")?,
            support: read_list(&rec, "support")?,
            loss_history: read_list(&rec, "loss_history")?,
            config: TrainConfig::read(&rec, "train")?,
        })
    }
}

pub(crate) fn read_list<T: std::str::FromStr>(rec: &KvRecord, key: &str) -> Result<Vec<T>> {
    let raw = rec.get(key).ok_or_else(|| Error::Parse { line: 0, message: format!("missing key {key}") })?;
    kv::split(raw).ok_or_else(|| Error::Parse { line: 0, message: format!("bad list for {key}") })
}

pub(crate) fn write_prompt(rec: &mut KvRecord, prefix: &str, prompt: &PromptVector) {
    rec.push(&format!("{prefix}.len"), prompt.len())
        .push(&format!("{prefix}.token_dim"), prompt.token_dim());
    for (i, row) in prompt.tokens().row_iter().enumerate() {
        let values: Vec<f64> = row.iter().copied().collect();
        rec.push(&format!("{prefix}.row.{i}"), kv::join(&values));
    }
}

pub(crate) fn read_prompt(rec: &KvRecord, prefix: &str) -> Result<PromptVector> {
    let len: usize = rec.require(&format!("{prefix}.len"))?;
    let dim: usize = rec.require(&format!("{prefix}.token_dim"))?;
    let mut values = Vec::with_capacity(len * dim);
    for i in 0..len {
        let row: Vec<f64> = read_list(rec, &format!("{prefix}.row.{i}"))?;
        if row.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
        }
        values.extend(row);
    }
    PromptVector::new(DMatrix::from_row_slice(len, dim, &values))
}

/// Mini-batches of one epoch: a seeded permutation cut into consecutive
/// chunks, the last one possibly short.
fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Mini-batches that all contain members of both groups: each group is
/// shuffled separately and dealt round-robin over the batches.
fn stratified_batches(rng: &mut ChaCha8Rng, group: &[bool], batch_size: usize) -> Vec<Vec<usize>> {
    let mut first: Vec<usize> = (0..group.len()).filter(|&i| !group[i]).collect();
    let mut second: Vec<usize> = (0..group.len()).filter(|&i| group[i]).collect();
    first.shuffle(rng);
    second.shuffle(rng);
    let count = group.len().div_ceil(batch_size).min(first.len()).min(second.len()).max(1);
    let mut batches = vec![Vec::new(); count];
    for (i, &idx) in first.iter().enumerate() {
        batches[i % count].push(idx);
    }
    for (i, &idx) in second.iter().enumerate() {
        batches[i % count].push(idx);
    }
    batches
}

pub(crate) enum Batching<'a> {
    Shuffled,
    /// Stratify on the flag (`true` marks the second group).
    Stratified(&'a [bool]),
}

/// The SGD loop shared by every trainer. `step` returns the loss and
/// gradient of one batch of example indices.
pub(crate) fn run_sgd<F>(
    prompt_len: usize,
    token_dim: usize,
    n: usize,
    cfg: &TrainConfig,
    batching: Batching<'_>,
    mut step: F,
) -> Result<(PromptVector, Vec<f64>)>
where
    F: FnMut(&PromptVector, &[usize]) -> Result<(f64, DMatrix<f64>)>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut prompt = PromptVector::new(gaussian_matrix(&mut rng, prompt_len, token_dim, PROMPT_INIT_SCALE))?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for t in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, t, cfg.epochs);
        let batches = match batching {
            Batching::Shuffled => shuffled_batches(&mut rng, n, cfg.batch_size),
            Batching::Stratified(group) => stratified_batches(&mut rng, group, cfg.batch_size),
        };
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grad) = step(&prompt, batch).map_err(|e| match e {
                Error::NumericalOverflow | Error::ZeroNormEmbedding => Error::Diverged(t),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged(t));
            }
            total += loss;
            prompt.descend(lr, &grad).map_err(|_| Error::Diverged(t))?;
        }
        history.push(total / batches.len() as f64);
    }
    Ok((prompt, history))
}

pub(crate) fn embed_all(enc: &FrozenEncoder, examples: &[LabeledExample]) -> Result<Vec<DVector<f64>>> {
    examples.iter().map(|e| enc.image_embedding(&e.feature)).collect()
}

/// Learns one prompt by minimizing mean cross-entropy over `support`.
pub fn tune_prompt(
    enc: &FrozenEncoder,
    train: &[LabeledExample],
    support: &[usize],
    temp: Temperature,
    prompt_len: usize,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(e) = train.iter().find(|e| !support.contains(&e.label)) {
        return Err(Error::UnknownClass(e.label));
    }
    let z = embed_all(enc, train)?;
    let (prompt, loss_history) = run_sgd(prompt_len, enc.token_dim(), train.len(), cfg, Batching::Shuffled, |p, idx| {
        let batch: Vec<BatchItem> = idx
            .iter()
            .map(|&i| BatchItem { z: &z[i], label: train[i].label, role: ItemRole::Labelled })
            .collect();
        loss_and_gradient(enc, p, support, temp, &batch, LossSpec::CrossEntropy)
    })?;
    Ok(TrainedClassifier { prompt, support: support.to_vec(), loss_history, config: *cfg })
}

/// Class probabilities of a tuned prompt over any `support`.
pub fn pt_predict(
    enc: &FrozenEncoder,
    classifier: &TrainedClassifier,
    support: &[usize],
    temp: Temperature,
    z: &DVector<f64>,
) -> Result<ProbabilityDistribution> {
    crate::model::classify(enc, &classifier.prompt, support, temp, z)
}
