//! Detector ensembles over leave-out class partitions, Otsu thresholds,
//! per-detector sub-classifiers and score-routed inference.

use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;

use crate::data::{split_simulated, OpenWorldDataset};
use crate::error::{Error, Result};
use crate::kv::{self, KvRecord};
use crate::model::{
    loss_and_gradient, seeded_rng, BatchItem, ClassSpace, ClassWeights, FrozenEncoder, ItemRole, LossSpec,
    PromptVector, Temperature,
};
use crate::tuning::{embed_all, read_list, read_prompt, run_sgd, write_prompt, Batching, TrainConfig, TrainedClassifier};
use crate::zeroshot::ZeroShotModel;

/// One leave-out split of the base classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorPartition {
    /// Zero-based detector index.
    pub index: usize,
    pub sim_base: Vec<usize>,
    pub sim_new: Vec<usize>,
}

/// Shuffles `base` with `seed` and cuts it into `k` folds whose sizes
/// differ by at most one; partition `i` treats fold `i` as its new classes.
pub fn partition_classes(base: &[usize], k: usize, seed: u64) -> Result<Vec<DetectorPartition>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    if base.len() < k {
        return Err(Error::TooFewBaseClasses { base: base.len(), folds: k });
    }
    let mut order = base.to_vec();
    order.shuffle(&mut seeded_rng(seed));
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let size = base.len() / k + usize::from(i < base.len() % k);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds
        .iter()
        .enumerate()
        .map(|(index, fold)| {
            let mut sim_base: Vec<usize> = base.iter().copied().filter(|c| !fold.contains(c)).collect();
            sim_base.sort_unstable();
            DetectorPartition { index, sim_base, sim_new: fold.clone() }
        })
        .collect())
}

/// Everything the detector and sub-classifier trainers share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoopConfig {
    pub folds: usize,
    pub partition_seed: u64,
    pub prompt_len: usize,
    pub temp: Temperature,
    /// Detector `i` trains with seed `detector.seed + i`.
    pub detector: TrainConfig,
    /// Sub-classifier `i` trains with seed `classifier.seed + i`.
    pub classifier: TrainConfig,
}

impl Default for DecoopConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            partition_seed: 0,
            prompt_len: 16,
            temp: Temperature::default(),
            detector: TrainConfig { epochs: 50, ..TrainConfig::default() },
            classifier: TrainConfig { epochs: 100, ..TrainConfig::default() },
        }
    }
}

/// Trains one detector prompt with the entropy-margin loss over the base vocabulary.
pub fn train_detector(
    enc: &FrozenEncoder,
    dataset: &OpenWorldDataset,
    partition: &DetectorPartition,
    temp: Temperature,
    prompt_len: usize,
    cfg: &TrainConfig,
) -> Result<PromptVector> {
    let (d_base, d_new) = split_simulated(dataset, &partition.sim_base, &partition.sim_new)?;
    if d_base.is_empty() || d_new.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let train = &dataset.train;
    let z = embed_all(enc, train)?;
    let mut is_new = vec![false; train.len()];
    for &i in &d_new {
        is_new[i] = true;
    }
    let support = dataset.class_space.base();
    let spec = LossSpec::EntropyMargin { gamma: cfg.gamma };
    let (prompt, _) = run_sgd(prompt_len, enc.token_dim(), train.len(), cfg, Batching::Stratified(&is_new), |p, idx| {
        let batch: Vec<BatchItem> = idx
            .iter()
            .map(|&i| BatchItem {
                z: &z[i],
                label: train[i].label,
                role: if is_new[i] { ItemRole::SimulatedNew } else { ItemRole::Labelled },
            })
            .collect();
        loss_and_gradient(enc, p, support, temp, &batch, spec)
    })?;
    Ok(prompt)
}

/// Largest probability on the partition's simulated base classes of the
/// detector's softmax over `vocabulary`. Low values suggest a new class.
pub fn detector_score(
    weights: &ClassWeights,
    partition: &DetectorPartition,
    temp: Temperature,
    z: &DVector<f64>,
    vocabulary: &[usize],
) -> Result<f64> {
    if let Some(&missing) = partition.sim_base.iter().find(|c| !vocabulary.contains(c)) {
        return Err(Error::UnknownClass(missing));
    }
    Ok(weights.classify(vocabulary, temp, z)?.max_over(&partition.sim_base))
}

/// Relative slack under which two between-class variances count as tied.
pub const OTSU_TIE_TOLERANCE: f64 = 1e-12;

/// Exact Otsu threshold over raw samples.
///
/// Candidates are the midpoints between consecutive distinct scores; class 0
/// holds the scores below the candidate. The candidate with the largest
/// `w0 * w1 * (mu0 - mu1)^2` wins, the smallest one on (near-)ties.
pub fn otsu_threshold(scores: &[f64]) -> Result<f64> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::OutOfRange("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    let mut candidates = Vec::new();
    let mut below_sum = 0.0;
    for i in 0..sorted.len().saturating_sub(1) {
        below_sum += sorted[i];
        if sorted[i + 1] == sorted[i] {
            continue;
        }
        let n0 = (i + 1) as f64;
        let n1 = n - n0;
        let mu0 = below_sum / n0;
        let mu1 = (total - below_sum) / n1;
        let variance = (n0 / n) * (n1 / n) * (mu0 - mu1).powi(2);
        candidates.push(((sorted[i] + sorted[i + 1]) / 2.0, variance));
    }
    let best = candidates
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .find(|&&(_, v)| v >= best - OTSU_TIE_TOLERANCE * best.abs())
        .map(|&(t, _)| t)
        .ok_or(Error::DegenerateScores)
}

/// Trains sub-classifier `detector.partition.index`: summed cross-entropy
/// on the examples the detector accepts, summed KL to the zero-shot
/// distribution on the ones it rejects, both over the base vocabulary.
pub fn train_subclassifier(
    dataset: &OpenWorldDataset,
    detector: &Detector,
    theta: f64,
    zs: &ZeroShotModel,
    prompt_len: usize,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    let enc = zs.encoder();
    let temp = zs.temperature();
    let support = dataset.class_space.base();
    let train = &dataset.train;
    let z = embed_all(enc, train)?;
    let mut accepted = Vec::with_capacity(train.len());
    let mut reference = Vec::with_capacity(train.len());
    for zi in &z {
        accepted.push(detector_score(&detector.weights, &detector.partition, temp, zi, support)? >= theta);
        reference.push(zs.predict(support, zi)?.probs().to_vec());
    }
    if !accepted.iter().any(|&a| a) {
        return Err(Error::DetectorRejectsAll);
    }
    let (prompt, loss_history) = run_sgd(prompt_len, enc.token_dim(), train.len(), cfg, Batching::Shuffled, |p, idx| {
        let batch: Vec<BatchItem> = idx
            .iter()
            .map(|&i| BatchItem {
                z: &z[i],
                label: train[i].label,
                role: if accepted[i] { ItemRole::Labelled } else { ItemRole::Reference(&reference[i]) },
            })
            .collect();
        loss_and_gradient(enc, p, support, temp, &batch, LossSpec::CrossEntropyKl)
    })?;
    Ok(TrainedClassifier { prompt, support: support.to_vec(), loss_history, config: *cfg })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub partition: DetectorPartition,
    pub prompt: PromptVector,
    pub config: TrainConfig,
    weights: ClassWeights,
}

impl Detector {
    pub fn new(enc: &FrozenEncoder, partition: DetectorPartition, prompt: PromptVector, config: TrainConfig) -> Result<Self> {
        let weights = ClassWeights::from_prompt(enc, &prompt)?;
        Ok(Self { partition, prompt, config, weights })
    }

    pub fn weights(&self) -> &ClassWeights {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorEnsemble {
    pub detectors: Vec<Detector>,
    /// Per-detector Otsu thresholds on the training scores.
    pub thresholds: Vec<f64>,
    /// Mean of `thresholds`.
    pub theta: f64,
}

/// Where an input was routed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    ZeroShot,
    /// Zero-based sub-classifier index.
    SubClassifier(usize),
}

/// Zero-shot when every score is below `theta`, otherwise the first
/// detector with the largest score.
pub fn route(scores: &[f64], theta: f64) -> Route {
    match crate::numeric::argmax(scores) {
        Some(i) if scores[i] >= theta => Route::SubClassifier(i),
        _ => Route::ZeroShot,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoopModel {
    pub ensemble: DetectorEnsemble,
    pub sub_classifiers: Vec<TrainedClassifier>,
    sub_weights: Vec<ClassWeights>,
    zs: ZeroShotModel,
    class_space: ClassSpace,
    /// Per detector: its simulated base classes followed by all new classes.
    test_vocabularies: Vec<Vec<usize>>,
}

impl DecoopModel {
    pub fn new(
        ensemble: DetectorEnsemble,
        sub_classifiers: Vec<TrainedClassifier>,
        zs: ZeroShotModel,
        class_space: ClassSpace,
    ) -> Result<Self> {
        let k = ensemble.detectors.len();
        if k == 0 || sub_classifiers.len() != k || ensemble.thresholds.len() != k {
            return Err(Error::InvalidConfig("detector, threshold and sub-classifier counts differ".into()));
        }
        let sub_weights = sub_classifiers
            .iter()
            .map(|s| s.class_weights(zs.encoder()))
            .collect::<Result<Vec<_>>>()?;
        let test_vocabularies = ensemble
            .detectors
            .iter()
            .map(|d| d.partition.sim_base.iter().chain(class_space.new_classes()).copied().collect())
            .collect();
        Ok(Self { ensemble, sub_classifiers, sub_weights, zs, class_space, test_vocabularies })
    }

    pub fn zero_shot(&self) -> &ZeroShotModel {
        &self.zs
    }

    pub fn class_space(&self) -> &ClassSpace {
        &self.class_space
    }

    /// Test-time detector scores, vocabulary = simulated base classes plus all new classes.
    pub fn scores(&self, z: &DVector<f64>) -> Result<Vec<f64>> {
        let temp = self.zs.temperature();
        self.ensemble
            .detectors
            .iter()
            .zip(&self.test_vocabularies)
            .map(|(d, vocab)| detector_score(&d.weights, &d.partition, temp, z, vocab))
            .collect()
    }

    pub fn predict(&self, z: &DVector<f64>) -> Result<(usize, Route)> {
        let scores = self.scores(z)?;
        let routed = route(&scores, self.ensemble.theta);
        let all = self.class_space.all();
        let dist = match routed {
            Route::ZeroShot => self.zs.predict(all, z)?,
            Route::SubClassifier(i) => self.sub_weights[i].classify(all, self.zs.temperature(), z)?,
        };
        Ok((dist.argmax(), routed))
    }

    /// Largest test-time detector score; higher means more likely a base class.
    pub fn new_score(&self, z: &DVector<f64>) -> Result<f64> {
        Ok(self.scores(z)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Text bundle with every prompt, partition, threshold and training config.
    pub fn to_bundle(&self) -> String {
        let mut rec = KvRecord::new();
        rec.push("format", "owpt-decoop-v1")
            .push("num_classes", self.class_space.num_classes())
            .push("base", kv::join(self.class_space.base()))
            .push("temperature", self.zs.temperature().value())
            .push("zs.count", self.zs.fixed_prompts().len());
        for (i, p) in self.zs.fixed_prompts().iter().enumerate() {
            write_prompt(&mut rec, &format!("zs.{i}"), p);
        }
        rec.push("folds", self.ensemble.detectors.len())
            .push("thresholds", kv::join(&self.ensemble.thresholds))
            .push("theta", self.ensemble.theta);
        for (i, d) in self.ensemble.detectors.iter().enumerate() {
            let prefix = format!("detector.{i}");
            rec.push(&format!("{prefix}.sim_base"), kv::join(&d.partition.sim_base))
                .push(&format!("{prefix}.sim_new"), kv::join(&d.partition.sim_new));
            d.config.write(&mut rec, &prefix);
            write_prompt(&mut rec, &prefix, &d.prompt);
        }
        for (i, s) in self.sub_classifiers.iter().enumerate() {
            let prefix = format!("classifier.{i}");
            rec.push(&format!("{prefix}.loss_history"), kv::join(&s.loss_history));
            s.config.write(&mut rec, &prefix);
            write_prompt(&mut rec, &prefix, &s.prompt);
        }
        rec.to_text()
    }

    /// Rebuilds a model from [`DecoopModel::to_bundle`] output and the frozen encoder.
    pub fn from_bundle(text: &str, enc: Arc<FrozenEncoder>) -> Result<Self> {
        let rec = KvRecord::parse(text)?;
        if rec.get("format") != Some("owpt-decoop-v1") {
            return Err(Error::Parse { line: 1, message: "not a model bundle".into() });
        }
        let class_space = ClassSpace::new(rec.require("num_classes")?, &read_list::<usize>(&rec, "base")?)?;
        let temp = Temperature::new(rec.require("temperature")?)?;
        let zs_count: usize = rec.require("zs.count")?;
        let fixed = (0..zs_count)
            .map(|i| read_prompt(&rec, &format!("zs.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let zs = ZeroShotModel::new(enc.clone(), fixed, temp)?;
        let folds: usize = rec.require("folds")?;
        let mut detectors = Vec::with_capacity(folds);
        let mut subs = Vec::with_capacity(folds);
        for i in 0..folds {
            let prefix = format!("detector.{i}");
            let partition = DetectorPartition {
                index: i,
                sim_base: read_list(&rec, &format!("{prefix}.sim_base"))?,
                sim_new: read_list(&rec, &format!("{prefix}.sim_new"))?,
            };
            let config = TrainConfig::read(&rec, &prefix)?;
            detectors.push(Detector::new(&enc, partition, read_prompt(&rec, &prefix)?, config)?);
            let prefix = format!("classifier.{i}");
            subs.push(TrainedClassifier {
                prompt: read_prompt(&rec, &prefix)?,
                support: class_space.base().to_vec(),
                loss_history: read_list(&rec, &format!("{prefix}.loss_history"))?,
                config: TrainConfig::read(&rec, &prefix)?,
            });
        }
        let ensemble = DetectorEnsemble {
            detectors,
            thresholds: read_list(&rec, "thresholds")?,
            theta: rec.require("theta")?,
        };
        Self::new(ensemble, subs, zs, class_space)
    }
}

/// Full training: partitions, detectors, Otsu thresholds, then sub-classifiers
/// trained on the split induced by the averaged threshold.
pub fn train_decoop(dataset: &OpenWorldDataset, zs: &ZeroShotModel, cfg: &DecoopConfig) -> Result<DecoopModel> {
    let enc = zs.encoder();
    let base = dataset.class_space.base();
    let partitions = partition_classes(base, cfg.folds, cfg.partition_seed)?;
    let z = embed_all(enc, &dataset.train)?;
    let mut detectors = Vec::with_capacity(cfg.folds);
    let mut thresholds = Vec::with_capacity(cfg.folds);
    for partition in partitions {
        let det_cfg = TrainConfig { seed: cfg.detector.seed + partition.index as u64, ..cfg.detector };
        let prompt = train_detector(enc, dataset, &partition, cfg.temp, cfg.prompt_len, &det_cfg)?;
        let detector = Detector::new(enc, partition, prompt, det_cfg)?;
        let scores = z
            .iter()
            .map(|zi| detector_score(&detector.weights, &detector.partition, cfg.temp, zi, base))
            .collect::<Result<Vec<_>>>()?;
        thresholds.push(otsu_threshold(&scores)?);
        detectors.push(detector);
    }
    let theta = thresholds.iter().sum::<f64>() / thresholds.len() as f64;
    let subs = detectors
        .iter()
        .map(|d| {
            let sub_cfg = TrainConfig { seed: cfg.classifier.seed + d.partition.index as u64, ..cfg.classifier };
            train_subclassifier(dataset, d, theta, zs, cfg.prompt_len, &sub_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let ensemble = DetectorEnsemble { detectors, thresholds, theta };
    DecoopModel::new(ensemble, subs, zs.clone(), dataset.class_space.clone())
}
