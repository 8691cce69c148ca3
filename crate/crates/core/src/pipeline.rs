//! One seeded end-to-end experiment: build the world, train every
//! requested method, evaluate on the mixed test set.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;

use crate::data::{generate, DatasetSpec, OpenWorldDataset, SpaceTag};
use crate::decoop::{train_decoop, DecoopConfig, DecoopModel};
use crate::dept::{DeptModel, TheoremReport};
use crate::error::{Error, Result};
use crate::metrics::{auroc, evaluate, EvalReport};
use crate::model::{AlignedWorld, ClassWeights, FrozenEncoder, Temperature};
use crate::tuning::{tune_prompt, TrainConfig, TrainedClassifier};
use crate::zeroshot::ZeroShotModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Zs,
    PromptEns,
    Coop,
    Dept,
    Decoop,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Zs, Method::PromptEns, Method::Coop, Method::Dept, Method::Decoop];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zs => "zs",
            Method::PromptEns => "prompt-ens",
            Method::Coop => "coop",
            Method::Dept => "dept",
            Method::Decoop => "decoop",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s}")))
    }
}

/// Encoder and prompt geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub token_dim: usize,
    pub embed_dim: usize,
    pub prompt_len: usize,
    pub temperature: f64,
    pub saturation: f64,
    pub text_scale: f64,
    pub blank_pairs: usize,
    pub ensemble_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let aligned = AlignedWorld::default();
        Self {
            token_dim: 32,
            embed_dim: 32,
            prompt_len: aligned.prompt_len,
            temperature: Temperature::default().value(),
            saturation: aligned.saturation,
            text_scale: aligned.text_scale,
            blank_pairs: aligned.blank_pairs,
            ensemble_size: 4,
        }
    }
}

/// Everything that defines one seeded run except the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// The `seed` field is replaced by the run seed.
    pub dataset: DatasetSpec,
    pub world: WorldConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub coop_epochs: usize,
    pub detector_epochs: usize,
    pub classifier_epochs: usize,
    pub gamma: f64,
    pub folds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            world: WorldConfig::default(),
            lr: 0.002,
            batch_size: 32,
            coop_epochs: 100,
            detector_epochs: 50,
            classifier_epochs: 100,
            gamma: 0.4,
            folds: 3,
        }
    }
}

/// Independent RNG streams of one run.
mod stream {
    pub const ENCODER: u64 = 1;
    pub const CLIP: u64 = 2;
    pub const ENSEMBLE: u64 = 10;
    pub const COOP: u64 = 20;
    pub const PARTITION: u64 = 30;
    pub const DETECTOR: u64 = 40;
    pub const CLASSIFIER: u64 = 50;
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(stream)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        Temperature::new(self.world.temperature)?;
        if self.world.ensemble_size == 0 || self.world.prompt_len == 0 {
            return Err(Error::InvalidConfig("ensemble_size and prompt_len must be positive".into()));
        }
        for epochs in [self.coop_epochs, self.detector_epochs, self.classifier_epochs] {
            TrainConfig { epochs, lr: self.lr, batch_size: self.batch_size, seed: 0, gamma: self.gamma }.validate()?;
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.dataset.num_base() < self.folds {
            return Err(Error::TooFewBaseClasses { base: self.dataset.num_base(), folds: self.folds });
        }
        Ok(())
    }

    fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { epochs, lr: self.lr, batch_size: self.batch_size, seed, gamma: self.gamma }
    }

    pub fn decoop_config(&self, seed: u64) -> DecoopConfig {
        DecoopConfig {
            folds: self.folds,
            partition_seed: derive_seed(seed, stream::PARTITION),
            prompt_len: self.world.prompt_len,
            temp: self.temperature(),
            detector: self.train_config(self.detector_epochs, derive_seed(seed, stream::DETECTOR)),
            classifier: self.train_config(self.classifier_epochs, derive_seed(seed, stream::CLASSIFIER)),
        }
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::new(self.world.temperature).unwrap_or_default()
    }
}

/// Dataset and prototype-aligned encoder of one seed.
pub fn build_world(cfg: &PipelineConfig, seed: u64) -> Result<(OpenWorldDataset, Arc<FrozenEncoder>)> {
    cfg.validate()?;
    let dataset = generate(&DatasetSpec { seed, ..cfg.dataset })?;
    let world = AlignedWorld {
        saturation: cfg.world.saturation,
        text_scale: cfg.world.text_scale,
        blank_pairs: cfg.world.blank_pairs,
        prompt_len: cfg.world.prompt_len,
    };
    let enc = FrozenEncoder::aligned(
        &dataset.prototypes,
        cfg.world.token_dim,
        cfg.world.embed_dim,
        world,
        derive_seed(seed, stream::ENCODER),
    )?;
    Ok((dataset, Arc::new(enc)))
}

/// Evaluation of one method plus the scores its base/new AUROC is computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub report: EvalReport,
    pub base_scores: Vec<f64>,
    pub new_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub results: Vec<MethodResult>,
    /// Present when DePT was trained.
    pub theorem: Option<TheoremReport>,
    pub coop: Option<TrainedClassifier>,
    pub decoop: Option<DecoopModel>,
}

impl SeedOutcome {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

/// All trained pieces of one seed, built lazily.
pub struct SeedRun {
    pub cfg: PipelineConfig,
    pub seed: u64,
    pub dataset: OpenWorldDataset,
    pub enc: Arc<FrozenEncoder>,
    pub test_z: Vec<DVector<f64>>,
    clip: Option<ZeroShotModel>,
    ensemble: Option<ZeroShotModel>,
    coop: Option<TrainedClassifier>,
}

impl SeedRun {
    pub fn new(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let (dataset, enc) = build_world(cfg, seed)?;
        let test_z = dataset
            .test
            .iter()
            .map(|e| enc.image_embedding(&e.feature))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg: *cfg, seed, dataset, enc, test_z, clip: None, ensemble: None, coop: None })
    }

    /// Single fixed prompt zero-shot model.
    pub fn clip(&mut self) -> Result<&ZeroShotModel> {
        if self.clip.is_none() {
            let w = &self.cfg.world;
            self.clip = Some(ZeroShotModel::seeded(
                self.enc.clone(),
                w.prompt_len,
                1,
                derive_seed(self.seed, stream::CLIP),
                self.cfg.temperature(),
            )?);
        }
        Ok(self.clip.as_ref().expect("just built"))
    }

    /// Zero-shot model averaging several fixed prompts.
    pub fn prompt_ensemble(&mut self) -> Result<&ZeroShotModel> {
        if self.ensemble.is_none() {
            let w = &self.cfg.world;
            self.ensemble = Some(ZeroShotModel::seeded(
                self.enc.clone(),
                w.prompt_len,
                w.ensemble_size,
                derive_seed(self.seed, stream::ENSEMBLE),
                self.cfg.temperature(),
            )?);
        }
        Ok(self.ensemble.as_ref().expect("just built"))
    }

    pub fn coop(&mut self) -> Result<&TrainedClassifier> {
        if self.coop.is_none() {
            let cfg = self.cfg.train_config(self.cfg.coop_epochs, derive_seed(self.seed, stream::COOP));
            self.coop = Some(tune_prompt(
                &self.enc,
                &self.dataset.train,
                self.dataset.class_space.base(),
                self.cfg.temperature(),
                self.cfg.world.prompt_len,
                &cfg,
            )?);
        }
        Ok(self.coop.as_ref().expect("just built"))
    }

    pub fn dept(&mut self) -> Result<DeptModel> {
        let pt = self.coop()?.clone();
        let zs = self.clip()?.clone();
        DeptModel::new(zs, pt, self.dataset.class_space.clone())
    }

    pub fn decoop(&mut self) -> Result<DecoopModel> {
        let zs = self.prompt_ensemble()?.clone();
        train_decoop(&self.dataset, &zs, &self.cfg.decoop_config(self.seed))
    }

    fn labelled_test(&self) -> Vec<(DVector<f64>, usize)> {
        self.test_z.iter().cloned().zip(self.dataset.test.iter().map(|e| e.label)).collect()
    }

    pub fn theorem(&mut self) -> Result<TheoremReport> {
        let dept = self.dept()?;
        dept.check_theorem(&self.labelled_test())
    }

    /// Evaluates `predict` and the AUROC of `score` (higher = base) on the test set.
    fn assess<P, S>(&self, method: Method, mut predict: P, mut score: S) -> Result<MethodResult>
    where
        P: FnMut(&DVector<f64>) -> Result<usize>,
        S: FnMut(&DVector<f64>) -> Result<f64>,
    {
        let mut index = 0usize;
        let report = evaluate(
            |_| {
                let out = predict(&self.test_z[index]);
                index += 1;
                out
            },
            &self.dataset.test,
        )?;
        let (mut base_scores, mut new_scores) = (Vec::new(), Vec::new());
        for (z, e) in self.test_z.iter().zip(&self.dataset.test) {
            let s = score(z)?;
            match e.space {
                SpaceTag::Base => base_scores.push(s),
                SpaceTag::New => new_scores.push(s),
            }
        }
        let report = report.with_auroc(auroc(&base_scores, &new_scores)?);
        Ok(MethodResult { method, report, base_scores, new_scores })
    }

    fn assess_weights(&self, method: Method, weights: &ClassWeights) -> Result<MethodResult> {
        let temp = self.cfg.temperature();
        let space = &self.dataset.class_space;
        self.assess(
            method,
            |z| Ok(weights.classify(space.all(), temp, z)?.argmax()),
            |z| Ok(weights.classify(space.all(), temp, z)?.max_over(space.base())),
        )
    }
}

/// Trains and evaluates `methods` for one seed.
pub fn run_seed(cfg: &PipelineConfig, seed: u64, methods: &[Method]) -> Result<SeedOutcome> {
    let mut run = SeedRun::new(cfg, seed)?;
    let mut results = Vec::new();
    let mut theorem = None;
    let mut decoop_model = None;
    for &method in methods {
        let result = match method {
            Method::Zs => {
                let w = run.clip()?.weights().clone();
                run.assess_weights(method, &w)?
            }
            Method::PromptEns => {
                let w = run.prompt_ensemble()?.weights().clone();
                run.assess_weights(method, &w)?
            }
            Method::Coop => {
                let enc = run.enc.clone();
                let w = run.coop()?.class_weights(&enc)?;
                run.assess_weights(method, &w)?
            }
            Method::Dept => {
                let dept = run.dept()?;
                theorem = Some(dept.check_theorem(&run.labelled_test())?);
                let space = run.dataset.class_space.clone();
                run.assess(
                    method,
                    |z| Ok(dept.predict(z)?.0),
                    |z| Ok(dept.zero_shot().msp_space_scores(&space, z)?.0),
                )?
            }
            Method::Decoop => {
                let model = run.decoop()?;
                let result = run.assess(method, |z| Ok(model.predict(z)?.0), |z| model.new_score(z))?;
                decoop_model = Some(model);
                result
            }
        };
        results.push(result);
    }
    Ok(SeedOutcome { seed, results, theorem, coop: run.coop.clone(), decoop: decoop_model })
}
