//! Flat `section.key=value` experiment configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use openworld::kv::{self, KvRecord};
use openworld::pipeline::{Method, PipelineConfig};

use crate::CliError;

/// Environment variable that overrides `run.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "OWPT_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// First column of every CSV row.
    pub run_id: String,
    /// Margins visited by `sweep-gamma`.
    pub gammas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: (1..=5).collect(),
            output_dir: PathBuf::from("out"),
            run_id: "owpt".into(),
            gammas: vec![0.1, 0.2, 0.4, 0.8],
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, CliError> {
    raw.parse().map_err(|_| CliError::Config { key: key.to_string(), message: format!("cannot parse {raw:?}") })
}

fn list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>, CliError> {
    kv::split(raw).ok_or_else(|| CliError::Config { key: key.to_string(), message: format!("cannot parse list {raw:?}") })
}

impl ExperimentConfig {
    /// Parses a config file body. Missing keys keep their defaults; unknown
    /// keys and unparsable values are errors naming the key.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let rec = KvRecord::parse(text).map_err(|e| CliError::Config { key: String::new(), message: e.to_string() })?;
        let mut cfg = Self::default();
        for (key, raw) in rec.entries() {
            cfg.set(key, raw)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let p = &mut self.pipeline;
        match key {
            "dataset.C" => p.dataset.num_classes = value(key, raw)?,
            "dataset.d_feat" => p.dataset.feature_dim = value(key, raw)?,
            "dataset.noise_sigma" => p.dataset.noise_sigma = value(key, raw)?,
            "dataset.min_separation" => p.dataset.min_separation = value(key, raw)?,
            "dataset.shots_per_class" => p.dataset.shots_per_class = value(key, raw)?,
            "dataset.test_per_class" => p.dataset.test_per_class = value(key, raw)?,
            "dataset.mixing_ratio" => p.dataset.mixing_ratio = value(key, raw)?,
            "dataset.base_fraction" => p.dataset.base_fraction = value(key, raw)?,
            "world.token_dim" => p.world.token_dim = value(key, raw)?,
            "world.embed_dim" => p.world.embed_dim = value(key, raw)?,
            "world.prompt_len" => p.world.prompt_len = value(key, raw)?,
            "world.temperature" => p.world.temperature = value(key, raw)?,
            "world.saturation" => p.world.saturation = value(key, raw)?,
            "world.text_scale" => p.world.text_scale = value(key, raw)?,
            "world.blank_pairs" => p.world.blank_pairs = value(key, raw)?,
            "world.ensemble_size" => p.world.ensemble_size = value(key, raw)?,
            "train.lr" => p.lr = value(key, raw)?,
            "train.batch_size" => p.batch_size = value(key, raw)?,
            "train.coop_epochs" => p.coop_epochs = value(key, raw)?,
            "train.detector_epochs" => p.detector_epochs = value(key, raw)?,
            "train.classifier_epochs" => p.classifier_epochs = value(key, raw)?,
            "train.gamma" => p.gamma = value(key, raw)?,
            "decoop.K" => p.folds = value(key, raw)?,
            "run.methods" => {
                let mut methods: Vec<Method> = Vec::new();
                for m in list::<Method>(key, raw)? {
                    if !methods.contains(&m) {
                        methods.push(m);
                    }
                }
                self.methods = methods;
            }
            "run.seeds" => self.seeds = list(key, raw)?,
            "run.output_dir" => self.output_dir = PathBuf::from(raw),
            "run.id" => self.run_id = raw.to_string(),
            "sweep.gammas" => self.gammas = list(key, raw)?,
            _ => return Err(CliError::Config { key: key.to_string(), message: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, message: &str| Err(CliError::Config { key: key.into(), message: message.into() });
        if self.methods.is_empty() {
            return bad("run.methods", "no methods given");
        }
        if self.run_id.is_empty() || self.run_id.contains(',') {
            return bad("run.id", "must be nonempty and comma-free");
        }
        if self.seeds.is_empty() {
            return bad("run.seeds", "no seeds given");
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return bad("sweep.gammas", "margins must be finite and nonnegative");
        }
        if !(self.pipeline.gamma >= 0.0 && self.pipeline.gamma.is_finite()) {
            return bad("train.gamma", "margin must be finite and nonnegative");
        }
        self.pipeline.validate().map_err(|e| CliError::Config { key: String::new(), message: e.to_string() })
    }

    /// Applies [`OUTPUT_DIR_ENV`] when it is set and nonempty.
    pub fn with_env_output_dir(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    /// Every key with its effective value; parses back to the same config.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let d = &p.dataset;
        let w = &p.world;
        let methods: Vec<&str> = self.methods.iter().map(|m| m.as_str()).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("dataset.C", d.num_classes.to_string());
        put("dataset.d_feat", d.feature_dim.to_string());
        put("dataset.noise_sigma", d.noise_sigma.to_string());
        put("dataset.min_separation", d.min_separation.to_string());
        put("dataset.shots_per_class", d.shots_per_class.to_string());
        put("dataset.test_per_class", d.test_per_class.to_string());
        put("dataset.mixing_ratio", d.mixing_ratio.to_string());
        put("dataset.base_fraction", d.base_fraction.to_string());
        put("world.token_dim", w.token_dim.to_string());
        put("world.embed_dim", w.embed_dim.to_string());
        put("world.prompt_len", w.prompt_len.to_string());
        put("world.temperature", w.temperature.to_string());
        put("world.saturation", w.saturation.to_string());
        put("world.text_scale", w.text_scale.to_string());
        put("world.blank_pairs", w.blank_pairs.to_string());
        put("world.ensemble_size", w.ensemble_size.to_string());
        put("train.lr", p.lr.to_string());
        put("train.batch_size", p.batch_size.to_string());
        put("train.coop_epochs", p.coop_epochs.to_string());
        put("train.detector_epochs", p.detector_epochs.to_string());
        put("train.classifier_epochs", p.classifier_epochs.to_string());
        put("train.gamma", p.gamma.to_string());
        put("decoop.K", p.folds.to_string());
        put("run.methods", methods.join(","));
        put("run.seeds", kv::join(&self.seeds));
        put("run.output_dir", self.output_dir.display().to_string());
        put("run.id", self.run_id.clone());
        put("sweep.gammas", kv::join(&self.gammas));
        out
    }
}
