//! Flat TOML run configuration shared by the train and eval commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kgprompt::describe::{load_cache, DescriptionCache};
use kgprompt::encoder::{EncoderBackend, RemoteEncoder, ToyEncoder};
use kgprompt::error::{Error, Result};
use kgprompt::fixtures::{MASKPAD_DESCRIPTIONS_JSON, MASKPAD_KG_JSON};
use kgprompt::kg::{parse_kg, KnowledgeGraph};
use kgprompt::model::ModelSpec;
use kgprompt::trainer::TrainConfig;

/// Every run setting in one flat file; unknown keys are rejected and
/// missing keys fall back to the reference defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub tau: f64,
    pub embedding_width: usize,
    pub feature_width: usize,
    pub hidden_width: usize,
    pub context_length: usize,
    pub patch_grid: usize,
    pub image_size: usize,
    pub backend: String,
    pub encoder_url: Option<String>,
    pub encoder_seed: u64,
    pub llm_url: Option<String>,
    pub kg_path: Option<PathBuf>,
    pub cache_path: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            lambda: 0.5,
            tau: 0.01,
            embedding_width: 16,
            feature_width: 16,
            hidden_width: 16,
            context_length: 2,
            patch_grid: 4,
            image_size: 64,
            backend: "toy".into(),
            encoder_url: None,
            encoder_seed: 7,
            llm_url: None,
            kg_path: None,
            cache_path: None,
            train_manifest: None,
            test_manifest: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        for (name, value) in [
            ("embedding_width", self.embedding_width),
            ("feature_width", self.feature_width),
            ("hidden_width", self.hidden_width),
            ("context_length", self.context_length),
            ("patch_grid", self.patch_grid),
            ("image_size", self.image_size),
        ] {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_grid) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} is not divisible by patch_grid {}",
                self.image_size, self.patch_grid
            )));
        }
        match self.backend.as_str() {
            "toy" => {}
            "remote" => {
                if self.encoder_url.is_none() {
                    return Err(Error::InvalidConfig(
                        "backend `remote` needs encoder_url".into(),
                    ));
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "backend must be `toy` or `remote`, got `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            embedding_width: self.embedding_width,
            feature_width: self.feature_width,
            hidden_width: self.hidden_width,
            context_length: self.context_length,
            tau: self.tau,
            lambda: self.lambda,
        }
    }

    pub fn encoder_backend(&self) -> EncoderBackend {
        match self.backend.as_str() {
            "remote" => EncoderBackend::Remote(RemoteEncoder {
                url: self.encoder_url.clone().expect("validated"),
                grid: self.patch_grid,
            }),
            _ => EncoderBackend::Toy(ToyEncoder::new(
                self.feature_width,
                self.patch_grid,
                self.encoder_seed,
            )),
        }
    }

    pub fn load_graph(&self) -> Result<KnowledgeGraph> {
        match &self.kg_path {
            Some(path) => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                parse_kg(&bytes)
            }
            None => parse_kg(MASKPAD_KG_JSON.as_bytes()),
        }
    }

    pub fn load_cache(&self) -> Result<DescriptionCache> {
        match &self.cache_path {
            Some(path) => load_cache(path),
            None => DescriptionCache::from_json(MASKPAD_DESCRIPTIONS_JSON),
        }
    }
}
