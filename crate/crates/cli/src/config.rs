//! Layered settings: command-line flags over a JSON file over `MCLR_*`
//! environment variables over built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "MCLR_";

/// Every tunable a command may read. Keys are shared across commands so a
/// single config file can drive a whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub frames: usize,
    pub corpus_size: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: u64,
    pub cfg_weight: f64,
    pub sample_steps: usize,
    pub sigma: f64,
    pub factor: usize,
    pub height_multiplier: f64,
    pub distance: usize,
    /// Seeds per cell in evaluation suites.
    pub seeds: u64,
    pub host: String,
    pub port: u16,
}

impl Default for Settings {
    fn default() -> Self {
        let train = mclr::diffusion::TrainConfig::default();
        let diffusion = mclr::diffusion::DiffusionConfig::default();
        let counting = mclr::counting::CountingConfig::default();
        Self {
            seed: 0,
            frames: mclr::corpus::CorpusConfig::default().frames,
            corpus_size: 500,
            steps: train.steps,
            batch_size: train.batch_size,
            lr: train.lr,
            grad_clip: train.grad_clip.unwrap_or(0.0),
            log_every: 100,
            cfg_weight: diffusion.cfg_weight,
            sample_steps: diffusion.sample_steps,
            sigma: counting.sigma,
            factor: counting.downsample_factor,
            height_multiplier: counting.height_multiplier,
            distance: counting.distance,
            seeds: 20,
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

impl Settings {
    /// Merges the layers. `env` is passed in (rather than read here) so the
    /// precedence rules stay testable.
    pub fn resolve(
        flags: Map<String, Value>,
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let Value::Object(mut merged) = serde_json::to_value(Settings::default()).expect("settings serialize") else {
            unreachable!("settings serialize to an object")
        };
        for (key, raw) in env {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let name = name.to_ascii_lowercase();
            if name == "config" || !merged.contains_key(&name) {
                continue;
            }
            // Numbers and booleans parse as JSON; anything else is a string.
            let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
            merged.insert(name, value);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let Value::Object(map) =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            else {
                return Err(CliError::Usage(format!(
                    "config {} must be a JSON object",
                    path.display()
                )));
            };
            merged.extend(map);
        }
        merged.extend(flags);
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("settings: {e}")))
    }

    pub fn counting(&self) -> mclr::counting::CountingConfig {
        mclr::counting::CountingConfig {
            sigma: self.sigma,
            downsample_factor: self.factor,
            height_multiplier: self.height_multiplier,
            distance: self.distance,
        }
    }

    pub fn diffusion(&self) -> mclr::diffusion::DiffusionConfig {
        mclr::diffusion::DiffusionConfig {
            cfg_weight: self.cfg_weight,
            sample_steps: self.sample_steps,
            ..Default::default()
        }
    }

    pub fn train(&self) -> mclr::diffusion::TrainConfig {
        mclr::diffusion::TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            seed: self.seed,
            log_every: self.log_every,
            ..Default::default()
        }
    }
}

/// Collects the flags a user actually passed.
#[derive(Default)]
pub struct Flags(pub Map<String, Value>);

impl Flags {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0
                .insert(key.to_string(), serde_json::to_value(v).expect("flag value serializes"));
        }
        self
    }
}
