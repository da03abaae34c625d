//! Run configuration documents and presets.

use std::path::{Path, PathBuf};

use mmcd_core::dataset::{read_json, DEFAULT_COVERAGE};
use mmcd_core::synthcity::SceneConfig;
use mmcd_model::backbone::BackboneConfig;
use mmcd_model::decoder::{DecoderConfig, SWEEP_TEMPERATURES};
use mmcd_model::train::{OptimizerConfig, TrainConfig};
use mmcd_model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seeds scene generation and training when set.
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub num_scenes: usize,
    pub tile_size: usize,
    pub keep_empty_tiles: bool,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Central quantile range of the height normalization.
    pub coverage: f64,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub eval_split: String,
    pub eval_batch_size: usize,
    pub histogram_bins: usize,
    pub sweep_temperatures: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            scene: SceneConfig::default(),
            num_scenes: 20,
            tile_size: 128,
            keep_empty_tiles: true,
            train_fraction: 0.68,
            val_fraction: 0.08,
            coverage: DEFAULT_COVERAGE,
            train: TrainConfig::default(),
            data_dir: None,
            eval_split: "test".into(),
            eval_batch_size: 4,
            histogram_bins: 40,
            sweep_temperatures: SWEEP_TEMPERATURES.to_vec(),
        }
    }
}

impl RunConfig {
    /// Small scenes and a narrow network sized for a single CPU core.
    pub fn toy() -> Self {
        let scene = SceneConfig {
            width: 64,
            height: 64,
            num_buildings_pre: 2,
            num_new: 2,
            num_demolished: 1,
            num_rebuilt: 1,
            footprint_range: (8, 16),
            footprint_snap: 4,
            ..SceneConfig::default()
        };
        let model = ModelConfig {
            backbone: BackboneConfig {
                embed_dims: [16, 32, 64, 128],
                depths: [1, 1, 1, 1],
                num_heads: [1, 2, 4, 8],
                ..BackboneConfig::default()
            },
            decoder: DecoderConfig { decode_dim: 64, head_hidden: 8, ..DecoderConfig::default() },
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            model,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                min_learning_rate: 1e-5,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
            epochs: 500,
            max_steps: None,
            batch_size: 4,
            accumulation_steps: 1,
            ..TrainConfig::default()
        };
        Self { scene, num_scenes: 8, tile_size: 64, train, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            other => Err(HarnessError::Config(format!("unknown preset {other:?} (expected default or toy)"))),
        }
    }

    /// Reads a JSON document. Missing fields come from the preset named by an
    /// optional top-level `"preset"` key, or from the default preset.
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = read_json(path).map_err(|e| HarnessError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(mut value: serde_json::Value) -> Result<Self> {
        let preset = match value.as_object_mut().and_then(|o| o.remove("preset")) {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => return Err(HarnessError::Config(format!("preset must be a string, got {other}"))),
            None => "default".into(),
        };
        let mut base = serde_json::to_value(Self::preset(&preset)?).expect("serializable config");
        merge(&mut base, value);
        let config: Self = serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.scene.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.num_scenes == 0 || self.tile_size == 0 {
            return Err(HarnessError::Config("num_scenes and tile_size must be positive".into()));
        }
        if self.scene.width % self.tile_size != 0 || self.scene.height % self.tile_size != 0 {
            return Err(HarnessError::Config(format!(
                "tile size {} does not divide the {}x{} scene",
                self.tile_size, self.scene.width, self.scene.height
            )));
        }
        self.train
            .model
            .backbone
            .check_input(self.tile_size, self.tile_size)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(0.0 < self.coverage && self.coverage <= 1.0) {
            return Err(HarnessError::Config(format!("coverage {} outside (0, 1]", self.coverage)));
        }
        if self.eval_batch_size == 0 || self.histogram_bins == 0 {
            return Err(HarnessError::Config("eval_batch_size and histogram_bins must be positive".into()));
        }
        check_temperatures(&self.sweep_temperatures)
    }
}

pub fn check_temperatures(ts: &[f64]) -> Result<()> {
    if ts.is_empty() {
        return Err(HarnessError::Config("no temperatures given".into()));
    }
    if let Some(t) = ts.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(HarnessError::Config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Recursive object merge, `patch` wins.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
