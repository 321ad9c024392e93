//! Optional JSON pipeline config. Every field is optional; command line
//! flags override config values, config values override built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xfdd_core::{Result, XfddError};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: Option<u32>,
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub datagen: DatagenSection,
    pub preprocess: PreprocessSection,
    pub train: TrainSection,
    pub explain: ExplainSection,
    pub gridsearch: GridSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub per_class_windows: Option<usize>,
    pub imbalance_ratio: Option<f64>,
    pub duration: Option<f64>,
    pub rate: Option<f64>,
    pub window: Option<usize>,
    pub step: Option<usize>,
    pub snr_db: Option<f64>,
    pub gain: Option<f64>,
    pub offset_sigmas: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub window: Option<usize>,
    pub step: Option<usize>,
    pub split: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub model: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub patience: Option<usize>,
    pub eta_min: Option<f64>,
    pub sampling: Option<String>,
    pub smote_k: Option<usize>,
    pub hidden: Option<usize>,
    pub rec_layers: Option<usize>,
    pub conv: Option<usize>,
    pub fc: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub methods: Option<Vec<String>>,
    pub baselines: Option<Vec<String>>,
    pub windows: Option<usize>,
    pub ig_steps: Option<usize>,
    pub gs_samples: Option<usize>,
    pub gs_sigma: Option<f64>,
    pub random_k: Option<usize>,
    pub select_top: Option<usize>,
    pub interaction_class: Option<usize>,
    pub interaction_windows: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub budget: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub patience: Option<usize>,
    pub conv_layers: Option<Vec<usize>>,
    pub gru_layers: Option<Vec<usize>>,
    pub hidden: Option<Vec<usize>>,
    pub fc_layers: Option<Vec<usize>>,
    pub resampling: Option<Vec<String>>,
    pub window: Option<Vec<usize>>,
    pub step: Option<Vec<usize>>,
}

impl PipelineConfig {
    /// Missing path means an empty config (all defaults).
    pub fn load(path: Option<&Path>) -> Result<PipelineConfig> {
        let Some(path) = path else { return Ok(PipelineConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| {
            XfddError::InvalidArgument(format!("config {}: {e}", path.display()))
        })?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| {
            XfddError::InvalidArgument(format!("config {}: {e}", path.display()))
        })?;
        match cfg.schema_version {
            None | Some(CONFIG_SCHEMA_VERSION) => Ok(cfg),
            Some(v) => Err(XfddError::InvalidArgument(format!(
                "config {}: schema version {v} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                path.display()
            ))),
        }
    }
}
