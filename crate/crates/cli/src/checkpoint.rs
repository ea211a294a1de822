//! Checkpoint directory layout shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use vqnerf_core::decompose::rank_and_select;
use vqnerf_core::model::Model;
use vqnerf_core::scene::{read_bundle, SceneBundle};
use vqnerf_core::train::TrainConfig;

pub const MODEL_FILE: &str = "model.vqnf";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const CONFIG_FILE: &str = "config.json";
pub const JOURNAL_FILE: &str = "edits.jsonl";

/// Contents of `config.json`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scene bundle the model was trained on.
    pub scene: PathBuf,
    pub train: TrainConfig,
}

pub struct Checkpoint {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub model: Model<f32>,
    pub bundle: SceneBundle,
}

impl Checkpoint {
    pub fn open(dir: &Path, scene: Option<&Path>) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
        let config: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", cfg_path.display()))?;
        let model = Model::load(&dir.join(MODEL_FILE))?;
        let scene = scene.unwrap_or(&config.scene);
        let bundle = read_bundle(scene)?;
        Ok(Checkpoint {
            dir: dir.to_path_buf(),
            config,
            model,
            bundle,
        })
    }

    /// `m` when given, otherwise the ranked selection at `eps` (default:
    /// the training tolerance).
    pub fn length(&self, m: Option<u32>, eps: Option<f64>) -> Result<usize> {
        if let Some(m) = m {
            return Ok(m as usize);
        }
        let eps = eps.unwrap_or(self.config.train.eps);
        let curve = rank_and_select(&self.model, &self.bundle.views, eps)?;
        log::info!("ranked codebook length M = {} (eps {eps})", curve.selected);
        Ok(curve.selected)
    }
}
