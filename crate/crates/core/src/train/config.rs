//! Run configuration: one JSON document drives data generation, training,
//! sampling, and evaluation, and its hash stamps every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_mapper::MrfConfig;
use crate::cfm::FlowConfig;
use crate::error::{Error, Result};
use crate::synthetic::SceneConfig;

/// What the flow model regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Compressed codes from the autoencoder.
    #[serde(rename = "normalised")]
    Normalised,
    /// Raw motion features, skipping the autoencoder (the known-worse
    /// variant kept for the ablation).
    #[serde(rename = "direct_regression")]
    DirectRegression,
}

/// Optimizer and loss-weighting knobs.
///
/// `lambda_gan`/`lambda_recon`/`lambda_id`/`lambda_sync`/`lambda_tts` are
/// carried in the config for completeness, but no corresponding loss exists
/// in this toolkit — they never influence training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub window: usize,
    pub lambda_cfm: f64,
    pub lambda_ae: f64,
    pub lambda_prior: f64,
    pub ae_epochs: usize,
    pub sampler_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub lambda_gan: f64,
    pub lambda_recon: f64,
    pub lambda_id: f64,
    pub lambda_sync: f64,
    pub lambda_tts: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 16,
            window: 32,
            lambda_cfm: 0.1,
            lambda_ae: 1.0,
            lambda_prior: 0.1,
            ae_epochs: 200,
            sampler_epochs: 500,
            seed: 7,
            mode: TrainMode::Normalised,
            lambda_gan: 0.1,
            lambda_recon: 1.0,
            lambda_id: 0.3,
            lambda_sync: 0.1,
            lambda_tts: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be ≥ 1"));
        }
        if self.window < 3 {
            return Err(Error::invalid(format!(
                "window must be ≥ 3 frames, got {}",
                self.window
            )));
        }
        for (name, v) in [
            ("lambda_cfm", self.lambda_cfm),
            ("lambda_ae", self.lambda_ae),
            ("lambda_prior", self.lambda_prior),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Hidden widths of the trainable networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Widths {
    pub flow: usize,
    pub prior: usize,
    pub ae: usize,
    pub extractor: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Widths { flow: 64, prior: 32, ae: 32, extractor: 32 }
    }
}

/// Everything one run needs. Serialized verbatim into manifests; hashed to
/// stamp metrics rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Motion-feature dimension d.
    pub motion_dim: usize,
    /// Motion-code directions M (must leave room for identities: M < d).
    pub bank_codes: usize,
    /// Compressed channel count c for the normalised mode.
    pub compressed_dim: usize,
    /// Scenes generated for a dataset.
    pub n_scenes: usize,
    /// Seed for the code bank draw.
    pub bank_seed: u64,
    /// Seed for dataset generation (training seeds live in `train.seed`).
    pub data_seed: u64,
    pub scene: SceneConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub widths: Widths,
    pub mrf: MrfConfig,
    /// 1-based style layers that receive the lip term instead of body motion.
    pub lip_layers: Vec<usize>,
    /// Total style-stack depth.
    pub style_layers: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            motion_dim: 20,
            bank_codes: 8,
            compressed_dim: 8,
            n_scenes: 256,
            bank_seed: 99,
            data_seed: 1234,
            scene: SceneConfig::default(),
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            widths: Widths::default(),
            mrf: MrfConfig::default(),
            lip_layers: vec![6, 7],
            style_layers: 7,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.motion_dim == 0 {
            return Err(Error::invalid("motion_dim must be ≥ 1"));
        }
        if self.bank_codes == 0 || self.bank_codes >= self.motion_dim {
            return Err(Error::invalid(format!(
                "bank_codes must satisfy 1 ≤ M < motion_dim, got M={} d={}",
                self.bank_codes, self.motion_dim
            )));
        }
        if self.compressed_dim == 0 || self.compressed_dim >= self.motion_dim {
            return Err(Error::invalid(format!(
                "compressed_dim must satisfy 1 ≤ c < motion_dim, got c={} d={}",
                self.compressed_dim, self.motion_dim
            )));
        }
        if self.n_scenes < 2 {
            return Err(Error::invalid("n_scenes must be ≥ 2"));
        }
        self.scene.validate()?;
        self.flow.validate()?;
        self.train.validate()?;
        if self.train.window > self.scene.frames {
            return Err(Error::invalid(format!(
                "window {} exceeds scene length {}",
                self.train.window, self.scene.frames
            )));
        }
        let w = self.widths;
        if w.flow == 0 || w.prior == 0 || w.ae == 0 || w.extractor == 0 {
            return Err(Error::invalid("network widths must be ≥ 1"));
        }
        self.mrf.validate()?;
        if self.style_layers == 0 {
            return Err(Error::invalid("style_layers must be ≥ 1"));
        }
        for &l in &self.lip_layers {
            if l == 0 || l > self.style_layers {
                return Err(Error::invalid(format!(
                    "lip layer {l} outside 1..={}",
                    self.style_layers
                )));
            }
        }
        Ok(())
    }

    /// Reads and validates a JSON config file.
    pub fn from_json_file(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON rendering (struct field order is fixed,
    /// so the hash is stable for equal configs).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            use std::fmt::Write as _;
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}
