use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::StreamMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallCnn,
    ResidualTransfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    MeanFill,
    ConstantFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Maximum fraction of each side removed by a random crop.
    pub crop_fraction: f64,
    pub rotation_degrees: f64,
    pub brightness_delta: f64,
    pub contrast_delta: f64,
    /// Augmented copies extracted per training sample (0 disables).
    pub copies: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            crop_fraction: 0.1,
            rotation_degrees: 10.0,
            brightness_delta: 0.1,
            contrast_delta: 0.1,
            copies: 0,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            crop_fraction: 0.0,
            rotation_degrees: 0.0,
            brightness_delta: 0.0,
            contrast_delta: 0.0,
            copies: 0,
        }
    }
}

/// Every tunable of the pipeline. Loaded from JSON; missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub image_size: usize,
    pub backbone_kind: BackboneKind,
    pub deep_face_dim: usize,
    pub background_dim: usize,
    pub place_dim: usize,
    pub hidden_dim: usize,
    pub cnn_channels: [usize; 3],
    pub stream_mask_default: StreamMask,
    pub initial_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
    pub augmentation: AugmentParams,
    pub split_ratios: [f64; 3],
    pub seed: u64,
    /// Face-box multipliers (width, height) used when no person mask exists.
    pub body_expansion: [f64; 2],
    pub fill_mode: FillMode,
    pub residual_weights: Option<PathBuf>,
    pub residual_depth: usize,
    pub residual_width: usize,
    pub fine_tune_backbone: bool,
    pub explanation_threshold: f64,
    pub detector: String,
    pub scene_backend: String,
    pub scene_table: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            image_size: 224,
            backbone_kind: BackboneKind::SmallCnn,
            deep_face_dim: 256,
            background_dim: 128,
            place_dim: 256,
            hidden_dim: 512,
            cnn_channels: [32, 64, 128],
            stream_mask_default: StreamMask::ALL,
            initial_lr: 1e-5,
            batch_size: 32,
            epochs: 100,
            plateau_patience: 10,
            lr_decay: 0.5,
            min_lr: 1e-7,
            augmentation: AugmentParams::default(),
            split_ratios: [0.8, 0.1, 0.1],
            seed: 42,
            body_expansion: [3.0, 6.0],
            fill_mode: FillMode::MeanFill,
            residual_weights: None,
            residual_depth: 48,
            residual_width: 8,
            fine_tune_backbone: false,
            explanation_threshold: 0.15,
            detector: "fixture".into(),
            scene_backend: "stub".into(),
            scene_table: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios sum to {sum}, expected 1"));
        }
        if self.split_ratios.iter().any(|r| *r < 0.0) {
            return bad("split ratios must be non-negative".into());
        }
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        for (name, v) in [
            ("deep_face_dim", self.deep_face_dim),
            ("background_dim", self.background_dim),
            ("place_dim", self.place_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("residual_width", self.residual_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.cnn_channels.contains(&0) {
            return bad("cnn_channels must be positive".into());
        }
        // three 2x2 valid convolutions each followed by a 2x2 pool
        let mut side = self.image_size;
        for _ in 0..3 {
            if side < 3 {
                return bad(format!("image_size {} too small for the CNN", self.image_size));
            }
            side = (side - 1) / 2;
        }
        if !(self.initial_lr > 0.0) || !(self.min_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]".into());
        }
        if !self.stream_mask_default.any() {
            return bad("default stream mask disables every stream".into());
        }
        if self.body_expansion.iter().any(|m| !(*m > 0.0)) {
            return bad("body_expansion multipliers must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Length of the concatenated feature vector fed to the fusion head.
    pub fn total_dim(&self) -> usize {
        self.feature_dims().total()
    }

    pub fn feature_dims(&self) -> crate::fusion::FeatureDims {
        crate::fusion::FeatureDims {
            face_deep: self.deep_face_dim,
            background: self.background_dim,
            place: self.place_dim,
        }
    }

    /// A small configuration suitable for tests and quick experiments.
    pub fn desk_scale() -> Self {
        PipelineConfig {
            image_size: 32,
            deep_face_dim: 16,
            background_dim: 8,
            place_dim: 8,
            hidden_dim: 32,
            cnn_channels: [4, 6, 8],
            residual_depth: 40,
            residual_width: 4,
            ..PipelineConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.image_size, 224);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.initial_lr, 1e-5);
        assert_eq!(c.split_ratios, [0.8, 0.1, 0.1]);
        PipelineConfig::desk_scale().validate().unwrap();
    }

    #[test]
    fn rejects_bad_ratios_and_dims() {
        let mut c = PipelineConfig::default();
        c.split_ratios = [0.8, 0.1, 0.2];
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.place_dim = 0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.image_size = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"hidden_dim": 64}"#).unwrap();
        assert_eq!(c.hidden_dim, 64);
        assert_eq!(c.deep_face_dim, 256);
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
