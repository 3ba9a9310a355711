//! Run configuration: one TOML file with every key defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classify::{ClassifierKind, FinetuneParams, LossWeights, Sampler};
use crate::data_io::ColorMap;
use crate::error::{Error, Result};
use crate::features::DEFAULT_K;
use crate::image::TARGET_SIDE;
use crate::tiling::{DEFAULT_SIDE, DEFAULT_VEG_THRESHOLD};
use crate::vegseg::SegmentParams;

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "WEEDMAP_OUTPUT_ROOT";

/// Which vegetation masks cut the training tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMasks {
    /// Vegetation pixels of the annotation (crop or weed).
    #[default]
    GroundTruth,
    /// Masks from the unsupervised segmentation, as at inference.
    Segmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub sampler: Sampler,
    /// PCA dimensionality for feature-vector classifiers.
    pub pca_k: usize,
    /// Trained classifier artifact; trained from the dataset when absent.
    pub model_path: Option<PathBuf>,
    /// PCA artifact matching `model_path` (feature-vector kinds only).
    pub pca_path: Option<PathBuf>,
    pub training_masks: TrainingMasks,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::FinetunedBackbone,
            sampler: Sampler::None,
            pca_k: DEFAULT_K,
            model_path: None,
            pca_path: None,
            training_masks: TrainingMasks::GroundTruth,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Pretrained weights in safetensors format with torchvision key names.
    /// Without it a seeded, calibrated stand-in is built.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Train/test assignment when the dataset has no split file.
    pub split: u64,
    /// Resampling, initialization and batch order of classifiers.
    pub classifier: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub color_map: ColorMap,
    /// Train:test proportion when the dataset has no split file.
    pub split_ratio: [u32; 2],
    /// Square side every input image is resized to before segmentation.
    pub image_side: usize,
    pub tile_side: usize,
    pub veg_threshold: f64,
    pub segmentation: SegmentParams,
    pub classifier: ClassifierConfig,
    pub finetune: FinetuneParams,
    pub backbone: BackboneConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            color_map: ColorMap::default(),
            split_ratio: [2, 1],
            image_side: TARGET_SIDE,
            tile_side: DEFAULT_SIDE,
            veg_threshold: DEFAULT_VEG_THRESHOLD,
            segmentation: SegmentParams::default(),
            classifier: ClassifierConfig::default(),
            finetune: FinetuneParams::default(),
            backbone: BackboneConfig::default(),
            seeds: Seeds::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.tile_side == 0 || self.image_side == 0 || self.image_side % self.tile_side != 0 {
            return bad(format!(
                "tile_side {} must divide image_side {}",
                self.tile_side, self.image_side
            ));
        }
        if !(0.0..=1.0).contains(&self.veg_threshold) {
            return bad(format!("veg_threshold {} outside [0, 1]", self.veg_threshold));
        }
        if self.split_ratio.iter().sum::<u32>() == 0 {
            return bad("split_ratio must not be all zero".into());
        }
        if self.classifier.pca_k == 0 {
            return bad("classifier.pca_k must be >= 1".into());
        }
        let f = &self.finetune;
        LossWeights::new(f.weights.w_crop, f.weights.w_weed)?;
        if f.epochs == 0 || f.batch == 0 || !(f.lr > 0.0) {
            return bad("finetune needs epochs >= 1, batch >= 1 and lr > 0".into());
        }
        if self.classifier.kind == ClassifierKind::FinetunedBackbone && self.classifier.sampler != Sampler::None {
            return bad("finetuned_backbone handles imbalance through loss weights; use sampler = \"none\"".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.segmentation.lr, 0.1);
        assert_eq!(cfg.segmentation.n_superpixels, 2500);
        assert_eq!(cfg.segmentation.compactness, 25.0);
        assert_eq!(cfg.finetune.weights, LossWeights { w_crop: 0.33, w_weed: 0.67 });
        assert_eq!(cfg.finetune.epochs, 250);
        assert_eq!(cfg.finetune.lr, 0.001);
        assert_eq!((cfg.tile_side, cfg.veg_threshold), (50, 0.10));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.tile_side = 25;
        cfg.classifier.kind = ClassifierKind::SvmRbf;
        cfg.classifier.sampler = Sampler::Smote;
        cfg.segmentation.max_iters = 40;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("tile_side = 100\n[segmentation]\nmax_iters = 7\n").unwrap();
        assert_eq!(cfg.tile_side, 100);
        assert_eq!(cfg.segmentation.max_iters, 7);
        assert_eq!(cfg.segmentation.q, 100);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("tile_side = 30").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[finetune.weights]\nw_crop = 0.0\nw_weed = 1.0").is_err());
    }
}
