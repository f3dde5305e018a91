//! Experiment configuration (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{Preset, Scene};
use crate::encoders::EncoderDims;
use crate::error::{Error, Result};
use crate::mmd::{MmdSign, DEFAULT_ALPHA};
use crate::soft_moe::BlockDims;
use crate::spatial::DatasetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub experts: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub kernel: usize,
    pub pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            experts: 4,
            depth: 2,
            heads: 4,
            patch: 16,
            kernel: 3,
            pre_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d: self.d,
            heads: self.heads,
            experts: self.experts,
            pre_norm: self.pre_norm,
        }
    }

    pub fn encoder_dims(&self, s: usize, subcarriers: usize) -> EncoderDims {
        EncoderDims {
            s,
            subcarriers,
            d: self.d,
            patch: self.patch,
            kernel: self.kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_dims().validate()?;
        if self.depth == 0 {
            return Err(Error::Config("fusion depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Concat,
    Fullcon,
    Softmoe,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown baseline `{s}` (expected concat, fullcon or softmoe)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoSpatialContext,
    SingleExpert,
    StaticFusion,
    NoMmd,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
            Error::Config(format!(
                "unknown ablation `{s}` (expected no_spatial_context, single_expert, static_fusion or no_mmd)"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    Mix,
    Ood,
}

/// Where the scene comes from: a JSON file, or a preset and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSource {
    pub file: Option<PathBuf>,
    pub preset: Preset,
    pub seed: u64,
}

impl Default for SceneSource {
    fn default() -> Self {
        Self {
            file: None,
            preset: Preset::Dense,
            seed: 1,
        }
    }
}

impl SceneSource {
    pub fn load(&self) -> Result<Scene> {
        match &self.file {
            Some(p) => Scene::load(p),
            None => Ok(Scene::preset(self.preset, self.seed)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSource,
    pub dataset: DatasetConfig,
    /// Prebuilt samples; when set, `scene` and `dataset` only supply `s`.
    pub dataset_file: Option<PathBuf>,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub mmd_sign: MmdSign,
    pub seed: u64,
    pub split_mode: SplitMode,
    /// Band indices kept out of training in `ood` mode.
    pub held_out_bands: Vec<usize>,
    /// Fraction of train trajectories reserved for checkpoint selection.
    pub validation_fraction: f64,
    /// Cap on training samples after the validation split (0 = no cap).
    pub max_train_samples: usize,
    pub baseline: Option<Baseline>,
    pub ablation: Option<Ablation>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneSource::default(),
            dataset: DatasetConfig::default(),
            dataset_file: None,
            model: ModelConfig::default(),
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 5e-5,
            alpha: DEFAULT_ALPHA,
            mmd_sign: MmdSign::default(),
            seed: 0,
            split_mode: SplitMode::Mix,
            held_out_bands: Vec::new(),
            validation_fraction: 0.1,
            max_train_samples: 0,
            baseline: None,
            ablation: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config("need lr > 0, weight_decay >= 0 and alpha >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.dataset.s == 0 {
            return Err(Error::Config("s must be at least 1".into()));
        }
        if let Some(f) = &self.scene.file {
            if !f.exists() {
                return Err(Error::Config(format!("scene file {} does not exist", f.display())));
            }
        }
        if let Some(f) = &self.dataset_file {
            if !f.exists() {
                return Err(Error::Config(format!("dataset file {} does not exist", f.display())));
            }
        }
        let n_bands = self.dataset.bands.len();
        if let Some(&b) = self.held_out_bands.iter().find(|&&b| b >= n_bands) {
            return Err(Error::Config(format!("held-out band {b} out of range ({n_bands} bands)")));
        }
        if self.split_mode == SplitMode::Ood {
            if self.held_out_bands.is_empty() {
                return Err(Error::Config("ood mode needs at least one held-out band".into()));
            }
            if self.held_out_bands.len() >= n_bands {
                return Err(Error::Config("ood mode must keep at least one training band".into()));
            }
        }
        Ok(())
    }

    /// The configuration actually trained after applying the ablation knob.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        match self.ablation {
            Some(Ablation::NoSpatialContext) => c.dataset.s = 1,
            Some(Ablation::SingleExpert) => c.model.experts = 1,
            Some(Ablation::NoMmd) => c.alpha = 0.0,
            Some(Ablation::StaticFusion) | None => {}
        }
        if self.baseline.is_some() {
            c.alpha = 0.0;
        }
        c
    }

    /// Bands whose train samples are used for fitting.
    pub fn training_bands(&self) -> Vec<usize> {
        (0..self.dataset.bands.len())
            .filter(|b| self.split_mode == SplitMode::Mix || !self.held_out_bands.contains(b))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"epochs": 3, "model": {"d": 16}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.d, 16);
        assert_eq!(c.model.experts, 4);
    }

    #[test]
    fn unknown_names_are_config_errors() {
        assert!(matches!("mlp".parse::<Baseline>(), Err(Error::Config(_))));
        assert_eq!("fullcon".parse::<Baseline>().unwrap(), Baseline::Fullcon);
        assert_eq!("no_mmd".parse::<Ablation>().unwrap(), Ablation::NoMmd);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"baseline": "mlp"}"#).is_err());
    }

    #[test]
    fn ood_needs_a_held_out_band() {
        let mut c = ExperimentConfig {
            split_mode: SplitMode::Ood,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.held_out_bands = vec![1];
        c.validate().unwrap();
        assert_eq!(c.training_bands(), vec![0, 2]);
        c.held_out_bands = vec![0, 1, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablations_adjust_the_effective_config() {
        let base = ExperimentConfig::default();
        let with = |a| ExperimentConfig {
            ablation: Some(a),
            ..base.clone()
        }
        .effective();
        assert_eq!(with(Ablation::NoSpatialContext).dataset.s, 1);
        assert_eq!(with(Ablation::SingleExpert).model.experts, 1);
        assert_eq!(with(Ablation::NoMmd).alpha, 0.0);
        let fixed = with(Ablation::StaticFusion);
        assert_eq!((fixed.dataset, fixed.model, fixed.alpha), (base.dataset, base.model, base.alpha));
    }
}
