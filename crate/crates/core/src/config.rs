//! Run configuration: every tunable of a training run, loaded from TOML with
//! unknown keys rejected and `a.b=value` overrides applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::HeadConfig;
use crate::diff::OptimizerConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::nerf::RadianceConfig;
use crate::sampler::{SamplerConfig, SamplingMode};
use crate::scene::Profile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub profile: Profile,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            profile: Profile::Default,
            train_scenes: 20,
            val_scenes: 5,
        }
    }
}

/// Multipliers on the terms of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub loc: f64,
    pub photometric: f64,
    pub depth: f64,
    pub opacity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            loc: 1.0,
            photometric: 1.0,
            depth: 1.0,
            opacity: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rays_per_step: usize,
    /// Optimizer steps per scene in each epoch.
    pub steps_per_scene: usize,
    /// Every `n`-th pixel (both axes) is cast when estimating a scene's
    /// opacity grid outside training.
    pub eval_pixel_stride: usize,
    /// Rays per no-grad batch.
    pub eval_batch: usize,
    /// Training-split mAP is recorded every `n` epochs; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 14,
            rays_per_step: 512,
            steps_per_scene: 4,
            eval_pixel_stride: 2,
            eval_batch: 1024,
            eval_every: 1,
        }
    }
}

/// Module switches for the ablation tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Pixel offsets and positional encoding in the voxel volume.
    pub peom: bool,
    /// Importance sampling; off means uniform sampling.
    pub dis: bool,
    /// Consistency loss and distance-weighted opacity; off means a plain
    /// mean over views and no consistency term.
    pub oom: bool,
    /// Scale voxel features by opacity before the head.
    pub adjust: bool,
    pub depth_supervision: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            peom: true,
            dis: true,
            oom: true,
            adjust: true,
            depth_supervision: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub sampler: SamplerConfig,
    pub radiance: RadianceConfig,
    pub head: HeadConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            sampler: SamplerConfig::default(),
            radiance: RadianceConfig::default(),
            head: HeadConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Error {
    Error::ConfigInvalid(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(invalid)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. Values parse as TOML scalars or
    /// arrays, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(invalid)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| invalid(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, path) = parts.split_last().expect("split yields one part");
            let mut node = &mut root;
            for p in path {
                node = node
                    .as_table_mut()
                    .and_then(|t| t.get_mut(*p))
                    .ok_or_else(|| invalid(format!("unknown config key {key}")))?;
            }
            let slot = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*last))
                .ok_or_else(|| invalid(format!("unknown config key {key}")))?;
            *slot = value;
        }
        let cfg: RunConfig = root.try_into().map_err(invalid)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        let t = &self.train;
        if t.rays_per_step == 0 || t.steps_per_scene == 0 || t.eval_pixel_stride == 0 || t.eval_batch == 0 {
            return Err(invalid("train counts must be positive"));
        }
        if self.data.train_scenes == 0 {
            return Err(invalid("need at least one training scene"));
        }
        if self.features.channels == 0 || self.head.width == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if !(self.features.delta_max >= 0.0) {
            return Err(invalid("delta_max must be non-negative"));
        }
        let w = &self.loss;
        if [w.cls, w.loc, w.photometric, w.depth, w.opacity].iter().any(|x| !(*x >= 0.0)) {
            return Err(invalid("loss weights must be non-negative"));
        }
        let h = &self.head;
        if !(h.score_thresh > 0.0 && h.score_thresh < 1.0 && h.nms_iou > 0.0 && h.nms_iou < 1.0) {
            return Err(invalid("head thresholds must lie in (0, 1)"));
        }
        if !(h.prior > 0.0 && h.prior < 1.0) {
            return Err(invalid("head prior must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Sampler actually used: uniform when importance sampling is ablated.
    pub fn effective_sampler(&self) -> SamplerConfig {
        let mut s = self.sampler.clone();
        if !self.ablation.dis {
            s.mode = SamplingMode::Uniform;
        }
        s
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert_eq!(RunConfig::from_toml("sed = 3").unwrap_err().category(), "config_invalid");
        assert!(RunConfig::from_toml("[train]\nepoch = 3").is_err());
        assert!(RunConfig::default().with_overrides(&["train.epoch=3"]).is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["train.epochs=2", "data.profile=small", "sampler.mode=dis", "ablation.peom=false", "seed=9"])
            .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.data.profile, Profile::Small);
        assert_eq!(c.sampler.mode, SamplingMode::Dis);
        assert!(!c.ablation.peom);
        assert_eq!(c.seed, 9);
        assert!(RunConfig::default().with_overrides(&["train.epochs=-1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["loss.cls=-1.0"]).is_err());
        assert!(RunConfig::default().with_overrides(&["noequals"]).is_err());
    }

    #[test]
    fn optimizer_table() {
        let c = RunConfig::from_toml("[optimizer]\nkind = \"sgd\"\nlr = 0.5").unwrap();
        assert_eq!(c.optimizer, OptimizerConfig::Sgd { lr: 0.5 });
    }
}
