//! TOML configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use maskfree_core::compose::MAX_BLEND_RADIUS;
use maskfree_core::mllm::MllmClientConfig;
use maskfree_core::seg_losses::LossWeights;
use maskfree_models::reason_seg::{ReasonSegConfig, SegTrainConfig};
use maskfree_models::synth::CorpusConfig;
use maskfree_models::vae::{InpaintConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{PipelineError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptistMode {
    #[default]
    Rules,
    External,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    /// Gaussian-feathered composite; exterior beyond the radius is untouched.
    #[default]
    Feather,
    /// The generated image is used as is.
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub reason_seg: Option<PathBuf>,
    pub inpainter: Option<PathBuf>,
    /// Inpainter trained without the hypergraph module, for ablations.
    pub inpainter_plain: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptistSettings {
    pub mode: PromptistMode,
    #[serde(flatten)]
    pub client: MllmClientConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSettings {
    pub dilation_radius: usize,
    pub blend: BlendMode,
    pub blend_radius: usize,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            dilation_radius: 3,
            blend: BlendMode::Feather,
            blend_radius: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintSettings {
    /// Overrides the checkpoint's hypergraph threshold.
    pub tau: Option<f64>,
    pub samples: usize,
}

impl Default for InpaintSettings {
    fn default() -> Self {
        Self { tau: None, samples: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintTraining {
    pub model: InpaintConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResegTraining {
    pub model: ReasonSegConfig,
    /// Scenes are drawn fresh for every batch from this distribution.
    pub corpus: CorpusConfig,
    #[serde(flatten)]
    pub train: SegTrainConfig,
}

impl Default for ResegTraining {
    fn default() -> Self {
        Self {
            model: ReasonSegConfig::default(),
            corpus: CorpusConfig::default(),
            train: SegTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub models: ModelPaths,
    pub promptist: PromptistSettings,
    pub masks: MaskSettings,
    pub inpaint: InpaintSettings,
    pub losses: LossWeights,
    pub train_inpaint: InpaintTraining,
    pub train_reseg: ResegTraining,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative model paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.models.reason_seg, &mut cfg.models.inpainter, &mut cfg.models.inpainter_plain].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.masks.blend_radius > MAX_BLEND_RADIUS {
            return bad(format!("blend_radius {} exceeds {MAX_BLEND_RADIUS}", self.masks.blend_radius));
        }
        if let Some(t) = self.inpaint.tau {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("tau {t} must be positive"));
            }
        }
        if self.inpaint.samples == 0 {
            return bad("inpaint.samples must be at least 1".into());
        }
        if self.promptist.mode == PromptistMode::External && self.promptist.client.endpoint.is_empty() {
            return bad("external promptist mode needs an endpoint".into());
        }
        self.losses.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg.masks.dilation_radius, 3);
        assert_eq!(cfg.masks.blend_radius, 2);
        assert_eq!(cfg.promptist.mode, PromptistMode::Rules);
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sections_parse() {
        let cfg = PipelineConfig::from_toml(
            r#"
            seed = 7
            [models]
            reason_seg = "seg.safetensors"
            [promptist]
            mode = "external"
            endpoint = "http://127.0.0.1:9/plan"
            timeout_secs = 0.5
            [masks]
            blend = "none"
            [inpaint]
            tau = 0.8
            [train_inpaint]
            steps = 10
            [train_inpaint.model]
            hypergraph = false
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.promptist.client.timeout_secs, 0.5);
        assert_eq!(cfg.masks.blend, BlendMode::None);
        assert_eq!(cfg.train_inpaint.train.steps, 10);
        assert!(!cfg.train_inpaint.model.hypergraph);
        assert_eq!(cfg.train_inpaint.model.image_size, 32);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_toml("[masks]\nblend_radius = 99").is_err());
        assert!(PipelineConfig::from_toml("[inpaint]\ntau = -1.0").is_err());
        assert!(PipelineConfig::from_toml("[promptist]\nmode = \"external\"").is_err());
        assert!(PipelineConfig::from_toml("unknown = 1").is_err());
        assert!(PipelineConfig::from_toml("[losses]\nlambda_bce = -1.0").is_err());
    }
}
