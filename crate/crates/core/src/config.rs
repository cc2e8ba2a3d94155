//! Run configuration as a TOML document; every section has defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use crate::critic::CriticObjective;
use crate::critic::CriticConfig;
use crate::data::Layout;
use crate::distill::AdaptationConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{LossWeights, NormConfig};
use crate::priors::PriorParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Passes over the training pairs per epoch.
    pub repeats: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub delta: f64,
    pub n_critic: usize,
    pub gp_coeff: f64,
    pub penalty_step: f64,
    pub critic_objective: CriticObjective,
    pub generator_betas: (f64, f64),
    pub critic_betas: (f64, f64),
    pub crop: usize,
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub norms: NormConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            repeats: 1,
            batch_size: 4,
            lr: 1e-4,
            critic_lr: 1e-4,
            delta: 0.5,
            n_critic: 5,
            gp_coeff: 10.0,
            penalty_step: crate::critic::SURROGATE_STEP,
            critic_objective: CriticObjective::Conventional,
            generator_betas: (0.9, 0.999),
            critic_betas: (0.5, 0.9),
            crop: 256,
            patience: 50,
            seed: 0,
            weights: LossWeights::default(),
            norms: NormConfig::default(),
        }
    }
}

/// Where teacher hints come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum HintSource {
    /// No hint term at all.
    None,
    /// A frozen double-width generator, random or loaded from a checkpoint.
    Teacher { checkpoint: Option<PathBuf> },
    /// `<dir>/<id>.hint` files.
    Files { dir: PathBuf },
}

/// Feature extractor behind the perceptual term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PerceptualSource {
    Identity,
    /// VGG16 trunk; random deterministic weights unless a file is given.
    Vgg { weights: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub cache_hazemaps: bool,
    pub hints: HintSource,
    pub perceptual: PerceptualSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            layout: Layout::Split,
            cache_hazemaps: false,
            hints: HintSource::Teacher { checkpoint: None },
            perceptual: PerceptualSource::Vgg { weights: None },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub adaptation: AdaptationConfig,
    pub critic: CriticConfig,
    pub prior: PriorParams,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.repeats == 0 {
            return bad("epochs, batch_size and repeats must be positive".into());
        }
        if !(t.delta > 0.0 && t.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", t.delta));
        }
        if t.crop == 0 || t.crop % self.generator.size_multiple().max(16) != 0 {
            return bad(format!("crop {} must be a positive multiple of 16", t.crop));
        }
        if !(self.prior.w_min > 0.0 && self.prior.w_min < 1.0) {
            return bad(format!("w_min must lie in (0, 1), got {}", self.prior.w_min));
        }
        let w = &t.weights;
        if [w.adversarial, w.perceptual, w.transmission, w.hint, w.critic].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        self.generator.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}
