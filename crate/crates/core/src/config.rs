//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticWorldConfig;
use crate::error::{Error, Result};
use crate::pyramid::PyramidConfig;
use crate::retrieval::DEFAULT_NS;
use crate::training::{Augmentation, ModelConfig, TrainConfig};
use crate::vlad::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub variant: Variant,
    pub radius_m: f64,
    pub ns: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BrMlr,
            radius_m: 25.0,
            ns: DEFAULT_NS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    pub out_dim: usize,
    /// Whitening regularizer relative to the largest eigenvalue.
    pub eps: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            out_dim: 16,
            eps: crate::postproc::DEFAULT_EPS,
        }
    }
}

/// One row of an ablation grid: a training setup and the test-time pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub name: String,
    pub train_factors: Vec<u32>,
    #[serde(default = "no_augmentation")]
    pub augmentation: Augmentation,
    /// Test-time pyramid factors; the run's `[pyramid]` factors when unset.
    #[serde(default)]
    pub test_factors: Option<Vec<u32>>,
    #[serde(default)]
    pub variants: Option<Vec<Variant>>,
}

fn no_augmentation() -> Augmentation {
    Augmentation::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Forces sequential execution everywhere.
    pub deterministic: bool,
    pub dataset: SyntheticWorldConfig,
    /// Test-time pyramid.
    pub pyramid: PyramidConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub pca: PcaConfig,
    pub ablation: Vec<AblationRun>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            deterministic: false,
            dataset: SyntheticWorldConfig::default(),
            pyramid: PyramidConfig {
                factors: vec![1, 2, 4],
                min_feature_extent: 2,
                ..PyramidConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            pca: PcaConfig::default(),
            ablation: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        if !(self.eval.radius_m > 0.0) || self.eval.ns.is_empty() || self.eval.ns.contains(&0) {
            return Err(Error::InvalidConfig(
                "eval needs a positive radius and N values >= 1".into(),
            ));
        }
        if self.pca.out_dim == 0 || !(self.pca.eps >= 0.0) {
            return Err(Error::InvalidConfig(
                "pca.out_dim must be positive and eps non-negative".into(),
            ));
        }
        for run in &self.ablation {
            let t = TrainConfig {
                factors: run.train_factors.clone(),
                augmentation: run.augmentation,
                ..self.train.clone()
            };
            t.validate()
                .map_err(|e| Error::InvalidConfig(format!("ablation run {:?}: {e}", run.name)))?;
            if let Some(f) = &run.test_factors {
                PyramidConfig {
                    factors: f.clone(),
                    ..self.pyramid.clone()
                }
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("ablation run {:?}: {e}", run.name)))?;
            }
        }
        Ok(())
    }

    /// Checks that every pyramid level of a `width x height` image still
    /// leaves the encoder at least `min_feature_extent` cells per side.
    pub fn check_image_size(&self, width: usize, height: usize) -> Result<()> {
        let specs = self.model.layer_specs();
        let extent = |n: usize| specs.iter().fold(n, |n, s| s.out_extent(n));
        self.pyramid.check_feature_extent(width, height, extent)?;
        let largest = self.train.factors.iter().copied().max().unwrap_or(1) as usize;
        let (fw, fh) = (extent(width / largest), extent(height / largest));
        if fw.min(fh) < self.pyramid.min_feature_extent {
            return Err(Error::InvalidConfig(format!(
                "training factor {largest} gives a {fw}x{fh} feature map, below the minimum extent {}",
                self.pyramid.min_feature_extent
            )));
        }
        Ok(())
    }
}
