//! Sectioned run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::chips::ChipConfig;
use crate::dataset::ScaleSource;
use crate::eval::SizeBins;
use crate::filter::SnipConfig;
use crate::fusion::SoftNmsParams;
use crate::pyramid::ResolutionSpec;
use crate::sim::{CompetenceModel, PopulationConfig, Protocol, QualityModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub specs: Vec<ResolutionSpec>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            specs: ResolutionSpec::default_pyramid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub scale_source: ScaleSource,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            scale_source: ScaleSource::AnnotationArea,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorStatsConfig {
    #[serde(flatten)]
    pub anchors: AnchorConfig,
    pub spec: ResolutionSpec,
    pub thresholds: Vec<f64>,
}

impl Default for AnchorStatsConfig {
    fn default() -> Self {
        Self {
            anchors: AnchorConfig::default(),
            spec: ResolutionSpec::new_unchecked(800, 1200),
            thresholds: vec![0.5, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipSection {
    #[serde(flatten)]
    pub chips: ChipConfig,
    pub spec: ResolutionSpec,
}

impl Default for ChipSection {
    fn default() -> Self {
        Self {
            chips: ChipConfig::default(),
            spec: ResolutionSpec::new_unchecked(1400, 2000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub bins: SizeBins,
    pub proposal_budget: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: SizeBins::default(),
            proposal_budget: 900,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub quality: QualityModel,
    pub competence: CompetenceModel,
    pub population: PopulationConfig,
    /// Protocols to compare; empty means the five standard ones.
    pub protocols: Vec<Protocol>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pyramid: PyramidConfig,
    pub snip: SnipConfig,
    pub stats: StatsConfig,
    pub anchors: AnchorStatsConfig,
    pub chips: ChipSection,
    pub soft_nms: SoftNmsParams,
    pub eval: EvalConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.pyramid.specs.is_empty() {
            return Err(Error::Config("pyramid.specs must not be empty".into()));
        }
        self.snip.validate()?;
        self.anchors.anchors.validate()?;
        self.chips.chips.validate()?;
        self.soft_nms.validate()?;
        self.eval.bins.validate()?;
        self.sim.quality.validate()?;
        self.sim.competence.validate()?;
        self.sim.population.validate()?;
        Ok(())
    }

    pub fn protocols(&self) -> Result<Vec<Protocol>> {
        if self.sim.protocols.is_empty() {
            Protocol::small_object_protocols(&self.snip)
        } else {
            Ok(self.sim.protocols.clone())
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
