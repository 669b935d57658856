//! The run configuration shared by every command. Every field has an
//! explicit default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evalbench::ProposalConfig;
use crate::locnet::BackboneConfig;
use crate::quality::QualityConfig;
use crate::scenegen::{DatasetSpec, OracleConfig};
use crate::stn::RotationMapping;
use crate::training::Schedule;

/// Root seeds, one per command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub dataset: u64,
    pub quality: u64,
    pub detector: u64,
    pub baseline: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            dataset: 11,
            quality: 21,
            detector: 31,
            baseline: 41,
            eval: 51,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub rotation: RotationMapping,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            rotation: RotationMapping::Signed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub proposal: ProposalConfig,
    pub timing_warmup: usize,
    pub timing_reps: usize,
    /// Candidate counts of the proposal-time regression.
    pub timing_candidates: Vec<usize>,
    /// Overlay images written by `eval`, at most one per scene.
    pub overlays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            proposal: ProposalConfig::default(),
            timing_warmup: 3,
            timing_reps: 20,
            timing_candidates: vec![100, 300, 1000],
            overlays: 0,
        }
    }
}

/// The `dataset` section carries no oracle settings; those live in the
/// top-level `oracle` section and are copied into the dataset spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub backbone: BackboneConfig,
    pub detector: DetectorSection,
    pub quality: QualityConfig,
    pub schedule: Schedule,
    pub oracle: OracleConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            backbone: BackboneConfig::default(),
            detector: DetectorSection::default(),
            quality: QualityConfig::default(),
            schedule: Schedule::default(),
            oracle: OracleConfig::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_value(mut v: Value) -> Result<Self> {
        if let Some(d) = v.get_mut("dataset").and_then(Value::as_object_mut) {
            if d.contains_key("oracle") {
                return Err(Error::Config(
                    "dataset.oracle is not a key; use the top-level oracle section".into(),
                ));
            }
        }
        let mut c: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.dataset.oracle = c.oracle.clone();
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The full configuration with every default spelled out.
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(d) = v.get_mut("dataset").and_then(Value::as_object_mut) {
            d.remove("oracle");
        }
        v
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.backbone.validate()?;
        self.quality.validate()?;
        self.schedule.validate()?;
        self.oracle.validate()?;
        if self.backbone.in_channels != 1 {
            return Err(Error::Config(
                "detector backbone takes one depth channel".into(),
            ));
        }
        if self.backbone.input_size != (self.dataset.image_size, self.dataset.image_size) {
            return Err(Error::Config(format!(
                "backbone input {:?} does not match image_size {}",
                self.backbone.input_size, self.dataset.image_size
            )));
        }
        if self.eval.timing_reps < 10 {
            return Err(Error::Config("eval.timing_reps must be at least 10".into()));
        }
        if self.eval.proposal.candidates == 0 || self.eval.timing_candidates.contains(&0) {
            return Err(Error::Config(
                "proposal candidate counts must be positive".into(),
            ));
        }
        Ok(())
    }
}
