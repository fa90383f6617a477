//! Experiment configuration: one JSON document drives every stage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{ModelConfig, SamplingConfig};
use crate::scoring::{ScorerRegistry, ScorerSpec};
use crate::seqcore::AttributeId;
use crate::synth::AttributeSpec;
use crate::train::{ObjectiveRegistry, TrainConfig};

/// Overrides `output_dir` when set; nothing else is read from the environment.
pub const OUTPUT_DIR_ENV: &str = "LISTPREF_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scorers {
    pub energy: ScorerSpec,
    pub encoder: ScorerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pools {
    /// Candidates sampled per preference round.
    pub candidates: usize,
    pub max_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    /// Fresh sequences drawn from each evaluated policy.
    pub samples: usize,
}

/// Named seeds for the sampling and pairing streams. Data seeds live on each
/// attribute spec, init and minibatch seeds on each training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub sampling: u64,
    pub pairing: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    pub attributes: Vec<AttributeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    /// Preference objective of the main arm.
    pub mode: String,
    /// Also train a DPO policy on the same pairs for comparison.
    #[serde(default)]
    pub dpo_arm: bool,
    pub arms: Vec<Arm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub attributes: Vec<AttributeSpec>,
    pub model: ModelConfig,
    pub scorers: Scorers,
    pub sft: TrainConfig,
    pub preference: TrainConfig,
    pub sampling: SamplingConfig,
    pub pools: Pools,
    pub evaluation: Evaluation,
    pub seeds: Seeds,
    pub experiment: Experiment,
}

fn check_name(name: &str, field: String) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, "use letters, digits, '_' or '-' only"))
    }
}

impl ExperimentConfig {
    /// Parses and validates; JSON shape errors are reported as config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, applying the output-directory override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::config("attributes", "at least one attribute is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, a) in self.attributes.iter().enumerate() {
            let field = format!("attributes[{i}]");
            a.validate(&field)?;
            check_name(a.id.as_str(), format!("{field}.id"))?;
            if !seen.insert(a.id.clone()) {
                return Err(Error::config(format!("{field}.id"), "duplicate attribute"));
            }
        }
        self.model.validate()?;
        self.sft.validate("sft")?;
        self.preference.validate("preference")?;
        self.sampling.validate("sampling")?;
        if self.sampling.max_len + self.model.prefix_len * self.attributes.len() + 1 > self.model.context {
            return Err(Error::config(
                "sampling.max_len",
                "max_len plus all prefixes must fit in model.context",
            ));
        }
        let reg = ScorerRegistry::default();
        reg.energy(&self.scorers.energy)
            .map_err(|e| Error::config("scorers.energy", e.to_string()))?;
        reg.encoder(&self.scorers.encoder)
            .map_err(|e| Error::config("scorers.encoder", e.to_string()))?;
        if self.pools.candidates < 2 {
            return Err(Error::config("pools.candidates", "must be at least 2"));
        }
        if self.pools.max_pairs == 0 {
            return Err(Error::config("pools.max_pairs", "must be positive"));
        }
        if self.evaluation.samples < 2 {
            return Err(Error::config("evaluation.samples", "must be at least 2"));
        }
        ObjectiveRegistry::default()
            .get(&self.experiment.mode)
            .map_err(|e| Error::config("experiment.mode", e.to_string()))?;
        if self.experiment.arms.is_empty() {
            return Err(Error::config("experiment.arms", "at least one arm is required"));
        }
        let mut names = BTreeSet::new();
        for (i, arm) in self.experiment.arms.iter().enumerate() {
            let field = format!("experiment.arms[{i}]");
            check_name(&arm.name, format!("{field}.name"))?;
            if !names.insert(arm.name.as_str()) {
                return Err(Error::config(format!("{field}.name"), "duplicate arm name"));
            }
            if arm.attributes.is_empty() {
                return Err(Error::config(format!("{field}.attributes"), "must not be empty"));
            }
            let uniq: BTreeSet<_> = arm.attributes.iter().collect();
            if uniq.len() != arm.attributes.len() {
                return Err(Error::config(format!("{field}.attributes"), "attribute listed twice"));
            }
            if let Some(a) = arm.attributes.iter().find(|a| !seen.contains(*a)) {
                return Err(Error::config(
                    format!("{field}.attributes"),
                    format!("unknown attribute '{a}' (known: {})", self.known_attributes()),
                ));
            }
        }
        Ok(())
    }

    pub fn known_attributes(&self) -> String {
        self.attributes
            .iter()
            .map(|a| a.id.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn attribute_ids(&self) -> Vec<AttributeId> {
        self.attributes.iter().map(|a| a.id.clone()).collect()
    }

    pub fn attribute(&self, id: &AttributeId) -> Result<&AttributeSpec> {
        self.attributes
            .iter()
            .find(|a| &a.id == id)
            .ok_or_else(|| Error::UnknownAttribute {
                name: id.to_string(),
                known: self.known_attributes(),
            })
    }

    /// sha256 of the canonical serialization with `output_dir` blanked, so a
    /// relocated run hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
