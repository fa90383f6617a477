//! Stability and functionality scores for candidate pools.
//!
//! Energies and embeddings come from pluggable [`EnergyModel`] and
//! [`StructureEncoder`] implementations, looked up by name in a
//! [`ScorerRegistry`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{AttributeId, ProteinSequence, SequenceDataset};
use crate::synth::{SyntheticEncoder, SyntheticEnergyModel};

/// Per-residue energy; lower is more stable. Must be deterministic and
/// finite on every valid sequence.
pub trait EnergyModel: Send + Sync {
    fn name(&self) -> &str;
    fn seed(&self) -> u64;
    fn energy(&self, sequence: &ProteinSequence) -> f64;
}

/// Fixed-dimension structure embedding.
pub trait StructureEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn seed(&self) -> u64;
    fn dim(&self) -> usize;
    fn embed(&self, sequence: &ProteinSequence) -> Result<Vec<f64>>;
}

/// Which scorer to build and with what seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub kind: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

type EnergyFactory = fn(&ScorerSpec) -> Result<Box<dyn EnergyModel>>;
type EncoderFactory = fn(&ScorerSpec) -> Result<Box<dyn StructureEncoder>>;

pub struct ScorerRegistry {
    energy: BTreeMap<String, EnergyFactory>,
    encoders: BTreeMap<String, EncoderFactory>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut reg = ScorerRegistry {
            energy: BTreeMap::new(),
            encoders: BTreeMap::new(),
        };
        reg.register_energy("synthetic", |spec| {
            Ok(Box::new(SyntheticEnergyModel::new(spec.seed)))
        });
        reg.register_encoder("synthetic", |spec| {
            let dim = spec.dim.unwrap_or(SyntheticEncoder::DEFAULT_DIM);
            if dim == 0 {
                return Err(Error::config("scorers.encoder.dim", "must be positive"));
            }
            Ok(Box::new(SyntheticEncoder::new(spec.seed, dim)))
        });
        reg
    }
}

impl ScorerRegistry {
    pub fn register_energy(&mut self, name: &str, factory: EnergyFactory) {
        self.energy.insert(name.to_string(), factory);
    }

    pub fn register_encoder(&mut self, name: &str, factory: EncoderFactory) {
        self.encoders.insert(name.to_string(), factory);
    }

    pub fn energy(&self, spec: &ScorerSpec) -> Result<Box<dyn EnergyModel>> {
        let f = self.energy.get(&spec.kind).ok_or_else(|| Error::UnknownStrategy {
            kind: "energy model",
            name: spec.kind.clone(),
            known: self.energy.keys().cloned().collect::<Vec<_>>().join(", "),
        })?;
        f(spec)
    }

    pub fn encoder(&self, spec: &ScorerSpec) -> Result<Box<dyn StructureEncoder>> {
        let f = self.encoders.get(&spec.kind).ok_or_else(|| Error::UnknownStrategy {
            kind: "structure encoder",
            name: spec.kind.clone(),
            known: self.encoders.keys().cloned().collect::<Vec<_>>().join(", "),
        })?;
        f(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub energy: f64,
    pub gamma: f64,
    pub tau_raw: BTreeMap<AttributeId, f64>,
    pub tau: BTreeMap<AttributeId, f64>,
}

fn min_max(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::DegeneratePool(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::DegeneratePool(format!("non-finite value {v}")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::DegeneratePool(format!("all values equal {lo}")));
    }
    Ok((lo, hi))
}

/// `gamma_i = 1 - (e_i - e_min) / (e_max - e_min)` over the given pool.
pub fn stability_scores(energies: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = min_max(energies)?;
    Ok(energies.iter().map(|e| 1.0 - (e - lo) / (hi - lo)).collect())
}

/// Min-max normalization of raw functionality scores into [0, 1].
pub fn normalize_tau(raw: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = min_max(raw)?;
    Ok(raw.iter().map(|t| (t - lo) / (hi - lo)).collect())
}

pub fn embed(sequence: &ProteinSequence, encoder: &dyn StructureEncoder) -> Result<Vec<f64>> {
    encoder.embed(sequence)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean cosine similarity between one embedding and every training embedding.
pub fn functionality_score(embedding: &[f64], training: &[Vec<f64>]) -> Result<f64> {
    if training.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n0 = norm(embedding);
    if n0 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let mut total = 0.0;
    for t in training {
        if t.len() != embedding.len() {
            return Err(Error::DimensionMismatch {
                expected: embedding.len(),
                got: t.len(),
            });
        }
        let nt = norm(t);
        if nt == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let dot: f64 = embedding.iter().zip(t).map(|(a, b)| a * b).sum();
        total += (dot / (n0 * nt)).clamp(-1.0, 1.0);
    }
    Ok(total / training.len() as f64)
}

/// Training-set embeddings, computed once per attribute.
pub struct TrainingEmbeddings {
    by_attribute: BTreeMap<AttributeId, Vec<Vec<f64>>>,
}

impl TrainingEmbeddings {
    pub fn new(
        encoder: &dyn StructureEncoder,
        training_sets: &BTreeMap<AttributeId, SequenceDataset>,
    ) -> Result<Self> {
        let mut by_attribute = BTreeMap::new();
        for (attr, ds) in training_sets {
            let embs = ds
                .sequences()
                .iter()
                .map(|s| encoder.embed(s))
                .collect::<Result<Vec<_>>>()?;
            by_attribute.insert(attr.clone(), embs);
        }
        Ok(TrainingEmbeddings { by_attribute })
    }

    pub fn attributes(&self) -> impl Iterator<Item = &AttributeId> {
        self.by_attribute.keys()
    }

    pub fn get(&self, attr: &AttributeId) -> Option<&[Vec<f64>]> {
        self.by_attribute.get(attr).map(Vec::as_slice)
    }
}

/// Scores every sequence of a pool: energy, stability over the pool, raw and
/// normalized functionality per attribute. Output order matches input.
pub fn score_pool(
    pool: &[ProteinSequence],
    energy: &dyn EnergyModel,
    encoder: &dyn StructureEncoder,
    training: &TrainingEmbeddings,
) -> Result<Vec<ScoreRecord>> {
    if pool.len() < 2 {
        return Err(Error::DegeneratePool(format!(
            "pool of {} sequence(s); need at least 2",
            pool.len()
        )));
    }
    let energies: Vec<f64> = pool.iter().map(|s| energy.energy(s)).collect();
    let gammas = stability_scores(&energies)?;

    // Duplicate sequences embed identically; cache by residue string.
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    for s in pool {
        if !cache.contains_key(s.residues()) {
            cache.insert(s.residues(), encoder.embed(s)?);
        }
    }

    let mut tau_raw: BTreeMap<AttributeId, Vec<f64>> = BTreeMap::new();
    let mut tau_norm: BTreeMap<AttributeId, Vec<f64>> = BTreeMap::new();
    for attr in training.attributes() {
        let train = training.get(attr).expect("attribute listed");
        let raw = pool
            .iter()
            .map(|s| functionality_score(&cache[s.residues()], train))
            .collect::<Result<Vec<_>>>()?;
        tau_norm.insert(attr.clone(), normalize_tau(&raw)?);
        tau_raw.insert(attr.clone(), raw);
    }

    Ok(pool
        .iter()
        .enumerate()
        .map(|(i, s)| ScoreRecord {
            id: s.id().to_string(),
            energy: energies[i],
            gamma: gammas[i],
            tau_raw: tau_raw.iter().map(|(a, v)| (a.clone(), v[i])).collect(),
            tau: tau_norm.iter().map(|(a, v)| (a.clone(), v[i])).collect(),
        })
        .collect())
}
