//! Prefix-conditioned causal transformer policy.
//!
//! The trunk is a small pre-LayerNorm transformer. Conditioning is supplied as
//! learned per-layer key/value states that every token can attend to; several
//! attribute prefixes are combined by concatenating them along the position
//! axis.

mod checkpoint;
mod model;
mod params;
mod sampler;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use model::{backward, forward, logprob, logprob_tokens, teacher_forcing, ForwardCache, Gradients};
pub use params::{concat_prefixes, Conditioning, ParamLayout, PolicyParams, PrefixBank, TensorInfo};
pub use sampler::{sample, sample_tokens, Decoder, SamplingConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{ProteinSequence, ALPHABET};

/// Trunk hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context: usize,
    pub prefix_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            context: 512,
            prefix_len: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("model.{field}"), reason));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads", "d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return bad("n_layers", "must be positive");
        }
        if self.d_ff == 0 {
            return bad("d_ff", "must be positive");
        }
        if self.context < 2 {
            return bad("context", "must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token ids: residues `0..n`, then EOS, BOS and PAD.
///
/// The output layer predicts the `n + 1` classes residues + EOS; BOS and PAD
/// are input-only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    alphabet: String,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            alphabet: String::from_utf8(ALPHABET.to_vec()).unwrap(),
        }
    }
}

impl Vocabulary {
    /// A reduced alphabet; only used to make exhaustive enumeration tractable.
    pub fn with_alphabet(alphabet: &str) -> Result<Self> {
        let bytes = alphabet.as_bytes();
        if bytes.is_empty() || bytes.iter().any(|b| !ALPHABET.contains(b)) {
            return Err(Error::InvalidArgument(format!("bad alphabet '{alphabet}'")));
        }
        let mut sorted = bytes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != bytes.len() {
            return Err(Error::InvalidArgument("alphabet has repeated letters".into()));
        }
        Ok(Vocabulary {
            alphabet: alphabet.to_string(),
        })
    }

    pub fn alphabet(&self) -> &str {
        &self.alphabet
    }

    pub fn n_residues(&self) -> usize {
        self.alphabet.len()
    }

    pub fn eos(&self) -> usize {
        self.n_residues()
    }

    pub fn bos(&self) -> usize {
        self.n_residues() + 1
    }

    pub fn pad(&self) -> usize {
        self.n_residues() + 2
    }

    pub fn n_tokens(&self) -> usize {
        self.n_residues() + 3
    }

    /// Number of next-token classes (residues and EOS).
    pub fn n_outputs(&self) -> usize {
        self.n_residues() + 1
    }

    pub fn encode(&self, sequence: &ProteinSequence) -> Result<Vec<usize>> {
        sequence
            .residues()
            .bytes()
            .map(|b| {
                self.alphabet.bytes().position(|a| a == b).ok_or_else(|| {
                    Error::InvalidSequence(format!(
                        "residue '{}' is outside the model alphabet",
                        b as char
                    ))
                })
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        let bytes = self.alphabet.as_bytes();
        tokens.iter().map(|&t| bytes[t] as char).collect()
    }
}

#[cfg(test)]
mod vocab_tests {
    use super::*;

    #[test]
    fn vocabulary_ids() {
        let v = Vocabulary::default();
        assert_eq!((v.n_residues(), v.eos(), v.bos(), v.pad()), (20, 20, 21, 22));
        assert_eq!(v.n_outputs(), 21);
        let s = ProteinSequence::new("x", "MKV").unwrap();
        let ids = v.encode(&s).unwrap();
        assert_eq!(v.decode(&ids), "MKV");
    }

    #[test]
    fn reduced_vocabulary() {
        let v = Vocabulary::with_alphabet("AC").unwrap();
        assert_eq!(v.n_outputs(), 3);
        assert!(Vocabulary::with_alphabet("AA").is_err());
        assert!(Vocabulary::with_alphabet("AB").is_err());
        let s = ProteinSequence::new("x", "MK").unwrap();
        assert!(v.encode(&s).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }
}

#[cfg(test)]
mod tests;
