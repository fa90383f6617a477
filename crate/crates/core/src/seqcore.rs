//! Sequence domain types and FASTA I/O.
//!
//! Sequences are restricted to the 20 canonical amino-acid letters. Ambiguity
//! codes (`B`, `Z`, `X`, `U`, `O`) are rejected, never mapped.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 20 canonical residues, in the order used for every index-based table.
pub const ALPHABET: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

pub const DEFAULT_MAX_LEN: usize = 400;

/// Index of a residue letter within [`ALPHABET`].
pub fn residue_index(b: u8) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == b)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AttributeId(String);

impl AttributeId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!(
                "attribute name '{name}' must be a non-empty token without whitespace"
            )));
        }
        Ok(AttributeId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AttributeId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        AttributeId::new(s)
    }
}

impl From<AttributeId> for String {
    fn from(a: AttributeId) -> String {
        a.0
    }
}

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An identified residue string over [`ALPHABET`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProteinSequence {
    id: String,
    residues: String,
}

impl ProteinSequence {
    /// Validates the alphabet and non-emptiness. Lowercase letters are upcased.
    pub fn new(id: impl Into<String>, residues: &str) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidSequence(format!("bad identifier '{id}'")));
        }
        let residues = residues.to_ascii_uppercase();
        if residues.is_empty() {
            return Err(Error::InvalidSequence(format!("sequence '{id}' is empty")));
        }
        if let Some(ch) = residues.bytes().find(|&b| residue_index(b).is_none()) {
            return Err(Error::InvalidSequence(format!(
                "sequence '{id}' contains invalid residue '{}'",
                ch as char
            )));
        }
        Ok(ProteinSequence { id, residues })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn residues(&self) -> &str {
        &self.residues
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    /// Residue indices into [`ALPHABET`].
    pub fn indices(&self) -> Vec<usize> {
        self.residues
            .bytes()
            .map(|b| residue_index(b).expect("validated on construction"))
            .collect()
    }

    pub fn check_max_len(&self, max_len: usize) -> Result<()> {
        if self.len() > max_len {
            return Err(Error::InvalidSequence(format!(
                "sequence '{}' has length {} above the maximum {max_len}",
                self.id,
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub attribute: AttributeId,
    sequences: Vec<ProteinSequence>,
}

impl SequenceDataset {
    /// Builds a dataset, refusing empty input and duplicate ids.
    pub fn new(attribute: AttributeId, sequences: Vec<ProteinSequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for s in &sequences {
            if !seen.insert(s.id()) {
                return Err(Error::InvalidSequence(format!(
                    "duplicate id '{}' in dataset",
                    s.id()
                )));
            }
        }
        Ok(SequenceDataset {
            attribute,
            sequences,
        })
    }

    pub fn sequences(&self) -> &[ProteinSequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn into_sequences(self) -> Vec<ProteinSequence> {
        self.sequences
    }
}

/// Parses FASTA text. Multi-line bodies are joined; ids are the first
/// whitespace-delimited token of the header.
pub fn parse_fasta_str(text: &str, attribute: AttributeId) -> Result<SequenceDataset> {
    let mut records: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().ok_or_else(|| Error::MalformedFasta {
                line: line_no,
                reason: "header has no identifier".into(),
            })?;
            records.push((id.to_string(), String::new()));
        } else {
            let body = line.trim();
            if body.is_empty() {
                continue;
            }
            let (_, seq) = records.last_mut().ok_or_else(|| Error::MalformedFasta {
                line: line_no,
                reason: "sequence data before the first header".into(),
            })?;
            for ch in body.chars() {
                let up = ch.to_ascii_uppercase();
                if !up.is_ascii() || residue_index(up as u8).is_none() {
                    return Err(Error::InvalidResidue { ch, line: line_no });
                }
                seq.push(up);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sequences = records
        .into_iter()
        .map(|(id, seq)| ProteinSequence::new(id, &seq))
        .collect::<Result<Vec<_>>>()?;
    SequenceDataset::new(attribute, sequences)
}

pub fn parse_fasta(path: &Path, attribute: AttributeId) -> Result<SequenceDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fasta_str(&text, attribute)
}

/// Canonical FASTA: one header line and one unwrapped sequence line per record.
pub fn fasta_string(sequences: &[ProteinSequence]) -> Result<String> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = String::new();
    for s in sequences {
        out.push('>');
        out.push_str(s.id());
        out.push('\n');
        out.push_str(s.residues());
        out.push('\n');
    }
    Ok(out)
}

pub fn write_fasta(sequences: &[ProteinSequence], path: &Path) -> Result<()> {
    let text = fasta_string(sequences)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
