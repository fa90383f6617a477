//! Binary checkpoint: magic, format version, a JSON header, then the raw
//! little-endian f64 payload (trunk followed by each prefix).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::params::{ParamLayout, PolicyParams, PrefixBank, TensorInfo};
use crate::policy::{ModelConfig, Vocabulary};
use crate::seqcore::AttributeId;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LSTPREF\0";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    alphabet: String,
    tensors: Vec<TensorInfo>,
    prefixes: Vec<PrefixEntry>,
    metadata: BTreeMap<String, String>,
    /// Number of f64 values in the payload.
    payload_len: usize,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrefixEntry {
    attribute: AttributeId,
    shape: Vec<usize>,
    offset: usize,
}

/// A loaded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub prefixes: PrefixBank,
    pub metadata: BTreeMap<String, String>,
}

fn encode(values: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters, prefixes and free-form metadata to bytes.
pub fn checkpoint_bytes(
    params: &PolicyParams,
    prefixes: &PrefixBank,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let cfg = &params.config;
    if prefixes.prefix_len != cfg.prefix_len
        || prefixes.n_layers != cfg.n_layers
        || prefixes.d_model != cfg.d_model
    {
        return Err(Error::ShapeMismatch(
            "prefix bank does not match the model configuration".into(),
        ));
    }
    if let Some(bad) = params
        .values
        .iter()
        .chain(prefixes.prefixes.values().flatten())
        .find(|v| !v.is_finite())
    {
        return Err(Error::Checkpoint(format!("refusing to save non-finite value {bad}")));
    }
    let mut payload = Vec::new();
    encode(params.values.iter().copied(), &mut payload);
    let mut offset = params.values.len();
    let mut entries = Vec::new();
    for (attr, vals) in &prefixes.prefixes {
        entries.push(PrefixEntry {
            attribute: attr.clone(),
            shape: vec![cfg.n_layers, 2, cfg.prefix_len, cfg.d_model],
            offset,
        });
        encode(vals.iter().copied(), &mut payload);
        offset += vals.len();
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        alphabet: params.vocab.alphabet().to_string(),
        tensors: params.layout().tensors().to_vec(),
        prefixes: entries,
        metadata: metadata.clone(),
        payload_len: offset,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != version {
        return Err(bad("header version disagrees with preamble"));
    }
    let payload = &body[hlen..];
    if payload.len() != header.payload_len * 8 {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header declares {} values",
            payload.len(),
            header.payload_len
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let vocab = Vocabulary::with_alphabet(&header.alphabet)?;
    let cfg = header.config;
    cfg.validate()?;
    let trunk_len = ParamLayout::new(&cfg, &vocab).total();
    if trunk_len > values.len() {
        return Err(bad("payload shorter than the trunk"));
    }
    let params = PolicyParams::from_values(cfg.clone(), vocab, values[..trunk_len].to_vec())?;
    if params.layout().tensors() != header.tensors.as_slice() {
        return Err(bad("tensor table does not match the model configuration"));
    }
    let mut bank = PrefixBank::new(&cfg);
    let size = bank.prefix_size();
    let mut expect = trunk_len;
    for e in header.prefixes {
        if e.offset != expect || e.offset + size > values.len() {
            return Err(Error::Checkpoint(format!("bad offset for prefix '{}'", e.attribute)));
        }
        bank.insert(e.attribute, values[e.offset..e.offset + size].to_vec())?;
        expect += size;
    }
    if expect != values.len() {
        return Err(bad("payload has trailing values"));
    }
    Ok(Checkpoint {
        params,
        prefixes: bank,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(
    params: &PolicyParams,
    prefixes: &PrefixBank,
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let bytes = checkpoint_bytes(params, prefixes, metadata)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
