use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ModelConfig, Vocabulary};
use crate::seqcore::AttributeId;

const INIT_STD: f64 = 0.02;
const PREFIX_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Offsets of every named tensor in the flat trunk parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_out: usize,
    pub(crate) b_out: usize,
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig, vocab: &Vocabulary) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, shape, offset });
            offset
        };
        let d = cfg.d_model;
        let tok_emb = push("tok_emb".into(), vec![vocab.n_tokens(), d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.context, d]);
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1_g"), vec![d]),
                ln1_b: push(p("ln1_b"), vec![d]),
                w_qkv: push(p("w_qkv"), vec![d, 3 * d]),
                b_qkv: push(p("b_qkv"), vec![3 * d]),
                w_o: push(p("w_o"), vec![d, d]),
                b_o: push(p("b_o"), vec![d]),
                ln2_g: push(p("ln2_g"), vec![d]),
                ln2_b: push(p("ln2_b"), vec![d]),
                w_1: push(p("w_1"), vec![d, cfg.d_ff]),
                b_1: push(p("b_1"), vec![cfg.d_ff]),
                w_2: push(p("w_2"), vec![cfg.d_ff, d]),
                b_2: push(p("b_2"), vec![d]),
            });
        }
        let lnf_g = push("lnf_g".into(), vec![d]);
        let lnf_b = push("lnf_b".into(), vec![d]);
        let w_out = push("w_out".into(), vec![d, vocab.n_outputs()]);
        let b_out = push("b_out".into(), vec![vocab.n_outputs()]);
        ParamLayout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            tensors,
            total,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Trunk parameters as one flat double-precision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub(crate) layout: ParamLayout,
    pub values: Vec<f64>,
}

impl PolicyParams {
    /// Gaussian weights (std 0.02), unit LayerNorm gains, zero biases.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config, &vocab);
        let mut values = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for t in layout.tensors() {
            let slot = &mut values[t.offset..t.offset + t.len()];
            let leaf = t.name.rsplit('.').next().unwrap_or(&t.name);
            if leaf.ends_with("_g") {
                slot.fill(1.0);
            } else if leaf.starts_with("b_") || leaf.ends_with("_b") {
                slot.fill(0.0);
            } else {
                for v in slot.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        Ok(PolicyParams {
            config,
            vocab,
            layout,
            values,
        })
    }

    pub fn from_values(config: ModelConfig, vocab: Vocabulary, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config, &vocab);
        if values.len() != layout.total() {
            return Err(Error::Checkpoint(format!(
                "trunk has {} values, layout needs {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(PolicyParams {
            config,
            vocab,
            layout,
            values,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensor(name)
            .map(|t| &self.values[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.tensor(name)?.clone();
        Some(&mut self.values[t.offset..t.offset + t.len()])
    }
}

/// Learned per-attribute prefixes. Each prefix holds, for every layer, `m`
/// key vectors followed by `m` value vectors of width `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixBank {
    pub prefix_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub prefixes: BTreeMap<AttributeId, Vec<f64>>,
}

impl PrefixBank {
    pub fn new(config: &ModelConfig) -> Self {
        PrefixBank {
            prefix_len: config.prefix_len,
            n_layers: config.n_layers,
            d_model: config.d_model,
            prefixes: BTreeMap::new(),
        }
    }

    pub fn prefix_size(&self) -> usize {
        self.n_layers * 2 * self.prefix_len * self.d_model
    }

    /// Adds a Gaussian-initialized prefix; the stream is keyed by `seed` and
    /// the attribute name so adding attributes in any order gives the same
    /// values.
    pub fn add(&mut self, attribute: AttributeId, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut key = 0u64;
        for b in attribute.as_str().bytes() {
            key = key.wrapping_mul(0x100_0000_01B3).wrapping_add(b as u64);
        }
        rng.set_stream(key);
        let normal = Normal::new(0.0, PREFIX_INIT_STD).expect("valid std");
        let values = (0..self.prefix_size()).map(|_| normal.sample(&mut rng)).collect();
        self.prefixes.insert(attribute, values);
    }

    pub fn insert(&mut self, attribute: AttributeId, values: Vec<f64>) -> Result<()> {
        if values.len() != self.prefix_size() {
            return Err(Error::ShapeMismatch(format!(
                "prefix '{attribute}' has {} values, expected {}",
                values.len(),
                self.prefix_size()
            )));
        }
        self.prefixes.insert(attribute, values);
        Ok(())
    }

    pub fn get(&self, attribute: &AttributeId) -> Result<&[f64]> {
        self.prefixes
            .get(attribute)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownAttribute {
                name: attribute.to_string(),
                known: self.known(),
            })
    }

    pub fn known(&self) -> String {
        self.prefixes
            .keys()
            .map(|a| a.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn attributes(&self) -> Vec<AttributeId> {
        self.prefixes.keys().cloned().collect()
    }
}

/// The key/value states a sequence is conditioned on, laid out as
/// `[layer][key|value][position][d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    segments: Vec<(AttributeId, usize)>,
    len: usize,
    n_layers: usize,
    d_model: usize,
    pub(crate) data: Vec<f64>,
}

impl Conditioning {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn attributes(&self) -> Vec<AttributeId> {
        self.segments.iter().map(|(a, _)| a.clone()).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Keys (`kv = 0`) or values (`kv = 1`) of one layer, `len * d_model` long.
    pub(crate) fn block(&self, layer: usize, kv: usize) -> &[f64] {
        let size = self.len * self.d_model;
        let start = (layer * 2 + kv) * size;
        &self.data[start..start + size]
    }

    pub(crate) fn block_offset(&self, layer: usize, kv: usize) -> usize {
        (layer * 2 + kv) * self.len * self.d_model
    }

    /// Adds a gradient with respect to this conditioning back onto the
    /// per-attribute prefixes it was built from.
    pub fn scatter_grad(&self, grad: &[f64], into: &mut BTreeMap<AttributeId, Vec<f64>>) {
        let d = self.d_model;
        let mut pos0 = 0;
        for (attr, m) in &self.segments {
            let target = into
                .entry(attr.clone())
                .or_insert_with(|| vec![0.0; self.n_layers * 2 * m * d]);
            for layer in 0..self.n_layers {
                for kv in 0..2 {
                    let src = self.block_offset(layer, kv) + pos0 * d;
                    let dst = (layer * 2 + kv) * m * d;
                    for (t, g) in target[dst..dst + m * d].iter_mut().zip(&grad[src..src + m * d]) {
                        *t += g;
                    }
                }
            }
            pos0 += m;
        }
    }
}

/// Concatenates prefixes along the position axis in lexicographic attribute
/// order, whatever order they are requested in.
pub fn concat_prefixes(bank: &PrefixBank, attributes: &[AttributeId]) -> Result<Conditioning> {
    if attributes.is_empty() {
        return Err(Error::InvalidArgument("at least one prefix is required".into()));
    }
    let mut sorted = attributes.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("attribute listed twice".into()));
    }
    let parts = sorted
        .iter()
        .map(|a| Ok((a.clone(), bank.get(a)?)))
        .collect::<Result<Vec<_>>>()?;
    concat_states(&parts, bank.prefix_len, bank.n_layers, bank.d_model)
}

fn concat_states(
    parts: &[(AttributeId, &[f64])],
    m: usize,
    n_layers: usize,
    d: usize,
) -> Result<Conditioning> {
    let expected = n_layers * 2 * m * d;
    for (a, p) in parts {
        if p.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "prefix '{a}' has {} values, expected {expected}",
                p.len()
            )));
        }
    }
    let len = m * parts.len();
    let mut data = Vec::with_capacity(n_layers * 2 * len * d);
    for layer in 0..n_layers {
        for kv in 0..2 {
            for (_, p) in parts {
                let start = (layer * 2 + kv) * m * d;
                data.extend_from_slice(&p[start..start + m * d]);
            }
        }
    }
    Ok(Conditioning {
        segments: parts.iter().map(|(a, _)| (a.clone(), m)).collect(),
        len,
        n_layers,
        d_model: d,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> PrefixBank {
        let mut b = PrefixBank::new(&ModelConfig::default());
        b.add(AttributeId::new("B").unwrap(), 1);
        b.add(AttributeId::new("A").unwrap(), 1);
        b
    }

    #[test]
    fn layout_is_contiguous() {
        let p = PolicyParams::init(ModelConfig::default(), Vocabulary::default(), 0).unwrap();
        let mut end = 0;
        for t in p.layout().tensors() {
            assert_eq!(t.offset, end);
            end += t.len();
        }
        assert_eq!(end, p.values.len());
        assert!(p.tensor("layer0.ln1_g").unwrap().iter().all(|&v| v == 1.0));
        assert!(p.tensor("b_out").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_prefix_is_identity() {
        let b = bank();
        let a = AttributeId::new("A").unwrap();
        let c = concat_prefixes(&b, &[a.clone()]).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(c.data(), b.get(&a).unwrap());
    }

    #[test]
    fn two_prefixes_concatenate_in_canonical_order() {
        let b = bank();
        let a = AttributeId::new("A").unwrap();
        let bb = AttributeId::new("B").unwrap();
        let ab = concat_prefixes(&b, &[a.clone(), bb.clone()]).unwrap();
        let ba = concat_prefixes(&b, &[bb.clone(), a.clone()]).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.len(), 16);
        let d = 64;
        let pa = b.get(&a).unwrap();
        let pb = b.get(&bb).unwrap();
        for layer in 0..2 {
            for kv in 0..2 {
                let blk = ab.block(layer, kv);
                let src = (layer * 2 + kv) * 8 * d;
                assert_eq!(&blk[..8 * d], &pa[src..src + 8 * d]);
                assert_eq!(&blk[8 * d..], &pb[src..src + 8 * d]);
            }
        }
    }

    #[test]
    fn scatter_inverts_concat() {
        let b = bank();
        let attrs = b.attributes();
        let c = concat_prefixes(&b, &attrs).unwrap();
        let mut out = BTreeMap::new();
        c.scatter_grad(c.data(), &mut out);
        for a in &attrs {
            assert_eq!(out[a].as_slice(), b.get(a).unwrap());
        }
    }

    #[test]
    fn concat_errors() {
        let b = bank();
        assert!(concat_prefixes(&b, &[]).is_err());
        assert!(matches!(
            concat_prefixes(&b, &[AttributeId::new("Z").unwrap()]),
            Err(Error::UnknownAttribute { .. })
        ));
        let a = AttributeId::new("A").unwrap();
        let short = vec![0.0; 3];
        assert!(matches!(
            concat_states(&[(a, &short)], 8, 2, 64),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn prefix_init_is_order_independent() {
        let mut x = PrefixBank::new(&ModelConfig::default());
        x.add(AttributeId::new("A").unwrap(), 1);
        x.add(AttributeId::new("B").unwrap(), 1);
        assert_eq!(x, bank());
    }
}
