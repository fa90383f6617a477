//! Seeded synthetic testbed: an energy oracle, a structure encoder, and
//! motif-enriched training-set generators.
//!
//! All randomness in this module comes from [`SplitMix64`]. The generator and
//! the order in which tables are filled are part of the file-level contract:
//! another implementation following the rules documented here reproduces the
//! same scores bit-for-bit.
//!
//! * energy table: 400 draws, row-major `table[a][b]`, each `2u - 1` with
//!   `u = (next_u64 >> 11) * 2^-53`.
//! * encoder projection: `dim * 8000` draws, row-major `proj[k][f]` where
//!   `f = 400 a + 20 b + c` indexes the 3-mer `abc` by [`ALPHABET`] position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{EnergyModel, StructureEncoder};
use crate::seqcore::{residue_index, AttributeId, ProteinSequence, SequenceDataset, ALPHABET};

pub const SYNTH_VERSION: &str = "splitmix64-v1";

const N_RES: usize = 20;
const N_TRIMERS: usize = N_RES * N_RES * N_RES;

/// SplitMix64 (Steele, Lea & Flood), 64-bit state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [-1, 1).
    pub fn next_signed(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    /// Uniform integer in `0..n` by flooring `u * n`.
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Poisson draw by Knuth's multiplication method; adequate for small means.
    pub fn next_poisson(&mut self, mean: f64) -> usize {
        let limit = (-mean).exp();
        let mut k = 0;
        let mut p = self.next_f64();
        while p > limit {
            k += 1;
            p *= self.next_f64();
        }
        k
    }
}

/// Length-normalized adjacent-pair interaction energy.
#[derive(Debug, Clone)]
pub struct SyntheticEnergyModel {
    seed: u64,
    table: [[f64; N_RES]; N_RES],
}

impl SyntheticEnergyModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut table = [[0.0; N_RES]; N_RES];
        for row in table.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.next_signed();
            }
        }
        SyntheticEnergyModel { seed, table }
    }

    pub fn table(&self) -> &[[f64; N_RES]; N_RES] {
        &self.table
    }

    pub fn pair(&self, a: u8, b: u8) -> f64 {
        let (i, j) = (residue_index(a).unwrap(), residue_index(b).unwrap());
        self.table[i][j]
    }
}

impl EnergyModel for SyntheticEnergyModel {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn energy(&self, sequence: &ProteinSequence) -> f64 {
        let idx = sequence.indices();
        let total: f64 = idx.windows(2).map(|w| self.table[w[0]][w[1]]).sum();
        total / idx.len() as f64
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

/// Random projection of the L2-normalized 3-mer count vector.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    seed: u64,
    dim: usize,
    // Stored transposed, `[feature][dim]`, for sparse accumulation.
    projection_t: Vec<f64>,
}

impl SyntheticEncoder {
    pub const DEFAULT_DIM: usize = 32;

    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut projection_t = vec![0.0; dim * N_TRIMERS];
        for k in 0..dim {
            for f in 0..N_TRIMERS {
                projection_t[f * dim + k] = rng.next_signed();
            }
        }
        SyntheticEncoder {
            seed,
            dim,
            projection_t,
        }
    }

    /// Entry `proj[k][f]` in generation order.
    pub fn projection(&self, k: usize, f: usize) -> f64 {
        self.projection_t[f * self.dim + k]
    }

    /// Sparse 3-mer counts as (feature index, count), sorted by feature.
    pub fn trimer_counts(sequence: &ProteinSequence) -> Vec<(usize, f64)> {
        let idx = sequence.indices();
        let mut feats: Vec<usize> = idx
            .windows(3)
            .map(|w| w[0] * N_RES * N_RES + w[1] * N_RES + w[2])
            .collect();
        feats.sort_unstable();
        let mut out: Vec<(usize, f64)> = Vec::new();
        for f in feats {
            match out.last_mut() {
                Some((g, c)) if *g == f => *c += 1.0,
                _ => out.push((f, 1.0)),
            }
        }
        out
    }
}

impl StructureEncoder for SyntheticEncoder {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn embed(&self, sequence: &ProteinSequence) -> Result<Vec<f64>> {
        if sequence.len() < 3 {
            return Err(Error::TooShort {
                len: sequence.len(),
                min: 3,
            });
        }
        let counts = Self::trimer_counts(sequence);
        let norm = counts.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
        let mut out = vec![0.0; self.dim];
        for (f, c) in counts {
            let w = c / norm;
            let row = &self.projection_t[f * self.dim..(f + 1) * self.dim];
            for (o, p) in out.iter_mut().zip(row) {
                *o += w * p;
            }
        }
        Ok(out)
    }
}

/// Recipe for one synthetic attribute's training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub id: AttributeId,
    pub motif: String,
    /// Expected motif insertions per 50 residues.
    pub insertion_rate: f64,
    pub length_min: usize,
    pub length_max: usize,
    pub seed: u64,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
}

fn default_train_size() -> usize {
    2000
}

impl AttributeSpec {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.motif.is_empty() {
            return Err(Error::config(format!("{field}.motif"), "motif is empty"));
        }
        if let Some(ch) = self.motif.bytes().find(|&b| residue_index(b).is_none()) {
            return Err(Error::config(
                format!("{field}.motif"),
                format!("invalid residue '{}'", ch as char),
            ));
        }
        if self.length_min < 3 {
            return Err(Error::config(format!("{field}.length_min"), "must be at least 3"));
        }
        if self.length_max < self.length_min {
            return Err(Error::config(
                format!("{field}.length_max"),
                "must not be below length_min",
            ));
        }
        if !(self.insertion_rate >= 0.0 && self.insertion_rate.is_finite()) {
            return Err(Error::config(
                format!("{field}.insertion_rate"),
                "must be finite and non-negative",
            ));
        }
        if self.train_size == 0 {
            return Err(Error::config(format!("{field}.train_size"), "must be positive"));
        }
        Ok(())
    }

    /// The shipped attribute pair: motifs `KLR` and `DED`, lengths 40..=120.
    pub fn defaults() -> Vec<AttributeSpec> {
        vec![
            AttributeSpec {
                id: AttributeId::new("A").unwrap(),
                motif: "KLR".into(),
                insertion_rate: 2.0,
                length_min: 40,
                length_max: 120,
                seed: 1001,
                train_size: 2000,
            },
            AttributeSpec {
                id: AttributeId::new("B").unwrap(),
                motif: "DED".into(),
                insertion_rate: 2.0,
                length_min: 40,
                length_max: 120,
                seed: 2002,
                train_size: 2000,
            },
        ]
    }
}

/// Generates `n` sequences from one SplitMix64 stream seeded with `spec.seed`.
///
/// Per sequence, draws are taken in this order: length (uniform on
/// `[length_min, length_max]`), motif count `k ~ Poisson(rate * l / 50)`
/// capped at `l / |motif|`, `l - k|motif|` background residues, then `k` gap
/// positions in `0..=background_len`. Motifs are spliced in at the sorted gap
/// positions, so the total length is exactly `l`.
pub fn generate_training_set(spec: &AttributeSpec, n: usize) -> Result<SequenceDataset> {
    spec.validate("attribute")?;
    if n == 0 {
        return Err(Error::InvalidArgument("training set size must be positive".into()));
    }
    let motif = spec.motif.to_ascii_uppercase();
    let mlen = motif.len();
    let mut rng = SplitMix64::new(spec.seed);
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let span = spec.length_max - spec.length_min + 1;
        let l = spec.length_min + rng.next_below(span);
        let k = rng
            .next_poisson(spec.insertion_rate * l as f64 / 50.0)
            .min(l / mlen);
        let n_bg = l - k * mlen;
        let background: Vec<u8> = (0..n_bg).map(|_| ALPHABET[rng.next_below(N_RES)]).collect();
        let mut gaps: Vec<usize> = (0..k).map(|_| rng.next_below(n_bg + 1)).collect();
        gaps.sort_unstable();
        let mut residues = String::with_capacity(l);
        let mut g = 0;
        for pos in 0..=n_bg {
            while g < gaps.len() && gaps[g] == pos {
                residues.push_str(&motif);
                g += 1;
            }
            if pos < n_bg {
                residues.push(background[pos] as char);
            }
        }
        sequences.push(ProteinSequence::new(format!("{}_{i:05}", spec.id), &residues)?);
    }
    SequenceDataset::new(spec.id.clone(), sequences)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> ProteinSequence {
        ProteinSequence::new("t", s).unwrap()
    }

    #[test]
    fn splitmix_reference_values() {
        // Published SplitMix64 outputs for seed 1234567.
        let mut rng = SplitMix64::new(1234567);
        assert_eq!(rng.next_u64(), 6457827717110365317);
        assert_eq!(rng.next_u64(), 3203168211198807973);
        assert_eq!(rng.next_u64(), 9817491932198370423);
    }

    #[test]
    fn energy_of_dimer_and_trimer() {
        let m = SyntheticEnergyModel::new(7);
        let t = m.pair(b'A', b'A');
        assert_eq!(m.energy(&seq("AA")), t / 2.0);
        let expected = (m.pair(b'A', b'C') + m.pair(b'C', b'A')) / 3.0;
        assert_eq!(m.energy(&seq("ACA")), expected);
        assert_eq!(m.energy(&seq("W")), 0.0);
    }

    #[test]
    fn energy_table_is_seeded_and_bounded() {
        let a = SyntheticEnergyModel::new(3);
        let b = SyntheticEnergyModel::new(3);
        let c = SyntheticEnergyModel::new(4);
        assert_eq!(a.table(), b.table());
        assert_ne!(a.table(), c.table());
        assert!(a.table().iter().flatten().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn embed_matches_standalone_projection() {
        let enc = SyntheticEncoder::new(42, 32);
        let e = enc.embed(&seq("MKV")).unwrap();
        // "MKV" has the single 3-mer MKV with unit normalized count.
        let f = residue_index(b'M').unwrap() * 400
            + residue_index(b'K').unwrap() * 20
            + residue_index(b'V').unwrap();
        let mut rng = SplitMix64::new(42);
        let mut expected = vec![0.0; 32];
        for slot in expected.iter_mut() {
            for g in 0..8000 {
                let v = rng.next_signed();
                if g == f {
                    *slot = v;
                }
            }
        }
        assert_eq!(e, expected);
    }

    #[test]
    fn embed_requires_three_residues_and_is_scale_free() {
        let enc = SyntheticEncoder::new(5, 32);
        assert!(matches!(enc.embed(&seq("MK")), Err(Error::TooShort { .. })));
        // Both contain only the 3-mer AAA, so normalized counts coincide.
        let a = enc.embed(&seq("AAAA")).unwrap();
        let b = enc.embed(&seq("AAAAAAA")).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(a.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn training_set_is_deterministic_and_seed_sensitive() {
        let spec = AttributeSpec::defaults().remove(0);
        let a = generate_training_set(&spec, 1).unwrap();
        let b = generate_training_set(&spec, 1).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed += 1;
        let c = generate_training_set(&other, 1).unwrap();
        assert_ne!(a.sequences()[0].residues(), c.sequences()[0].residues());
    }

    #[test]
    fn training_lengths_in_range() {
        let spec = AttributeSpec::defaults().remove(1);
        let ds = generate_training_set(&spec, 300).unwrap();
        assert!(ds
            .sequences()
            .iter()
            .all(|s| (40..=120).contains(&s.len())));
    }

    #[test]
    fn motif_rate_matches_expectation() {
        let mut spec = AttributeSpec::defaults().remove(0);
        spec.insertion_rate = 5.0; // one motif per ~10 residues
        let n = 1000;
        let ds = generate_training_set(&spec, n).unwrap();
        let count = |s: &str| s.as_bytes().windows(3).filter(|w| *w == b"KLR").count();
        let observed: f64 =
            ds.sequences().iter().map(|s| count(s.residues()) as f64).sum::<f64>() / n as f64;
        let mean_len = (40.0 + 120.0) / 2.0;
        let expected = spec.insertion_rate * mean_len / 50.0;
        assert!(
            (observed - expected).abs() / expected < 0.10,
            "observed {observed} expected {expected}"
        );
    }

    #[test]
    fn invalid_motif_names_field() {
        let mut spec = AttributeSpec::defaults().remove(0);
        spec.motif = "KXR".into();
        match spec.validate("attributes[0]") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "attributes[0].motif"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn attributes_are_separable_under_the_encoder() {
        let specs = AttributeSpec::defaults();
        let enc = SyntheticEncoder::new(SCORER_TEST_SEED, 32);
        let a = generate_training_set(&specs[0], 100).unwrap();
        let b = generate_training_set(&specs[1], 100).unwrap();
        let embed_all = |ds: &SequenceDataset| -> Vec<Vec<f64>> {
            ds.sequences().iter().map(|s| enc.embed(s).unwrap()).collect()
        };
        let (ea, eb) = (embed_all(&a), embed_all(&b));
        let mut centroid = vec![0.0; 32];
        for e in &ea {
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (c, v) in centroid.iter_mut().zip(e) {
                *c += v / n;
            }
        }
        let cos = |u: &[f64], v: &[f64]| {
            let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            dot / (u.iter().map(|x| x * x).sum::<f64>().sqrt()
                * v.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mean_cos = |es: &[Vec<f64>]| es.iter().map(|e| cos(e, &centroid)).sum::<f64>() / es.len() as f64;
        assert!(mean_cos(&ea) > mean_cos(&eb));
    }

    const SCORER_TEST_SEED: u64 = 202;
}
