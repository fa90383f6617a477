//! Diversity and oracle-quality reports for generated pools.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{quality_scores, PoolFits};
use crate::scoring::{score_pool, EnergyModel, StructureEncoder, TrainingEmbeddings};
use crate::seqcore::{AttributeId, ProteinSequence};

pub const NGRAM: usize = 3;

/// All distinct length-`n` substrings of `s`.
pub fn ngram_set(s: &str, n: usize) -> Result<BTreeSet<String>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be positive".into()));
    }
    let b = s.as_bytes();
    if b.len() < n {
        return Err(Error::TooShort { len: b.len(), min: n });
    }
    Ok(b.windows(n).map(|w| String::from_utf8_lossy(w).into_owned()).collect())
}

/// `|Set(a) ∩ Set(b)| / |Set(a)|` over 3-grams. Not symmetric.
pub fn sim(a: &str, b: &str) -> Result<f64> {
    let sa = ngram_set(a, NGRAM)?;
    let sb = ngram_set(b, NGRAM)?;
    Ok(sa.intersection(&sb).count() as f64 / sa.len() as f64)
}

/// Sorted distinct 3-gram codes; the fast path behind the pool aggregates.
fn codes(s: &str) -> Result<Vec<u32>> {
    let b = s.as_bytes();
    if b.len() < NGRAM {
        return Err(Error::TooShort { len: b.len(), min: NGRAM });
    }
    let mut v: Vec<u32> = b
        .windows(NGRAM)
        .map(|w| (w[0] as u32) << 16 | (w[1] as u32) << 8 | w[2] as u32)
        .collect();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

fn overlap(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub ngram: usize,
    /// Mean similarity over ordered pairs of distinct generated sequences.
    pub inter_output: f64,
    /// False when the pool has a single sequence; `inter_output` is then 0.
    pub inter_output_defined: bool,
    /// Mean similarity of each generated sequence to each training sequence.
    pub training_set: f64,
    pub n_generated: usize,
    pub n_training: usize,
}

pub fn diversity_report(generated: &[ProteinSequence], training: &[ProteinSequence]) -> Result<DiversityReport> {
    if generated.is_empty() || training.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let gen: Vec<Vec<u32>> = generated.iter().map(|s| codes(s.residues())).collect::<Result<_>>()?;
    let train: Vec<Vec<u32>> = training.iter().map(|s| codes(s.residues())).collect::<Result<_>>()?;

    let n = gen.len();
    let (inter_output, inter_output_defined) = if n < 2 {
        (0.0, false)
    } else {
        let mut total = 0.0;
        for (i, a) in gen.iter().enumerate() {
            for (j, b) in gen.iter().enumerate() {
                if i != j {
                    total += overlap(a, b) as f64 / a.len() as f64;
                }
            }
        }
        (total / (n * (n - 1)) as f64, true)
    };
    let mut total = 0.0;
    for a in &gen {
        for b in &train {
            total += overlap(a, b) as f64 / a.len() as f64;
        }
    }
    Ok(DiversityReport {
        ngram: NGRAM,
        inter_output,
        inter_output_defined,
        training_set: total / (n * train.len()) as f64,
        n_generated: n,
        n_training: train.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

fn summarize(values: &[f64]) -> Summary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Summary { mean: values.iter().sum::<f64>() / n as f64, median }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolQuality {
    pub pool_size: usize,
    pub energy: Summary,
    pub gamma: Summary,
    pub tau: BTreeMap<AttributeId, Summary>,
    pub rho_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityDeltas {
    pub gamma_mean: f64,
    pub gamma_median: f64,
    pub tau_mean: BTreeMap<AttributeId, f64>,
    pub tau_median: BTreeMap<AttributeId, f64>,
    pub rho_mean: f64,
}

/// Oracle statistics for a pool. With a baseline, both pools are scored
/// together: stability, functionality normalization and the distribution
/// fits behind rho all use the union, and deltas are pool minus baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub pool: PoolQuality,
    pub baseline: Option<PoolQuality>,
    pub deltas: Option<QualityDeltas>,
    /// Metrics that need external predictors and are not computed here.
    pub not_computed: Vec<String>,
}

fn pool_quality(
    records: &[crate::scoring::ScoreRecord],
    rho: &[f64],
    attrs: &[AttributeId],
) -> PoolQuality {
    let col = |f: &dyn Fn(&crate::scoring::ScoreRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    PoolQuality {
        pool_size: records.len(),
        energy: summarize(&col(&|r| r.energy)),
        gamma: summarize(&col(&|r| r.gamma)),
        tau: attrs
            .iter()
            .map(|a| (a.clone(), summarize(&col(&|r| r.tau[a]))))
            .collect(),
        rho_mean: rho.iter().sum::<f64>() / rho.len() as f64,
    }
}

pub fn quality_report(
    generated: &[ProteinSequence],
    energy: &dyn EnergyModel,
    encoder: &dyn StructureEncoder,
    training: &TrainingEmbeddings,
    baseline: Option<&[ProteinSequence]>,
) -> Result<QualityReport> {
    let base = baseline.unwrap_or(&[]);
    if generated.is_empty() || (baseline.is_some() && base.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let mut union = generated.to_vec();
    union.extend_from_slice(base);
    let records = score_pool(&union, energy, encoder, training)?;
    let attrs: Vec<AttributeId> = training.attributes().cloned().collect();
    let fits = PoolFits::fit(&records, &attrs)?;
    let rho: Vec<f64> = quality_scores(&records, &fits.gamma, &fits.tau)?
        .into_iter()
        .map(|q| q.rho)
        .collect();
    let n = generated.len();
    let pool = pool_quality(&records[..n], &rho[..n], &attrs);
    let (baseline, deltas) = if baseline.is_some() {
        let b = pool_quality(&records[n..], &rho[n..], &attrs);
        let d = QualityDeltas {
            gamma_mean: pool.gamma.mean - b.gamma.mean,
            gamma_median: pool.gamma.median - b.gamma.median,
            tau_mean: attrs.iter().map(|a| (a.clone(), pool.tau[a].mean - b.tau[a].mean)).collect(),
            tau_median: attrs
                .iter()
                .map(|a| (a.clone(), pool.tau[a].median - b.tau[a].median))
                .collect(),
            rho_mean: pool.rho_mean - b.rho_mean,
        };
        (Some(b), Some(d))
    } else {
        (None, None)
    };
    Ok(QualityReport {
        pool,
        baseline,
        deltas,
        not_computed: ["cls_score", "tm_score", "rmsd", "plddt"].map(String::from).to_vec(),
    })
}

/// `metric,value` rows for plotting.
pub fn diversity_csv(r: &DiversityReport) -> String {
    format!(
        "metric,value\nngram,{}\ninter_output,{}\ninter_output_defined,{}\ntraining_set,{}\nn_generated,{}\nn_training,{}\n",
        r.ngram, r.inter_output, r.inter_output_defined, r.training_set, r.n_generated, r.n_training
    )
}

/// `metric,pool,baseline,delta` rows; baseline columns are empty without one.
pub fn quality_csv(r: &QualityReport) -> String {
    let mut out = String::from("metric,pool,baseline,delta\n");
    let mut row = |name: String, p: f64, b: Option<f64>| {
        let (bs, ds) = match b {
            Some(b) => (b.to_string(), (p - b).to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!("{name},{p},{bs},{ds}\n"));
    };
    let b = r.baseline.as_ref();
    row("energy_mean".into(), r.pool.energy.mean, b.map(|b| b.energy.mean));
    row("gamma_mean".into(), r.pool.gamma.mean, b.map(|b| b.gamma.mean));
    row("gamma_median".into(), r.pool.gamma.median, b.map(|b| b.gamma.median));
    for (a, s) in &r.pool.tau {
        row(format!("tau_mean[{a}]"), s.mean, b.map(|b| b.tau[a].mean));
        row(format!("tau_median[{a}]"), s.median, b.map(|b| b.tau[a].median));
    }
    row("rho_mean".into(), r.pool.rho_mean, b.map(|b| b.rho_mean));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::{SequenceDataset, ALPHABET};
    use crate::synth::{SyntheticEncoder, SyntheticEnergyModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ngram_examples() {
        assert_eq!(ngram_set("ABCDE", 3).unwrap(), set(&["ABC", "BCD", "CDE"]));
        assert_eq!(ngram_set("AAAA", 3).unwrap(), set(&["AAA"]));
        assert!(matches!(ngram_set("AB", 3), Err(Error::TooShort { len: 2, min: 3 })));
    }

    #[test]
    fn sim_examples() {
        assert_eq!(sim("ABCDEF", "CDEFGH").unwrap(), 0.5);
        assert_eq!(sim("CDEFGH", "ABCDEF").unwrap(), 0.5);
        assert_eq!(sim("ABCD", "ABCDEF").unwrap(), 1.0);
        assert_eq!(sim("ABCDEF", "ABCD").unwrap(), 0.5);
        assert_eq!(sim("MKVLA", "MKVLA").unwrap(), 1.0);
        assert!(sim("AB", "ABC").is_err());
    }

    fn seq(id: &str, s: &str) -> ProteinSequence {
        ProteinSequence::new(id, s).unwrap()
    }

    fn random_pool(rng: &mut ChaCha8Rng, prefix: &str, n: usize) -> Vec<ProteinSequence> {
        (0..n)
            .map(|i| {
                let len = rng.random_range(3..30);
                // A reduced alphabet keeps overlaps frequent.
                let s: String = (0..len).map(|_| ALPHABET[rng.random_range(0..4)] as char).collect();
                seq(&format!("{prefix}{i}"), &s)
            })
            .collect()
    }

    #[test]
    fn degenerate_pools() {
        let one = [seq("a", "MKVL")];
        let r = diversity_report(&one, &one).unwrap();
        assert_eq!(r.inter_output, 0.0);
        assert!(!r.inter_output_defined);
        let two = [seq("a", "MKVL"), seq("b", "MKVL")];
        let r = diversity_report(&two, &one).unwrap();
        assert_eq!(r.inter_output, 1.0);
        assert!(r.inter_output_defined);
        assert!(diversity_report(&[], &one).is_err());
        assert!(diversity_report(&[seq("a", "MK")], &one).is_err());
    }

    #[test]
    fn aggregates_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let gen = random_pool(&mut rng, "g", 50);
        let train = random_pool(&mut rng, "t", 50);
        let r = diversity_report(&gen, &train).unwrap();
        let mut inter = 0.0;
        let mut cross = 0.0;
        for (i, a) in gen.iter().enumerate() {
            for (j, b) in gen.iter().enumerate() {
                if i != j {
                    inter += sim(a.residues(), b.residues()).unwrap();
                }
            }
            for b in &train {
                cross += sim(a.residues(), b.residues()).unwrap();
            }
        }
        assert!((r.inter_output - inter / (50.0 * 49.0)).abs() < 1e-12);
        assert!((r.training_set - cross / 2500.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.inter_output));
        assert!((0.0..=1.0).contains(&r.training_set));

        let mut shuffled = gen.clone();
        shuffled.reverse();
        let r2 = diversity_report(&shuffled, &train).unwrap();
        assert!((r2.inter_output - r.inter_output).abs() < 1e-12);
        assert!((r2.training_set - r.training_set).abs() < 1e-12);
    }

    fn oracles() -> (SyntheticEnergyModel, SyntheticEncoder, TrainingEmbeddings) {
        let energy = SyntheticEnergyModel::new(7);
        let encoder = SyntheticEncoder::new(8, 32);
        let a = AttributeId::new("A").unwrap();
        let ds = SequenceDataset::new(
            a.clone(),
            vec![seq("t1", "KLRKLRAAG"), seq("t2", "GGKLRWWY"), seq("t3", "MMKLRP")],
        )
        .unwrap();
        let sets: BTreeMap<_, _> = [(a, ds)].into();
        let emb = TrainingEmbeddings::new(&encoder, &sets).unwrap();
        (energy, encoder, emb)
    }

    #[test]
    fn quality_of_identical_pools_has_zero_deltas() {
        let (e, enc, emb) = oracles();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let pool = random_pool(&mut rng, "p", 30);
        let r = quality_report(&pool, &e, &enc, &emb, Some(&pool)).unwrap();
        let d = r.deltas.unwrap();
        assert_eq!(d.gamma_mean, 0.0);
        assert_eq!(d.gamma_median, 0.0);
        assert_eq!(d.rho_mean, 0.0);
        assert!(d.tau_mean.values().chain(d.tau_median.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_pool_spans_unit_interval() {
        let (e, enc, emb) = oracles();
        let pool = [seq("a", "KLRKLR"), seq("b", "WWPQDE")];
        let r = quality_report(&pool, &e, &enc, &emb, None).unwrap();
        assert_eq!(r.pool.gamma.mean, 0.5);
        assert_eq!(r.pool.gamma.median, 0.5);
        assert!(r.deltas.is_none());
        assert!(quality_report(&pool[..1], &e, &enc, &emb, None).is_err());
    }

    #[test]
    fn deltas_are_antisymmetric() {
        let (e, enc, emb) = oracles();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = random_pool(&mut rng, "x", 25);
        let y = random_pool(&mut rng, "y", 30);
        let xy = quality_report(&x, &e, &enc, &emb, Some(&y)).unwrap().deltas.unwrap();
        let yx = quality_report(&y, &e, &enc, &emb, Some(&x)).unwrap().deltas.unwrap();
        assert_eq!(xy.gamma_mean, -yx.gamma_mean);
        for a in xy.tau_mean.keys() {
            assert_eq!(xy.tau_mean[a], -yx.tau_mean[a]);
        }
        assert!((xy.rho_mean + yx.rho_mean).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let (e, enc, emb) = oracles();
        let pool = [seq("a", "KLRKLR"), seq("b", "WWPQDE")];
        let r = quality_report(&pool, &e, &enc, &emb, None).unwrap();
        let csv = quality_csv(&r);
        assert!(csv.starts_with("metric,pool,baseline,delta\n"));
        assert!(csv.contains("gamma_mean,0.5,,\n"));
        let d = diversity_report(&pool, &pool).unwrap();
        assert!(diversity_csv(&d).contains("ngram,3\n"));
    }
}
