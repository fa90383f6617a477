//! Preference-pair construction from scored candidate pools.
//!
//! A candidate beats another only when it is strictly better on stability and
//! strictly better on every functionality attribute. Ties exclude a pair.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::QualityScore;
use crate::scoring::ScoreRecord;
use crate::seqcore::AttributeId;

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner_id: String,
    pub loser_id: String,
    pub rho_w: f64,
    pub rho_l: f64,
    pub delta_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub pool: String,
    pub seed: u64,
    pub max_pairs: usize,
    pub attributes: Vec<AttributeId>,
    pub total_valid: usize,
    /// Dominant pairs whose quality gap was not positive in floating point.
    pub dropped_nonpositive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub provenance: PairProvenance,
}

fn tau_of(r: &ScoreRecord, attr: &AttributeId) -> Result<f64> {
    r.tau
        .get(attr)
        .copied()
        .ok_or_else(|| Error::MissingAttribute(attr.to_string()))
}

/// Strict dominance on stability and on every listed attribute.
pub fn dominates(w: &ScoreRecord, l: &ScoreRecord, attributes: &[AttributeId]) -> Result<bool> {
    if w.gamma <= l.gamma {
        return Ok(false);
    }
    for a in attributes {
        if tau_of(w, a)? <= tau_of(l, a)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Every ordered `(winner, loser)` index pair satisfying [`dominates`], in
/// row-major order.
pub fn valid_pairs(records: &[ScoreRecord], attributes: &[AttributeId]) -> Result<Vec<(usize, usize)>> {
    if attributes.is_empty() {
        return Err(Error::InvalidArgument("no attributes given".into()));
    }
    // Flatten the scores so the O(n^2) sweep is a tight loop.
    let dims = 1 + attributes.len();
    let mut flat = Vec::with_capacity(records.len() * dims);
    for r in records {
        flat.push(r.gamma);
        for a in attributes {
            flat.push(tau_of(r, a)?);
        }
    }
    let mut out = Vec::new();
    for i in 0..records.len() {
        let wi = &flat[i * dims..(i + 1) * dims];
        for j in 0..records.len() {
            let lj = &flat[j * dims..(j + 1) * dims];
            if wi.iter().zip(lj).all(|(w, l)| w > l) {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

/// Samples `min(max_pairs, |valid|)` dominant pairs uniformly without
/// replacement. Output is in row-major index order and depends only on the
/// records and `seed`.
pub fn build_pairs(
    records: &[ScoreRecord],
    quality: &[QualityScore],
    attributes: &[AttributeId],
    max_pairs: usize,
    seed: u64,
    pool: &str,
) -> Result<PreferenceDataset> {
    if max_pairs == 0 {
        return Err(Error::InvalidArgument("max_pairs must be at least 1".into()));
    }
    if quality.len() != records.len()
        || quality.iter().zip(records).any(|(q, r)| q.sequence_id != r.id)
    {
        return Err(Error::InvalidArgument(
            "quality scores are not aligned with records".into(),
        ));
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = records.iter().find(|r| !ids.insert(r.id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate record id '{}'", dup.id)));
    }

    let all = valid_pairs(records, attributes)?;
    let total_valid = all.len();
    let usable: Vec<(usize, usize)> = all
        .into_iter()
        .filter(|&(w, l)| quality[w].rho - quality[l].rho > 0.0)
        .collect();
    let dropped_nonpositive = total_valid - usable.len();
    if usable.is_empty() {
        return Err(Error::NoValidPairs);
    }

    let take = max_pairs.min(usable.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, usable.len(), take).into_vec();
    chosen.sort_unstable();

    let pairs = chosen
        .into_iter()
        .map(|k| {
            let (w, l) = usable[k];
            PreferencePair {
                winner_id: records[w].id.clone(),
                loser_id: records[l].id.clone(),
                rho_w: quality[w].rho,
                rho_l: quality[l].rho,
                delta_rho: quality[w].rho - quality[l].rho,
            }
        })
        .collect();
    Ok(PreferenceDataset {
        pairs,
        provenance: PairProvenance {
            pool: pool.to_string(),
            seed,
            max_pairs,
            attributes: attributes.to_vec(),
            total_valid,
            dropped_nonpositive,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{quality_scores, PoolFits};
    use rand::Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn attr() -> AttributeId {
        AttributeId::new("A").unwrap()
    }

    fn rec(id: &str, gamma: f64, tau: f64) -> ScoreRecord {
        let t: BTreeMap<_, _> = [(attr(), tau)].into();
        ScoreRecord { id: id.into(), energy: 0.0, gamma, tau_raw: t.clone(), tau: t }
    }

    fn quality(records: &[ScoreRecord]) -> Vec<QualityScore> {
        let fits = PoolFits::fit(records, &[attr()]).unwrap();
        quality_scores(records, &fits.gamma, &fits.tau).unwrap()
    }

    #[test]
    fn full_dominance_yields_one_pair() {
        let r = vec![rec("a", 0.9, 0.8), rec("b", 0.1, 0.2)];
        assert_eq!(valid_pairs(&r, &[attr()]).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn conflicting_dimensions_yield_nothing() {
        let r = vec![rec("a", 0.9, 0.2), rec("b", 0.1, 0.8)];
        assert!(valid_pairs(&r, &[attr()]).unwrap().is_empty());
        let q = quality(&r);
        assert!(matches!(
            build_pairs(&r, &q, &[attr()], 10, 1, "p"),
            Err(Error::NoValidPairs)
        ));
    }

    #[test]
    fn ties_are_excluded() {
        let r = vec![rec("a", 0.9, 0.5), rec("b", 0.1, 0.5)];
        assert!(valid_pairs(&r, &[attr()]).unwrap().is_empty());
    }

    #[test]
    fn total_order_returns_all_pairs() {
        let r = vec![rec("a", 0.9, 0.9), rec("b", 0.5, 0.5), rec("c", 0.1, 0.1)];
        let q = quality(&r);
        let ds = build_pairs(&r, &q, &[attr()], 10, 3, "p").unwrap();
        let got: Vec<(&str, &str)> = ds
            .pairs
            .iter()
            .map(|p| (p.winner_id.as_str(), p.loser_id.as_str()))
            .collect();
        assert_eq!(got, vec![("a", "b"), ("a", "c"), ("b", "c")]);
        assert!(ds.pairs.iter().all(|p| p.delta_rho > 0.0));
    }

    #[test]
    fn capped_sampling_is_deterministic() {
        let r = vec![rec("a", 0.9, 0.9), rec("b", 0.5, 0.5), rec("c", 0.1, 0.1)];
        let q = quality(&r);
        let x = build_pairs(&r, &q, &[attr()], 2, 9, "p").unwrap();
        let y = build_pairs(&r, &q, &[attr()], 2, 9, "p").unwrap();
        assert_eq!(x.pairs.len(), 2);
        assert_eq!(x, y);
    }

    #[test]
    fn multi_attribute_requires_every_dimension() {
        let b = AttributeId::new("B").unwrap();
        let mk = |id: &str, g: f64, ta: f64, tb: f64| {
            let t: BTreeMap<_, _> = [(attr(), ta), (b.clone(), tb)].into();
            ScoreRecord { id: id.into(), energy: 0.0, gamma: g, tau_raw: t.clone(), tau: t }
        };
        let r = vec![mk("x", 0.9, 0.9, 0.1), mk("y", 0.1, 0.1, 0.9), mk("z", 0.0, 0.0, 0.0)];
        let pairs = valid_pairs(&r, &[attr(), b.clone()]).unwrap();
        assert_eq!(pairs, vec![(0, 2), (1, 2)]);
        assert!(matches!(
            valid_pairs(&[rec("q", 0.1, 0.1)], &[b]),
            Err(Error::MissingAttribute(_))
        ));
    }

    fn random_pool(n: usize, seed: u64) -> Vec<ScoreRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| rec(&format!("s{i}"), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let r = random_pool(100, 5);
        let fast: BTreeSet<_> = valid_pairs(&r, &[attr()]).unwrap().into_iter().collect();
        let mut brute = BTreeSet::new();
        for i in 0..r.len() {
            for j in 0..r.len() {
                if r[i].gamma > r[j].gamma && r[i].tau[&attr()] > r[j].tau[&attr()] {
                    brute.insert((i, j));
                }
            }
        }
        assert_eq!(fast, brute);
    }

    #[test]
    fn large_pool_pairs_recheck() {
        let r = random_pool(500, 6);
        let q = quality(&r);
        let ds = build_pairs(&r, &q, &[attr()], 5000, 11, "p").unwrap();
        assert_eq!(ds.pairs.len(), 5000);
        let by_id: BTreeMap<&str, &ScoreRecord> = r.iter().map(|x| (x.id.as_str(), x)).collect();
        let mut seen = BTreeSet::new();
        for p in &ds.pairs {
            let (w, l) = (by_id[p.winner_id.as_str()], by_id[p.loser_id.as_str()]);
            assert!(dominates(w, l, &[attr()]).unwrap());
            assert!(p.delta_rho > 0.0);
            assert_ne!(p.winner_id, p.loser_id);
            assert!(seen.insert((p.winner_id.clone(), p.loser_id.clone())));
        }
    }

    #[test]
    fn valid_set_is_permutation_invariant() {
        let r = random_pool(60, 8);
        let ids = |recs: &[ScoreRecord]| -> BTreeSet<(String, String)> {
            valid_pairs(recs, &[attr()])
                .unwrap()
                .into_iter()
                .map(|(w, l)| (recs[w].id.clone(), recs[l].id.clone()))
                .collect()
        };
        let mut shuffled = r.clone();
        shuffled.reverse();
        shuffled.rotate_left(17);
        assert_eq!(ids(&r), ids(&shuffled));
    }
}
