//! Distribution fitting and CDF-weighted quality scores.
//!
//! Each score dimension of a pool gets its own [`FittedDistribution`]. A
//! score `s` is weighted as `G(s) = F(s) * (2^s - 1)`, and a sequence's quality
//! is `G(gamma) + mean_k G(tau_k)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::scoring::ScoreRecord;
use crate::seqcore::AttributeId;

/// Samples are clamped into `[CLAMP_EPS, 1 - CLAMP_EPS]` before fitting.
pub const CLAMP_EPS: f64 = 1e-6;
/// Below this many samples the empirical CDF is used.
pub const MIN_BETA_SAMPLES: usize = 8;
const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Beta,
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedDistribution {
    kind: DistributionKind,
    a: f64,
    b: f64,
    sorted: Vec<f64>,
    n: usize,
    mean: f64,
    var: f64,
}

/// Manifest view `{kind, a, b, n, mean, var}`; `a`/`b` are null for the
/// empirical fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub kind: DistributionKind,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub n: usize,
    pub mean: f64,
    pub var: f64,
}

impl FittedDistribution {
    pub fn beta(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta parameters must be positive, got ({a}, {b})"
            )));
        }
        let mean = a / (a + b);
        let var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
        Ok(FittedDistribution {
            kind: DistributionKind::Beta,
            a,
            b,
            sorted: Vec::new(),
            n: 0,
            mean,
            var,
        })
    }

    pub fn uniform() -> Self {
        Self::beta(1.0, 1.0).expect("valid parameters")
    }

    pub fn empirical(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (mean, var) = moments(samples);
        Ok(FittedDistribution {
            kind: DistributionKind::Empirical,
            a: 0.0,
            b: 0.0,
            sorted,
            n: samples.len(),
            mean,
            var,
        })
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    /// `(a, b)` for the beta kind.
    pub fn params(&self) -> Option<(f64, f64)> {
        (self.kind == DistributionKind::Beta).then_some((self.a, self.b))
    }

    pub fn summary(&self) -> DistributionSummary {
        let p = self.params();
        DistributionSummary {
            kind: self.kind,
            a: p.map(|p| p.0),
            b: p.map(|p| p.1),
            n: self.n,
            mean: self.mean,
            var: self.var,
        }
    }
}

fn moments(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Method-of-moments beta fit, falling back to the empirical CDF when there
/// are too few samples, the variance is degenerate, or the moments are
/// infeasible (`v >= m(1 - m)`).
pub fn fit_beta(samples: &[f64]) -> Result<FittedDistribution> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clamped: Vec<f64> = samples
        .iter()
        .map(|x| x.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS))
        .collect();
    if clamped.len() < MIN_BETA_SAMPLES {
        return FittedDistribution::empirical(&clamped);
    }
    let (m, v) = moments(&clamped);
    if v < MIN_VARIANCE || v >= m * (1.0 - m) {
        return FittedDistribution::empirical(&clamped);
    }
    let common = m * (1.0 - m) / v - 1.0;
    let mut dist = FittedDistribution::beta(m * common, (1.0 - m) * common)?;
    dist.n = clamped.len();
    dist.mean = m;
    dist.var = v;
    Ok(dist)
}

/// Regularized incomplete beta `I_x(a, b)`.
///
/// Continued fraction by the modified Lentz method, evaluated directly for
/// `x < (a + 1) / (a + b + 2)` and through `1 - I_{1-x}(b, a)` otherwise.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// CDF on [0, 1]; inputs outside are clamped.
pub fn cdf(dist: &FittedDistribution, x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    match dist.kind {
        DistributionKind::Beta => regularized_incomplete_beta(dist.a, dist.b, x).clamp(0.0, 1.0),
        DistributionKind::Empirical => {
            if x >= 1.0 {
                return 1.0;
            }
            let count = dist.sorted.partition_point(|&s| s <= x);
            count as f64 / dist.sorted.len() as f64
        }
    }
}

/// `G(s) = F(s) * (2^s - 1)`.
pub fn weighted_score(dist: &FittedDistribution, s: f64) -> f64 {
    cdf(dist, s) * (s.exp2() - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityScore {
    pub sequence_id: String,
    pub g_gamma: f64,
    pub g_tau: BTreeMap<AttributeId, f64>,
    pub rho: f64,
}

/// One stability distribution plus one functionality distribution per
/// attribute, fitted on a whole pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolFits {
    pub gamma: FittedDistribution,
    pub tau: BTreeMap<AttributeId, FittedDistribution>,
}

impl PoolFits {
    pub fn fit(records: &[ScoreRecord], attributes: &[AttributeId]) -> Result<Self> {
        let gammas: Vec<f64> = records.iter().map(|r| r.gamma).collect();
        let gamma = fit_beta(&gammas)?;
        let mut tau = BTreeMap::new();
        for attr in attributes {
            let vals = records
                .iter()
                .map(|r| {
                    r.tau
                        .get(attr)
                        .copied()
                        .ok_or_else(|| Error::MissingAttribute(attr.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            tau.insert(attr.clone(), fit_beta(&vals)?);
        }
        Ok(PoolFits { gamma, tau })
    }

    pub fn summary(&self) -> serde_json::Value {
        let tau: BTreeMap<String, DistributionSummary> = self
            .tau
            .iter()
            .map(|(k, v)| (k.to_string(), v.summary()))
            .collect();
        serde_json::json!({ "gamma": self.gamma.summary(), "tau": tau })
    }
}

/// `rho = G(gamma) + (1/K) * sum_k G(tau_k)`; with a single attribute this is
/// `G(gamma) + G(tau)`.
pub fn quality_scores(
    records: &[ScoreRecord],
    gamma_dist: &FittedDistribution,
    tau_dists: &BTreeMap<AttributeId, FittedDistribution>,
) -> Result<Vec<QualityScore>> {
    if tau_dists.is_empty() {
        return Err(Error::InvalidArgument("no functionality attributes".into()));
    }
    let k = tau_dists.len() as f64;
    records
        .iter()
        .map(|r| {
            let g_gamma = weighted_score(gamma_dist, r.gamma);
            let mut g_tau = BTreeMap::new();
            let mut sum = 0.0;
            for (attr, dist) in tau_dists {
                let t = *r
                    .tau
                    .get(attr)
                    .ok_or_else(|| Error::MissingAttribute(attr.to_string()))?;
                let g = weighted_score(dist, t);
                sum += g;
                g_tau.insert(attr.clone(), g);
            }
            Ok(QualityScore {
                sequence_id: r.id.clone(),
                g_gamma,
                g_tau,
                rho: g_gamma + sum / k,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, gamma: f64, taus: &[(&str, f64)]) -> ScoreRecord {
        let tau: BTreeMap<AttributeId, f64> = taus
            .iter()
            .map(|(a, t)| (AttributeId::new(*a).unwrap(), *t))
            .collect();
        ScoreRecord {
            id: id.into(),
            energy: 0.0,
            gamma,
            tau_raw: tau.clone(),
            tau,
        }
    }

    #[test]
    fn constant_samples_fall_back_to_empirical() {
        let d = fit_beta(&[0.5; 20]).unwrap();
        assert_eq!(d.kind(), DistributionKind::Empirical);
        assert_eq!(cdf(&d, 0.49), 0.0);
        assert_eq!(cdf(&d, 0.5), 1.0);
    }

    #[test]
    fn few_samples_fall_back_to_empirical() {
        let d = fit_beta(&[0.1, 0.2, 0.9]).unwrap();
        assert_eq!(d.kind(), DistributionKind::Empirical);
        assert!((cdf(&d, 0.2) - 2.0 / 3.0).abs() < 1e-15);
        assert!(fit_beta(&[]).is_err());
    }

    #[test]
    fn infeasible_moments_fall_back() {
        // Half at each endpoint: variance above m(1-m) after the n-1 correction.
        let mut s = vec![0.0; 10];
        s.extend(vec![1.0; 10]);
        assert_eq!(fit_beta(&s).unwrap().kind(), DistributionKind::Empirical);
    }

    #[test]
    fn closed_form_cdf_cases() {
        let u = FittedDistribution::uniform();
        assert!((cdf(&u, 0.3) - 0.3).abs() < 1e-14);
        let b22 = FittedDistribution::beta(2.0, 2.0).unwrap();
        assert!((cdf(&b22, 0.5) - 0.5).abs() < 1e-14);
        // Beta(2,5) as a binomial tail: 1 - (1-x)^6 - 6x(1-x)^5.
        let b25 = FittedDistribution::beta(2.0, 5.0).unwrap();
        let x: f64 = 0.2;
        let exact = 1.0 - (1.0 - x).powi(6) - 6.0 * x * (1.0 - x).powi(5);
        assert!((cdf(&b25, x) - exact).abs() < 1e-12);
        assert_eq!(cdf(&b25, 0.0), 0.0);
        assert_eq!(cdf(&b25, 1.0), 1.0);
        assert_eq!(cdf(&b25, -3.0), 0.0);
    }

    #[test]
    fn weighted_score_cases() {
        let u = FittedDistribution::uniform();
        let e = fit_beta(&[0.1, 0.4, 0.8]).unwrap();
        assert_eq!(weighted_score(&u, 0.0), 0.0);
        assert_eq!(weighted_score(&e, 0.0), 0.0);
        assert!((weighted_score(&u, 1.0) - 1.0).abs() < 1e-15);
        let expected = 0.5 * (2f64.sqrt() - 1.0);
        assert!((weighted_score(&u, 0.5) - expected).abs() < 1e-12);
        assert!((expected - 0.2071067).abs() < 1e-7);
    }

    #[test]
    fn quality_single_and_multi_attribute() {
        let u = FittedDistribution::uniform();
        let one: BTreeMap<_, _> = [(AttributeId::new("A").unwrap(), u.clone())].into();
        let q = quality_scores(&[rec("x", 1.0, &[("A", 1.0)])], &u, &one).unwrap();
        assert!((q[0].rho - 2.0).abs() < 1e-14);

        let two: BTreeMap<_, _> = [
            (AttributeId::new("A").unwrap(), u.clone()),
            (AttributeId::new("B").unwrap(), u.clone()),
        ]
        .into();
        let q = quality_scores(&[rec("x", 1.0, &[("A", 1.0), ("B", 0.0)])], &u, &two).unwrap();
        assert!((q[0].rho - 1.5).abs() < 1e-14);

        let missing = quality_scores(&[rec("x", 1.0, &[("A", 1.0)])], &u, &two);
        assert!(matches!(missing, Err(Error::MissingAttribute(_))));
    }

    #[test]
    fn single_attribute_rho_is_plain_sum() {
        let g = fit_beta(&[0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.4]).unwrap();
        let t = FittedDistribution::beta(2.0, 3.0).unwrap();
        let attr = AttributeId::new("A").unwrap();
        let dists: BTreeMap<_, _> = [(attr, t.clone())].into();
        let r = rec("x", 0.37, &[("A", 0.61)]);
        let q = quality_scores(std::slice::from_ref(&r), &g, &dists).unwrap();
        assert_eq!(q[0].rho, weighted_score(&g, 0.37) + weighted_score(&t, 0.61));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cdf_monotone(a in 0.2f64..20.0, b in 0.2f64..20.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
                let d = FittedDistribution::beta(a, b).unwrap();
                let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
                prop_assert!(cdf(&d, lo) <= cdf(&d, hi));
            }

            #[test]
            fn weighted_score_strictly_increasing(a in 0.3f64..10.0, b in 0.3f64..10.0, s in 0.01f64..0.98, ds in 1e-3f64..0.01) {
                let d = FittedDistribution::beta(a, b).unwrap();
                prop_assert!(weighted_score(&d, s) < weighted_score(&d, s + ds));
            }

            #[test]
            fn quality_permutation_equivariant(
                vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 9..30),
                rot in 0usize..9,
            ) {
                let recs: Vec<ScoreRecord> = vals.iter().enumerate()
                    .map(|(i, (g, t))| rec(&format!("s{i}"), *g, &[("A", *t)])).collect();
                let fits = PoolFits::fit(&recs, &[AttributeId::new("A").unwrap()]).unwrap();
                let q = quality_scores(&recs, &fits.gamma, &fits.tau).unwrap();
                let mut rotated = recs.clone();
                rotated.rotate_left(rot);
                let q2 = quality_scores(&rotated, &fits.gamma, &fits.tau).unwrap();
                for (i, qs) in q2.iter().enumerate() {
                    prop_assert_eq!(qs, &q[(i + rot) % recs.len()]);
                }
            }
        }
    }
}
