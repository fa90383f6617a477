use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{
    concat_prefixes, logprob_tokens, Conditioning, ModelConfig, PolicyParams, PrefixBank, Vocabulary,
};
use crate::prefdata::PreferenceDataset;
use crate::seqcore::{AttributeId, ProteinSequence, SequenceDataset};
use crate::train::{preference_loss, sft_loss_examples, Adam, PairItem, PreferenceObjective, TrainConfig};

const SHUFFLE_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
/// Pairs held fixed for before/after margin measurements.
const EVAL_PAIRS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftStep {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub params: PolicyParams,
    pub prefixes: PrefixBank,
    pub curve: Vec<SftStep>,
}

/// sha256 over the little-endian bytes of the trunk and every prefix.
pub fn parameter_checksum(params: &PolicyParams, bank: &PrefixBank) -> String {
    let mut h = Sha256::new();
    for v in &params.values {
        h.update(v.to_le_bytes());
    }
    for (a, vals) in &bank.prefixes {
        h.update(a.as_str().as_bytes());
        for v in vals {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn diverged(step: usize, what: &str, value: f64) -> Error {
    Error::Divergence { step, detail: format!("{what} is {value}") }
}

/// Trains a fresh trunk jointly with one prefix per dataset. Each example is
/// conditioned on its own attribute's prefix.
pub fn train_sft(
    cfg: &TrainConfig,
    model: &ModelConfig,
    datasets: &[SequenceDataset],
) -> Result<SftOutcome> {
    cfg.validate("sft")?;
    if datasets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = Vocabulary::default();
    let mut params = PolicyParams::init(model.clone(), vocab, cfg.seed)?;
    let mut bank = PrefixBank::new(model);
    for ds in datasets {
        if bank.prefixes.contains_key(&ds.attribute) {
            return Err(Error::InvalidArgument(format!("attribute '{}' given twice", ds.attribute)));
        }
        bank.add(ds.attribute.clone(), cfg.seed);
    }

    let mut examples: Vec<(usize, Vec<usize>)> = Vec::new();
    for (k, ds) in datasets.iter().enumerate() {
        for s in ds.sequences() {
            examples.push((k, params.vocab.encode(s)?));
        }
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();

    let mut opt = Adam::new(cfg.lr, &params, &bank);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let conds: Vec<Conditioning> = datasets
            .iter()
            .map(|ds| concat_prefixes(&bank, std::slice::from_ref(&ds.attribute)))
            .collect::<Result<_>>()?;
        let batch: Vec<(&Conditioning, &[usize])> = picked
            .iter()
            .map(|&i| (&conds[examples[i].0], examples[i].1.as_slice()))
            .collect();
        let (loss, grads) = sft_loss_examples(&params, &batch)?;
        if !loss.is_finite() {
            return Err(diverged(step, "loss", loss));
        }
        let gn = grads.norm();
        if !gn.is_finite() {
            return Err(diverged(step, "gradient norm", gn));
        }
        curve.push(SftStep { step, loss });
        opt.step(&mut params, &mut bank, &grads);
    }
    Ok(SftOutcome { params, prefixes: bank, curve })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceStep {
    pub step: usize,
    pub loss: f64,
    pub mean_margin: f64,
    pub mean_delta_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceOutcome {
    pub params: PolicyParams,
    pub prefixes: PrefixBank,
    /// Statistics of each step's batch, measured before that step's update.
    pub curve: Vec<PreferenceStep>,
    /// Mean margin over a fixed subset of pairs before and after training.
    pub eval_margin_initial: f64,
    pub eval_margin_final: f64,
    pub eval_pairs: usize,
    pub reference_checksum: String,
}

struct Prepared {
    winner: Vec<usize>,
    loser: Vec<usize>,
    ref_winner: f64,
    ref_loser: f64,
    delta_rho: f64,
}

fn mean_margin(
    params: &PolicyParams,
    cond: &Conditioning,
    pairs: &[&Prepared],
    beta: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let w = logprob_tokens(params, cond, &p.winner, true)?;
        let l = logprob_tokens(params, cond, &p.loser, true)?;
        total += beta * ((w - p.ref_winner) - (l - p.ref_loser));
    }
    Ok(total / pairs.len() as f64)
}

/// Optimizes `objective` starting from (and referenced against) the given
/// policy. All trunk and prefix parameters are trainable; the reference is a
/// frozen copy whose checksum is verified after training.
pub fn train_preference(
    cfg: &TrainConfig,
    objective: &dyn PreferenceObjective,
    params: &PolicyParams,
    bank: &PrefixBank,
    pairs: &PreferenceDataset,
    sequences: &BTreeMap<String, ProteinSequence>,
    attributes: &[AttributeId],
) -> Result<PreferenceOutcome> {
    cfg.validate("preference")?;
    if pairs.pairs.is_empty() {
        return Err(Error::NoValidPairs);
    }
    let reference = (params.clone(), bank.clone());
    let ref_sum = parameter_checksum(&reference.0, &reference.1);
    let ref_cond = concat_prefixes(&reference.1, attributes)?;

    let mut ref_cache: BTreeMap<&str, (Vec<usize>, f64)> = BTreeMap::new();
    let mut lookup = |id: &str| -> Result<(Vec<usize>, f64)> {
        if let Some(hit) = ref_cache.get(id) {
            return Ok(hit.clone());
        }
        let (key, seq) = sequences
            .get_key_value(id)
            .ok_or_else(|| Error::InvalidArgument(format!("pair references unknown sequence '{id}'")))?;
        let tokens = reference.0.vocab.encode(seq)?;
        let lp = logprob_tokens(&reference.0, &ref_cond, &tokens, true)?;
        ref_cache.insert(key.as_str(), (tokens.clone(), lp));
        Ok((tokens, lp))
    };
    let mut prepared = Vec::with_capacity(pairs.pairs.len());
    for p in &pairs.pairs {
        if objective.needs_delta_rho() && !(p.delta_rho > 0.0 && p.delta_rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pair ({}, {}) has non-positive quality gap {}",
                p.winner_id, p.loser_id, p.delta_rho
            )));
        }
        let (winner, ref_winner) = lookup(&p.winner_id)?;
        let (loser, ref_loser) = lookup(&p.loser_id)?;
        prepared.push(Prepared { winner, loser, ref_winner, ref_loser, delta_rho: p.delta_rho });
    }

    let mut theta = reference.0.clone();
    let mut theta_bank = reference.1.clone();
    let n = prepared.len();

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(EVAL_STREAM);
    let mut eval_idx = index::sample(&mut eval_rng, n, EVAL_PAIRS.min(n)).into_vec();
    eval_idx.sort_unstable();
    let eval_set: Vec<&Prepared> = eval_idx.iter().map(|&i| &prepared[i]).collect();
    let eval_margin_initial = mean_margin(&theta, &concat_prefixes(&theta_bank, attributes)?, &eval_set, cfg.beta)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut opt = Adam::new(cfg.lr, &theta, &theta_bank);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<PairItem<'_>> = picked
            .iter()
            .map(|&i| {
                let p = &prepared[i];
                PairItem {
                    winner: &p.winner,
                    loser: &p.loser,
                    ref_winner: p.ref_winner,
                    ref_loser: p.ref_loser,
                    delta_rho: Some(p.delta_rho),
                }
            })
            .collect();
        let cond = concat_prefixes(&theta_bank, attributes)?;
        let (grads, report) = preference_loss(objective, &theta, &cond, &batch, cfg.beta, cfg.alpha)?;
        if !report.loss.is_finite() {
            return Err(diverged(step, "loss", report.loss));
        }
        let gn = grads.norm();
        if !gn.is_finite() {
            return Err(diverged(step, "gradient norm", gn));
        }
        curve.push(PreferenceStep {
            step,
            loss: report.loss,
            mean_margin: report.mean_margin,
            mean_delta_rho: report.mean_delta_rho,
        });
        opt.step(&mut theta, &mut theta_bank, &grads);
    }
    let eval_margin_final = mean_margin(&theta, &concat_prefixes(&theta_bank, attributes)?, &eval_set, cfg.beta)?;
    if !eval_margin_final.is_finite() {
        return Err(diverged(cfg.steps, "final margin", eval_margin_final));
    }
    if parameter_checksum(&reference.0, &reference.1) != ref_sum {
        return Err(Error::ReferenceMutated);
    }
    Ok(PreferenceOutcome {
        params: theta,
        prefixes: theta_bank,
        curve,
        eval_margin_initial,
        eval_margin_final,
        eval_pairs: eval_set.len(),
        reference_checksum: ref_sum,
    })
}
