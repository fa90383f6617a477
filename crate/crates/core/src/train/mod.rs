//! Losses, gradients and optimization loops for supervised finetuning and
//! pairwise preference optimization.

mod adam;
mod loops;
mod objective;

pub use adam::Adam;
pub use loops::{
    parameter_checksum, train_preference, train_sft, PreferenceOutcome, PreferenceStep, SftOutcome,
    SftStep,
};
pub use objective::{Dpo, Mlpo, ObjectiveRegistry, PreferenceObjective};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{forward, logprob_tokens, teacher_forcing, Conditioning, Gradients, PolicyParams};
use crate::seqcore::ProteinSequence;

fn default_beta() -> f64 {
    0.1
}

fn default_alpha() -> f64 {
    0.05
}

/// Optimization settings for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn sft_default(seed: u64) -> Self {
        TrainConfig { beta: 0.1, alpha: 0.05, lr: 1e-4, batch_size: 16, steps: 200, seed }
    }

    pub fn preference_default(seed: u64) -> Self {
        TrainConfig { beta: 0.1, alpha: 0.05, lr: 5e-5, batch_size: 16, steps: 300, seed }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(format!("{field}.{f}"), r));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        Ok(())
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, evaluated on the side that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean per-token negative log-likelihood of each example, averaged over the
/// batch, with its gradient. Each example carries its own conditioning.
pub fn sft_loss_examples(
    params: &PolicyParams,
    batch: &[(&Conditioning, &[usize])],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let b = batch.len() as f64;
    let mut grads = Gradients::zeros(params);
    let mut total = 0.0;
    for (cond, tokens) in batch {
        let (inputs, targets) = teacher_forcing(params, tokens, true);
        let cache = forward(params, cond, &inputs, &targets)?;
        let n = cache.n_targets() as f64;
        total += -cache.logprob() / n;
        grads.accumulate(params, cond, &cache, -1.0 / (n * b));
    }
    Ok((total / b, grads))
}

/// [`sft_loss_examples`] with one shared conditioning.
pub fn sft_loss(
    params: &PolicyParams,
    cond: &Conditioning,
    batch: &[ProteinSequence],
) -> Result<(f64, Gradients)> {
    let tokens = batch
        .iter()
        .map(|s| params.vocab.encode(s))
        .collect::<Result<Vec<_>>>()?;
    let examples: Vec<(&Conditioning, &[usize])> =
        tokens.iter().map(|t| (cond, t.as_slice())).collect();
    sft_loss_examples(params, &examples)
}

/// One preference pair as token ids plus frozen-reference log-likelihoods.
#[derive(Debug, Clone, Copy)]
pub struct PairItem<'a> {
    pub winner: &'a [usize],
    pub loser: &'a [usize],
    pub ref_winner: f64,
    pub ref_loser: f64,
    pub delta_rho: Option<f64>,
}

/// Per-batch statistics of a preference loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// `beta * delta` for every pair, in batch order.
    pub margins: Vec<f64>,
    pub mean_margin: f64,
    /// Mean quality gap; zero when pairs carry none.
    pub mean_delta_rho: f64,
}

/// Mean of `softplus(-z)` over the batch, where `z` comes from `objective`,
/// with the gradient for the policy parameters. Reference terms are constants.
pub fn preference_loss(
    objective: &dyn PreferenceObjective,
    params: &PolicyParams,
    cond: &Conditioning,
    batch: &[PairItem<'_>],
    beta: f64,
    alpha: f64,
) -> Result<(Gradients, LossReport)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty preference batch".into()));
    }
    let b = batch.len() as f64;
    let mut grads = Gradients::zeros(params);
    let mut total = 0.0;
    let mut margins = Vec::with_capacity(batch.len());
    let mut drho = 0.0;
    for item in batch {
        let (wi, wt) = teacher_forcing(params, item.winner, true);
        let (li, lt) = teacher_forcing(params, item.loser, true);
        let wc = forward(params, cond, &wi, &wt)?;
        let lc = forward(params, cond, &li, &lt)?;
        let delta = (wc.logprob() - item.ref_winner) - (lc.logprob() - item.ref_loser);
        let z = objective.logit(beta, alpha, delta, item.delta_rho)?;
        total += softplus(-z);
        margins.push(beta * delta);
        drho += item.delta_rho.unwrap_or(0.0);
        // d softplus(-z) / dz = -sigmoid(-z); dz / d delta = beta.
        let g = sigmoid(-z) * beta / b;
        grads.accumulate(params, cond, &wc, -g);
        grads.accumulate(params, cond, &lc, g);
    }
    let mean_margin = margins.iter().sum::<f64>() / b;
    Ok((
        grads,
        LossReport { loss: total / b, margins, mean_margin, mean_delta_rho: drho / b },
    ))
}

/// A policy together with the conditioning it is evaluated under.
#[derive(Clone, Copy)]
pub struct PolicyView<'a> {
    pub params: &'a PolicyParams,
    pub cond: &'a Conditioning,
}

/// Winner, loser and optional quality gap.
pub type SequencePair<'a> = (&'a ProteinSequence, &'a ProteinSequence, Option<f64>);

fn items_for<'a>(
    reference: PolicyView<'_>,
    tokens: &'a [(Vec<usize>, Vec<usize>, Option<f64>)],
) -> Result<Vec<PairItem<'a>>> {
    tokens
        .iter()
        .map(|(w, l, dr)| {
            Ok(PairItem {
                winner: w,
                loser: l,
                ref_winner: logprob_tokens(reference.params, reference.cond, w, true)?,
                ref_loser: logprob_tokens(reference.params, reference.cond, l, true)?,
                delta_rho: *dr,
            })
        })
        .collect()
}

fn evaluate_pairs(
    objective: &dyn PreferenceObjective,
    theta: PolicyView<'_>,
    reference: PolicyView<'_>,
    pairs: &[SequencePair<'_>],
    beta: f64,
    alpha: f64,
) -> Result<(Gradients, LossReport)> {
    let tokens = pairs
        .iter()
        .map(|(w, l, dr)| Ok((theta.params.vocab.encode(w)?, theta.params.vocab.encode(l)?, *dr)))
        .collect::<Result<Vec<_>>>()?;
    let items = items_for(reference, &tokens)?;
    preference_loss(objective, theta.params, theta.cond, &items, beta, alpha)
}

/// DPO loss of `theta` against `reference` on a batch of pairs.
pub fn dpo_loss(
    theta: PolicyView<'_>,
    reference: PolicyView<'_>,
    pairs: &[SequencePair<'_>],
    beta: f64,
) -> Result<(Gradients, LossReport)> {
    evaluate_pairs(&Dpo, theta, reference, pairs, beta, 0.0)
}

/// MLPO loss; every pair must carry its quality gap.
pub fn mlpo_loss(
    theta: PolicyView<'_>,
    reference: PolicyView<'_>,
    pairs: &[SequencePair<'_>],
    beta: f64,
    alpha: f64,
) -> Result<(Gradients, LossReport)> {
    evaluate_pairs(&Mlpo, theta, reference, pairs, beta, alpha)
}
