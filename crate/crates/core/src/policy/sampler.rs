use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::model::{attend_head, gelu, layer_norm_row, linear_row, log_softmax_row, HeadSource};
use crate::policy::params::{Conditioning, PolicyParams};
use crate::seqcore::ProteinSequence;

/// Incremental decoder that caches per-layer keys and values. Its per-token
/// arithmetic is the same as the teacher-forced pass, so the probabilities it
/// samples from are bit-equal to the ones `logprob` scores.
pub struct Decoder<'a> {
    params: &'a PolicyParams,
    cond: &'a Conditioning,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a PolicyParams, cond: &'a Conditioning) -> Self {
        let n_layers = params.config.n_layers;
        Decoder {
            params,
            cond,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one input token and returns next-token log-probabilities.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let p = self.params;
        let cfg = &p.config;
        let (d, nh, dh, ff) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
        let m = self.cond.len();
        if m + self.pos + 1 > cfg.context {
            return Err(Error::ContextOverflow {
                needed: m + self.pos + 1,
                context: cfg.context,
            });
        }
        let lay = &p.layout;
        let w = &p.values;
        let s = |off: usize, len: usize| &w[off..off + len];

        let mut x: Vec<f64> = s(lay.tok_emb + token * d, d)
            .iter()
            .zip(s(lay.pos_emb + self.pos * d, d))
            .map(|(a, b)| a + b)
            .collect();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut xhat = vec![0.0; d];
        let mut a = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        let mut o = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut u = vec![0.0; ff];
        let mut probs = vec![0.0; m + self.pos + 1];
        for (l, off) in lay.layers.iter().enumerate() {
            layer_norm_row(&x, s(off.ln1_g, d), s(off.ln1_b, d), &mut xhat, &mut a);
            linear_row(&a, s(off.w_qkv, 3 * d * d), s(off.b_qkv, 3 * d), &mut qkv);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..3 * d]);
            let count = self.pos + 1;
            for h in 0..nh {
                let prefix = HeadSource {
                    keys: self.cond.block(l, 0),
                    values: self.cond.block(l, 1),
                    stride: d,
                    key_offset: h * dh,
                    value_offset: h * dh,
                    count: m,
                };
                let toks = HeadSource {
                    keys: &self.keys[l],
                    values: &self.values[l],
                    stride: d,
                    key_offset: h * dh,
                    value_offset: h * dh,
                    count,
                };
                attend_head(
                    &qkv[h * dh..(h + 1) * dh],
                    scale,
                    prefix,
                    toks,
                    &mut probs[..m + count],
                    &mut o[h * dh..(h + 1) * dh],
                );
            }
            linear_row(&o, s(off.w_o, d * d), s(off.b_o, d), &mut tmp);
            for (xv, av) in x.iter_mut().zip(&tmp) {
                *xv += av;
            }
            layer_norm_row(&x, s(off.ln2_g, d), s(off.ln2_b, d), &mut xhat, &mut a);
            linear_row(&a, s(off.w_1, d * ff), s(off.b_1, ff), &mut u);
            for v in u.iter_mut() {
                *v = gelu(*v);
            }
            linear_row(&u, s(off.w_2, ff * d), s(off.b_2, d), &mut tmp);
            for (xv, fv) in x.iter_mut().zip(&tmp) {
                *xv += fv;
            }
        }
        let nout = p.vocab.n_outputs();
        layer_norm_row(&x, s(lay.lnf_g, d), s(lay.lnf_b, d), &mut xhat, &mut a);
        let mut logits = vec![0.0; nout];
        linear_row(&a, s(lay.w_out, d * nout), s(lay.b_out, nout), &mut logits);
        let mut logp = vec![0.0; nout];
        log_softmax_row(&logits, &mut logp);
        self.pos += 1;
        Ok(logp)
    }
}

fn draw(logp: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let weights: Vec<f64> = if temperature == 1.0 {
        logp.iter().map(|l| l.exp()).collect()
    } else {
        let scaled: Vec<f64> = logp.iter().map(|l| l / temperature).collect();
        let mut out = vec![0.0; scaled.len()];
        log_softmax_row(&scaled, &mut out);
        out.iter().map(|l| l.exp()).collect()
    };
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Ancestral sampling until EOS or `max_len` residues. Returns residue indices
/// and whether EOS was emitted.
pub fn sample_tokens(
    params: &PolicyParams,
    cond: &Conditioning,
    max_len: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, bool)> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let eos = params.vocab.eos();
    let mut dec = Decoder::new(params, cond);
    let mut out = Vec::new();
    let mut token = params.vocab.bos();
    loop {
        let logp = dec.step(token)?;
        let next = draw(&logp, temperature, rng);
        if next == eos {
            return Ok((out, true));
        }
        out.push(next);
        if out.len() >= max_len {
            return Ok((out, false));
        }
        token = next;
    }
}

/// Length bounds and temperature for drawing sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub max_len: usize,
    pub min_len: usize,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            max_len: crate::seqcore::DEFAULT_MAX_LEN,
            min_len: 3,
            temperature: 1.0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::config(format!("{field}.max_len"), "must be at least 1"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!("{field}.min_len"), "must be in 1..=max_len"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("{field}.temperature"), "must be positive"));
        }
        Ok(())
    }
}

/// Draws one sequence of at least `min_len` residues on ChaCha stream
/// `stream` of `seed`, redrawing when the policy stops earlier. Returns the
/// sequence and how many draws were rejected.
pub fn sample(
    params: &PolicyParams,
    cond: &Conditioning,
    id: &str,
    cfg: &SamplingConfig,
    seed: u64,
    stream: u64,
) -> Result<(ProteinSequence, usize)> {
    const MAX_REDRAWS: usize = 10_000;
    cfg.validate("sampling")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    for redraws in 0..MAX_REDRAWS {
        let (tokens, _) = sample_tokens(params, cond, cfg.max_len, cfg.temperature, &mut rng)?;
        if tokens.len() >= cfg.min_len {
            let seq = ProteinSequence::new(id, &params.vocab.decode(&tokens))?;
            return Ok((seq, redraws));
        }
    }
    Err(Error::InvalidArgument(format!(
        "policy did not produce a sequence of length >= {} in {MAX_REDRAWS} draws",
        cfg.min_len
    )))
}
