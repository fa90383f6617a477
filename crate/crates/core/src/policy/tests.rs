use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::seqcore::AttributeId;

fn attr(name: &str) -> AttributeId {
    AttributeId::new(name).unwrap()
}

fn setup(vocab: Vocabulary, seed: u64) -> (PolicyParams, PrefixBank) {
    let cfg = ModelConfig::default();
    let params = PolicyParams::init(cfg.clone(), vocab, seed).unwrap();
    let mut bank = PrefixBank::new(&cfg);
    bank.add(attr("A"), seed);
    bank.add(attr("B"), seed);
    (params, bank)
}

/// Scales every weight up so the tests see a policy far from uniform.
fn roughen(params: &mut PolicyParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
}

fn zero_output(params: &mut PolicyParams) {
    params.tensor_mut("w_out").unwrap().fill(0.0);
    params.tensor_mut("b_out").unwrap().fill(0.0);
}

#[test]
fn zero_output_layer_gives_uniform_logprob() {
    let (mut p, bank) = setup(Vocabulary::default(), 1);
    zero_output(&mut p);
    let cond = concat_prefixes(&bank, &[attr("A")]).unwrap();
    let s = ProteinSequence::new("s", "MKV").unwrap();
    let lp = logprob(&p, &cond, &s).unwrap();
    assert!((lp + 4.0 * 21f64.ln()).abs() < 1e-12, "{lp}");
}

#[test]
fn logprob_is_repeatable_and_negative() {
    let (mut p, bank) = setup(Vocabulary::default(), 2);
    roughen(&mut p, 2);
    let cond = concat_prefixes(&bank, &[attr("A"), attr("B")]).unwrap();
    let s = ProteinSequence::new("s", "MKVLLAGHW").unwrap();
    let a = logprob(&p, &cond, &s).unwrap();
    let b = logprob(&p, &cond, &s).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(a < 0.0);
}

#[test]
fn exhaustive_normalization_small_vocabulary() {
    for seed in [3, 4, 5] {
        let (mut p, bank) = setup(Vocabulary::with_alphabet("ACD").unwrap(), seed);
        roughen(&mut p, seed);
        let cond = concat_prefixes(&bank, &[attr("A")]).unwrap();
        // Outcomes of sampling with max_len = 2: EOS at step 0 or 1, or two
        // residues and the cap.
        let mut total = logprob_tokens(&p, &cond, &[], true).unwrap().exp();
        for a in 0..3 {
            total += logprob_tokens(&p, &cond, &[a], true).unwrap().exp();
            for b in 0..3 {
                total += logprob_tokens(&p, &cond, &[a, b], false).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "seed {seed}: {total}");

        // Terminated sequences of length <= 2 plus the mass that continues past 2.
        let mut split = logprob_tokens(&p, &cond, &[], true).unwrap().exp();
        for a in 0..3 {
            split += logprob_tokens(&p, &cond, &[a], true).unwrap().exp();
            for b in 0..3 {
                split += logprob_tokens(&p, &cond, &[a, b], true).unwrap().exp();
                for c in 0..3 {
                    split += logprob_tokens(&p, &cond, &[a, b, c], false).unwrap().exp();
                }
            }
        }
        assert!((split - 1.0).abs() < 1e-10, "seed {seed}: {split}");
    }
}

#[test]
fn every_step_is_normalized() {
    let (mut p, bank) = setup(Vocabulary::default(), 6);
    roughen(&mut p, 6);
    let cond = concat_prefixes(&bank, &[attr("B")]).unwrap();
    let ids = p.vocab.encode(&ProteinSequence::new("s", "KLRKLRAAGG").unwrap()).unwrap();
    let (inputs, targets) = teacher_forcing(&p, &ids, true);
    let cache = forward(&p, &cond, &inputs, &targets).unwrap();
    for i in 0..cache.n_targets() {
        let s: f64 = cache.step_logprobs(i, 21).iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn decoder_matches_teacher_forcing_bitwise() {
    let (mut p, bank) = setup(Vocabulary::default(), 7);
    roughen(&mut p, 7);
    let cond = concat_prefixes(&bank, &[attr("A"), attr("B")]).unwrap();
    let ids = p.vocab.encode(&ProteinSequence::new("s", "MDEDKLRWY").unwrap()).unwrap();
    let (inputs, targets) = teacher_forcing(&p, &ids, true);
    let cache = forward(&p, &cond, &inputs, &targets).unwrap();
    let mut dec = Decoder::new(&p, &cond);
    for (i, &tok) in inputs.iter().enumerate() {
        let step = dec.step(tok).unwrap();
        let full = cache.step_logprobs(i, 21);
        assert!(step.iter().zip(full).all(|(a, b)| a.to_bits() == b.to_bits()), "position {i}");
    }
}

#[test]
fn context_overflow_is_an_error() {
    let (p, bank) = setup(Vocabulary::default(), 8);
    let cond = concat_prefixes(&bank, &[attr("A")]).unwrap();
    let long = ProteinSequence::new("s", &"A".repeat(504)).unwrap();
    assert!(matches!(logprob(&p, &cond, &long), Err(Error::ContextOverflow { .. })));
    let fits = ProteinSequence::new("s", &"A".repeat(503)).unwrap();
    assert!(logprob(&p, &cond, &fits).is_ok());
}

#[test]
fn sampling_is_seeded_and_capped() {
    let (mut p, bank) = setup(Vocabulary::default(), 9);
    roughen(&mut p, 9);
    let cond = concat_prefixes(&bank, &[attr("A")]).unwrap();
    let cfg = SamplingConfig { max_len: 5, min_len: 1, temperature: 1.0 };
    let (a, _) = sample(&p, &cond, "x", &cfg, 11, 3).unwrap();
    let (b, _) = sample(&p, &cond, "x", &cfg, 11, 3).unwrap();
    assert_eq!(a, b);
    for stream in 0..200 {
        let (s, _) = sample(&p, &cond, "x", &cfg, 11, stream).unwrap();
        assert!(s.len() <= 5 && s.len() >= 1);
    }
    let bad = SamplingConfig { temperature: 0.0, ..cfg };
    assert!(sample(&p, &cond, "x", &bad, 1, 0).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_tokens(&p, &cond, 0, 1.0, &mut rng).is_err());
}

#[test]
fn uniform_policy_samples_uniform_tokens() {
    let (mut p, bank) = setup(Vocabulary::default(), 10);
    zero_output(&mut p);
    let cond = concat_prefixes(&bank, &[attr("A")]).unwrap();
    let n = 10_000;
    let classes = 21;
    let mut counts = vec![vec![0usize; classes]; 2];
    let mut reached = [0usize; 2];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..n {
        let (toks, terminated) = sample_tokens(&p, &cond, 400, 1.0, &mut rng).unwrap();
        for pos in 0..2 {
            let tok = if pos < toks.len() {
                toks[pos]
            } else if pos == toks.len() && terminated {
                p.vocab.eos()
            } else {
                continue;
            };
            counts[pos][tok] += 1;
            reached[pos] += 1;
        }
    }
    let q = 1.0 / classes as f64;
    for pos in 0..2 {
        let m = reached[pos] as f64;
        let sd = (m * q * (1.0 - q)).sqrt();
        for (tok, &c) in counts[pos].iter().enumerate() {
            assert!(
                (c as f64 - m * q).abs() <= 3.0 * sd,
                "position {pos} token {tok}: {c} of {m}"
            );
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (mut p, bank) = setup(Vocabulary::default(), 13);
    roughen(&mut p, 13);
    let meta: BTreeMap<String, String> = [("stage".to_string(), "test".to_string())].into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/model.ckpt");
    save_checkpoint(&p, &bank, &meta, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params.values.len(), p.values.len());
    assert!(back.params.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    for (a, v) in &bank.prefixes {
        let w = back.prefixes.get(a).unwrap();
        assert!(v.iter().zip(w).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.metadata, meta);
    let cond = concat_prefixes(&bank, &[attr("A")]).unwrap();
    let cond2 = concat_prefixes(&back.prefixes, &[attr("A")]).unwrap();
    let s = ProteinSequence::new("s", "MKVW").unwrap();
    assert_eq!(
        logprob(&p, &cond, &s).unwrap().to_bits(),
        logprob(&back.params, &cond2, &s).unwrap().to_bits()
    );
}

#[test]
fn checkpoint_corruption_is_detected() {
    let (p, bank) = setup(Vocabulary::default(), 14);
    let bytes = checkpoint_bytes(&p, &bank, &BTreeMap::new()).unwrap();
    assert!(parse_checkpoint(&bytes).is_ok());
    let truncated = &bytes[..bytes.len() - 8];
    assert!(matches!(parse_checkpoint(truncated), Err(Error::Checkpoint(_))));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    assert!(matches!(parse_checkpoint(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(parse_checkpoint(&version), Err(Error::Checkpoint(m)) if m.contains("version")));
    assert!(parse_checkpoint(b"nonsense").is_err());
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs() / 1e-7
    } else {
        (a - b).abs() / scale
    }
}

#[test]
fn backward_matches_finite_differences() {
    let (mut p, mut bank) = setup(Vocabulary::default(), 15);
    roughen(&mut p, 15);
    let attrs = [attr("A"), attr("B")];
    let ids = p.vocab.encode(&ProteinSequence::new("s", "KLRDEDMW").unwrap()).unwrap();
    let eval = |p: &PolicyParams, bank: &PrefixBank| {
        let cond = concat_prefixes(bank, &attrs).unwrap();
        logprob_tokens(p, &cond, &ids, true).unwrap()
    };
    let cond = concat_prefixes(&bank, &attrs).unwrap();
    let (inputs, targets) = teacher_forcing(&p, &ids, true);
    let cache = forward(&p, &cond, &inputs, &targets).unwrap();
    let mut g = Gradients::zeros(&p);
    g.accumulate(&p, &cond, &cache, 1.0);

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    // Probe only tensors the sequence touches; unused rows have zero gradient.
    let mut live: Vec<usize> = (0..p.values.len()).filter(|&i| g.trunk[i] != 0.0).collect();
    live.sort_unstable();
    for _ in 0..40 {
        let i = live[rng.random_range(0..live.len())];
        let orig = p.values[i];
        p.values[i] = orig + h;
        let up = eval(&p, &bank);
        p.values[i] = orig - h;
        let down = eval(&p, &bank);
        p.values[i] = orig;
        let fd = (up - down) / (2.0 * h);
        assert!(relative_error(g.trunk[i], fd) < 1e-6, "trunk {i}: {} vs {fd}", g.trunk[i]);
    }
    for a in &attrs {
        for _ in 0..10 {
            let i = rng.random_range(0..bank.prefix_size());
            let orig = bank.prefixes[a][i];
            bank.prefixes.get_mut(a).unwrap()[i] = orig + h;
            let up = eval(&p, &bank);
            bank.prefixes.get_mut(a).unwrap()[i] = orig - h;
            let down = eval(&p, &bank);
            bank.prefixes.get_mut(a).unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.prefixes[a][i];
            assert!(relative_error(an, fd) < 1e-6, "prefix {a} {i}: {an} vs {fd}");
        }
    }
}
