//! Pipeline stages behind the command-line front end.
//!
//! Every stage reads only the paths it is given plus the config, writes its
//! outputs with a `<output>.manifest.json` sidecar (input hashes, seeds,
//! config hash) and reports failures wrapped in [`Error::Stage`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{Arm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::evalkit::{diversity_csv, diversity_report, quality_csv, quality_report, DiversityReport, QualityReport};
use crate::policy::{concat_prefixes, load_checkpoint, sample as draw_sequence, save_checkpoint};
use crate::prefdata::{build_pairs, PairProvenance, PreferenceDataset};
use crate::ranking::{quality_scores, PoolFits};
use crate::records::{fmt_real, pairs_jsonl, parse_pairs, parse_score_records, read_text, score_records_jsonl, write_text};
use crate::scoring::{score_pool, ScoreRecord, ScorerRegistry, TrainingEmbeddings};
use crate::seqcore::{fasta_string, parse_fasta, AttributeId, ProteinSequence, SequenceDataset};
use crate::synth::{generate_training_set, SYNTH_VERSION};
use crate::train::{train_preference, train_sft, ObjectiveRegistry, PreferenceOutcome, SftOutcome};

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: name.to_string(), source: Box::new(other) },
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A path relative to the output directory when it lies inside it.
fn display(cfg: &ExperimentConfig, path: &Path) -> String {
    path.strip_prefix(&cfg.output_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// `scores.jsonl` + `fits.json` -> `scores.fits.json`.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Serialize)]
struct Manifest {
    stage: String,
    config_sha256: String,
    synth_version: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    details: Value,
}

fn write_manifest(
    cfg: &ExperimentConfig,
    stage: &str,
    inputs: &[&Path],
    outputs: &[&Path],
    seeds: &[(&str, u64)],
    details: Value,
) -> Result<PathBuf> {
    let hashes = |ps: &[&Path]| -> Result<BTreeMap<String, String>> {
        ps.iter().map(|p| Ok((display(cfg, p), sha256_file(p)?))).collect()
    };
    let m = Manifest {
        stage: stage.to_string(),
        config_sha256: cfg.hash(),
        synth_version: SYNTH_VERSION,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
        seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        details,
    };
    let path = PathBuf::from(format!("{}.manifest.json", outputs[0].display()));
    write_text(&path, &(serde_json::to_string_pretty(&m)? + "\n"))?;
    Ok(path)
}

pub fn training_path(cfg: &ExperimentConfig, attr: &AttributeId) -> PathBuf {
    cfg.output_dir.join("data").join(format!("{attr}.fasta"))
}

fn check_attributes(cfg: &ExperimentConfig, attrs: &[AttributeId]) -> Result<()> {
    if attrs.is_empty() {
        return Err(Error::InvalidArgument("at least one attribute is required".into()));
    }
    for a in attrs {
        cfg.attribute(a)?;
    }
    Ok(())
}

fn load_pool(path: &Path) -> Result<Vec<ProteinSequence>> {
    Ok(parse_fasta(path, AttributeId::new("pool")?)?.into_sequences())
}

/// Training sets are named `<attribute>.fasta`; the stem is the attribute.
fn load_training_file(path: &Path) -> Result<SequenceDataset> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("cannot infer attribute from {}", path.display())))?;
    parse_fasta(path, AttributeId::new(stem)?)
}

/// Writes one training FASTA per attribute.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    stage("gen-data", || {
        let mut out = Vec::new();
        for spec in &cfg.attributes {
            let ds = generate_training_set(spec, spec.train_size)?;
            let path = training_path(cfg, &spec.id);
            write_text(&path, &fasta_string(ds.sequences())?)?;
            write_manifest(
                cfg,
                "gen-data",
                &[],
                &[&path],
                &[("data", spec.seed)],
                json!({ "attribute": spec, "n": ds.len() }),
            )?;
            out.push(path);
        }
        Ok(out)
    })
}

fn loss_csv(outcome: &SftOutcome) -> Result<String> {
    let mut s = String::from("step,loss\n");
    for r in &outcome.curve {
        s.push_str(&format!("{},{}\n", r.step, fmt_real(r.loss)?));
    }
    Ok(s)
}

/// Joint SFT of a fresh trunk with one prefix per attribute.
pub fn sft(cfg: &ExperimentConfig, attrs: &[AttributeId], out: &Path) -> Result<SftOutcome> {
    stage("sft", || {
        check_attributes(cfg, attrs)?;
        let paths: Vec<PathBuf> = attrs.iter().map(|a| training_path(cfg, a)).collect();
        let datasets = attrs
            .iter()
            .zip(&paths)
            .map(|(a, p)| parse_fasta(p, a.clone()))
            .collect::<Result<Vec<_>>>()?;
        let outcome = train_sft(&cfg.sft, &cfg.model, &datasets)?;
        let meta: BTreeMap<String, String> = [
            ("stage".to_string(), "sft".to_string()),
            ("config_sha256".to_string(), cfg.hash()),
            ("attributes".to_string(), attr_list(attrs)),
        ]
        .into();
        save_checkpoint(&outcome.params, &outcome.prefixes, &meta, out)?;
        let curve = sibling(out, "loss.csv");
        write_text(&curve, &loss_csv(&outcome)?)?;
        let inputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
        write_manifest(
            cfg,
            "sft",
            &inputs,
            &[out, &curve],
            &[("init", cfg.sft.seed)],
            json!({ "train": cfg.sft, "model": cfg.model, "attributes": attrs }),
        )?;
        Ok(outcome)
    })
}

fn attr_list(attrs: &[AttributeId]) -> String {
    attrs.iter().map(AttributeId::as_str).collect::<Vec<_>>().join(",")
}

/// Draws `n` sequences conditioned on the concatenated prefixes of `attrs`.
/// Sequence `i` uses ChaCha stream `i` of a seed derived from `seed_label`;
/// ids are `<id_prefix>_<i>`.
pub fn sample(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    attrs: &[AttributeId],
    n: usize,
    seed_label: &str,
    id_prefix: &str,
    out: &Path,
) -> Result<Vec<ProteinSequence>> {
    stage("sample", || {
        if n == 0 {
            return Err(Error::InvalidArgument("number of samples must be positive".into()));
        }
        let ckpt = load_checkpoint(checkpoint)?;
        let cond = concat_prefixes(&ckpt.prefixes, attrs)?;
        let seed = derive_seed(cfg.seeds.sampling, seed_label);
        let mut seqs = Vec::with_capacity(n);
        let mut redraws = 0;
        for i in 0..n {
            let (s, r) = draw_sequence(
                &ckpt.params,
                &cond,
                &format!("{id_prefix}_{i:05}"),
                &cfg.sampling,
                seed,
                i as u64,
            )?;
            redraws += r;
            seqs.push(s);
        }
        write_text(out, &fasta_string(&seqs)?)?;
        write_manifest(
            cfg,
            "sample",
            &[checkpoint],
            &[out],
            &[("sampling", cfg.seeds.sampling), ("stream_seed", seed)],
            json!({
                "conditioning": cond.attributes(),
                "n": n,
                "seed_label": seed_label,
                "short_redraws": redraws,
                "sampling": cfg.sampling,
            }),
        )?;
        Ok(seqs)
    })
}

/// Scores a candidate pool and fits the per-dimension distributions.
/// Writes the records JSONL and a `<stem>.fits.json` next to it.
pub fn score(
    cfg: &ExperimentConfig,
    candidates: &Path,
    attrs: &[AttributeId],
    out: &Path,
) -> Result<(Vec<ScoreRecord>, PoolFits)> {
    stage("score", || {
        check_attributes(cfg, attrs)?;
        let pool = load_pool(candidates)?;
        let reg = ScorerRegistry::default();
        let energy = reg.energy(&cfg.scorers.energy)?;
        let encoder = reg.encoder(&cfg.scorers.encoder)?;
        let paths: Vec<PathBuf> = attrs.iter().map(|a| training_path(cfg, a)).collect();
        let sets = attrs
            .iter()
            .zip(&paths)
            .map(|(a, p)| Ok((a.clone(), parse_fasta(p, a.clone())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let emb = TrainingEmbeddings::new(encoder.as_ref(), &sets)?;
        let records = score_pool(&pool, energy.as_ref(), encoder.as_ref(), &emb)?;
        let fits = PoolFits::fit(&records, attrs)?;
        write_text(out, &score_records_jsonl(&records)?)?;
        let fits_path = sibling(out, "fits.json");
        write_text(&fits_path, &(serde_json::to_string_pretty(&fits.summary())? + "\n"))?;
        let mut inputs: Vec<&Path> = vec![candidates];
        inputs.extend(paths.iter().map(PathBuf::as_path));
        write_manifest(
            cfg,
            "score",
            &inputs,
            &[out, &fits_path],
            &[("energy", energy.seed()), ("encoder", encoder.seed())],
            json!({
                "energy": energy.name(),
                "encoder": encoder.name(),
                "encoder_dim": encoder.dim(),
                "attributes": attrs,
                "pool_size": records.len(),
            }),
        )?;
        Ok((records, fits))
    })
}

/// Builds dominance pairs from a scored pool.
pub fn pairs(
    cfg: &ExperimentConfig,
    scores: &Path,
    attrs: &[AttributeId],
    out: &Path,
) -> Result<PreferenceDataset> {
    stage("pairs", || {
        check_attributes(cfg, attrs)?;
        let records = parse_score_records(&read_text(scores)?)?;
        let fits = PoolFits::fit(&records, attrs)?;
        let quality = quality_scores(&records, &fits.gamma, &fits.tau)?;
        let ds = build_pairs(
            &records,
            &quality,
            attrs,
            cfg.pools.max_pairs,
            cfg.seeds.pairing,
            &display(cfg, scores),
        )?;
        write_text(out, &pairs_jsonl(&ds.pairs)?)?;
        let mean_dr = ds.pairs.iter().map(|p| p.delta_rho).sum::<f64>() / ds.pairs.len() as f64;
        write_manifest(
            cfg,
            "pairs",
            &[scores],
            &[out],
            &[("pairing", cfg.seeds.pairing)],
            json!({ "provenance": ds.provenance, "n_pairs": ds.pairs.len(), "mean_delta_rho": mean_dr }),
        )?;
        Ok(ds)
    })
}

/// Preference optimization from a checkpoint that also serves as the frozen
/// reference. Pair ids are resolved against the candidate FASTA.
#[allow(clippy::too_many_arguments)]
pub fn train_pref(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    pairs_path: &Path,
    candidates: &Path,
    attrs: &[AttributeId],
    mode: &str,
    out: &Path,
) -> Result<PreferenceOutcome> {
    stage("train-pref", || {
        let objective = ObjectiveRegistry::default().get(mode)?;
        let ckpt = load_checkpoint(checkpoint)?;
        let pair_list = parse_pairs(&read_text(pairs_path)?)?;
        let ds = PreferenceDataset {
            provenance: PairProvenance {
                pool: display(cfg, pairs_path),
                seed: cfg.seeds.pairing,
                max_pairs: cfg.pools.max_pairs,
                attributes: attrs.to_vec(),
                total_valid: pair_list.len(),
                dropped_nonpositive: 0,
            },
            pairs: pair_list,
        };
        let sequences: BTreeMap<String, ProteinSequence> = load_pool(candidates)?
            .into_iter()
            .map(|s| (s.id().to_string(), s))
            .collect();
        let outcome = train_preference(
            &cfg.preference,
            objective.as_ref(),
            &ckpt.params,
            &ckpt.prefixes,
            &ds,
            &sequences,
            attrs,
        )?;
        let meta: BTreeMap<String, String> = [
            ("stage".to_string(), format!("train-pref:{mode}")),
            ("config_sha256".to_string(), cfg.hash()),
            ("attributes".to_string(), attr_list(attrs)),
            ("reference_sha256".to_string(), outcome.reference_checksum.clone()),
        ]
        .into();
        save_checkpoint(&outcome.params, &outcome.prefixes, &meta, out)?;
        let curve = sibling(out, "loss.csv");
        let mut csv = String::from("step,loss,mean_margin,mean_delta_rho\n");
        for r in &outcome.curve {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.step,
                fmt_real(r.loss)?,
                fmt_real(r.mean_margin)?,
                fmt_real(r.mean_delta_rho)?
            ));
        }
        write_text(&curve, &csv)?;
        let margins = sibling(out, "margins.json");
        write_text(&margins, &(serde_json::to_string_pretty(&preference_summary(&outcome))? + "\n"))?;
        write_manifest(
            cfg,
            "train-pref",
            &[checkpoint, pairs_path, candidates],
            &[out, &curve, &margins],
            &[("preference", cfg.preference.seed)],
            json!({ "mode": mode, "train": cfg.preference, "attributes": attrs }),
        )?;
        Ok(outcome)
    })
}

fn preference_summary(o: &PreferenceOutcome) -> Value {
    json!({
        "steps": o.curve.len(),
        "loss_first": o.curve.first().map(|r| r.loss),
        "loss_last": o.curve.last().map(|r| r.loss),
        "step0_margin": o.curve.first().map(|r| r.mean_margin),
        "last_step_margin": o.curve.last().map(|r| r.mean_margin),
        "eval_pairs": o.eval_pairs,
        "eval_margin_initial": o.eval_margin_initial,
        "eval_margin_final": o.eval_margin_final,
        "reference_sha256": o.reference_checksum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub quality: QualityReport,
    pub diversity: DiversityReport,
    pub baseline_diversity: Option<DiversityReport>,
}

/// Quality (jointly with the baseline when given) and 3-gram diversity
/// against the union of the training sets.
pub fn evaluate(
    cfg: &ExperimentConfig,
    generated: &Path,
    training: &[PathBuf],
    baseline: Option<&Path>,
    out_dir: &Path,
) -> Result<Evaluation> {
    stage("evaluate", || {
        if training.is_empty() {
            return Err(Error::InvalidArgument("at least one training FASTA is required".into()));
        }
        let pool = load_pool(generated)?;
        let base = baseline.map(load_pool).transpose()?;
        let sets = training
            .iter()
            .map(|p| {
                let ds = load_training_file(p)?;
                Ok((ds.attribute.clone(), ds))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let reg = ScorerRegistry::default();
        let energy = reg.energy(&cfg.scorers.energy)?;
        let encoder = reg.encoder(&cfg.scorers.encoder)?;
        let emb = TrainingEmbeddings::new(encoder.as_ref(), &sets)?;
        let quality = quality_report(&pool, energy.as_ref(), encoder.as_ref(), &emb, base.as_deref())?;
        let all_training: Vec<ProteinSequence> =
            sets.values().flat_map(|d| d.sequences().iter().cloned()).collect();
        let diversity = diversity_report(&pool, &all_training)?;
        let baseline_diversity = base
            .as_deref()
            .map(|b| diversity_report(b, &all_training))
            .transpose()?;
        let q_json = out_dir.join("quality.json");
        let q_csv = out_dir.join("quality.csv");
        let d_json = out_dir.join("diversity.json");
        let d_csv = out_dir.join("diversity.csv");
        write_text(&q_json, &(serde_json::to_string_pretty(&quality)? + "\n"))?;
        write_text(&q_csv, &quality_csv(&quality))?;
        write_text(
            &d_json,
            &(serde_json::to_string_pretty(&json!({
                "generated": diversity,
                "baseline": baseline_diversity,
            }))? + "\n"),
        )?;
        write_text(&d_csv, &diversity_csv(&diversity))?;
        let mut inputs: Vec<&Path> = vec![generated];
        inputs.extend(baseline);
        inputs.extend(training.iter().map(PathBuf::as_path));
        write_manifest(
            cfg,
            "evaluate",
            &inputs,
            &[&q_json, &q_csv, &d_json, &d_csv],
            &[("energy", energy.seed()), ("encoder", encoder.seed())],
            json!({ "attributes": sets.keys().collect::<Vec<_>>() }),
        )?;
        Ok(Evaluation { quality, diversity, baseline_diversity })
    })
}

fn curve_summary(losses: &[f64]) -> Value {
    let tail = &losses[losses.len().saturating_sub(50)..];
    json!({
        "steps": losses.len(),
        "loss_first": losses.first(),
        "loss_last": losses.last(),
        "loss_tail_mean": (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
    })
}

fn run_arm(cfg: &ExperimentConfig, arm: &Arm, sft_ckpt: &Path, produced: &mut Vec<PathBuf>) -> Result<Value> {
    let dir = cfg.output_dir.join("arms").join(&arm.name);
    let attrs = &arm.attributes;
    let training: Vec<PathBuf> = attrs.iter().map(|a| training_path(cfg, a)).collect();

    let candidates = dir.join("candidates.fasta");
    sample(
        cfg,
        sft_ckpt,
        attrs,
        cfg.pools.candidates,
        &format!("{}.candidates", arm.name),
        &format!("{}_cand", arm.name),
        &candidates,
    )?;
    let scores = dir.join("scores.jsonl");
    let (records, _) = score(cfg, &candidates, attrs, &scores)?;
    let pairs_path = dir.join("pairs.jsonl");
    let ds = pairs(cfg, &scores, attrs, &pairs_path)?;
    produced.extend([candidates.clone(), scores.clone(), sibling(&scores, "fits.json"), pairs_path.clone()]);

    // Both evaluation pools share one seed label, so they differ only by policy.
    let eval_label = format!("{}.eval", arm.name);
    let sft_eval = dir.join("eval").join("sft.fasta");
    sample(cfg, sft_ckpt, attrs, cfg.evaluation.samples, &eval_label, &format!("{}_sft", arm.name), &sft_eval)?;
    produced.push(sft_eval.clone());

    let mut modes = vec![cfg.experiment.mode.clone()];
    if cfg.experiment.dpo_arm && cfg.experiment.mode != "dpo" {
        modes.push("dpo".to_string());
    }
    let mut policies = serde_json::Map::new();
    for mode in &modes {
        let ckpt = dir.join(mode).join("policy.ckpt");
        let outcome = train_pref(cfg, sft_ckpt, &pairs_path, &candidates, attrs, mode, &ckpt)?;
        let gen = dir.join("eval").join(format!("{mode}.fasta"));
        sample(cfg, &ckpt, attrs, cfg.evaluation.samples, &eval_label, &format!("{}_{mode}", arm.name), &gen)?;
        let ev = evaluate(cfg, &gen, &training, Some(&sft_eval), &dir.join("eval").join(mode))?;
        produced.extend([
            ckpt.clone(),
            sibling(&ckpt, "loss.csv"),
            sibling(&ckpt, "margins.json"),
            gen,
            dir.join("eval").join(mode).join("quality.json"),
            dir.join("eval").join(mode).join("diversity.json"),
        ]);
        policies.insert(
            mode.clone(),
            json!({
                "train": preference_summary(&outcome),
                "quality": ev.quality,
                "diversity": ev.diversity,
                "sft_diversity": ev.baseline_diversity,
            }),
        );
    }
    Ok(json!({
        "attributes": attrs,
        "candidates": records.len(),
        "pairs": {
            "total_valid": ds.provenance.total_valid,
            "dropped_nonpositive": ds.provenance.dropped_nonpositive,
            "sampled": ds.pairs.len(),
            "mean_delta_rho": ds.pairs.iter().map(|p| p.delta_rho).sum::<f64>() / ds.pairs.len() as f64,
        },
        "policies": policies,
    }))
}

/// Runs every stage and writes `metrics.json` and a top-level `manifest.json`.
/// Returns the metrics document. Partial outputs are left in place on failure.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Value> {
    cfg.validate()?;
    let mut produced = gen_data(cfg)?;
    let sft_ckpt = cfg.output_dir.join("sft").join("policy.ckpt");
    let all = cfg.attribute_ids();
    let sft_out = sft(cfg, &all, &sft_ckpt)?;
    produced.extend([sft_ckpt.clone(), sibling(&sft_ckpt, "loss.csv")]);

    let mut arms = serde_json::Map::new();
    for arm in &cfg.experiment.arms {
        let v = stage(&format!("arm:{}", arm.name), || run_arm(cfg, arm, &sft_ckpt, &mut produced))?;
        arms.insert(arm.name.clone(), v);
    }
    let losses: Vec<f64> = sft_out.curve.iter().map(|r| r.loss).collect();
    let metrics = json!({
        "config_sha256": cfg.hash(),
        "synth_version": SYNTH_VERSION,
        "sft": curve_summary(&losses),
        "arms": arms,
    });
    let metrics_path = cfg.output_dir.join("metrics.json");
    write_text(&metrics_path, &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
    produced.push(metrics_path);

    let artifacts = produced
        .iter()
        .map(|p| Ok((display(cfg, p), Value::String(sha256_file(p)?))))
        .collect::<Result<serde_json::Map<_, _>>>()?;
    let manifest = json!({
        "config_sha256": cfg.hash(),
        "config": cfg,
        "synth_version": SYNTH_VERSION,
        "seeds": {
            "data": cfg.attributes.iter().map(|a| (a.id.to_string(), a.seed)).collect::<BTreeMap<_, _>>(),
            "init": cfg.sft.seed,
            "preference": cfg.preference.seed,
            "sampling": cfg.seeds.sampling,
            "pairing": cfg.seeds.pairing,
            "energy": cfg.scorers.energy.seed,
            "encoder": cfg.scorers.encoder.seed,
        },
        "artifacts": artifacts,
    });
    write_text(
        &cfg.output_dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    Ok(metrics)
}
