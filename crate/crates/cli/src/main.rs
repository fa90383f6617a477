use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use listpref::config::ExperimentConfig;
use listpref::pipeline;
use listpref::seqcore::AttributeId;
use listpref::Result;

/// Preference-optimization pipeline on the synthetic protein testbed.
///
/// Exit codes: 0 success, 1 usage or config error, 2 data error,
/// 3 numerical divergence. `LISTPREF_OUTPUT_DIR` overrides `output_dir`.
#[derive(Parser)]
#[command(name = "listpref", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one training FASTA per configured attribute.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Supervised finetuning on the attributes' training sets (one prefix each).
    Sft {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated attribute ids; defaults to all.
        #[arg(long, value_delimiter = ',')]
        attribute: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw sequences conditioned on one or more attribute prefixes.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        attribute: Vec<String>,
        #[arg(long)]
        n: usize,
        /// Label mixed into the sampling seed.
        #[arg(long, default_value = "sample")]
        seed_label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a candidate pool and fit the per-dimension distributions.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        attribute: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build dominance pairs from a scored pool.
    Pairs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        attribute: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference optimization against the frozen starting checkpoint.
    TrainPref {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// FASTA holding the sequences the pair ids refer to.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        attribute: Vec<String>,
        #[arg(long, default_value = "mlpo")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quality and diversity reports for a generated pool.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Training FASTA files named `<attribute>.fasta`.
        #[arg(long, required = true)]
        training: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run every stage and write metrics.json and manifest.json.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
    },
}

fn attributes(cfg: &ExperimentConfig, names: &[String]) -> Result<Vec<AttributeId>> {
    if names.is_empty() {
        return Ok(cfg.attribute_ids());
    }
    names
        .iter()
        .map(|n| {
            let id = AttributeId::new(n)?;
            cfg.attribute(&id)?;
            Ok(id)
        })
        .collect()
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = load(&config)?;
            for p in pipeline::gen_data(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Sft { config, attribute, out } => {
            let cfg = load(&config)?;
            let attrs = attributes(&cfg, &attribute)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("sft").join("policy.ckpt"));
            let o = pipeline::sft(&cfg, &attrs, &out)?;
            if let Some(last) = o.curve.last() {
                println!("sft: {} steps, final loss {:.6}", o.curve.len(), last.loss);
            }
            println!("{}", out.display());
        }
        Command::Sample { config, checkpoint, attribute, n, seed_label, out } => {
            let cfg = load(&config)?;
            let attrs = attributes(&cfg, &attribute)?;
            let seqs = pipeline::sample(&cfg, &checkpoint, &attrs, n, &seed_label, "seq", &out)?;
            println!("{} sequences -> {}", seqs.len(), out.display());
        }
        Command::Score { config, candidates, attribute, out } => {
            let cfg = load(&config)?;
            let attrs = attributes(&cfg, &attribute)?;
            let (records, _) = pipeline::score(&cfg, &candidates, &attrs, &out)?;
            println!("{} records -> {}", records.len(), out.display());
        }
        Command::Pairs { config, scores, attribute, out } => {
            let cfg = load(&config)?;
            let attrs = attributes(&cfg, &attribute)?;
            let ds = pipeline::pairs(&cfg, &scores, &attrs, &out)?;
            println!(
                "{} of {} valid pairs -> {}",
                ds.pairs.len(),
                ds.provenance.total_valid,
                out.display()
            );
        }
        Command::TrainPref { config, checkpoint, pairs, candidates, attribute, mode, out } => {
            let cfg = load(&config)?;
            let attrs = attributes(&cfg, &attribute)?;
            let o = pipeline::train_pref(&cfg, &checkpoint, &pairs, &candidates, &attrs, &mode, &out)?;
            println!(
                "{mode}: eval margin {:.6} -> {:.6}",
                o.eval_margin_initial, o.eval_margin_final
            );
            println!("{}", out.display());
        }
        Command::Evaluate { config, generated, training, baseline, out_dir } => {
            let cfg = load(&config)?;
            let ev = pipeline::evaluate(&cfg, &generated, &training, baseline.as_deref(), &out_dir)?;
            println!("rho mean {:.6}", ev.quality.pool.rho_mean);
            println!("inter-output 3-gram similarity {:.6}", ev.diversity.inter_output);
        }
        Command::RunExperiment { config } => {
            let cfg = load(&config)?;
            pipeline::run_experiment(&cfg)?;
            println!("{}", cfg.output_dir.join("metrics.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors; 2 is reserved for data errors here.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
