//! `qgca`: synthesise data, featurize, train, ground and evaluate.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qgca_core::audio::{read_wav, LogMelExtractor, LogMelFeature};
use qgca_core::gradcheck;
use qgca_core::harness::checkpoint::Checkpoint;
use qgca_core::harness::config::{RunConfig, SEED_ENV};
use qgca_core::harness::dataset::{read_jsonl, write_jsonl, DatasetRecord};
use qgca_core::harness::ground::{evaluate_predictions, Grounder, Prediction};
use qgca_core::harness::synth::write_synth;
use qgca_core::harness::train::fit;
use qgca_core::metrics::{MatchConfig, PsdsConfig};
use qgca_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "qgca", version, about = "Text-to-audio grounding with a query graph and cross-gating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write log-mel features of every record in a dataset file.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate the synthetic tone-burst benchmark.
    SynthData {
        #[arg(long, default_value_t = 250)]
        pairs: usize,
        /// Defaults to $QGCA_SEED, then 7.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log as JSONL.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        no_graph: bool,
        #[arg(long)]
        no_gating: bool,
        #[arg(long)]
        no_pe: bool,
    },
    /// Ground a query in one clip, or every record of a dataset file.
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: GroundInput,
        /// Predictions file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to the threshold stored in the checkpoint.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Score predictions against reference segments.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        beta: f64,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on random inputs.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export query-graph and cross-modal attention matrices as CSV.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = true)]
struct GroundInput {
    #[arg(long, conflicts_with_all = ["audio", "query"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "query")]
    audio: Option<PathBuf>,
    #[arg(long, requires = "audio")]
    query: Option<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Profile {
    /// Narrow model and batches of 16.
    Desk,
    /// Full-width model and batches of 64.
    Full,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run configuration; unset fields take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Profile, then config file, then `QGCA_SEED`, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => match self.profile {
                Profile::Desk => RunConfig::desk(),
                Profile::Full => RunConfig::default(),
            },
        };
        cfg.apply_env()?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("serialising output", e))?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e)),
        None => writeln!(std::io::stdout(), "{text}").map_err(|e| Error::io("writing stdout", e)),
    }
}

#[derive(Serialize)]
struct FeatureRecord<'a> {
    pair_id: &'a str,
    #[serde(flatten)]
    feature: LogMelFeature,
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Featurize { data, out, config } => {
            let cfg = config.resolve()?;
            let extractor = LogMelExtractor::new(cfg.model.frontend)?;
            let records: Vec<DatasetRecord> = read_jsonl(&data)?;
            let base = parent_dir(&data);
            let mut rows = Vec::with_capacity(records.len());
            for r in &records {
                let clip = r.audio.load(&base)?.resample(cfg.model.frontend.sample_rate)?;
                rows.push(FeatureRecord {
                    pair_id: &r.pair_id,
                    feature: extractor.extract(&clip)?,
                });
            }
            write_jsonl(&out, &rows)?;
            eprintln!("featurized {} records into {}", rows.len(), out.display());
        }
        Command::SynthData { pairs, seed, out } => {
            let seed = match seed {
                Some(s) => s,
                None => {
                    let mut c = RunConfig::default();
                    c.train.seed = 7;
                    c.apply_env()?;
                    c.train.seed
                }
            };
            let summary = write_synth(&out, pairs, seed)?;
            write_json(None, &summary)?;
        }
        Command::Train {
            train,
            val,
            out,
            log,
            config,
            epochs,
            batch_size,
            lr,
            no_graph,
            no_gating,
            no_pe,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            let ab = &mut cfg.model.ablation;
            ab.no_graph |= no_graph;
            ab.no_gating |= no_gating;
            ab.no_pe |= no_pe;
            cfg.validate()?;
            let train_records: Vec<DatasetRecord> = read_jsonl(&train)?;
            let val_records: Vec<DatasetRecord> = read_jsonl(&val)?;
            eprintln!(
                "training on {} pairs, validating on {} ({}, seed {})",
                train_records.len(),
                val_records.len(),
                cfg.model.ablation.label(),
                cfg.train.seed
            );
            let (ckpt, epochs) = fit(&cfg, &train_records, &val_records, &parent_dir(&train), &mut |e| {
                eprintln!(
                    "epoch {:3}  train {:.5}  val {:.5}  lr {:.0e}  {:.1}s{}",
                    e.epoch,
                    e.train_loss,
                    e.val_loss,
                    e.lr,
                    e.seconds,
                    if e.improved { "  *" } else { "" }
                );
            })?;
            ckpt.save(&out)?;
            if let Some(path) = log {
                write_jsonl(path, &epochs)?;
            }
            eprintln!("saved epoch {} to {}", ckpt.epoch, out.display());
        }
        Command::Ground {
            checkpoint,
            input,
            out,
            beta,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let beta = beta.unwrap_or(ckpt.config.train.beta);
            let grounder = Grounder::from_checkpoint(&ckpt)?;
            let predictions = match (input.data, input.audio, input.query) {
                (Some(data), _, _) => {
                    let records: Vec<DatasetRecord> = read_jsonl(&data)?;
                    grounder.predict_all(&records, &parent_dir(&data), beta)?
                }
                (None, Some(audio), Some(query)) => {
                    let clip = read_wav(&audio)?;
                    let (segments, z) = grounder.ground(&clip, &query, beta)?;
                    vec![Prediction {
                        pair_id: audio.display().to_string(),
                        segments,
                        scores: z.scores,
                        hop_seconds: z.hop_seconds,
                    }]
                }
                _ => unreachable!("clap enforces one input mode"),
            };
            match out {
                Some(path) => {
                    write_jsonl(&path, &predictions)?;
                    eprintln!("wrote {} predictions to {}", predictions.len(), path.display());
                }
                None => {
                    for p in &predictions {
                        let line = serde_json::to_string(p).map_err(|e| Error::json("serialising prediction", e))?;
                        println!("{line}");
                    }
                }
            }
        }
        Command::Eval {
            predictions,
            references,
            beta,
            out,
        } => {
            let preds: Vec<Prediction> = read_jsonl(&predictions)?;
            let refs: Vec<DatasetRecord> = read_jsonl(&references)?;
            let report = evaluate_predictions(&preds, &refs, beta, &MatchConfig::default(), &PsdsConfig::default())?;
            eprintln!(
                "P {:.4}  R {:.4}  F1 {:.4}  PSDS {:.4}",
                report.precision, report.recall, report.f1, report.psds
            );
            write_json(out.as_deref(), &report)?;
        }
        Command::Gradcheck { seed } => {
            let entries = gradcheck::suite(seed)?;
            let mut failed = 0;
            for e in &entries {
                let ok = e.passes();
                failed += usize::from(!ok);
                println!(
                    "{} {:<16} rel_error {:.3e} (tol {:.0e}, {} coords)",
                    if ok { "PASS" } else { "FAIL" },
                    e.check.name,
                    e.check.rel_error,
                    e.tolerance,
                    e.check.checked
                );
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} of {} gradient checks failed", entries.len())));
            }
        }
        Command::DumpAttention {
            checkpoint,
            audio,
            query,
            out,
        } => {
            let grounder = Grounder::load(&checkpoint)?;
            let dump = grounder.attention(&read_wav(&audio)?, &query)?;
            for path in dump.write(&out)? {
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(_) = e {
                eprintln!("(configuration can also come from --config and ${SEED_ENV})");
            }
            ExitCode::from(1)
        }
    }
}
