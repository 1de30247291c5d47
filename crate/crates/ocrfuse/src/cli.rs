//! Command-line surface: data generation, training, evaluation, decoding,
//! the complexity report, gradient checks, and the block ablation.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::complexity::{empirical_count, format_report, symbolic_count, ComplexityQuery, ModelKind};
use crate::error::{Error, Result};
use crate::harness::checkpoint;
use crate::harness::checks::run_grad_checks;
use crate::harness::data::{read_jsonl, write_jsonl};
use crate::harness::synth::{gen_synthetic, SyntheticTaskSpec};
use crate::harness::train::{
    ablation_runner, decode_trace, evaluate, model_from_checkpoint, train, write_metrics,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "ocrfuse", version, about = "Attention-block multimodal encoder with a pointer-augmented decoder: synthetic-task training, evaluation, and encoder complexity reports")]
struct Cli {
    /// Override the seed used by the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a task spec (JSON).
    GenData { spec: PathBuf, out: PathBuf },
    /// Train from a config file (JSON: training settings + data/out paths).
    Train { config: PathBuf },
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval { ckpt: PathBuf, data: PathBuf },
    /// Decode one instance and print the per-step source trace.
    Decode {
        ckpt: PathBuf,
        data: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// Closed-form encoder operation counts (optionally measured too).
    Complexity {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long = "L", default_value_t = 20)]
        l: u64,
        #[arg(long = "N", default_value_t = 50)]
        n: u64,
        #[arg(long = "M", default_value_t = 100)]
        m: u64,
        /// Transformer layers; defaults to 4 for m4c, 8 for ours.
        #[arg(long)]
        layers: Option<u64>,
        /// Multiply every term by the representation width d.
        #[arg(long)]
        include_d: bool,
        #[arg(long, default_value_t = 768)]
        d: u64,
        /// Also run the instrumented multiply-add tally at d = 1.
        #[arg(long)]
        empirical: bool,
    },
    /// Finite-difference checks for every primitive and the full loss.
    GradCheck {},
    /// Train one/two/three-block variants on the split-cue task.
    Ablate { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    M4c,
    Ours,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> ModelKind {
        match m {
            ModelArg::M4c => ModelKind::M4cStyle,
            ModelArg::Ours => ModelKind::SixVector,
        }
    }
}

/// Training config file: the train settings plus dataset and output paths.
#[derive(Serialize, Deserialize)]
struct TrainFile {
    #[serde(flatten)]
    train: TrainConfig,
    data: PathBuf,
    out_dir: PathBuf,
}

/// Ablation config file.
#[derive(Serialize, Deserialize)]
struct AblateFile {
    #[serde(flatten)]
    train: TrainConfig,
    data_spec: SyntheticTaskSpec,
    seeds: Vec<u64>,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData { spec, out } => {
            let mut task: SyntheticTaskSpec = serde_json::from_str(&std::fs::read_to_string(&spec)?)?;
            if let Some(seed) = cli.seed {
                task.seed = seed;
            }
            let data = gen_synthetic(&task)?;
            write_jsonl(&out, &data)?;
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({"instances": data.len(), "path": out})
                );
            } else {
                println!("wrote {} instances to {}", data.len(), out.display());
            }
            Ok(())
        }
        Command::Train { config } => {
            let mut file: TrainFile = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
            if let Some(seed) = cli.seed {
                file.train.seed = seed;
            }
            let data = read_jsonl(&file.data, &file.train.encoder)?;
            let outcome = train(&file.train, &data)?;
            std::fs::create_dir_all(&file.out_dir)?;
            let ckpt_path = file.out_dir.join("checkpoint.bin");
            let metrics_path = file.out_dir.join("metrics.csv");
            checkpoint::save(&ckpt_path, &outcome.checkpoint)?;
            write_metrics(&metrics_path, &outcome.metrics)?;
            let last = outcome.metrics.last().expect("at least one iteration");
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "iterations": last.iteration + 1,
                        "final_loss": last.loss,
                        "final_accuracy": outcome.final_accuracy,
                        "checkpoint": ckpt_path,
                        "metrics": metrics_path,
                    })
                );
            } else {
                println!("trained {} iterations, final loss {:.6}", last.iteration + 1, last.loss);
                if let Some(acc) = outcome.final_accuracy {
                    println!("last evaluated exact-match accuracy: {acc:.4}");
                }
                println!("checkpoint: {}", ckpt_path.display());
                println!("metrics:    {}", metrics_path.display());
            }
            Ok(())
        }
        Command::Eval { ckpt, data } => {
            let ckpt = checkpoint::load(&ckpt)?;
            let (model, store, vocab) = model_from_checkpoint(&ckpt)?;
            // admit datasets padded past the fitted training budget
            let mut read_cfg = model.cfg.clone();
            read_cfg.n_max = read_cfg.n_max.max(50);
            read_cfg.m_max = read_cfg.m_max.max(100);
            let data = read_jsonl(&data, &read_cfg)?;
            let report = evaluate(&model, &store, &vocab, &data)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("instances        {}", report.rows.len());
                println!("exact match      {:.4}", report.accuracy);
                println!("mean ANLS        {:.4}", report.mean_anls);
                for row in &report.rows {
                    println!(
                        "  {:<24} {} anls {:.3}  {:?}",
                        row.id,
                        if row.correct { "ok  " } else { "MISS" },
                        row.anls,
                        row.prediction
                    );
                }
            }
            Ok(())
        }
        Command::Decode { ckpt, data, id } => {
            let ckpt = checkpoint::load(&ckpt)?;
            let (model, store, vocab) = model_from_checkpoint(&ckpt)?;
            let mut read_cfg = model.cfg.clone();
            read_cfg.n_max = read_cfg.n_max.max(50);
            read_cfg.m_max = read_cfg.m_max.max(100);
            let data = read_jsonl(&data, &read_cfg)?;
            let inst = data
                .iter()
                .find(|i| i.id == id)
                .ok_or_else(|| Error::Data(format!("no instance with id {id:?}")))?;
            let (rendered, trace) = decode_trace(&model, &store, &vocab, inst)?;
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({"id": id, "answer": rendered, "steps": trace})
                );
            } else {
                println!("{id}: {rendered:?}");
                for (i, step) in trace.iter().enumerate() {
                    println!("  step {:>2}: {:<5} [{:>3}] {:?}", i, step.source, step.index, step.token);
                }
            }
            Ok(())
        }
        Command::Complexity { model, l, n, m, layers, include_d, d, empirical } => {
            let kind: ModelKind = model.into();
            let layers = layers.unwrap_or(match kind {
                ModelKind::M4cStyle => 4,
                ModelKind::SixVector => 8,
            });
            let query = ComplexityQuery { model: kind, l, n, m, layers, include_d, d };
            let report = symbolic_count(&query);
            let measured = if empirical {
                Some(empirical_count(kind, 1, layers as usize, l as usize, n as usize, m as usize, cli.seed.unwrap_or(0))?)
            } else {
                None
            };
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({"query": query, "report": report, "empirical_mul_adds": measured})
                );
            } else {
                print!("{}", format_report(&query, &report));
                if let Some(t) = measured {
                    println!("measured mul-adds   {t:>12}  (instrumented forward at d = 1)");
                }
            }
            Ok(())
        }
        Command::GradCheck {} => {
            let seed = cli.seed.unwrap_or(0);
            let results = run_grad_checks(seed, None)?;
            let all_pass = results.iter().all(|r| r.pass);
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&results)?);
            } else {
                for r in &results {
                    println!(
                        "{} {:<28} max rel err {:.3e} over {} coords",
                        if r.pass { "PASS" } else { "FAIL" },
                        r.name,
                        r.max_rel_err,
                        r.coords
                    );
                }
            }
            if all_pass {
                Ok(())
            } else {
                Err(Error::Config("gradient check failed".into()))
            }
        }
        Command::Ablate { config } => {
            let mut file: AblateFile = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
            if let Some(seed) = cli.seed {
                file.train.seed = seed;
            }
            let seeds = if file.seeds.is_empty() { vec![0, 1, 2] } else { file.seeds.clone() };
            let rows = ablation_runner(&file.train, &file.data_spec, &seeds)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                println!("{:<12} {:>6} {:>10}  per-seed", "variant", "slots", "mean acc");
                for row in &rows {
                    println!(
                        "{:<12} {:>6} {:>10.4}  {:?}",
                        row.variant, row.summary_slots, row.mean_accuracy, row.per_seed_accuracy
                    );
                }
            }
            Ok(())
        }
    }
}
