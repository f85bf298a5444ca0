//! Command-line driver: every subcommand is a thin shell over the library's
//! pipeline functions. Success prints a short human summary on stdout and
//! exits 0; failure prints one machine-readable JSON object on stderr and
//! exits nonzero (2 for configuration and parse problems, 1 otherwise).
//!
//! Output directories resolve in order: `--out`, the config's `out_dir`,
//! `$UDC_OUT_ROOT/<name>`, then `./runs/<name>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use udc::pipeline::{
    dump_embeddings, resolve_out_dir, run_ablation, run_pipeline, run_stage, run_sweep, DumpKind, PipelineOutcome,
    RunConfig, Stage, SweepParam,
};
use udc::{Result, UdcError};

#[derive(Parser)]
#[command(
    name = "udc",
    version,
    about = "Healthcare prediction in three stages: pretrain a collaborative backbone, align it with text \
             embeddings in a shared discrete code space, then substitute rare-disease embeddings and fine-tune"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale preset: full pipeline in minutes on one machine
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    /// Run directory (created if missing)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override; governs data, initialization, and training
    #[arg(long)]
    seed: Option<u64>,
    /// Task override: diag or med
    #[arg(long)]
    task: Option<String>,
    /// Skip stage-3 tuning: substitute embeddings at inference time only
    #[arg(long)]
    no_finetune: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare the corpus and text embeddings in the run directory
    GenData(RunArgs),
    /// Stage 1: pretrain the collaborative backbone
    Pretrain(RunArgs),
    /// Stage 2: align both embedding views in the shared code space
    TrainDrl(RunArgs),
    /// Stage 3: substitute disease embeddings and fine-tune the backbone
    Finetune(RunArgs),
    /// Evaluate existing checkpoints on the test split
    Eval(RunArgs),
    /// All stages end to end, reusing whatever already exists
    Pipeline(RunArgs),
    /// Six-variant ablation grid over one shared backbone
    Ablate(RunArgs),
    /// Sweep one hyperparameter: k, codebook_size, alpha, or eta
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Which hyperparameter to vary
        #[arg(long)]
        param: String,
        /// Comma-separated values; invalid ones are skipped with a warning
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write a disease embedding table as CSV: original, substituted, or quantized
    Dump {
        #[command(flatten)]
        run: RunArgs,
        /// Which table to dump
        #[arg(long)]
        which: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{}", payload);
            match e.kind() {
                "config" | "parse" => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

/// Assemble the effective config: an explicit file wins, otherwise the run
/// directory's own provenance is picked up, otherwise defaults (or the desk
/// preset); command-line overrides apply last.
fn build_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = if let Some(path) = &run.config {
        let text = std::fs::read_to_string(path).map_err(|e| UdcError::io(path.display().to_string(), e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            UdcError::Parse { line, msg, .. } => UdcError::Parse { path: path.display().to_string(), line, msg },
            other => other,
        })?
    } else if let Some(out) = &run.out {
        let provenance = out.join("config.toml");
        match std::fs::read_to_string(&provenance) {
            Ok(text) => RunConfig::from_toml_str(&text).map_err(|e| match e {
                UdcError::Parse { line, msg, .. } => {
                    UdcError::Parse { path: provenance.display().to_string(), line, msg }
                }
                other => other,
            })?,
            Err(_) if run.desk => RunConfig::desk(),
            Err(_) => RunConfig::default(),
        }
    } else if run.desk {
        RunConfig::desk()
    } else {
        RunConfig::default()
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(task) = &run.task {
        cfg.task = task.clone();
    }
    if run.no_finetune {
        cfg.no_finetune = true;
    }
    Ok(cfg)
}

fn out_root(cfg: &RunConfig, run: &RunArgs, kind: &str) -> PathBuf {
    let env_root = std::env::var_os("UDC_OUT_ROOT").map(PathBuf::from);
    resolve_out_dir(cfg, run.out.as_deref(), env_root.as_deref(), kind)
}

fn print_outcome(outcome: &PipelineOutcome) {
    println!("run directory: {}", outcome.root.display());
    let c = &outcome.corpus;
    println!(
        "corpus: {} patients ({} train / {} val / {} test), {} diseases",
        c.patients, c.train_patients, c.val_patients, c.test_patients, c.diseases
    );
    if let Some(log) = &outcome.stage1_log {
        println!("stage 1: best validation loss {:.6} at epoch {}", log.best_val, log.best_epoch);
    }
    if let Some(log) = &outcome.drl_log {
        if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
            println!(
                "stage 2: {} diseases, loss {:.4} -> {:.4}, cross-view cosine {:.4} -> {:.4}",
                log.trained_diseases, first.total, last.total, first.cosine_quantized, last.cosine_quantized
            );
        }
    }
    if let Some(log) = &outcome.finetune_log {
        println!("stage 3: best validation loss {:.6} at epoch {}", log.best_val, log.best_epoch);
    }
    if let Some(reports) = &outcome.reports {
        let b = &reports.bundle;
        match b.task {
            udc::ehr::Task::DiagPred => {
                for (k, v) in &b.udc.metrics.acc_at_k {
                    let base = b.baseline.metrics.acc_at_k.get(k).copied().unwrap_or(f64::NAN);
                    println!("acc@{}: baseline {:.4} -> substituted {:.4}", k, base, v);
                }
            }
            udc::ehr::Task::MedRec => {
                println!(
                    "jaccard: baseline {:.4} -> substituted {:.4}",
                    b.baseline.metrics.jaccard, b.udc.metrics.jaccard
                );
                println!("f1: baseline {:.4} -> substituted {:.4}", b.baseline.metrics.f1, b.udc.metrics.f1);
            }
        }
        println!("level-1 code utilization: {:.3}", reports.codebook.levels[0].utilization);
    }
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(run) => stage_command(run, Stage::Data),
        Command::Pretrain(run) => stage_command(run, Stage::Pretrain),
        Command::TrainDrl(run) => stage_command(run, Stage::TrainDrl),
        Command::Finetune(run) => stage_command(run, Stage::Finetune),
        Command::Eval(run) => stage_command(run, Stage::Eval),
        Command::Pipeline(run) => {
            let cfg = build_config(run)?;
            let root = out_root(&cfg, run, "run");
            let outcome = run_pipeline(&cfg, &root)?;
            print_outcome(&outcome);
            Ok(())
        }
        Command::Ablate(run) => {
            let cfg = build_config(run)?;
            let root = out_root(&cfg, run, "ablate");
            let outcome = run_ablation(&cfg, &root)?;
            println!("ablation directory: {}", outcome.root.display());
            println!("shared stage-1 checksum: {}", outcome.stage1_checksum);
            for row in &outcome.rows {
                match &row.failed {
                    Some(msg) => println!("{:>4}: failed ({})", row.variant, msg),
                    None => println!("{:>4}: ok", row.variant),
                }
            }
            println!("table: {}", outcome.csv_path.display());
            Ok(())
        }
        Command::Sweep { run, param, values } => {
            let cfg = build_config(run)?;
            let param = SweepParam::parse(param)?;
            let root = out_root(&cfg, run, &format!("sweep-{}", param.name()));
            let outcome = run_sweep(&cfg, &root, param, values)?;
            for warning in &outcome.warnings {
                eprintln!("warning: {}", warning);
            }
            println!("sweep directory: {}", outcome.root.display());
            println!("training runs: {}", outcome.trained_runs);
            for row in &outcome.rows {
                println!("{} = {}: {}", outcome.parameter.name(), row.value, row.status);
            }
            println!("table: {}", outcome.csv_path.display());
            Ok(())
        }
        Command::Dump { run, which } => {
            let cfg = build_config(run)?;
            let kind = DumpKind::parse(which)?;
            let root = out_root(&cfg, run, "run");
            let path = dump_embeddings(&cfg, &root, kind)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn stage_command(run: &RunArgs, target: Stage) -> Result<()> {
    let cfg = build_config(run)?;
    let root = out_root(&cfg, run, "run");
    let outcome = run_stage(&cfg, &root, target)?;
    print_outcome(&outcome);
    Ok(())
}
