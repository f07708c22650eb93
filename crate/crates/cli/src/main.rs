//! `ensemble`: data generation, specialist training, ensemble adaptation,
//! pruning and table arithmetic from one binary.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use settings::{Failure, Settings};

#[derive(Parser)]
#[command(name = "ensemble", version, about = "Ensembles of frozen specialist encoders")]
struct Cli {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with defaults; a `[subcommand]` table overrides top-level keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write a JSON run manifest (inputs, seed, outputs, wall time) here.
    #[arg(long, global = true)]
    json_summary: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train one specialist encoder and write its checkpoint.
    TrainSpecialist(TrainSpecialist),
    /// Assemble an untrained ensemble from a registry.
    BuildEnsemble(BuildEnsemble),
    /// Adapt an ensemble to a dataset with frozen encoders.
    Finetune(Finetune),
    /// Keep the top-k encoders of an adapted ensemble.
    Prune(Prune),
    /// Validation metric across ensemble sizes and seeds.
    ScalingSweep(ScalingSweep),
    /// Variance of each encoder's deepest features.
    VarianceReport(VarianceReport),
    /// Average distance-to-best over a long-format results table.
    BenchDtb(BenchDtb),
    /// Mean and sample std of repeated runs.
    AggregateRuns(AggregateRuns),
}

#[derive(Args)]
pub struct GenData {
    /// `classification:K`, `segmentation:K` or `regression`.
    #[arg(long)]
    pub task: Option<String>,
    /// rgb, ms, sar, irrg or ms_sar.
    #[arg(long)]
    pub modality: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Image side, a multiple of 32.
    #[arg(long)]
    pub size: Option<usize>,
    /// shared, ms_exclusive or split.
    #[arg(long)]
    pub cues: Option<String>,
    /// Train, val and test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainSpecialist {
    /// TOML encoder config (depths, dims, stem_stride, kernel_size).
    #[arg(long)]
    pub encoder_config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Defaults to the dataset's task.
    #[arg(long)]
    pub task: Option<String>,
    /// Defaults to the dataset name.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    /// Also register the trained encoder in this registry directory.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BuildEnsemble {
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Input modality the ensemble will receive.
    #[arg(long)]
    pub modality: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// Comma-separated subset of registry ids, in the order given.
    #[arg(long)]
    pub encoders: Option<String>,
    /// Rule file; defaults to the built-in sensor rules.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// none, layer or batch.
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct Finetune {
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Must match the ensemble's task when given.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Model name written to result.csv.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct Prune {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Adapt the pruned model again on this dataset instead of reusing its weights.
    #[arg(long)]
    pub refinetune: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScalingSweep {
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// `1..N`, `2..5` or a list such as `1,2,4`.
    #[arg(long)]
    pub ks: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VarianceReport {
    /// Ensemble checkpoint whose encoders are measured.
    #[arg(long, conflicts_with = "registry")]
    pub ensemble: Option<PathBuf>,
    /// Registry whose encoders are measured.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchDtb {
    /// Long-format CSV: model,dataset,direction,score.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AggregateRuns {
    /// Two-column CSV: name,score with one row per run.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What a subcommand read and wrote, for `--json-summary`.
#[derive(Default, serde::Serialize)]
pub struct RunRecord {
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn input(&mut self, flag: &str, p: &std::path::Path) {
        self.inputs.push((flag.to_string(), p.display().to_string()));
    }

    pub fn output(&mut self, p: &std::path::Path) {
        self.outputs.push(p.display().to_string());
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let start = Instant::now();
    let section = match &cli.command {
        Command::GenData(_) => "gen-data",
        Command::TrainSpecialist(_) => "train-specialist",
        Command::BuildEnsemble(_) => "build-ensemble",
        Command::Finetune(_) => "finetune",
        Command::Prune(_) => "prune",
        Command::ScalingSweep(_) => "scaling-sweep",
        Command::VarianceReport(_) => "variance-report",
        Command::BenchDtb(_) => "bench-dtb",
        Command::AggregateRuns(_) => "aggregate-runs",
    };
    let config = cli.config.map(|p| settings::existing("config", p)).transpose()?;
    let s = Settings::load(config.as_deref(), section)?;
    let seed = s.pick("seed", cli.seed, 0u64)?;
    let mut rec = RunRecord::default();
    match cli.command {
        Command::GenData(a) => commands::gen_data(&s, a, seed, &mut rec),
        Command::TrainSpecialist(a) => commands::train_specialist(&s, a, seed, &mut rec),
        Command::BuildEnsemble(a) => commands::build_ensemble(&s, a, seed, &mut rec),
        Command::Finetune(a) => commands::finetune(&s, a, seed, &mut rec),
        Command::Prune(a) => commands::prune(&s, a, seed, &mut rec),
        Command::ScalingSweep(a) => commands::scaling_sweep(&s, a, seed, &mut rec),
        Command::VarianceReport(a) => commands::variance_report(&s, a, seed, &mut rec),
        Command::BenchDtb(a) => commands::bench_dtb(&s, a, &mut rec),
        Command::AggregateRuns(a) => commands::aggregate_runs(&s, a, &mut rec),
    }?;
    if let Some(path) = cli.json_summary {
        let summary = serde_json::json!({
            "command": section,
            "seed": seed,
            "inputs": rec.inputs.iter().map(|(k, v)| (k.clone(), serde_json::Value::from(v.clone()))).collect::<serde_json::Map<_, _>>(),
            "outputs": rec.outputs,
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        let text = serde_json::to_string_pretty(&summary).expect("json serializes");
        std::fs::write(&path, text + "\n")
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
