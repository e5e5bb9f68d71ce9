use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedrec_sim::attack::EstimatorSettings;
use fedrec_sim::data::{self, SyntheticSpec};
use fedrec_sim::eval;
use fedrec_sim::experiment::{self, ExperimentConfig, ExperimentError};
use log::error;

/// Federated recommender poisoning simulator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML file.
    Run {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override a config value, e.g. `--set attack.mode=pipattack`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a synthetic ratings file.
    Synth {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 12_500)]
        interactions: usize,
        #[arg(long, default_value_t = 1.5)]
        skew: f64,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 4.0)]
        affinity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "::")]
        separator: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print ER@K and HR@K of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k_exposure: Option<usize>,
        #[arg(long)]
        k_hit: Option<usize>,
        /// Also report the 5-fold held-out macro F1 of a popularity
        /// classifier on the item embeddings.
        #[arg(long)]
        popularity_f1: bool,
    },
    /// Write the item embeddings of a checkpoint as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(raw) = std::env::var("FEDREC_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| Failure::Config(anyhow::anyhow!("FEDREC_THREADS={raw} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime)?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Run {
            config,
            overrides,
            resume,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
            let resume = resume
                .map(|p| experiment::load_checkpoint(&p))
                .transpose()?;
            let summary = experiment::run_experiment(&cfg, resume)?;
            println!("metrics: {}", summary.artifacts.metrics_csv.display());
            println!("checkpoint: {}", summary.artifacts.final_checkpoint.display());
            if let Some(last) = summary.metrics.rows.last() {
                println!(
                    "final epoch {}: ER@{} {:.4}, HR@{} {:.4}",
                    last.epoch, cfg.eval.k_exposure, last.er_at_k, cfg.eval.k_hit, last.hr_at_k
                );
            }
        }
        Command::Synth {
            users,
            items,
            interactions,
            skew,
            clusters,
            affinity,
            seed,
            separator,
            out,
        } => {
            let spec = SyntheticSpec {
                users,
                items,
                interactions,
                skew,
                clusters,
                affinity,
                seed,
            };
            let table = data::generate_synthetic(&spec).map_err(|e| Failure::Config(e.into()))?;
            let f = File::create(&out)
                .with_context(|| format!("creating {}", out.display()))
                .map_err(Failure::Runtime)?;
            data::write_ratings(BufWriter::new(f), &table, &separator).map_err(runtime)?;
            println!("{} ratings written to {}", table.records.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            k_exposure,
            k_hit,
            popularity_f1,
        } => {
            let mut sim = experiment::load_checkpoint(&checkpoint)?;
            if let Some(k) = k_exposure {
                sim.settings.k_exposure = k;
            }
            if let Some(k) = k_hit {
                sim.settings.k_hit = k;
            }
            let m = sim.evaluate().map_err(runtime)?;
            let f1 = if popularity_f1 {
                let items: Vec<usize> = (0..sim.global.num_items()).filter(|&i| i != sim.target).collect();
                let settings = EstimatorSettings::default();
                let f1 = eval::cross_validated_f1(&sim.global.item_embeddings, &sim.labels, &items, 5, &settings)
                    .map_err(runtime)?;
                format!(",\"popularity_f1\":{f1}")
            } else {
                String::new()
            };
            println!(
                "{{\"epoch\":{},\"target\":{},\"er_at_{}\":{},\"hr_at_{}\":{}{f1}}}",
                sim.round, sim.target, sim.settings.k_exposure, m.exposure_rate, sim.settings.k_hit, m.hit_ratio
            );
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            let sim = experiment::load_checkpoint(&checkpoint)?;
            experiment::write_embeddings(&sim, &out)?;
            println!(
                "{} item embeddings written to {}",
                sim.global.item_embeddings.rows(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            error!("{e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
