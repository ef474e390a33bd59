//! `distfl` command-line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use distfl::clustering::build_sim;
use distfl::config::ExperimentConfig;
use distfl::extraction::{synthesize, ExtractionConfig, KnowledgeSet};
use distfl::gradcheck::{run_suite, TOLERANCE};
use distfl::io::{matrix_csv, read_json, write_json};
use distfl::nn::ModelParams;
use distfl::orchestrator::Experiment;
use distfl::report::{write_run, RunArtifacts};

#[derive(Parser)]
#[command(name = "distfl", version, about = "Deterministic federated-learning simulator with distribution-based client clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long, env = "DISTFL_SEED")]
        seed: Option<u64>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random models.
        #[arg(long, default_value_t = 10)]
        problems: usize,
    },
    /// Synthesize knowledge inputs from a model checkpoint.
    Synth {
        model: PathBuf,
        #[arg(long, default_value_t = 200)]
        z: usize,
        /// Percentage of BN channels to match.
        #[arg(long, default_value_t = 50.0)]
        ratio: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, env = "DISTFL_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "knowledge.json")]
        out: PathBuf,
    },
    /// Print the pairwise KL matrix of models probed with a knowledge set.
    Sim {
        #[arg(required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        knowledge: PathBuf,
        /// One-directional divergences instead of the symmetrized matrix.
        #[arg(long)]
        raw: bool,
    },
}

fn run(config: &Path, out: &Path, seed: Option<u64>) -> distfl::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let exp = Experiment::new(cfg)?;
    let output = exp.run()?;
    for r in &output.report.rounds {
        let asr = r.asr.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!(
            "round {:>3}  accuracy {:.4}  asr {asr}  clusters {}  recovery {:.4}",
            r.round,
            r.mean_accuracy,
            r.assignment.clusters.len(),
            r.cluster_recovery
        );
    }
    let clients = exp.client_info();
    write_run(
        out,
        &RunArtifacts {
            report: &output.report,
            clients: &clients,
            sims: &output.sims,
            final_models: output.final_models(),
            timings: &output.timings,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck(seed: u64, problems: usize) -> distfl::Result<bool> {
    let results = run_suite(seed, problems)?;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{verdict:>4}  {:<46} max rel error {:.3e} over {} entries", r.name, r.max_rel_error, r.count);
    }
    let ok = results.iter().all(|r| r.passed());
    println!("{} (tolerance {TOLERANCE:e})", if ok { "all gradients match" } else { "gradient mismatch" });
    Ok(ok)
}

fn synth(model: &Path, cfg: ExtractionConfig, out: &Path) -> distfl::Result<()> {
    let model: ModelParams = read_json(model)?;
    let k = synthesize(&model, &cfg)?;
    println!("loss {:.6e} -> {:.6e} ({} items)", k.initial_loss, k.final_loss, k.z());
    write_json(out, &k)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn sim(models: &[PathBuf], knowledge: &Path, raw: bool) -> distfl::Result<()> {
    let models = models.iter().map(|p| read_json(p)).collect::<distfl::Result<Vec<ModelParams>>>()?;
    let knowledge: KnowledgeSet = read_json(knowledge)?;
    let sim = build_sim(&models, &knowledge, true)?;
    print!("{}", matrix_csv(if raw { &sim.raw } else { &sim.div }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => run(&config, &out, seed).map(|()| true),
        Command::Gradcheck { seed, problems } => gradcheck(seed, problems),
        Command::Synth { model, z, ratio, steps, lr, seed, out } => {
            let cfg = ExtractionConfig {
                z,
                extract_ratio: ratio,
                synth_steps: steps,
                synth_lr: lr,
                synth_batch: z,
                seed: Some(seed),
                ..Default::default()
            };
            synth(&model, cfg, &out).map(|()| true)
        }
        Command::Sim { models, knowledge, raw } => sim(&models, &knowledge, raw).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
