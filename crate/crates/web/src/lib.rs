//! Browser demo bindings. Every export takes plain numbers and returns JSON.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use distfl::clustering::{threshold_cluster, SimilarityMatrix};
use distfl::config::{ExperimentConfig, Strategy};
use distfl::extraction::{synthesize_traced, ExtractionConfig};
use distfl::nn::{ModelParams, TrainConfig};
use distfl::orchestrator::{local_train, Experiment};
use distfl::rng::{stream, Purpose};
use distfl::scenario::{generate_scenario, ScenarioConfig};

#[derive(Serialize)]
struct RoundSummary {
    round: usize,
    accuracy: f64,
    clusters: Vec<Vec<usize>>,
    recovery: f64,
}

#[derive(Serialize, Deserialize)]
pub struct SimView {
    /// Symmetrized divergences of the last round.
    pub div: Vec<Vec<f64>>,
    pub dist_type: Vec<usize>,
}

#[derive(Serialize)]
struct SimulationResult {
    sim: Option<SimView>,
    rounds: Vec<RoundSummary>,
}

#[derive(Serialize)]
struct Clustering {
    threshold: Option<f64>,
    clusters: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct SynthesisTrace {
    losses: Vec<f64>,
    initial_loss: f64,
    final_loss: f64,
}

fn json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Runs a small distfl experiment on the category-imbalance scenario and
/// returns the last round's similarity matrix with per-round summaries.
pub fn simulate_json(types: usize, clients_per_type: usize, rounds: usize, seed: u64) -> Result<String, String> {
    let cfg = ExperimentConfig {
        strategy: Strategy::Distfl,
        rounds,
        seed,
        scenario: ScenarioConfig { num_types: types, clients_per_type, samples_per_client: 60, test_samples_per_type: 100, ..Default::default() },
        train: TrainConfig { local_epochs: 2, ..Default::default() },
        extraction: ExtractionConfig { z: 64, synth_steps: 200, synth_batch: 64, ..Default::default() },
        ..Default::default()
    };
    let exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
    let out = exp.run().map_err(|e| e.to_string())?;
    let dist_type = exp.shards.iter().map(|s| s.dist_type).collect();
    let sim = out.sims.iter().rev().flatten().next().map(|s| SimView { div: s.div.clone(), dist_type });
    let rounds = out
        .report
        .rounds
        .iter()
        .map(|r| RoundSummary {
            round: r.round,
            accuracy: r.mean_accuracy,
            clusters: r.assignment.clusters.clone(),
            recovery: r.cluster_recovery,
        })
        .collect();
    json(&SimulationResult { sim, rounds })
}

/// Partitions a similarity matrix (`{"div": [[..]], ..}`) at `threshold`; a
/// negative or non-finite threshold means automatic detection.
pub fn recluster_json(sim: &str, threshold: f64) -> Result<String, String> {
    let view: SimView = serde_json::from_str(sim).map_err(|e| e.to_string())?;
    let sim = SimilarityMatrix::from_raw(view.div, false).map_err(|e| e.to_string())?;
    let fixed = (threshold.is_finite() && threshold >= 0.0).then_some(threshold);
    let a = threshold_cluster(&sim, fixed, 0.0);
    json(&Clustering { threshold: a.threshold.filter(|t| t.is_finite()), clusters: a.clusters })
}

/// Trains a model on one blob type, then synthesizes `z` inputs against its
/// BatchNorm statistics and returns the loss after every step.
pub fn synthesis_trace_json(seed: u64, z: usize, steps: usize, ratio: f64) -> Result<String, String> {
    let sc = ScenarioConfig { num_types: 1, clients_per_type: 1, samples_per_client: 200, seed: Some(seed), ..Default::default() };
    let data = generate_scenario(&sc).map_err(|e| e.to_string())?;
    let init = ModelParams::mlp_bn(sc.feature_dim, &[32, 16], sc.num_classes, &mut stream(seed, 0, 0, Purpose::Init))
        .map_err(|e| e.to_string())?;
    let train = TrainConfig { local_epochs: 10, ..Default::default() };
    let model = local_train(&data.shards[0], &init, &train, &mut stream(seed, 0, 0, Purpose::Train)).map_err(|e| e.to_string())?;
    let cfg = ExtractionConfig { z, extract_ratio: ratio, synth_steps: steps, synth_batch: z, seed: Some(seed), ..Default::default() };
    let mut losses = Vec::with_capacity(steps + 1);
    let k = synthesize_traced(&model, &cfg, |_, loss| losses.push(loss)).map_err(|e| e.to_string())?;
    json(&SynthesisTrace { losses, initial_loss: k.initial_loss, final_loss: k.final_loss })
}

#[wasm_bindgen]
pub fn simulate(types: u32, clients_per_type: u32, rounds: u32, seed: u32) -> Result<String, String> {
    simulate_json(types as usize, clients_per_type as usize, rounds as usize, u64::from(seed))
}

#[wasm_bindgen]
pub fn recluster(sim: &str, threshold: f64) -> Result<String, String> {
    recluster_json(sim, threshold)
}

#[wasm_bindgen]
pub fn synthesis_trace(seed: u32, z: u32, steps: u32, ratio: f64) -> Result<String, String> {
    synthesis_trace_json(u64::from(seed), z as usize, steps as usize, ratio)
}
