//! Per-round reports and the files an experiment run writes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, SimilarityMatrix};
use crate::config::{ExperimentConfig, Strategy};
use crate::io::{fmt_f64, matrix_csv, to_json_string, write_json};
use crate::metrics::DivergenceSummary;
use crate::nn::ModelParams;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub members: Vec<usize>,
    /// Mean over honest members of the cluster model's accuracy on each
    /// member's test set; absent when the cluster has no honest member.
    pub accuracy: Option<f64>,
    pub asr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalCluster {
    /// Index into the round's clusters.
    pub index: usize,
    pub contains_malicious: bool,
    pub accuracy: f64,
    pub asr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDivergence {
    pub all: Option<DivergenceSummary>,
    pub within_cluster: Option<DivergenceSummary>,
    pub across_clusters: Option<DivergenceSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub strategy: Strategy,
    /// Accuracy of each client's current model on its type's test set.
    pub client_accuracy: Vec<f64>,
    /// Mean over honest clients of each type.
    pub type_accuracy: Vec<Option<f64>>,
    /// Headline accuracy: the normal cluster's under an attack evaluated on
    /// the normal cluster model, otherwise the mean of `type_accuracy`.
    pub mean_accuracy: f64,
    pub asr: Option<f64>,
    pub assignment: ClusterAssignment,
    /// `max(0, ARI)` against the `(dist_type, is_malicious)` grouping.
    pub cluster_recovery: f64,
    pub exact_recovery: bool,
    pub clusters: Vec<ClusterMetrics>,
    pub normal_cluster: Option<NormalCluster>,
    pub weight_divergence: WeightDivergence,
    pub synthesis: Option<SynthesisSummary>,
}

/// Wall-clock milliseconds per phase; kept out of `report.json` so that
/// reports stay byte-identical across runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub round: usize,
    pub local_training_ms: f64,
    pub extraction_ms: f64,
    pub clustering_ms: f64,
    pub aggregation_ms: f64,
    pub evaluation_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundReport>,
}

/// Client metadata needed for the per-client CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientInfo {
    pub dist_type: usize,
    pub is_malicious: bool,
}

/// `round,client_id,dist_type,is_malicious,cluster,accuracy` rows.
pub fn metrics_csv(rounds: &[RoundReport], clients: &[ClientInfo]) -> String {
    let mut out = String::from("round,client_id,dist_type,is_malicious,cluster,accuracy\n");
    for r in rounds {
        let labels = r.assignment.labels();
        for (i, acc) in r.client_accuracy.iter().enumerate() {
            let c = clients[i];
            let _ = writeln!(out, "{},{},{},{},{},{}", r.round, i, c.dist_type, c.is_malicious, labels[i], fmt_f64(*acc));
        }
    }
    out
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunArtifacts<'a> {
    pub report: &'a ExperimentReport,
    pub clients: &'a [ClientInfo],
    pub sims: &'a [Option<SimilarityMatrix>],
    pub final_models: &'a [ModelParams],
    pub timings: &'a [PhaseTimings],
}

/// Writes `report.json`, `metrics.csv`, `sim_round_<r>.csv` (clustering
/// matrix), `sim_raw_round_<r>.csv` (one-directional KL),
/// `clusters_round_<r>.json`, `cluster_model_<q>.json` and `timings.json`.
pub fn write_run(dir: &Path, run: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), to_json_string(run.report)? + "\n")?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&run.report.rounds, run.clients))?;
    for (r, sim) in run.report.rounds.iter().zip(run.sims) {
        if let Some(sim) = sim {
            std::fs::write(dir.join(format!("sim_round_{}.csv", r.round)), matrix_csv(&sim.div))?;
            std::fs::write(dir.join(format!("sim_raw_round_{}.csv", r.round)), matrix_csv(&sim.raw))?;
        }
        write_json(&dir.join(format!("clusters_round_{}.json", r.round)), &r.assignment)?;
    }
    for (q, m) in run.final_models.iter().enumerate() {
        write_json(&dir.join(format!("cluster_model_{q}.json")), m)?;
    }
    write_json(&dir.join("timings.json"), &run.timings)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_round() -> RoundReport {
        RoundReport {
            round: 0,
            strategy: Strategy::Distfl,
            client_accuracy: vec![0.5, 1.0 / 3.0],
            type_accuracy: vec![Some(0.5), None],
            mean_accuracy: 0.5,
            asr: Some(0.1),
            assignment: ClusterAssignment { threshold: Some(f64::INFINITY), clusters: vec![vec![0, 1]] },
            cluster_recovery: 0.0,
            exact_recovery: false,
            clusters: vec![ClusterMetrics { members: vec![0, 1], accuracy: Some(0.5), asr: None }],
            normal_cluster: Some(NormalCluster { index: 0, contains_malicious: true, accuracy: 0.5, asr: Some(0.1) }),
            weight_divergence: WeightDivergence {
                all: Some(DivergenceSummary { mean: 0.25, max: 0.25, pairs: 1 }),
                within_cluster: None,
                across_clusters: None,
            },
            synthesis: Some(SynthesisSummary { initial_loss: 3.0, final_loss: 0.1 }),
        }
    }

    #[test]
    fn report_round_trip() {
        let rep = ExperimentReport { config: ExperimentConfig::default(), rounds: vec![sample_round()] };
        let text = to_json_string(&rep).unwrap();
        let back: ExperimentReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
        assert_eq!(to_json_string(&back).unwrap(), text);
    }

    #[test]
    fn csv_rows() {
        let clients = [ClientInfo { dist_type: 0, is_malicious: false }, ClientInfo { dist_type: 1, is_malicious: true }];
        let csv = metrics_csv(&[sample_round()], &clients);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "0,1,1,true,0,3.3333333333333331e-1");
    }
}
