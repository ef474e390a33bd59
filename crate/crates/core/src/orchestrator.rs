//! Multi-round federated runs.
//!
//! Each round every client trains the model of the cluster it was assigned to
//! in the previous round (one shared initialization in round 0), uploads, and
//! the server regroups and averages the uploads according to the strategy.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{flip_labels, model_replacement, AttackKind};
use crate::clustering::{build_sim, threshold_cluster, ClusterAssignment, SimilarityMatrix};
use crate::config::{ExperimentConfig, Strategy};
use crate::dp::privatize;
use crate::error::{invalid, Error, Result};
use crate::extraction::{pre_aggregate, synthesize, ExtractionConfig, KnowledgeSet};
use crate::metrics::{accuracy, attack_success_rate, cluster_recovery, same_partition, summarize_pairs, AsrSpec, EvaluateOn};
use crate::nn::{sgd_step, GradientSet, ModelParams, TrainConfig};
use crate::report::{
    ClientInfo, ClusterMetrics, ExperimentReport, NormalCluster, PhaseTimings, RoundReport, SynthesisSummary,
    WeightDivergence,
};
use crate::rng::{derive_seed, permutation, stream, Purpose, Stream};
use crate::scenario::{generate_scenario, ClientShard};

/// `local_epochs` passes of mini-batch SGD with momentum over a fresh shuffle
/// each epoch. A trailing batch of one sample is skipped (no batch variance).
pub fn local_train(shard: &ClientShard, model: &ModelParams, cfg: &TrainConfig, rng: &mut Stream) -> Result<ModelParams> {
    cfg.validate()?;
    if shard.len() < 2 {
        return Err(invalid(format!("client {} needs at least two samples to train", shard.client_id)));
    }
    let mut model = model.clone();
    let mut velocity = GradientSet::zeros_like(&model);
    for _ in 0..cfg.local_epochs {
        let order = permutation(rng, shard.len());
        for idx in order.chunks(cfg.batch_size.max(2)) {
            if idx.len() < 2 {
                continue;
            }
            let batch = shard.features.select_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| shard.labels[i]).collect();
            let (_, grads, stats) = model.loss_and_grads(&batch, &labels, false)?;
            sgd_step(&mut model, &grads, &mut velocity, cfg)?;
            model.update_running_stats(&stats);
        }
    }
    Ok(model)
}

/// Per-cluster unweighted means (running statistics included), in cluster
/// order; members are summed in ascending id order.
pub fn cluster_aggregate(models: &[ModelParams], assignment: &ClusterAssignment) -> Result<Vec<ModelParams>> {
    assignment.validate(models.len())?;
    assignment
        .clusters
        .iter()
        .map(|members| {
            let mut ids = members.clone();
            ids.sort_unstable();
            let group: Vec<&ModelParams> = ids.iter().map(|&i| &models[i]).collect();
            ModelParams::average(&group)
        })
        .collect()
}

/// Server and client state between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlState {
    /// Index of the next round to run.
    pub round: usize,
    pub cluster_models: Vec<ModelParams>,
    /// Index into `cluster_models` for every client.
    pub client_cluster: Vec<usize>,
    /// Mean of the previous round's uploads (the initialization before round 0).
    pub prev_global: ModelParams,
    pub history: Vec<ClusterAssignment>,
    pub seed: u64,
}

impl FlState {
    pub fn client_model(&self, client: usize) -> &ModelParams {
        &self.cluster_models[self.client_cluster[client]]
    }
}

/// What one round produced besides the new state.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub round: usize,
    pub assignment: ClusterAssignment,
    pub uploads: Vec<ModelParams>,
    pub sim: Option<SimilarityMatrix>,
    pub knowledge: Option<KnowledgeSet>,
    pub timings: PhaseTimings,
}

/// A configured experiment with its client data.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub shards: Vec<ClientShard>,
    /// Test set per distribution type.
    pub test_sets: Vec<ClientShard>,
    asr: Option<AsrSpec>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub sims: Vec<Option<SimilarityMatrix>>,
    pub timings: Vec<PhaseTimings>,
    pub final_state: FlState,
}

impl ExperimentOutput {
    pub fn final_models(&self) -> &[ModelParams] {
        &self.final_state.cluster_models
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Experiment {
    /// Resolves seeds, validates, and generates the scenario data.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let scenario = generate_scenario(&cfg.scenario)?;
        Self::with_data(cfg, scenario.shards, scenario.test_sets)
    }

    /// Uses externally supplied shards (client ids must be `0..n` in order)
    /// and per-type test sets.
    pub fn with_data(cfg: ExperimentConfig, mut shards: Vec<ClientShard>, test_sets: Vec<ClientShard>) -> Result<Self> {
        let cfg = cfg.resolved();
        if cfg.rounds == 0 {
            return Err(invalid("rounds must be at least 1"));
        }
        cfg.train.validate()?;
        cfg.extraction.validate()?;
        if shards.is_empty() {
            return Err(invalid("no clients"));
        }
        let (d, c) = (cfg.scenario.feature_dim, cfg.scenario.num_classes);
        for (i, s) in shards.iter_mut().enumerate() {
            if s.client_id != i {
                return Err(invalid(format!("shard {i} has client_id {}", s.client_id)));
            }
            s.validate(d, c)?;
            if s.dist_type >= test_sets.len() {
                return Err(invalid(format!("client {i} has type {} without a test set", s.dist_type)));
            }
            s.is_malicious = cfg.attack.is_attacker(i);
        }
        for t in &test_sets {
            t.validate(d, c)?;
        }
        cfg.attack.validate(shards.len(), c)?;
        let asr = if cfg.attack.is_active() { Some(cfg.metrics.asr_spec(&cfg.attack.flip_map)?) } else { None };
        Ok(Experiment { cfg, shards, test_sets, asr })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn client_info(&self) -> Vec<ClientInfo> {
        self.shards.iter().map(|s| ClientInfo { dist_type: s.dist_type, is_malicious: s.is_malicious }).collect()
    }

    /// Ground-truth grouping key per client: `(dist_type, is_malicious)`.
    pub fn truth_labels(&self) -> Vec<usize> {
        let keys: Vec<(usize, bool)> = self.shards.iter().map(|s| (s.dist_type, s.is_malicious)).collect();
        ClusterAssignment::from_keys(&keys).labels()
    }

    pub fn initial_state(&self) -> Result<FlState> {
        let seed = self.cfg.seed;
        let init = ModelParams::mlp_bn(
            self.cfg.scenario.feature_dim,
            &self.cfg.model.hidden,
            self.cfg.scenario.num_classes,
            &mut stream(seed, 0, 0, Purpose::Init),
        )?;
        Ok(FlState {
            round: 0,
            cluster_models: vec![init.clone()],
            client_cluster: vec![0; self.num_clients()],
            prev_global: init,
            history: Vec::new(),
            seed,
        })
    }

    fn extraction_cfg(&self, round: usize) -> ExtractionConfig {
        let base = self.cfg.extraction.seed.unwrap_or(0);
        ExtractionConfig { seed: Some(derive_seed(base, round as u64)), ..self.cfg.extraction.clone() }
    }

    fn upload(&self, state: &FlState, client: usize) -> Result<ModelParams> {
        let shard = &self.shards[client];
        let (seed, round) = (state.seed, state.round as u64);
        let mut rng = stream(seed, client as u64, round, Purpose::Train);
        let attack = &self.cfg.attack;
        let (base, upload) = if shard.is_malicious {
            let poisoned = flip_labels(shard, &attack.flip_map());
            match attack.kind {
                AttackKind::ModelReplace => {
                    let base = &state.prev_global;
                    let malicious = local_train(&poisoned, base, &self.cfg.train, &mut rng)?;
                    let boost = attack.boost_factor.unwrap_or(self.num_clients() as f64);
                    (base, model_replacement(&malicious, base, boost)?)
                }
                _ => {
                    let base = state.client_model(client);
                    (base, local_train(&poisoned, base, &self.cfg.train, &mut rng)?)
                }
            }
        } else {
            let base = state.client_model(client);
            (base, local_train(shard, base, &self.cfg.train, &mut rng)?)
        };
        match &self.cfg.dp {
            Some(dp) => privatize(base, &upload, dp, &mut stream(seed, client as u64, round, Purpose::DpNoise)),
            None => Ok(upload),
        }
    }

    /// Runs one round and advances `state`.
    pub fn run_round(&self, state: &mut FlState) -> Result<RoundOutcome> {
        let round = state.round;
        let abort = |e: Error| Error::RoundAborted { round, source: Box::new(e) };
        let mut timings = PhaseTimings { round, ..Default::default() };

        let t = Instant::now();
        let uploads = (0..self.num_clients()).map(|i| self.upload(state, i)).collect::<Result<Vec<_>>>().map_err(abort)?;
        timings.local_training_ms = elapsed_ms(t);

        let t = Instant::now();
        let global = pre_aggregate(&uploads).map_err(abort)?;
        let (mut sim, mut knowledge) = (None, None);
        let assignment = match self.cfg.strategy {
            Strategy::Distfl => {
                let k = synthesize(&global, &self.extraction_cfg(round)).map_err(abort)?;
                timings.extraction_ms = elapsed_ms(t);
                let t = Instant::now();
                let s = build_sim(&uploads, &k, self.cfg.clustering.symmetrize).map_err(abort)?;
                let a = threshold_cluster(&s, self.cfg.clustering.threshold, self.cfg.clustering.min_gap_fraction);
                timings.clustering_ms = elapsed_ms(t);
                sim = Some(s);
                knowledge = Some(k);
                a
            }
            Strategy::FedavgGlobal => ClusterAssignment::single(self.num_clients(), None),
            Strategy::LocalOnly => ClusterAssignment::singletons(self.num_clients()),
            Strategy::OracleCluster => {
                let keys: Vec<(usize, bool)> = self.shards.iter().map(|s| (s.dist_type, s.is_malicious)).collect();
                ClusterAssignment::from_keys(&keys)
            }
        };

        let t = Instant::now();
        let cluster_models = cluster_aggregate(&uploads, &assignment).map_err(abort)?;
        timings.aggregation_ms = elapsed_ms(t);

        state.cluster_models = cluster_models;
        state.client_cluster = assignment.labels();
        state.prev_global = global;
        state.history.push(assignment.clone());
        state.round += 1;
        Ok(RoundOutcome { round, assignment, uploads, sim, knowledge, timings })
    }

    fn honest_accuracy(&self, model: &ModelParams, members: &[usize]) -> Result<Option<f64>> {
        let honest: Vec<usize> = members.iter().copied().filter(|&i| !self.shards[i].is_malicious).collect();
        if honest.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for &i in &honest {
            total += accuracy(model, &self.test_sets[self.shards[i].dist_type])?;
        }
        Ok(Some(total / honest.len() as f64))
    }

    /// ASR of `model` on the test set of the most common type among the
    /// honest `members` (lowest type on ties).
    fn cluster_asr(&self, model: &ModelParams, members: &[usize], spec: &AsrSpec) -> Result<Option<f64>> {
        let mut counts = vec![0usize; self.test_sets.len()];
        for &i in members.iter().filter(|&&i| !self.shards[i].is_malicious) {
            counts[self.shards[i].dist_type] += 1;
        }
        let Some(t) = (0..counts.len()).filter(|&t| counts[t] > 0).max_by_key(|&t| (counts[t], std::cmp::Reverse(t))) else {
            return Ok(None);
        };
        attack_success_rate(model, &self.test_sets[t], spec).map(Some)
    }

    /// Scores the state right after `outcome`'s round.
    pub fn evaluate(&self, state: &FlState, outcome: &RoundOutcome) -> Result<RoundReport> {
        let n = self.num_clients();
        let client_accuracy = (0..n)
            .map(|i| accuracy(state.client_model(i), &self.test_sets[self.shards[i].dist_type]))
            .collect::<Result<Vec<_>>>()?;
        let type_accuracy: Vec<Option<f64>> = (0..self.test_sets.len())
            .map(|t| {
                let accs: Vec<f64> = (0..n)
                    .filter(|&i| self.shards[i].dist_type == t && !self.shards[i].is_malicious)
                    .map(|i| client_accuracy[i])
                    .collect();
                (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
            })
            .collect();
        let known: Vec<f64> = type_accuracy.iter().flatten().copied().collect();
        let mut mean_accuracy = known.iter().sum::<f64>() / known.len().max(1) as f64;

        let mut clusters = Vec::new();
        for (q, members) in outcome.assignment.clusters.iter().enumerate() {
            let model = &state.cluster_models[q];
            let asr = match &self.asr {
                Some(spec) => self.cluster_asr(model, members, spec)?,
                None => None,
            };
            clusters.push(ClusterMetrics { members: members.clone(), accuracy: self.honest_accuracy(model, members)?, asr });
        }

        let (mut asr, mut normal_cluster) = (None, None);
        if let Some(spec) = &self.asr {
            let honest_count = |m: &Vec<usize>| m.iter().filter(|&&i| !self.shards[i].is_malicious).count();
            let index = (0..clusters.len())
                .max_by_key(|&q| (honest_count(&clusters[q].members), std::cmp::Reverse(q)))
                .expect("at least one cluster");
            let c = &clusters[index];
            if let Some(acc) = c.accuracy {
                normal_cluster = Some(NormalCluster {
                    index,
                    contains_malicious: c.members.iter().any(|&i| self.shards[i].is_malicious),
                    accuracy: acc,
                    asr: c.asr,
                });
            }
            match self.cfg.metrics.evaluate_on {
                EvaluateOn::NormalClusterModel => {
                    if let Some(nc) = &normal_cluster {
                        mean_accuracy = nc.accuracy;
                        asr = nc.asr;
                    }
                }
                EvaluateOn::PerClientModel => {
                    let honest: Vec<usize> = (0..n).filter(|&i| !self.shards[i].is_malicious).collect();
                    let mut total = 0.0;
                    for &i in &honest {
                        total += attack_success_rate(state.client_model(i), &self.test_sets[self.shards[i].dist_type], spec)?;
                    }
                    asr = (!honest.is_empty()).then(|| total / honest.len() as f64);
                }
            }
        }

        let pred = outcome.assignment.labels();
        let truth = self.truth_labels();
        let refs: Vec<&ModelParams> = outcome.uploads.iter().collect();
        let weight_divergence = WeightDivergence {
            all: summarize_pairs(&refs, |_, _| true)?,
            within_cluster: summarize_pairs(&refs, |i, j| pred[i] == pred[j])?,
            across_clusters: summarize_pairs(&refs, |i, j| pred[i] != pred[j])?,
        };

        Ok(RoundReport {
            round: outcome.round,
            strategy: self.cfg.strategy,
            client_accuracy,
            type_accuracy,
            mean_accuracy,
            asr,
            assignment: outcome.assignment.clone(),
            cluster_recovery: cluster_recovery(&pred, &truth)?,
            exact_recovery: same_partition(&pred, &truth),
            clusters,
            normal_cluster,
            weight_divergence,
            synthesis: outcome
                .knowledge
                .as_ref()
                .map(|k| SynthesisSummary { initial_loss: k.initial_loss, final_loss: k.final_loss }),
        })
    }

    /// Runs the remaining rounds from `state`, evaluating after each.
    pub fn run_from(&self, mut state: FlState) -> Result<ExperimentOutput> {
        let mut rounds = Vec::new();
        let mut sims = Vec::new();
        let mut timings = Vec::new();
        while state.round < self.cfg.rounds {
            let mut outcome = self.run_round(&mut state)?;
            let t = Instant::now();
            rounds.push(self.evaluate(&state, &outcome)?);
            outcome.timings.evaluation_ms = elapsed_ms(t);
            sims.push(outcome.sim.take());
            timings.push(outcome.timings);
        }
        Ok(ExperimentOutput { report: ExperimentReport { config: self.cfg.clone(), rounds }, sims, timings, final_state: state })
    }

    pub fn run(&self) -> Result<ExperimentOutput> {
        self.run_from(self.initial_state()?)
    }
}

/// Generates the data and runs every configured round.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<ExperimentOutput> {
    Experiment::new(cfg)?.run()
}
