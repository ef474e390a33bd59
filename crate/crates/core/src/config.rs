//! Experiment configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::clustering::DEFAULT_MIN_GAP_FRACTION;
use crate::dp::DpConfig;
use crate::error::{invalid, Result};
use crate::extraction::ExtractionConfig;
use crate::metrics::MetricsConfig;
use crate::nn::TrainConfig;
use crate::rng::derive_seed;
use crate::scenario::ScenarioConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Extraction, similarity clustering, per-cluster averaging.
    #[default]
    Distfl,
    /// One global average.
    FedavgGlobal,
    /// No aggregation; every client keeps its own model.
    LocalOnly,
    /// Per-cluster averaging on the ground-truth grouping.
    OracleCluster,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Distfl => "distfl",
            Strategy::FedavgGlobal => "fedavg_global",
            Strategy::LocalOnly => "local_only",
            Strategy::OracleCluster => "oracle_cluster",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths of the hidden Linear → BatchNorm → ReLU blocks.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![32, 16] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    /// Fixed threshold; detected from the largest gap when absent.
    #[serde(with = "crate::io::extended_f64::option", skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub symmetrize: bool,
    /// Smallest share of the divergence range the largest gap must span
    /// before the detected threshold splits the clients; `0` always splits.
    /// Around `0.2` keeps a single well-mixed population together.
    pub min_gap_fraction: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig { threshold: None, symmetrize: true, min_gap_fraction: DEFAULT_MIN_GAP_FRACTION }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub rounds: usize,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub attack: AttackConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpConfig>,
    pub train: TrainConfig,
    pub extraction: ExtractionConfig,
    pub model: ModelConfig,
    pub clustering: ClusteringConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Distfl,
            rounds: 50,
            seed: 0,
            scenario: ScenarioConfig::default(),
            attack: AttackConfig::default(),
            dp: None,
            train: TrainConfig::default(),
            extraction: ExtractionConfig::default(),
            model: ModelConfig::default(),
            clustering: ClusteringConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    /// Fills the data and synthesis seeds from the top-level seed where they
    /// were not given explicitly.
    pub fn resolved(mut self) -> Self {
        self.scenario.seed.get_or_insert(derive_seed(self.seed, 1));
        self.extraction.seed.get_or_insert(derive_seed(self.seed, 2));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds must be at least 1"));
        }
        self.scenario.validate()?;
        let n = self.scenario.num_clients();
        self.attack.validate(n, self.scenario.num_classes)?;
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        self.train.validate()?;
        if self.train.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2 for batch statistics"));
        }
        self.extraction.validate()?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden needs at least one positive width"));
        }
        if !(0.0..=1.0).contains(&self.clustering.min_gap_fraction) {
            return Err(invalid("clustering.min_gap_fraction must lie in [0, 1]"));
        }
        if let Some(t) = self.clustering.threshold {
            if t.is_nan() {
                return Err(invalid("clustering.threshold must be a number"));
            }
        }
        if self.attack.is_active() {
            let spec = self.metrics.asr_spec(&self.attack.flip_map)?;
            if spec.targets.keys().chain(spec.targets.values()).any(|&c| c >= self.scenario.num_classes) {
                return Err(invalid("ASR classes outside label range"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackKind;
    use crate::scenario::ScenarioKind;

    #[test]
    fn full_file() {
        let text = r#"
            strategy = "fedavg_global"
            rounds = 3
            seed = 9

            [scenario]
            scenario = "environment_shift"
            num_types = 2
            clients_per_type = 3
            samples_per_client = 40
            num_classes = 4
            feature_dim = 6
            class_separation = 3.5
            shift_magnitude = 2.0

            [attack]
            kind = "label_flip"
            flip_map = [[0, 1], [1, 0]]
            attacker_ids = [0, 4]

            [dp]
            epsilon = inf
            clip_norm = 2.0

            [train]
            learning_rate = 0.1
            momentum = 0.5
            local_epochs = 2
            batch_size = 8

            [extraction]
            z = 32
            extract_ratio = 25
            synth_steps = 10
            synth_lr = 0.2
            synth_batch = 32

            [clustering]
            threshold = 1.5
            symmetrize = false
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.strategy, Strategy::FedavgGlobal);
        assert_eq!(cfg.scenario.scenario, ScenarioKind::EnvironmentShift);
        assert_eq!(cfg.attack.kind, AttackKind::LabelFlip);
        assert_eq!(cfg.attack.flip_map, vec![(0, 1), (1, 0)]);
        assert!(cfg.dp.as_ref().unwrap().epsilon.is_infinite());
        assert_eq!(cfg.dp.as_ref().unwrap().delta, 1e-5);
        assert_eq!(cfg.extraction.extract_ratio, 25.0);
        assert_eq!(cfg.clustering.threshold, Some(1.5));
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn defaults_mirror_published_setup() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.train.local_epochs, 5);
        assert_eq!(cfg.rounds, 50);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.extraction.z, 200);
        assert_eq!(cfg.extraction.extract_ratio, 50.0);
        assert!(cfg.dp.is_none());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("roundz = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nlr = 0.1").is_err());
    }

    #[test]
    fn seeds_resolve_from_top_level() {
        let a = ExperimentConfig { seed: 1, ..Default::default() }.resolved();
        let b = ExperimentConfig { seed: 2, ..Default::default() }.resolved();
        assert_ne!(a.scenario.seed, b.scenario.seed);
        assert_ne!(a.scenario.seed, a.extraction.seed);
        let mut c = ExperimentConfig { seed: 1, ..Default::default() };
        c.scenario.seed = Some(77);
        assert_eq!(c.resolved().scenario.seed, Some(77));
    }

    #[test]
    fn invalid_values() {
        assert!(ExperimentConfig { rounds: 0, ..Default::default() }.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.attack = AttackConfig { kind: AttackKind::LabelFlip, flip_map: vec![(0, 1)], attacker_ids: vec![99], boost_factor: None };
        assert!(c.validate().is_err());
    }
}
