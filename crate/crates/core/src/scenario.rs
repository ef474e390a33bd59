//! Synthetic non-iid client data.
//!
//! Class-conditional features are Gaussian blobs `N(mean_c, I)`. Class means
//! sit on scaled orthonormal directions so every pair of classes is exactly
//! `class_separation` apart. Distribution types differ either by owning
//! disjoint class subsets or by an additive shift along a per-type direction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{normal_vec, stream, Purpose, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Each type owns a disjoint, contiguous block of classes.
    CategoryImbalance,
    /// All types share all classes; type `t` is shifted by
    /// `t · shift_magnitude` along its own random unit direction.
    EnvironmentShift,
    /// Every client draws from the same distribution; poisoning comes from
    /// the attack configuration.
    AttackInjection,
    /// Same data as `EnvironmentShift`; differential privacy is configured
    /// separately.
    PrivacyProtection,
    /// Same data as `CategoryImbalance`; meant to be combined with privacy
    /// noise.
    Mixed,
}

impl ScenarioKind {
    fn splits_classes(self) -> bool {
        matches!(self, ScenarioKind::CategoryImbalance | ScenarioKind::Mixed)
    }

    fn shifts_types(self) -> bool {
        matches!(self, ScenarioKind::EnvironmentShift | ScenarioKind::PrivacyProtection)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub num_types: usize,
    pub clients_per_type: usize,
    pub samples_per_client: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub shift_magnitude: f64,
    pub test_samples_per_type: usize,
    /// Data seed. Experiments derive it from their own seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: ScenarioKind::CategoryImbalance,
            num_types: 5,
            clients_per_type: 4,
            samples_per_client: 100,
            num_classes: 10,
            feature_dim: 16,
            class_separation: 4.0,
            shift_magnitude: 4.0,
            test_samples_per_type: 400,
            seed: None,
        }
    }
}

impl ScenarioConfig {
    pub fn num_clients(&self) -> usize {
        self.num_types * self.clients_per_type
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 || self.clients_per_type == 0 {
            return Err(invalid("num_types and clients_per_type must be positive"));
        }
        if self.samples_per_client == 0 || self.test_samples_per_type == 0 {
            return Err(invalid("sample counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be at least 2"));
        }
        if self.feature_dim < self.num_classes {
            return Err(invalid(format!(
                "feature_dim ({}) must be at least num_classes ({}) to place equidistant class means",
                self.feature_dim, self.num_classes
            )));
        }
        if self.scenario.splits_classes() && self.num_classes < self.num_types {
            return Err(invalid(format!(
                "cannot split {} classes into {} non-empty disjoint subsets",
                self.num_classes, self.num_types
            )));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return Err(invalid("class_separation must be finite and non-negative"));
        }
        if !(self.shift_magnitude.is_finite() && self.shift_magnitude >= 0.0) {
            return Err(invalid("shift_magnitude must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One client's private data plus evaluation-only ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShardRepr", into = "ShardRepr")]
pub struct ClientShard {
    pub client_id: usize,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub dist_type: usize,
    pub is_malicious: bool,
}

#[derive(Serialize, Deserialize)]
struct ShardRepr {
    client_id: usize,
    dist_type: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    is_malicious: bool,
}

impl TryFrom<ShardRepr> for ClientShard {
    type Error = Error;
    fn try_from(r: ShardRepr) -> Result<Self> {
        let features = Tensor::from_rows(&r.features)?;
        if features.rows() != r.labels.len() {
            return Err(invalid("features and labels differ in length"));
        }
        Ok(ClientShard { client_id: r.client_id, features, labels: r.labels, dist_type: r.dist_type, is_malicious: r.is_malicious })
    }
}

impl From<ClientShard> for ShardRepr {
    fn from(s: ClientShard) -> Self {
        ShardRepr {
            client_id: s.client_id,
            dist_type: s.dist_type,
            features: s.features.to_rows(),
            labels: s.labels,
            is_malicious: s.is_malicious,
        }
    }
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, input_dim: usize, num_classes: usize) -> Result<()> {
        if self.is_empty() {
            return Err(invalid(format!("client {} has no samples", self.client_id)));
        }
        if self.features.cols() != input_dim || self.features.rows() != self.labels.len() {
            return Err(crate::error::shape(format!("client {} data does not match input_dim {input_dim}", self.client_id)));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(())
    }
}

/// Everything the generator drew before sampling points.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub class_means: Vec<Vec<f64>>,
    /// Classes present in each type, ascending.
    pub type_classes: Vec<Vec<usize>>,
    /// Additive feature offset of each type.
    pub type_shift: Vec<Vec<f64>>,
}

impl GeneratorParams {
    pub fn mean(&self, dist_type: usize, class: usize) -> Vec<f64> {
        self.class_means[class].iter().zip(&self.type_shift[dist_type]).map(|(m, s)| m + s).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub shards: Vec<ClientShard>,
    /// Held-out test set per distribution type, indexed by type.
    pub test_sets: Vec<ClientShard>,
    pub params: GeneratorParams,
}

/// Splits `0..n` into `k` contiguous blocks whose sizes differ by at most one.
pub fn split_even(n: usize, k: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let block = (start..start + len).collect();
            start += len;
            block
        })
        .collect()
}

/// `k` orthonormal vectors in `R^d` (Gram-Schmidt on Gaussian draws).
fn orthonormal(rng: &mut Stream, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = normal_vec(rng, d);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn unit(rng: &mut Stream, d: usize) -> Vec<f64> {
    orthonormal(rng, 1, d).remove(0)
}

pub fn generator_params(cfg: &ScenarioConfig) -> Result<GeneratorParams> {
    cfg.validate()?;
    let seed = cfg.seed.unwrap_or(0);
    let mut rng = stream(seed, 0, 0, Purpose::Geometry);
    let scale = cfg.class_separation / std::f64::consts::SQRT_2;
    let class_means = orthonormal(&mut rng, cfg.num_classes, cfg.feature_dim)
        .into_iter()
        .map(|u| u.into_iter().map(|x| x * scale).collect())
        .collect();
    let type_classes = if cfg.scenario.splits_classes() {
        split_even(cfg.num_classes, cfg.num_types)
    } else {
        vec![(0..cfg.num_classes).collect(); cfg.num_types]
    };
    let type_shift = (0..cfg.num_types)
        .map(|t| {
            let dir = unit(&mut rng, cfg.feature_dim);
            if cfg.scenario.shifts_types() {
                dir.into_iter().map(|x| x * t as f64 * cfg.shift_magnitude).collect()
            } else {
                vec![0.0; cfg.feature_dim]
            }
        })
        .collect();
    Ok(GeneratorParams { class_means, type_classes, type_shift })
}

fn sample(params: &GeneratorParams, dist_type: usize, n: usize, rng: &mut Stream) -> (Tensor, Vec<usize>) {
    let classes = &params.type_classes[dist_type];
    let d = params.class_means[0].len();
    let means: Vec<Vec<f64>> = classes.iter().map(|&c| params.mean(dist_type, c)).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes.len();
        labels.push(classes[k]);
        for (&m, e) in means[k].iter().zip(normal_vec(rng, d)) {
            data.push(m + e);
        }
    }
    (Tensor::from_parts_unchecked(vec![n, d], data), labels)
}

/// Generates every client shard and one test set per type. Client ids run
/// type by type: client `t · clients_per_type + j` has type `t`. Labels
/// within a shard cycle through the type's classes.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    let params = generator_params(cfg)?;
    let seed = cfg.seed.unwrap_or(0);
    let mut shards = Vec::with_capacity(cfg.num_clients());
    for t in 0..cfg.num_types {
        for j in 0..cfg.clients_per_type {
            let client_id = t * cfg.clients_per_type + j;
            let mut rng = stream(seed, client_id as u64, 0, Purpose::Data);
            let (features, labels) = sample(&params, t, cfg.samples_per_client, &mut rng);
            shards.push(ClientShard { client_id, features, labels, dist_type: t, is_malicious: false });
        }
    }
    let test_sets = (0..cfg.num_types)
        .map(|t| {
            let mut rng = stream(seed, t as u64, 0, Purpose::Test);
            let (features, labels) = sample(&params, t, cfg.test_samples_per_type, &mut rng);
            ClientShard { client_id: t, features, labels, dist_type: t, is_malicious: false }
        })
        .collect();
    Ok(Scenario { shards, test_sets, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn cfg(kind: ScenarioKind) -> ScenarioConfig {
        ScenarioConfig { scenario: kind, samples_per_client: 20, test_samples_per_type: 30, seed: Some(3), ..Default::default() }
    }

    fn label_set(s: &ClientShard) -> BTreeSet<usize> {
        s.labels.iter().copied().collect()
    }

    #[test]
    fn category_imbalance_pairs() {
        let sc = generate_scenario(&cfg(ScenarioKind::CategoryImbalance)).unwrap();
        assert_eq!(sc.shards.len(), 20);
        for s in &sc.shards {
            let t = s.dist_type;
            assert_eq!(label_set(s), BTreeSet::from([2 * t, 2 * t + 1]));
            assert_eq!(s.client_id / 4, t);
        }
    }

    #[test]
    fn split_even_sizes() {
        assert_eq!(split_even(7, 3), vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
    }

    #[test]
    fn class_means_are_equidistant() {
        let p = generator_params(&cfg(ScenarioKind::AttackInjection)).unwrap();
        for a in 0..10 {
            for b in a + 1..10 {
                let d: f64 = p.class_means[a].iter().zip(&p.class_means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - 4.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn environment_shift_is_exact() {
        let p = generator_params(&cfg(ScenarioKind::EnvironmentShift)).unwrap();
        for t in 0..5 {
            let norm: f64 = p.type_shift[t].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 4.0 * t as f64).abs() < 1e-9);
            for c in 0..10 {
                let diff: Vec<f64> = p.mean(t, c).iter().zip(p.mean(0, c)).map(|(a, b)| a - b).collect();
                for (x, y) in diff.iter().zip(&p.type_shift[t]) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn too_few_classes_for_types() {
        let c = ScenarioConfig { num_classes: 3, feature_dim: 4, ..cfg(ScenarioKind::CategoryImbalance) };
        assert!(generate_scenario(&c).is_err());
        let c = ScenarioConfig { num_classes: 3, feature_dim: 4, ..cfg(ScenarioKind::EnvironmentShift) };
        assert!(generate_scenario(&c).is_ok());
    }

    #[test]
    fn deterministic() {
        let a = generate_scenario(&cfg(ScenarioKind::Mixed)).unwrap();
        let b = generate_scenario(&cfg(ScenarioKind::Mixed)).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&ScenarioConfig { seed: Some(4), ..cfg(ScenarioKind::Mixed) }).unwrap();
        assert_ne!(a.shards, c.shards);
    }

    #[test]
    fn shard_json_round_trip() {
        let sc = generate_scenario(&cfg(ScenarioKind::EnvironmentShift)).unwrap();
        let text = crate::io::to_json_string(&sc.shards[3]).unwrap();
        assert!(text.contains("\"client_id\":3"));
        let back: ClientShard = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sc.shards[3]);
    }
}
