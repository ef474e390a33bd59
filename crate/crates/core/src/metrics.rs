//! Accuracy, attack success rate, cluster recovery and weight divergence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::ModelParams;
use crate::scenario::ClientShard;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluateOn {
    /// Score the aggregate of the cluster holding the most honest clients.
    #[default]
    NormalClusterModel,
    /// Average over honest clients, each scored with its own model.
    PerClientModel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Defaults to the attack's flip-map domain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr_source_classes: Option<Vec<usize>>,
    /// `[source, target]` pairs; defaults to the attack's flip map.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr_target_map: Option<Vec<(usize, usize)>>,
    pub evaluate_on: EvaluateOn,
}

/// Source classes with their attack targets, resolved against the attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrSpec {
    pub targets: BTreeMap<usize, usize>,
}

impl MetricsConfig {
    pub fn asr_spec(&self, flip_map: &[(usize, usize)]) -> Result<AsrSpec> {
        let map: BTreeMap<usize, usize> = self.asr_target_map.as_deref().unwrap_or(flip_map).iter().copied().collect();
        let targets = match &self.asr_source_classes {
            Some(sources) => sources
                .iter()
                .map(|s| map.get(s).map(|&t| (*s, t)).ok_or_else(|| invalid(format!("ASR source class {s} has no target"))))
                .collect::<Result<_>>()?,
            None => map,
        };
        Ok(AsrSpec { targets })
    }
}

/// Fraction of argmax-correct predictions (ties go to the lowest class).
pub fn accuracy(model: &ModelParams, test: &ClientShard) -> Result<f64> {
    if test.is_empty() {
        return Err(invalid("empty test set"));
    }
    let pred = model.predict_classes(&test.features)?;
    let hits = pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Per source class, the fraction of its samples predicted as its target;
/// averaged over source classes.
pub fn attack_success_rate(model: &ModelParams, test: &ClientShard, spec: &AsrSpec) -> Result<f64> {
    if spec.targets.is_empty() {
        return Err(invalid("no ASR source classes"));
    }
    let pred = model.predict_classes(&test.features)?;
    let mut total = 0.0;
    for (&source, &target) in &spec.targets {
        let (mut n, mut hit) = (0usize, 0usize);
        for (p, &y) in pred.iter().zip(&test.labels) {
            if y == source {
                n += 1;
                hit += usize::from(*p == target);
            }
        }
        if n == 0 {
            return Err(invalid(format!("test set has no samples of source class {source}")));
        }
        total += hit as f64 / n as f64;
    }
    Ok(total / spec.targets.len() as f64)
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand Index between two labelings.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid("labelings differ in length"));
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &b) in pred.iter().zip(truth) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sum_rows: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sum_cols: f64 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(pred.len());
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max = 0.5 * (sum_rows + sum_cols);
    if max == expected {
        // both partitions trivial in the same way (or fewer than two items)
        return Ok(if sum_rows == sum_cols { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// `max(0, ARI)` of a predicted partition against ground truth.
pub fn cluster_recovery(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(adjusted_rand_index(pred, truth)?.max(0.0))
}

/// True when the two labelings induce the same partition.
pub fn same_partition(pred: &[usize], truth: &[usize]) -> bool {
    pred.len() == truth.len()
        && (0..pred.len()).all(|i| (0..i).all(|j| (pred[i] == pred[j]) == (truth[i] == truth[j])))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub mean: f64,
    pub max: f64,
    pub pairs: usize,
}

pub fn weight_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mut acc = 0.0;
    for (x, y) in a.trainable().into_iter().zip(b.trainable()) {
        for (p, q) in x.iter().zip(y) {
            acc += (p - q) * (p - q);
        }
    }
    Ok(acc.sqrt())
}

/// Mean and max pairwise L2 distance over trainable parameters.
pub fn weight_divergence(models: &[&ModelParams]) -> Result<DivergenceSummary> {
    if models.len() < 2 {
        return Err(invalid("weight divergence needs at least two models"));
    }
    summarize_pairs(models, |_, _| true)?.ok_or_else(|| invalid("no pairs"))
}

/// Summary over the pairs `(i, j)`, `i < j`, accepted by `keep`; `None` if
/// no pair qualifies.
pub fn summarize_pairs(models: &[&ModelParams], keep: impl Fn(usize, usize) -> bool) -> Result<Option<DivergenceSummary>> {
    let (mut sum, mut max, mut pairs) = (0.0, 0.0f64, 0);
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            if keep(i, j) {
                let d = weight_distance(models[i], models[j])?;
                sum += d;
                max = max.max(d);
                pairs += 1;
            }
        }
    }
    Ok((pairs > 0).then(|| DivergenceSummary { mean: sum / pairs as f64, max, pairs }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::rng::{stream, Purpose};
    use crate::Tensor;
    use rand::Rng;

    /// A model whose logits are `bias` regardless of input.
    fn constant(bias: Vec<f64>) -> ModelParams {
        let c = bias.len();
        let mut m = ModelParams::mlp_bn(2, &[3], c, &mut stream(0, 0, 0, Purpose::Init)).unwrap();
        if let Some(Layer::Linear(l)) = m.layers.last_mut() {
            l.weight.fill(0.0);
            l.bias = bias;
        }
        m
    }

    fn test_set(labels: Vec<usize>) -> ClientShard {
        let n = labels.len();
        ClientShard {
            client_id: 0,
            features: Tensor::new(vec![n, 2], (0..2 * n).map(|i| (i as f64).sin()).collect()).unwrap(),
            labels,
            dist_type: 0,
            is_malicious: false,
        }
    }

    #[test]
    fn accuracy_constant_model() {
        let m = constant(vec![1.0, 0.0, 0.0]);
        assert_eq!(accuracy(&m, &test_set(vec![0, 0, 0])).unwrap(), 1.0);
        assert_eq!(accuracy(&m, &test_set(vec![0, 1, 0, 1])).unwrap(), 0.5);
        let tie = constant(vec![0.0, 0.0, 0.0]);
        assert_eq!(accuracy(&tie, &test_set(vec![0, 1, 2, 0])).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_matches_per_sample_argmax() {
        let mut rng = stream(4, 0, 0, Purpose::Test);
        let m = ModelParams::mlp_bn(2, &[5], 3, &mut rng).unwrap();
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let t = test_set(labels);
        let mut hits = 0;
        for i in 0..t.len() {
            let row = Tensor::new(vec![1, 2], t.features.row(i).to_vec()).unwrap();
            let p = m.forward_eval(&row).unwrap().probs.into_data();
            let arg = (0..3).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            hits += usize::from(arg == t.labels[i]);
        }
        let acc = accuracy(&m, &t).unwrap();
        assert_eq!(acc, hits as f64 / 50.0);
        assert!((acc * 50.0 - (acc * 50.0).round()).abs() < 1e-9);
    }

    #[test]
    fn asr_examples() {
        let spec = AsrSpec { targets: BTreeMap::from([(0, 2), (1, 2)]) };
        let t = test_set(vec![0, 1, 0, 1, 2]);
        assert_eq!(attack_success_rate(&constant(vec![0.0, 0.0, 1.0]), &t, &spec).unwrap(), 1.0);
        assert_eq!(attack_success_rate(&constant(vec![1.0, 0.0, 0.0]), &t, &spec).unwrap(), 0.0);
        let missing = AsrSpec { targets: BTreeMap::from([(3, 2)]) };
        assert!(attack_success_rate(&constant(vec![0.0; 4]), &test_set(vec![0, 1]), &missing).is_err());
    }

    #[test]
    fn asr_spec_resolution() {
        let cfg = MetricsConfig::default();
        assert_eq!(cfg.asr_spec(&[(0, 4), (4, 0)]).unwrap().targets, BTreeMap::from([(0, 4), (4, 0)]));
        let cfg = MetricsConfig { asr_source_classes: Some(vec![4]), ..Default::default() };
        assert_eq!(cfg.asr_spec(&[(0, 4), (4, 0)]).unwrap().targets, BTreeMap::from([(4, 0)]));
        let cfg = MetricsConfig { asr_source_classes: Some(vec![1]), ..Default::default() };
        assert!(cfg.asr_spec(&[(0, 4)]).is_err());
    }

    fn brute_force_ari(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let (sa, sb) = (a[i] == a[j], b[i] == b[j]);
                both += f64::from(u8::from(sa && sb));
                in_a += f64::from(u8::from(sa));
                in_b += f64::from(u8::from(sb));
                pairs += 1.0;
            }
        }
        let expected = in_a * in_b / pairs;
        (both - expected) / (0.5 * (in_a + in_b) - expected)
    }

    #[test]
    fn ari_against_pair_counting() {
        let mut rng = stream(8, 0, 0, Purpose::Test);
        for _ in 0..200 {
            let n = rng.random_range(3..25);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let oracle = brute_force_ari(&a, &b);
            if oracle.is_finite() {
                assert!((adjusted_rand_index(&a, &b).unwrap() - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recovery_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(cluster_recovery(&truth, &truth).unwrap(), 1.0);
        assert_eq!(cluster_recovery(&[5, 5, 3, 3, 9, 9], &truth).unwrap(), 1.0);
        assert_eq!(cluster_recovery(&[0; 6], &truth).unwrap(), 0.0);
        assert_eq!(cluster_recovery(&[0; 4], &[1; 4]).unwrap(), 1.0);
        assert!(same_partition(&[5, 5, 3, 3, 9, 9], &truth));
        assert!(!same_partition(&[0, 0, 1, 1, 1, 2], &truth));
    }

    #[test]
    fn divergence_examples() {
        let mut a = constant(vec![0.0, 0.0]);
        for t in a.trainable_mut() {
            t.fill(0.0);
        }
        let s = weight_divergence(&[&a, &a, &a]).unwrap();
        assert_eq!((s.mean, s.max, s.pairs), (0.0, 0.0, 3));
        let mut b = a.clone();
        b.trainable_mut()[0][0] = 3.0;
        let s = weight_divergence(&[&a, &b]).unwrap();
        assert_eq!((s.mean, s.max), (3.0, 3.0));
        assert!(weight_divergence(&[&a]).is_err());
    }
}
