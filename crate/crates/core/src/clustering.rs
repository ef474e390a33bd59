//! Response vectors, KL similarity matrix and greedy threshold clustering.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::extraction::KnowledgeSet;
use crate::nn::ModelParams;

/// Probabilities are clamped to at least this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Concatenated eval-mode softmax outputs of one model over all knowledge
/// items; `z` blocks of `classes` entries each.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseVector {
    pub client_id: usize,
    pub classes: usize,
    pub blocks: Vec<f64>,
}

impl ResponseVector {
    /// Builds a response vector from raw probabilities, clamping every entry
    /// to at least [`PROB_FLOOR`] and renormalizing each block.
    pub fn from_probs(client_id: usize, classes: usize, mut blocks: Vec<f64>) -> Result<Self> {
        if classes == 0 || blocks.len() % classes != 0 {
            return Err(shape(format!("{} probabilities do not split into blocks of {classes}", blocks.len())));
        }
        clamp_blocks(&mut blocks, classes);
        Ok(ResponseVector { client_id, classes, blocks })
    }

    pub fn z(&self) -> usize {
        self.blocks.len() / self.classes
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.blocks[i * self.classes..(i + 1) * self.classes]
    }
}

/// Clamps every entry to at least [`PROB_FLOOR`] and renormalizes each block.
fn clamp_blocks(probs: &mut [f64], classes: usize) {
    for block in probs.chunks_mut(classes) {
        block.iter_mut().for_each(|p| *p = p.max(PROB_FLOOR));
        let s: f64 = block.iter().sum();
        block.iter_mut().for_each(|p| *p /= s);
    }
}

pub fn response_vector(client_id: usize, model: &ModelParams, knowledge: &KnowledgeSet) -> Result<ResponseVector> {
    if knowledge.items.cols() != model.input_dim {
        return Err(shape(format!(
            "knowledge items have {} features, model expects {}",
            knowledge.items.cols(),
            model.input_dim
        )));
    }
    ResponseVector::from_probs(client_id, model.num_classes, model.forward_eval(&knowledge.items)?.probs.into_data())
}

/// `Σ_blocks Σ_j p_j (ln p_j − ln q_j)`.
pub fn kl_divergence(p: &ResponseVector, q: &ResponseVector) -> Result<f64> {
    if p.blocks.len() != q.blocks.len() || p.classes != q.classes {
        return Err(shape("response vectors differ in length"));
    }
    Ok(kl_slices(&p.blocks, &q.blocks))
}

fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a == b { 0.0 } else { a * (a.ln() - b.ln()) }).sum()
}

/// Pairwise divergences. `raw` is the one-directional `KL(V_p‖V_q)`; `div`
/// is what clustering consumes (the symmetrized mean when requested).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub div: Vec<Vec<f64>>,
    pub raw: Vec<Vec<f64>>,
    pub symmetrized: bool,
}

impl SimilarityMatrix {
    pub fn from_raw(raw: Vec<Vec<f64>>, symmetrize: bool) -> Result<Self> {
        let n = raw.len();
        if raw.iter().any(|r| r.len() != n) {
            return Err(shape("similarity matrix must be square"));
        }
        if raw.iter().flatten().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid("divergences must be finite and non-negative"));
        }
        let div = if symmetrize {
            (0..n).map(|p| (0..n).map(|q| if p == q { 0.0 } else { 0.5 * (raw[p][q] + raw[q][p]) }).collect()).collect()
        } else {
            let mut d = raw.clone();
            (0..n).for_each(|p| d[p][p] = 0.0);
            d
        };
        Ok(SimilarityMatrix { n, div, raw, symmetrized: symmetrize })
    }
}

pub fn build_sim(models: &[ModelParams], knowledge: &KnowledgeSet, symmetrize: bool) -> Result<SimilarityMatrix> {
    if models.is_empty() {
        return Err(invalid("need at least one model"));
    }
    let vectors = models.iter().enumerate().map(|(i, m)| response_vector(i, m, knowledge)).collect::<Result<Vec<_>>>()?;
    let mut raw = vec![vec![0.0; models.len()]; models.len()];
    for (p, vp) in vectors.iter().enumerate() {
        for (q, vq) in vectors.iter().enumerate() {
            if p != q {
                // clamping error can leave tiny negatives for near-equal vectors
                raw[p][q] = kl_divergence(vp, vq)?.max(0.0);
            }
        }
    }
    SimilarityMatrix::from_raw(raw, symmetrize)
}

/// A partition of client indices, each cluster ascending, clusters ordered by
/// their lowest member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Threshold used by threshold clustering; absent for partitions built
    /// another way.
    #[serde(with = "crate::io::extended_f64::option")]
    pub threshold: Option<f64>,
    pub clusters: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    pub fn single(n: usize, threshold: Option<f64>) -> Self {
        ClusterAssignment { threshold, clusters: vec![(0..n).collect()] }
    }

    pub fn singletons(n: usize) -> Self {
        ClusterAssignment { threshold: None, clusters: (0..n).map(|i| vec![i]).collect() }
    }

    /// Groups clients by key, in order of first appearance.
    pub fn from_keys<K: PartialEq>(keys: &[K]) -> Self {
        let mut seen: Vec<&K> = Vec::new();
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            match seen.iter().position(|s| *s == k) {
                Some(c) => clusters[c].push(i),
                None => {
                    seen.push(k);
                    clusters.push(vec![i]);
                }
            }
        }
        ClusterAssignment { threshold: None, clusters }
    }

    pub fn num_clients(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Cluster index of every client.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.num_clients()];
        for (c, members) in self.clusters.iter().enumerate() {
            for &i in members {
                out[i] = c;
            }
        }
        out
    }

    /// Checks that the clusters are non-empty, disjoint and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for members in &self.clusters {
            if members.is_empty() {
                return Err(invalid("empty cluster"));
            }
            for &i in members {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(invalid(format!("client {i} missing from range or assigned twice")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("assignment does not cover every client"));
        }
        Ok(())
    }
}

/// Default for [`auto_threshold`]'s significance test: off, so any spread
/// is split at its largest gap.
pub const DEFAULT_MIN_GAP_FRACTION: f64 = 0.0;

/// Midpoint of the largest gap between consecutive sorted off-diagonal
/// entries.
///
/// `None` (nothing to split) when `n ≤ 1`, when every entry is within 1e-9 of
/// the others, or when the largest gap is narrower than `min_gap_fraction` of
/// the entries' full range. A homogeneous population spreads its divergences
/// evenly, so its largest gap is a small share of the range; `0` disables the
/// test.
pub fn auto_threshold(sim: &SimilarityMatrix, min_gap_fraction: f64) -> Option<f64> {
    let mut values: Vec<f64> =
        (0..sim.n).flat_map(|p| (0..sim.n).filter(move |&q| q != p).map(move |q| (p, q))).map(|(p, q)| sim.div[p][q]).collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let range = values[values.len() - 1] - values[0];
    if range <= 1e-9 {
        return None;
    }
    let (mut gap, mut at) = (f64::NEG_INFINITY, 0);
    for i in 1..values.len() {
        let g = values[i] - values[i - 1];
        if g > gap {
            gap = g;
            at = i;
        }
    }
    if gap < min_gap_fraction * range {
        return None;
    }
    Some(0.5 * (values[at - 1] + values[at]))
}

/// Greedy partition: the lowest unassigned client anchors a cluster that
/// takes every unassigned `q` with `div[anchor][q] ≤ threshold`. Without a
/// threshold one is detected by [`auto_threshold`]; if none is found every
/// client lands in one cluster.
pub fn threshold_cluster(sim: &SimilarityMatrix, threshold: Option<f64>, min_gap_fraction: f64) -> ClusterAssignment {
    let threshold = match threshold.or_else(|| auto_threshold(sim, min_gap_fraction)) {
        Some(t) => t,
        None => return ClusterAssignment::single(sim.n, Some(f64::INFINITY)),
    };
    let mut assigned = vec![false; sim.n];
    let mut clusters = Vec::new();
    for anchor in 0..sim.n {
        if assigned[anchor] {
            continue;
        }
        let members: Vec<usize> =
            (0..sim.n).filter(|&q| !assigned[q] && (q == anchor || sim.div[anchor][q] <= threshold)).collect();
        members.iter().for_each(|&q| assigned[q] = true);
        clusters.push(members);
    }
    ClusterAssignment { threshold: Some(threshold), clusters }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::rng::{stream, Purpose};
    use crate::Tensor;

    fn rv(blocks: Vec<f64>, classes: usize) -> ResponseVector {
        ResponseVector { client_id: 0, classes, blocks }
    }

    fn knowledge(z: usize, d: usize) -> KnowledgeSet {
        let mut rng = stream(1, 0, 0, Purpose::Synth);
        KnowledgeSet {
            items: Tensor::new(vec![z, d], crate::rng::normal_vec(&mut rng, z * d)).unwrap(),
            source_model_hash: String::new(),
            initial_loss: 0.0,
            final_loss: 0.0,
        }
    }

    fn model(seed: u64) -> ModelParams {
        ModelParams::mlp_bn(3, &[6, 5], 4, &mut stream(seed, 0, 0, Purpose::Init)).unwrap()
    }

    #[test]
    fn response_shape_and_normalization() {
        let v = response_vector(0, &model(1), &knowledge(3, 3)).unwrap();
        assert_eq!(v.blocks.len(), 12);
        for i in 0..3 {
            assert!((v.block(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_uniform_blocks() {
        let mut m = model(2);
        for l in &mut m.layers {
            if let Layer::Linear(lin) = l {
                lin.weight.fill(0.0);
                lin.bias.fill(0.0);
            }
        }
        let v = response_vector(0, &m, &knowledge(5, 3)).unwrap();
        assert!(v.blocks.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(response_vector(0, &model(1), &knowledge(3, 2)).is_err());
    }

    #[test]
    fn kl_hand_values() {
        let mut p = vec![1.0, 0.0];
        clamp_blocks(&mut p, 2);
        let d = kl_divergence(&rv(p, 2), &rv(vec![0.5, 0.5], 2)).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-6);
        let d = kl_divergence(&rv(vec![0.25, 0.75], 2), &rv(vec![0.75, 0.25], 2)).unwrap();
        assert!((d - 0.5 * 3f64.ln()).abs() < 1e-12);
        let v = rv(vec![0.1, 0.2, 0.7], 3);
        assert_eq!(kl_divergence(&v, &v).unwrap(), 0.0);
        assert!(kl_divergence(&v, &rv(vec![0.5, 0.5], 2)).is_err());
    }

    #[test]
    fn sim_of_identical_models_is_zero() {
        let m = model(3);
        let sim = build_sim(&[m.clone(), m.clone(), m], &knowledge(4, 3), true).unwrap();
        assert!(sim.div.iter().flatten().all(|&x| x == 0.0));
        assert_eq!(threshold_cluster(&sim, None, DEFAULT_MIN_GAP_FRACTION).clusters, vec![vec![0, 1, 2]]);
        let one = build_sim(&[model(1)], &knowledge(4, 3), true).unwrap();
        assert_eq!(one.div, vec![vec![0.0]]);
        assert_eq!(threshold_cluster(&one, None, DEFAULT_MIN_GAP_FRACTION).clusters, vec![vec![0]]);
    }

    #[test]
    fn sim_symmetry() {
        let sim = build_sim(&[model(1), model(2), model(3)], &knowledge(6, 3), true).unwrap();
        for p in 0..3 {
            assert_eq!(sim.div[p][p], 0.0);
            for q in 0..3 {
                assert!((sim.div[p][q] - sim.div[q][p]).abs() <= 1e-12);
                assert!(((sim.raw[p][q] + sim.raw[q][p]) / 2.0 - sim.div[p][q]).abs() <= 1e-12 || p == q);
            }
        }
    }

    fn planted(within: f64, cross: f64, blocks: &[usize]) -> SimilarityMatrix {
        let n = blocks.len();
        let raw = (0..n)
            .map(|p| (0..n).map(|q| if p == q { 0.0 } else if blocks[p] == blocks[q] { within } else { cross }).collect())
            .collect();
        SimilarityMatrix::from_raw(raw, true).unwrap()
    }

    #[test]
    fn planted_blocks_recovered() {
        let sim = planted(0.01, 5.0, &[0, 1, 0, 2, 1, 2]);
        let a = threshold_cluster(&sim, None, DEFAULT_MIN_GAP_FRACTION);
        assert_eq!(a.clusters, vec![vec![0, 2], vec![1, 4], vec![3, 5]]);
        assert!((a.threshold.unwrap() - 2.505).abs() < 1e-12);
    }

    #[test]
    fn explicit_thresholds() {
        let sim = planted(0.01, 5.0, &[0, 1, 0, 2]);
        assert_eq!(threshold_cluster(&sim, Some(f64::INFINITY), DEFAULT_MIN_GAP_FRACTION).clusters, vec![vec![0, 1, 2, 3]]);
        assert_eq!(threshold_cluster(&sim, Some(0.001), DEFAULT_MIN_GAP_FRACTION).clusters.len(), 4);
    }

    #[test]
    fn flat_matrix_is_one_cluster() {
        let sim = planted(1e-11, 2e-11, &[0, 1, 0]);
        let a = threshold_cluster(&sim, None, DEFAULT_MIN_GAP_FRACTION);
        assert_eq!(a.clusters, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn even_spread_needs_a_significant_gap() {
        // off-diagonal entries 1, 2, ..., 6: largest gap 1 is a fifth of the range
        let raw = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 3.0], vec![2.0, 3.0, 0.0]];
        let sim = SimilarityMatrix::from_raw(raw, true).unwrap();
        assert_eq!(auto_threshold(&sim, 0.6), None);
        assert_eq!(threshold_cluster(&sim, None, 0.6).clusters, vec![vec![0, 1, 2]]);
        assert_eq!(auto_threshold(&sim, 0.0), Some(1.5));
        assert_eq!(threshold_cluster(&sim, None, 0.0).clusters, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn from_keys_and_labels() {
        let a = ClusterAssignment::from_keys(&[(1, false), (0, false), (1, false), (0, true)]);
        assert_eq!(a.clusters, vec![vec![0, 2], vec![1], vec![3]]);
        assert_eq!(a.labels(), vec![0, 1, 0, 2]);
        a.validate(4).unwrap();
        assert!(ClusterAssignment { threshold: None, clusters: vec![vec![0], vec![0, 1]] }.validate(2).is_err());
    }

    #[test]
    fn assignment_json() {
        let a = ClusterAssignment::single(2, Some(f64::INFINITY));
        let s = crate::io::to_json_string(&a).unwrap();
        assert_eq!(s, r#"{"threshold":"inf","clusters":[[0,1]]}"#);
        assert_eq!(serde_json::from_str::<ClusterAssignment>(&s).unwrap(), a);
        let b = ClusterAssignment::singletons(2);
        let s = crate::io::to_json_string(&b).unwrap();
        assert_eq!(s, r#"{"threshold":null,"clusters":[[0],[1]]}"#);
        assert_eq!(serde_json::from_str::<ClusterAssignment>(&s).unwrap(), b);
    }
}
