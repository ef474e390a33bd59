//! Poisoning attacks: label flipping and boosted model replacement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::ModelParams;
use crate::scenario::ClientShard;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    LabelFlip,
    /// Trains on flipped labels, then boosts the upload so that plain
    /// averaging lands on the malicious model.
    ModelReplace,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// `[from, to]` label pairs.
    pub flip_map: Vec<(usize, usize)>,
    pub attacker_ids: Vec<usize>,
    /// Replacement boost; the number of clients when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boost_factor: Option<f64>,
}

pub type FlipMap = BTreeMap<usize, usize>;

impl AttackConfig {
    pub fn is_active(&self) -> bool {
        self.kind != AttackKind::None && !self.attacker_ids.is_empty()
    }

    pub fn flip_map(&self) -> FlipMap {
        self.flip_map.iter().copied().collect()
    }

    pub fn is_attacker(&self, client: usize) -> bool {
        self.is_active() && self.attacker_ids.contains(&client)
    }

    pub fn validate(&self, num_clients: usize, num_classes: usize) -> Result<()> {
        let mut seen = BTreeMap::new();
        for &(from, to) in &self.flip_map {
            if from >= num_classes || to >= num_classes {
                return Err(invalid(format!("flip pair ({from}, {to}) outside {num_classes} classes")));
            }
            if from == to {
                return Err(invalid(format!("flip map has fixed point {from}")));
            }
            if seen.insert(from, to).is_some() {
                return Err(invalid(format!("flip map lists label {from} twice")));
            }
        }
        if let Some(&id) = self.attacker_ids.iter().find(|&&id| id >= num_clients) {
            return Err(invalid(format!("attacker id {id} is not a client (have {num_clients})")));
        }
        if self.kind != AttackKind::None && self.flip_map.is_empty() && !self.attacker_ids.is_empty() {
            return Err(invalid("attacks need a non-empty flip_map"));
        }
        if let Some(b) = self.boost_factor {
            if !(b.is_finite() && b > 0.0) {
                return Err(invalid("boost_factor must be positive"));
            }
        }
        Ok(())
    }
}

/// Relabels per `map`, leaving features untouched, and marks the shard
/// malicious.
pub fn flip_labels(shard: &ClientShard, map: &FlipMap) -> ClientShard {
    let mut out = shard.clone();
    for l in &mut out.labels {
        if let Some(&to) = map.get(l) {
            *l = to;
        }
    }
    out.is_malicious = true;
    out
}

/// `p_rep = boost·(p_mal − p_glob) + p_glob` for every trainable parameter;
/// running statistics are copied from the malicious model.
pub fn model_replacement(malicious: &ModelParams, global_prev: &ModelParams, boost: f64) -> Result<ModelParams> {
    malicious.ensure_same_shape(global_prev)?;
    if boost == 1.0 {
        return Ok(malicious.clone());
    }
    let mut out = malicious.clone();
    for ((dst, mal), glob) in out.trainable_mut().into_iter().zip(malicious.trainable()).zip(global_prev.trainable()) {
        for ((d, &m), &g) in dst.iter_mut().zip(mal).zip(glob) {
            *d = boost * (m - g) + g;
        }
    }
    Ok(out)
}
