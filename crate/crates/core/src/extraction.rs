//! Server-side distribution knowledge: pre-aggregation, channel selection and
//! input synthesis against BatchNorm running statistics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{bn_match_loss_and_input_grad, ModelParams};
use crate::rng::{normal_vec, stream, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    /// Number of synthesized inputs.
    pub z: usize,
    /// Percentage of BN channels matched per layer, in `(0, 100]`.
    pub extract_ratio: f64,
    pub synth_steps: usize,
    pub synth_lr: f64,
    /// Items per statistics batch. Values `≥ z` optimize the whole set as
    /// one batch; smaller values split it into contiguous chunks.
    pub synth_batch: usize,
    /// Squared instead of plain Euclidean norms in the matching loss.
    pub squared_norm: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            z: 200,
            extract_ratio: 50.0,
            synth_steps: 500,
            synth_lr: 0.1,
            synth_batch: 200,
            squared_norm: false,
            seed: None,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z < 2 {
            return Err(invalid(format!("z = {} but batch variance needs at least 2 items", self.z)));
        }
        if !(self.extract_ratio > 0.0 && self.extract_ratio <= 100.0) {
            return Err(invalid("extract_ratio must lie in (0, 100]"));
        }
        if self.synth_steps == 0 {
            return Err(invalid("synth_steps must be positive"));
        }
        if !(self.synth_lr > 0.0 && self.synth_lr.is_finite()) {
            return Err(invalid("synth_lr must be positive"));
        }
        if self.synth_batch < 2 {
            return Err(invalid("synth_batch must be at least 2"));
        }
        Ok(())
    }

    fn chunks(&self) -> Vec<std::ops::Range<usize>> {
        if self.synth_batch >= self.z {
            return vec![0..self.z];
        }
        let mut out: Vec<std::ops::Range<usize>> =
            (0..self.z).step_by(self.synth_batch).map(|s| s..(s + self.synth_batch).min(self.z)).collect();
        // a trailing single item has no variance; fold it into its neighbour
        if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
            let last = out.pop().unwrap();
            out.last_mut().unwrap().end = last.end;
        }
        out
    }
}

pub const MAX_STEP_HALVINGS: u32 = 30;

/// Synthesized inputs `K_target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KnowledgeRepr", into = "KnowledgeRepr")]
pub struct KnowledgeSet {
    pub items: Tensor,
    pub source_model_hash: String,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeRepr {
    items: Vec<Vec<f64>>,
    final_loss: f64,
    #[serde(default)]
    initial_loss: f64,
    #[serde(default)]
    source_model_hash: String,
}

impl TryFrom<KnowledgeRepr> for KnowledgeSet {
    type Error = Error;
    fn try_from(r: KnowledgeRepr) -> Result<Self> {
        Ok(KnowledgeSet {
            items: Tensor::from_rows(&r.items)?,
            source_model_hash: r.source_model_hash,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
        })
    }
}

impl From<KnowledgeSet> for KnowledgeRepr {
    fn from(k: KnowledgeSet) -> Self {
        KnowledgeRepr {
            items: k.items.to_rows(),
            final_loss: k.final_loss,
            initial_loss: k.initial_loss,
            source_model_hash: k.source_model_hash,
        }
    }
}

impl KnowledgeSet {
    pub fn z(&self) -> usize {
        self.items.rows()
    }
}

/// Selected channel indices per BN layer, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub layers: Vec<Vec<usize>>,
}

/// Unweighted mean of every parameter and running statistic.
pub fn pre_aggregate(models: &[ModelParams]) -> Result<ModelParams> {
    let refs: Vec<&ModelParams> = models.iter().collect();
    ModelParams::average(&refs)
}

/// Per BN layer, the `ceil(E%·c)` channels (at least one) with the largest
/// `|gamma|`; ties go to the lower index.
pub fn select_channels(model: &ModelParams, extract_ratio: f64) -> Result<ChannelSelection> {
    if !(extract_ratio > 0.0 && extract_ratio <= 100.0) {
        return Err(invalid("extract_ratio must lie in (0, 100]"));
    }
    let mut layers = Vec::new();
    for bn in model.bn_layers() {
        let c = bn.channels();
        let keep = (((extract_ratio / 100.0) * c as f64).ceil() as usize).clamp(1, c);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| bn.gamma[b].abs().total_cmp(&bn.gamma[a].abs()).then(a.cmp(&b)));
        let mut chosen = order[..keep].to_vec();
        chosen.sort_unstable();
        layers.push(chosen);
    }
    if layers.is_empty() {
        return Err(Error::NoBatchNorm);
    }
    Ok(ChannelSelection { layers })
}

/// Optimizes `z` standard-normal inputs so that their batch statistics at the
/// selected channels match the model's running statistics.
///
/// Each step moves every item by `synth_lr · b · ∇loss`, where `b` is the
/// size of its statistics batch (the batch statistics are averages, so the
/// raw per-item gradient shrinks as `1/b`). The step follows a cosine decay
/// to zero over `synth_steps`, and the lowest-loss iterate is returned. If an
/// update makes the loss non-finite, the best iterate is restored and the
/// step halved; after [`MAX_STEP_HALVINGS`] such restarts synthesis fails
/// with [`Error::Divergence`].
pub fn synthesize(model: &ModelParams, cfg: &ExtractionConfig) -> Result<KnowledgeSet> {
    synthesize_traced(model, cfg, |_, _| {})
}

/// [`synthesize`] that reports `(step, loss)` before every update and once
/// more after the last one.
pub fn synthesize_traced(model: &ModelParams, cfg: &ExtractionConfig, mut trace: impl FnMut(usize, f64)) -> Result<KnowledgeSet> {
    cfg.validate()?;
    model.validate()?;
    let selection = select_channels(model, cfg.extract_ratio)?;
    let d = model.input_dim;
    let mut rng = stream(cfg.seed.unwrap_or(0), 0, 0, Purpose::Synth);
    let mut items = normal_vec(&mut rng, cfg.z * d);
    let chunks = cfg.chunks();

    let evaluate = |items: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(if want_grad { items.len() } else { 0 });
        for r in &chunks {
            let batch = Tensor::from_parts_unchecked(vec![r.len(), d], items[r.start * d..r.end * d].to_vec());
            let (loss, g) = bn_match_loss_and_input_grad(model, &batch, &selection.layers, cfg.squared_norm)?;
            total += loss;
            if want_grad {
                grad.extend(g.data().iter().map(|x| x * r.len() as f64));
            }
        }
        Ok((total / chunks.len() as f64, grad))
    };

    let finite = |r: Result<(f64, Vec<f64>)>| match r {
        Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => Ok(Some((loss, grad))),
        Ok(_) | Err(Error::NonFinite(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let (initial_loss, _) = finite(evaluate(&items, false))?.ok_or(Error::Divergence { step: 0 })?;
    let mut best = (initial_loss, items.clone());
    let (mut scale, mut halvings) = (1.0, 0);
    let mut step = 0;
    while step <= cfg.synth_steps {
        let Some((loss, grad)) = finite(evaluate(&items, step < cfg.synth_steps))? else {
            halvings += 1;
            if halvings > MAX_STEP_HALVINGS {
                return Err(Error::Divergence { step });
            }
            scale *= 0.5;
            items.clone_from(&best.1);
            continue;
        };
        trace(step, loss);
        if loss < best.0 {
            best = (loss, items.clone());
        }
        if step == cfg.synth_steps {
            break;
        }
        let lr = scale * cfg.synth_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.synth_steps as f64).cos());
        for (x, g) in items.iter_mut().zip(&grad) {
            *x -= lr * g;
        }
        step += 1;
    }
    Ok(KnowledgeSet {
        items: Tensor::new(vec![cfg.z, d], best.1)?,
        source_model_hash: model.fingerprint(),
        initial_loss,
        final_loss: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNormLayer, Layer, LinearLayer};
    use crate::rng::stream;

    fn toy(mean: f64, var: f64) -> ModelParams {
        let mut bn = BatchNormLayer::new(1);
        bn.running_mean = vec![mean];
        bn.running_var = vec![var];
        ModelParams {
            input_dim: 1,
            num_classes: 2,
            layers: vec![
                Layer::Linear(LinearLayer { in_dim: 1, out_dim: 1, weight: vec![1.0], bias: vec![0.0] }),
                Layer::BatchNorm(bn),
                Layer::Relu,
                Layer::Linear(LinearLayer { in_dim: 1, out_dim: 2, weight: vec![1.0, -1.0], bias: vec![0.0, 0.0] }),
            ],
        }
    }

    fn stats(k: &KnowledgeSet) -> (f64, f64) {
        let x = k.items.data();
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
    }

    #[test]
    fn selection_examples() {
        let mut m = toy(0.0, 1.0);
        let mut bn = BatchNormLayer::new(4);
        bn.gamma = vec![0.1, 0.9, 0.5, 0.3];
        m.layers[1] = Layer::BatchNorm(bn);
        assert_eq!(select_channels(&m, 50.0).unwrap().layers, vec![vec![1, 2]]);
        assert_eq!(select_channels(&m, 100.0).unwrap().layers, vec![vec![0, 1, 2, 3]]);
        assert_eq!(select_channels(&m, 1.0).unwrap().layers, vec![vec![1]]);
        let mut bn = BatchNormLayer::new(2);
        bn.gamma = vec![0.5, -0.5];
        m.layers[1] = Layer::BatchNorm(bn);
        assert_eq!(select_channels(&m, 50.0).unwrap().layers, vec![vec![0]]);
    }

    #[test]
    fn selection_needs_bn() {
        let m = ModelParams {
            input_dim: 1,
            num_classes: 2,
            layers: vec![Layer::Linear(LinearLayer { in_dim: 1, out_dim: 2, weight: vec![1.0, 1.0], bias: vec![0.0; 2] })],
        };
        assert!(matches!(select_channels(&m, 50.0), Err(Error::NoBatchNorm)));
    }

    #[test]
    fn pre_aggregate_examples() {
        let a = toy(0.0, 1.0);
        assert_eq!(pre_aggregate(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        let mut b = a.clone();
        if let Layer::Linear(l) = &mut b.layers[0] {
            l.weight = vec![2.0];
        }
        let mut c = a.clone();
        if let Layer::Linear(l) = &mut c.layers[0] {
            l.weight = vec![0.0];
        }
        let avg = pre_aggregate(&[b, c]).unwrap();
        assert_eq!(avg, a);
        assert!(pre_aggregate(&[]).is_err());
    }

    #[test]
    fn synthesis_reaches_unit_statistics() {
        let cfg = ExtractionConfig { z: 64, seed: Some(1), ..Default::default() };
        let k = synthesize(&toy(0.0, 1.0), &cfg).unwrap();
        let (m, v) = stats(&k);
        assert!(m.abs() < 0.05 && (v - 1.0).abs() < 0.05, "mean {m} var {v}");
        assert!(k.final_loss <= k.initial_loss);
    }

    #[test]
    fn synthesis_reaches_shifted_statistics() {
        let cfg = ExtractionConfig { z: 64, seed: Some(2), ..Default::default() };
        let k = synthesize(&toy(3.0, 4.0), &cfg).unwrap();
        let (m, v) = stats(&k);
        assert!((m / 3.0 - 1.0).abs() < 0.05 && (v / 4.0 - 1.0).abs() < 0.05, "mean {m} var {v}");
    }

    #[test]
    fn synthesis_is_deterministic_and_read_only() {
        let model = ModelParams::mlp_bn(4, &[8, 6], 3, &mut stream(9, 0, 0, Purpose::Init)).unwrap();
        let before = model.clone();
        let cfg = ExtractionConfig { z: 16, synth_steps: 50, seed: Some(4), ..Default::default() };
        let a = synthesize(&model, &cfg).unwrap();
        let b = synthesize(&model, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(model, before);
        assert_eq!(a.source_model_hash, model.fingerprint());
    }

    #[test]
    fn z_below_two_rejected() {
        let cfg = ExtractionConfig { z: 1, ..Default::default() };
        assert!(synthesize(&toy(0.0, 1.0), &cfg).is_err());
    }

    #[test]
    fn chunking() {
        let cfg = ExtractionConfig { z: 7, synth_batch: 3, ..Default::default() };
        assert_eq!(cfg.chunks(), vec![0..3, 3..7]);
        let cfg = ExtractionConfig { z: 8, synth_batch: 3, ..Default::default() };
        assert_eq!(cfg.chunks(), vec![0..3, 3..6, 6..8]);
    }
}
