use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use crate::error::{invalid, shape, Result};
use crate::tensor::Tensor;

/// One gradient per trainable tensor (canonical order), plus an optional
/// gradient with respect to the input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
    pub input: Option<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelParams) -> Self {
        GradientSet { tensors: model.trainable().iter().map(|t| vec![0.0; t.len()]).collect(), input: None }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.concat()
    }

    pub(crate) fn check_matches(&self, model: &ModelParams) -> Result<()> {
        let params = model.trainable();
        if params.len() != self.tensors.len() || params.iter().zip(&self.tensors).any(|(p, g)| p.len() != g.len()) {
            return Err(shape("gradient set does not match model parameters"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, momentum: 0.9, local_epochs: 5, batch_size: 16 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(invalid("local_epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// SGD with momentum: `v ← momentum·v + g`, `p ← p − lr·v`.
/// Running statistics are not touched.
pub fn sgd_step(model: &mut ModelParams, grads: &GradientSet, velocity: &mut GradientSet, cfg: &TrainConfig) -> Result<()> {
    grads.check_matches(model)?;
    velocity.check_matches(model)?;
    for ((p, g), v) in model.trainable_mut().into_iter().zip(&grads.tensors).zip(&mut velocity.tensors) {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.learning_rate * *v;
        }
    }
    Ok(())
}
