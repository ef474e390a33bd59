//! Gaussian mechanism on model updates.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::ModelParams;
use crate::rng::{normal, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    /// Per-application budget; `inf` clips without adding noise.
    #[serde(with = "crate::io::extended_f64")]
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig { epsilon: 1.0, delta: 1e-5, clip_norm: 1.0 }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(invalid("clip_norm must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `clip_norm · sqrt(2 ln(1.25/δ)) / ε`.
    pub fn sigma(&self) -> f64 {
        self.clip_norm * (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
    }
}

/// Clips `delta` to L2 norm `clip_norm`, then adds i.i.d. `N(0, σ²)` noise.
pub fn add_dp_noise(delta: &mut [f64], dp: &DpConfig, rng: &mut Stream) -> Result<()> {
    dp.validate()?;
    let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > dp.clip_norm {
        let scale = dp.clip_norm / norm;
        delta.iter_mut().for_each(|x| *x *= scale);
    }
    let sigma = dp.sigma();
    if sigma > 0.0 {
        for x in delta.iter_mut() {
            *x += sigma * normal(rng);
        }
    }
    Ok(())
}

/// Returns `base + noise(upload − base)` over trainable parameters. Running
/// statistics of the upload pass through unchanged.
pub fn privatize(base: &ModelParams, upload: &ModelParams, dp: &DpConfig, rng: &mut Stream) -> Result<ModelParams> {
    base.ensure_same_shape(upload)?;
    let b = base.flat_trainable();
    let mut delta: Vec<f64> = upload.flat_trainable().iter().zip(&b).map(|(u, b)| u - b).collect();
    add_dp_noise(&mut delta, dp, rng)?;
    let mut out = upload.clone();
    let mut k = 0;
    for t in out.trainable_mut() {
        for p in t.iter_mut() {
            *p = b[k] + delta[k];
            k += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn cfg(epsilon: f64) -> DpConfig {
        DpConfig { epsilon, delta: 1e-5, clip_norm: 1.0 }
    }

    #[test]
    fn clipping_without_noise() {
        let mut d = vec![6.0, 8.0];
        add_dp_noise(&mut d, &cfg(f64::INFINITY), &mut stream(0, 0, 0, Purpose::DpNoise)).unwrap();
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-15);
        assert!((d[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn short_delta_not_scaled() {
        let mut d = vec![0.3, 0.4];
        add_dp_noise(&mut d, &cfg(f64::INFINITY), &mut stream(0, 0, 0, Purpose::DpNoise)).unwrap();
        assert_eq!(d, vec![0.3, 0.4]);
    }

    #[test]
    fn sigma_monotone_in_epsilon() {
        assert!(cfg(0.1).sigma() > cfg(1.0).sigma());
        assert_eq!(cfg(f64::INFINITY).sigma(), 0.0);
        let expected = (2.0 * (1.25e5f64).ln()).sqrt();
        assert!((cfg(1.0).sigma() - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_budget() {
        let mut d = vec![1.0];
        let mut rng = stream(0, 0, 0, Purpose::DpNoise);
        assert!(add_dp_noise(&mut d, &cfg(0.0), &mut rng).is_err());
        assert!(add_dp_noise(&mut d, &DpConfig { clip_norm: -1.0, ..cfg(1.0) }, &mut rng).is_err());
    }

    #[test]
    fn empirical_noise_std() {
        let dp = DpConfig { epsilon: 2.0, delta: 1e-5, clip_norm: 1e-3 };
        let mut d = vec![0.0; 100_000];
        add_dp_noise(&mut d, &dp, &mut stream(5, 0, 0, Purpose::DpNoise)).unwrap();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std / dp.sigma() - 1.0).abs() < 0.02, "{std} vs {}", dp.sigma());
    }
}
