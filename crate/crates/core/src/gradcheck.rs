//! Finite-difference verification of the hand-derived gradients.
//!
//! The numerical side only evaluates losses through forward passes; it never
//! touches the backward code it checks.

use crate::nn::{bn_match_loss, bn_match_loss_and_grads, Layer, ModelParams};
use crate::rng::{normal_vec, stream, Purpose, Stream};
use crate::{Result, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `point`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let up = f(&x);
            x[i] = point[i] - step;
            let down = f(&x);
            x[i] = point[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

/// Mean cross-entropy from a train-mode forward pass on a scratch copy.
pub fn cross_entropy(model: &ModelParams, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut scratch = model.clone();
    let out = scratch.forward(batch, crate::nn::Mode::Train)?;
    let c = model.num_classes;
    let mut total = 0.0;
    for (row, &y) in out.logits.data().chunks(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

fn with_flat_params(model: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut m = model.clone();
    let mut off = 0;
    for t in m.trainable_mut() {
        let n = t.len();
        t.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    m
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub count: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// A random MLP-BN (two hidden layers, widths ≤ 16) with perturbed affine
/// parameters and non-trivial running statistics, plus a batch and labels.
pub fn random_problem(rng: &mut Stream) -> Result<(ModelParams, Tensor, Vec<usize>)> {
    use rand::Rng;
    let input_dim = rng.random_range(2..=6);
    let hidden = [rng.random_range(3..=16), rng.random_range(3..=16)];
    let classes = rng.random_range(2..=5);
    let mut model = ModelParams::mlp_bn(input_dim, &hidden, classes, rng)?;
    for layer in &mut model.layers {
        if let Layer::BatchNorm(bn) = layer {
            for k in 0..bn.channels() {
                bn.gamma[k] = rng.random_range(0.5..1.5);
                bn.beta[k] = rng.random_range(-0.5..0.5);
                bn.running_mean[k] = rng.random_range(-1.0..1.0);
                bn.running_var[k] = rng.random_range(0.5..2.0);
            }
        }
    }
    let b = rng.random_range(4..=8);
    let batch = Tensor::new(vec![b, input_dim], normal_vec(rng, b * input_dim))?;
    let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
    Ok((model, batch, labels))
}

/// Checks parameter and input gradients of cross-entropy and of the
/// statistics-matching loss (plain and squared norms) on one problem.
pub fn check_problem(model: &ModelParams, batch: &Tensor, labels: &[usize]) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let (_, grads, _) = model.loss_and_grads(batch, labels, true)?;

    let flat = model.flat_trainable();
    let numeric = central_difference(
        |p| cross_entropy(&with_flat_params(model, p), batch, labels).expect("forward on valid model"),
        &flat,
        STEP,
    );
    results.push(CheckResult {
        name: "cross-entropy / parameters".into(),
        max_rel_error: max_relative_error(&grads.flat(), &numeric),
        count: flat.len(),
    });

    let shape = batch.shape().to_vec();
    let input_fd = |f: &dyn Fn(&Tensor) -> f64| {
        central_difference(
            |x| f(&Tensor::new(shape.clone(), x.to_vec()).expect("finite perturbation")),
            batch.data(),
            STEP,
        )
    };
    let numeric = input_fd(&|x| cross_entropy(model, x, labels).expect("forward"));
    let analytic = grads.input.as_ref().expect("input gradient requested");
    results.push(CheckResult {
        name: "cross-entropy / input".into(),
        max_rel_error: max_relative_error(analytic.data(), &numeric),
        count: numeric.len(),
    });

    let selection: Vec<Vec<usize>> = model
        .bn_layers()
        .map(|bn| (0..bn.channels()).filter(|k| k % 3 != 1).collect())
        .collect();
    for squared in [false, true] {
        let suffix = if squared { " (squared)" } else { "" };
        let (_, grads) = bn_match_loss_and_grads(model, batch, &selection, squared)?;
        let numeric = central_difference(
            |p| bn_match_loss(&with_flat_params(model, p), batch, &selection, squared).expect("probe"),
            &flat,
            STEP,
        );
        results.push(CheckResult {
            name: format!("statistics matching{suffix} / parameters"),
            max_rel_error: max_relative_error(&grads.flat(), &numeric),
            count: flat.len(),
        });
        let numeric = input_fd(&|x| bn_match_loss(model, x, &selection, squared).expect("probe"));
        let analytic = grads.input.as_ref().expect("input gradient always computed");
        results.push(CheckResult {
            name: format!("statistics matching{suffix} / input"),
            max_rel_error: max_relative_error(analytic.data(), &numeric),
            count: numeric.len(),
        });
    }
    Ok(results)
}

/// Runs [`check_problem`] on `problems` random problems drawn from `seed`
/// and returns the worst error per check kind.
pub fn run_suite(seed: u64, problems: usize) -> Result<Vec<CheckResult>> {
    let mut worst: Vec<CheckResult> = Vec::new();
    for i in 0..problems {
        let mut rng = stream(seed, i as u64, 0, Purpose::Gradcheck);
        let (model, batch, labels) = random_problem(&mut rng)?;
        for r in check_problem(&model, &batch, &labels)? {
            match worst.iter_mut().find(|w| w.name == r.name) {
                Some(w) => {
                    w.max_rel_error = w.max_rel_error.max(r.max_rel_error);
                    w.count += r.count;
                }
                None => worst.push(r),
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for r in run_suite(11, 3).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_error);
        }
    }
}
