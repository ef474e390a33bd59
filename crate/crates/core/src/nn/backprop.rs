use serde::{Deserialize, Serialize};

use super::model::{BatchNormLayer, Layer, LinearLayer, ModelParams};
use super::optim::GradientSet;
use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and fold them into the running
    /// statistics.
    Train,
    /// Normalize with running statistics; mutates nothing.
    Eval,
}

/// Per-channel statistics of the input to one BatchNorm layer over a batch.
/// Variance is the population form (divide by the batch size).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    /// One entry per BatchNorm layer, in network order.
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Clone, Copy, PartialEq)]
enum Norm {
    Batch,
    Running,
}

struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    x_hat: Vec<f64>,
}

struct Trace {
    batch: usize,
    /// Input to each executed layer.
    inputs: Vec<Vec<f64>>,
    bn: Vec<Option<BnCache>>,
    output: Vec<f64>,
}

impl Trace {
    fn batch_stats(&self) -> Vec<BatchStats> {
        self.bn
            .iter()
            .flatten()
            .map(|c| BatchStats { mean: c.mean.clone(), var: c.var.clone() })
            .collect()
    }
}

fn linear_forward(l: &LinearLayer, x: &[f64], b: usize) -> Vec<f64> {
    let (ni, no) = (l.in_dim, l.out_dim);
    let mut out = vec![0.0; b * no];
    for r in 0..b {
        let xr = &x[r * ni..(r + 1) * ni];
        for o in 0..no {
            let w = &l.weight[o * ni..(o + 1) * ni];
            let mut acc = l.bias[o];
            for (wi, xi) in w.iter().zip(xr) {
                acc += wi * xi;
            }
            out[r * no + o] = acc;
        }
    }
    out
}

fn batchnorm_forward(bn: &BatchNormLayer, x: &[f64], b: usize, norm: Norm) -> (Vec<f64>, BnCache) {
    let c = bn.channels();
    let inv_b = 1.0 / b as f64;
    let mut mean = vec![0.0; c];
    for r in 0..b {
        for (m, xi) in mean.iter_mut().zip(&x[r * c..(r + 1) * c]) {
            *m += xi;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_b);
    let mut var = vec![0.0; c];
    for r in 0..b {
        for k in 0..c {
            let d = x[r * c + k] - mean[k];
            var[k] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_b);

    let (m_used, v_used) = match norm {
        Norm::Batch => (&mean, &var),
        Norm::Running => (&bn.running_mean, &bn.running_var),
    };
    let inv_std: Vec<f64> = v_used.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut x_hat = vec![0.0; b * c];
    let mut out = vec![0.0; b * c];
    for r in 0..b {
        for k in 0..c {
            let i = r * c + k;
            x_hat[i] = (x[i] - m_used[k]) * inv_std[k];
            out[i] = bn.gamma[k] * x_hat[i] + bn.beta[k];
        }
    }
    (out, BnCache { mean, var, inv_std, x_hat })
}

fn run_forward(model: &ModelParams, x: &[f64], b: usize, upto: usize, norm: Norm) -> Trace {
    let mut inputs = Vec::with_capacity(upto);
    let mut bn = Vec::with_capacity(upto);
    let mut cur = x.to_vec();
    for layer in &model.layers[..upto] {
        let (next, cache) = match layer {
            Layer::Linear(l) => (linear_forward(l, &cur, b), None),
            Layer::BatchNorm(layer) => {
                let (y, c) = batchnorm_forward(layer, &cur, b, norm);
                (y, Some(c))
            }
            Layer::Relu => (cur.iter().map(|&v| v.max(0.0)).collect(), None),
        };
        inputs.push(cur);
        bn.push(cache);
        cur = next;
    }
    Trace { batch: b, inputs, bn, output: cur }
}

/// Extra gradient injected at a BatchNorm input, given the layer's ordinal
/// among BatchNorm layers, its cache and its input.
type BnInputGrad<'a> = dyn FnMut(usize, &BnCache, &[f64]) -> Option<Vec<f64>> + 'a;

/// Reverse pass over the executed layers. Returns per-layer parameter
/// gradients (canonical order, empty when `param_grads` is false) and the
/// gradient with respect to the network input.
fn run_backward(
    model: &ModelParams,
    trace: &Trace,
    mut grad: Vec<f64>,
    norm: Norm,
    extra: &mut BnInputGrad<'_>,
    param_grads: bool,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let b = trace.batch;
    let executed = trace.inputs.len();
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); executed];
    let mut bn_ordinal = model.layers[..executed].iter().filter(|l| matches!(l, Layer::BatchNorm(_))).count();

    for idx in (0..executed).rev() {
        let x = &trace.inputs[idx];
        match &model.layers[idx] {
            Layer::Linear(l) => {
                let (ni, no) = (l.in_dim, l.out_dim);
                if param_grads {
                    let mut dw = vec![0.0; no * ni];
                    let mut db = vec![0.0; no];
                    for r in 0..b {
                        let xr = &x[r * ni..(r + 1) * ni];
                        for o in 0..no {
                            let g = grad[r * no + o];
                            db[o] += g;
                            for (d, xi) in dw[o * ni..(o + 1) * ni].iter_mut().zip(xr) {
                                *d += g * xi;
                            }
                        }
                    }
                    per_layer[idx] = vec![dw, db];
                }
                let mut dx = vec![0.0; b * ni];
                for r in 0..b {
                    let dxr = &mut dx[r * ni..(r + 1) * ni];
                    for o in 0..no {
                        let g = grad[r * no + o];
                        for (d, w) in dxr.iter_mut().zip(&l.weight[o * ni..(o + 1) * ni]) {
                            *d += g * w;
                        }
                    }
                }
                grad = dx;
            }
            Layer::BatchNorm(bn) => {
                bn_ordinal -= 1;
                let cache = trace.bn[idx].as_ref().expect("batchnorm cache recorded");
                let c = bn.channels();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for r in 0..b {
                    for k in 0..c {
                        let i = r * c + k;
                        sum_dy[k] += grad[i];
                        sum_dy_xhat[k] += grad[i] * cache.x_hat[i];
                    }
                }
                let mut dx = vec![0.0; b * c];
                let bf = b as f64;
                for r in 0..b {
                    for k in 0..c {
                        let i = r * c + k;
                        dx[i] = match norm {
                            Norm::Batch => {
                                bn.gamma[k] * cache.inv_std[k] / bf
                                    * (bf * grad[i] - sum_dy[k] - cache.x_hat[i] * sum_dy_xhat[k])
                            }
                            Norm::Running => grad[i] * bn.gamma[k] * cache.inv_std[k],
                        };
                    }
                }
                if let Some(e) = extra(bn_ordinal, cache, x) {
                    dx.iter_mut().zip(e).for_each(|(d, v)| *d += v);
                }
                if param_grads {
                    per_layer[idx] = vec![sum_dy_xhat, sum_dy];
                }
                grad = dx;
            }
            Layer::Relu => {
                grad.iter_mut().zip(x).for_each(|(g, &xi)| {
                    if xi <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
        }
    }
    (per_layer.into_iter().flatten().collect(), grad)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &l) in dst.iter_mut().zip(row) {
            *d = (l - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

impl ModelParams {
    fn check_batch(&self, batch: &Tensor, min_rows: usize) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim {
            return Err(shape(format!(
                "batch shape {:?} does not match input_dim {}",
                batch.shape(),
                self.input_dim
            )));
        }
        if batch.rows() < min_rows {
            return Err(invalid(format!("batch needs at least {min_rows} rows, got {}", batch.rows())));
        }
        batch.ensure_finite("input batch")
    }

    fn finish(&self, trace: &Trace) -> Result<ForwardOutput> {
        let b = trace.batch;
        let c = self.num_classes;
        if !trace.output.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let probs = softmax_rows(&trace.output, c);
        Ok(ForwardOutput {
            logits: Tensor::from_parts_unchecked(vec![b, c], trace.output.clone()),
            probs: Tensor::from_parts_unchecked(vec![b, c], probs),
            batch_stats: trace.batch_stats(),
        })
    }

    /// Full forward pass. Train mode needs at least two rows and updates the
    /// running statistics; eval mode is pure.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        match mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train => {
                self.check_batch(batch, 2)?;
                let trace = run_forward(self, batch.data(), batch.rows(), self.layers.len(), Norm::Batch);
                let out = self.finish(&trace)?;
                self.update_running_stats(&out.batch_stats);
                Ok(out)
            }
        }
    }

    pub fn forward_eval(&self, batch: &Tensor) -> Result<ForwardOutput> {
        self.check_batch(batch, 1)?;
        let trace = run_forward(self, batch.data(), batch.rows(), self.layers.len(), Norm::Running);
        self.finish(&trace)
    }

    /// Argmax of the eval-mode logits; ties go to the lowest class index.
    pub fn predict_classes(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward_eval(batch)?;
        Ok(out
            .logits
            .data()
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Exponential moving average: `running ← (1−m)·running + m·batch`.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.bn_layers_mut().zip(stats) {
            let m = bn.momentum;
            for (r, &v) in bn.running_mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, &v) in bn.running_var.iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Batch statistics at every BatchNorm input while normalizing with the
    /// running statistics. Nothing is mutated.
    pub fn probe_batch_stats(&self, batch: &Tensor) -> Result<Vec<BatchStats>> {
        self.check_batch(batch, 1)?;
        let upto = self.last_bn_index().ok_or(Error::NoBatchNorm)? + 1;
        Ok(run_forward(self, batch.data(), batch.rows(), upto, Norm::Running).batch_stats())
    }

    fn last_bn_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Mean cross-entropy of a train-mode forward pass and its gradients.
    ///
    /// The model is not mutated; the batch statistics that a training step
    /// would fold into the running statistics are returned alongside.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor,
        labels: &[usize],
        want_input_grad: bool,
    ) -> Result<(f64, GradientSet, Vec<BatchStats>)> {
        self.check_batch(batch, 2)?;
        let b = batch.rows();
        if labels.len() != b {
            return Err(shape(format!("{} labels for batch of {b}", labels.len())));
        }
        let c = self.num_classes;
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, num_classes: c });
        }
        let trace = run_forward(self, batch.data(), b, self.layers.len(), Norm::Batch);
        if !trace.output.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let probs = softmax_rows(&trace.output, c);
        let mut loss = 0.0;
        let mut dlogits = probs;
        for (r, &y) in labels.iter().enumerate() {
            let row = &trace.output[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            dlogits[r * c + y] -= 1.0;
        }
        let bf = b as f64;
        loss /= bf;
        dlogits.iter_mut().for_each(|g| *g /= bf);

        let (params, input) = run_backward(self, &trace, dlogits, Norm::Batch, &mut |_, _, _| None, true);
        let input = want_input_grad.then(|| Tensor::from_parts_unchecked(batch.shape().to_vec(), input));
        Ok((loss, GradientSet { tensors: params, input }, trace.batch_stats()))
    }
}

fn check_selection(model: &ModelParams, selection: &[Vec<usize>]) -> Result<()> {
    let bns: Vec<_> = model.bn_layers().collect();
    if bns.is_empty() {
        return Err(Error::NoBatchNorm);
    }
    if selection.len() != bns.len() {
        return Err(invalid(format!(
            "selection covers {} batchnorm layers, model has {}",
            selection.len(),
            bns.len()
        )));
    }
    for (s, bn) in selection.iter().zip(&bns) {
        if let Some(&bad) = s.iter().find(|&&k| k >= bn.channels()) {
            return Err(invalid(format!("channel {bad} out of range")));
        }
    }
    if selection.iter().all(Vec::is_empty) {
        return Err(invalid("channel selection is empty in every layer"));
    }
    Ok(())
}

/// Statistics-matching loss with its gradient with respect to the inputs.
///
/// For every BatchNorm layer the batch mean and variance of its input are
/// compared with the stored running statistics on the selected channels:
/// `Σ_layers ‖μ_S − running_mean_S‖ + ‖σ²_S − running_var_S‖` (squared norms
/// when `squared` is set). The network runs with running-statistic
/// normalization, so the model is only read. At an exact match the norm's
/// subgradient is taken as zero.
pub fn bn_match_loss_and_input_grad(
    model: &ModelParams,
    batch: &Tensor,
    selection: &[Vec<usize>],
    squared: bool,
) -> Result<(f64, Tensor)> {
    let (loss, grads) = bn_match_backward(model, batch, selection, squared, false)?;
    Ok((loss, grads.input.expect("input gradient always computed")))
}

/// [`bn_match_loss_and_input_grad`] plus the gradient with respect to every
/// trainable parameter. Layers after the last BatchNorm get zero gradients.
pub fn bn_match_loss_and_grads(
    model: &ModelParams,
    batch: &Tensor,
    selection: &[Vec<usize>],
    squared: bool,
) -> Result<(f64, GradientSet)> {
    bn_match_backward(model, batch, selection, squared, true)
}

fn bn_match_backward(
    model: &ModelParams,
    batch: &Tensor,
    selection: &[Vec<usize>],
    squared: bool,
    param_grads: bool,
) -> Result<(f64, GradientSet)> {
    check_selection(model, selection)?;
    model.check_batch(batch, 2)?;
    let b = batch.rows();
    let upto = model.last_bn_index().expect("checked above") + 1;
    let trace = run_forward(model, batch.data(), b, upto, Norm::Running);
    let bns: Vec<&BatchNormLayer> = model.bn_layers().collect();

    let mut loss = 0.0;
    // (d loss / d mean, d loss / d var) per selected channel, per BN layer
    let mut coeffs: Vec<Vec<(usize, f64, f64)>> = Vec::with_capacity(bns.len());
    for (cache, (bn, sel)) in trace.bn.iter().flatten().zip(bns.iter().zip(selection)) {
        let dm: Vec<f64> = sel.iter().map(|&k| cache.mean[k] - bn.running_mean[k]).collect();
        let dv: Vec<f64> = sel.iter().map(|&k| cache.var[k] - bn.running_var[k]).collect();
        let nm = dm.iter().map(|d| d * d).sum::<f64>();
        let nv = dv.iter().map(|d| d * d).sum::<f64>();
        let (lm, lv, sm, sv) = if squared {
            (nm, nv, 2.0, 2.0)
        } else {
            let (nm, nv) = (nm.sqrt(), nv.sqrt());
            let inv = |n: f64| if n > 0.0 { 1.0 / n } else { 0.0 };
            (nm, nv, inv(nm), inv(nv))
        };
        loss += lm + lv;
        coeffs.push(sel.iter().enumerate().map(|(j, &k)| (k, dm[j] * sm, dv[j] * sv)).collect());
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("statistics-matching loss".into()));
    }

    let bf = b as f64;
    let zero = vec![0.0; trace.output.len()];
    let mut extra = |ordinal: usize, cache: &BnCache, x: &[f64]| {
        let c = cache.mean.len();
        let mut g = vec![0.0; x.len()];
        for &(k, gm, gv) in &coeffs[ordinal] {
            for r in 0..b {
                let i = r * c + k;
                g[i] = gm / bf + gv * 2.0 * (x[i] - cache.mean[k]) / bf;
            }
        }
        Some(g)
    };
    let (executed, input) = run_backward(model, &trace, zero, Norm::Running, &mut extra, param_grads);
    let mut tensors = Vec::new();
    if param_grads {
        tensors = GradientSet::zeros_like(model).tensors;
        tensors[..executed.len()].clone_from_slice(&executed);
    }
    let input = Some(Tensor::from_parts_unchecked(batch.shape().to_vec(), input));
    Ok((loss, GradientSet { tensors, input }))
}

/// The loss of [`bn_match_loss_and_input_grad`] without the gradient.
pub fn bn_match_loss(model: &ModelParams, batch: &Tensor, selection: &[Vec<usize>], squared: bool) -> Result<f64> {
    check_selection(model, selection)?;
    let stats = model.probe_batch_stats(batch)?;
    if batch.rows() < 2 {
        return Err(invalid("batch needs at least 2 rows"));
    }
    let mut loss = 0.0;
    for ((s, bn), sel) in stats.iter().zip(model.bn_layers()).zip(selection) {
        let nm: f64 = sel.iter().map(|&k| (s.mean[k] - bn.running_mean[k]).powi(2)).sum();
        let nv: f64 = sel.iter().map(|&k| (s.var[k] - bn.running_var[k]).powi(2)).sum();
        loss += if squared { nm + nv } else { nm.sqrt() + nv.sqrt() };
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream, Purpose};

    fn model(seed: u64) -> ModelParams {
        ModelParams::mlp_bn(3, &[5, 4], 4, &mut stream(seed, 0, 0, Purpose::Init)).unwrap()
    }

    fn batch(seed: u64, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], normal_vec(&mut stream(seed, 1, 0, Purpose::Data), rows * cols)).unwrap()
    }

    fn identity_bn_model(dim: usize) -> ModelParams {
        let mut weight = vec![0.0; dim * dim];
        (0..dim).for_each(|i| weight[i * dim + i] = 1.0);
        ModelParams {
            input_dim: dim,
            num_classes: dim,
            layers: vec![
                Layer::Linear(LinearLayer { in_dim: dim, out_dim: dim, weight: weight.clone(), bias: vec![0.0; dim] }),
                Layer::BatchNorm(BatchNormLayer::new(dim)),
                Layer::Linear(LinearLayer { in_dim: dim, out_dim: dim, weight, bias: vec![0.0; dim] }),
            ],
        }
    }

    #[test]
    fn uniform_softmax_for_zero_logits() {
        let p = softmax_rows(&[0.0; 4], 4);
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_rows(&[1e300, -1e300, 0.0], 3);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn probs_rows_sum_to_one() {
        let m = model(3);
        let out = m.forward_eval(&batch(4, 7, 3)).unwrap();
        for row in out.probs.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn eval_bn_with_unit_stats_is_identity() {
        let mut m = identity_bn_model(3);
        m.bn_layers_mut().next().unwrap().eps = 1e-12;
        let x = batch(1, 5, 3);
        let out = m.forward_eval(&x).unwrap();
        for (a, b) in out.logits.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn two_point_batch_statistics() {
        let mut m = identity_bn_model(1);
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let out = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.batch_stats[0].mean, vec![2.0]);
        assert_eq!(out.batch_stats[0].var, vec![1.0]);
        // running ← 0.9·running + 0.1·batch
        let bn = m.bn_layers().next().unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let mut m = model(1);
        assert!(m.forward(&batch(1, 1, 3), Mode::Train).is_err());
        assert!(m.forward(&batch(1, 1, 3), Mode::Eval).is_ok());
        assert!(m.forward_eval(&batch(1, 2, 2)).is_err());
    }

    #[test]
    fn eval_forward_is_pure() {
        let m = model(5);
        let before = m.clone();
        let x = batch(6, 4, 3);
        let a = m.forward_eval(&x).unwrap();
        let b = m.forward_eval(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
        let mut m2 = m.clone();
        m2.forward(&x, Mode::Eval).unwrap();
        assert_eq!(m2, before);
    }

    #[test]
    fn uniform_logits_give_ln_c_loss() {
        let mut m = model(2);
        if let Some(Layer::Linear(head)) = m.layers.last_mut() {
            head.weight.iter_mut().for_each(|w| *w = 0.0);
            head.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        let (loss, grads, _) = m.loss_and_grads(&batch(1, 6, 3), &[0, 1, 2, 3, 0, 1], true).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(grads.tensors.len(), m.trainable().len());
        assert_eq!(grads.input.unwrap().shape(), &[6, 3]);
    }

    #[test]
    fn label_out_of_range() {
        let m = model(2);
        let err = m.loss_and_grads(&batch(1, 2, 3), &[0, 4], false).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 4, num_classes: 4 }));
    }

    #[test]
    fn bn_match_exact_statistics_give_zero_loss() {
        let m = identity_bn_model(1);
        // mean 0, population variance 1
        let x = Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let (loss, grad) = bn_match_loss_and_input_grad(&m, &x, &[vec![0]], false).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bn_match_selection_errors() {
        let m = model(1);
        let x = batch(1, 4, 3);
        assert!(bn_match_loss_and_input_grad(&m, &x, &[vec![], vec![]], false).is_err());
        assert!(bn_match_loss_and_input_grad(&m, &x, &[vec![9], vec![]], false).is_err());
        assert!(bn_match_loss_and_input_grad(&m, &x, &[vec![0]], false).is_err());
        assert!(bn_match_loss_and_input_grad(&m, &batch(1, 1, 3), &[vec![0], vec![]], false).is_err());
        let mut no_bn = m.clone();
        no_bn.layers.retain(|l| !matches!(l, Layer::BatchNorm(_)));
        assert!(matches!(bn_match_loss_and_input_grad(&no_bn, &x, &[], false), Err(Error::NoBatchNorm)));
    }

    #[test]
    fn bn_match_loss_helpers_agree() {
        let m = model(8);
        let x = batch(9, 6, 3);
        let sel = vec![vec![0, 2, 4], vec![1]];
        for squared in [false, true] {
            let (a, _) = bn_match_loss_and_input_grad(&m, &x, &sel, squared).unwrap();
            let b = bn_match_loss(&m, &x, &sel, squared).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_breaks_ties_low() {
        let mut m = model(1);
        if let Some(Layer::Linear(head)) = m.layers.last_mut() {
            head.weight.iter_mut().for_each(|w| *w = 0.0);
            head.bias = vec![0.0, 1.0, 1.0, 0.5];
        }
        assert_eq!(m.predict_classes(&batch(1, 3, 3)).unwrap(), vec![1, 1, 1]);
    }
}
