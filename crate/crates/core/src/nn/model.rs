use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::Stream;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Fully connected layer; `weight` is `[out × in]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    /// Per-channel scaling factor; its magnitude ranks channel importance.
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    BatchNorm(BatchNormLayer),
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct ModelParams {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

impl LinearLayer {
    /// Uniform `±1/sqrt(in)` initialization for weights and biases.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Stream) -> Self {
        use rand::Rng;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        LinearLayer { in_dim, out_dim, weight, bias }
    }
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Layer {
    fn out_width(&self, in_width: usize) -> usize {
        match self {
            Layer::Linear(l) => l.out_dim,
            _ => in_width,
        }
    }
}

impl ModelParams {
    /// Builds `input_dim → [Linear → BN → ReLU] per hidden width → Linear(num_classes)`.
    pub fn mlp_bn(input_dim: usize, hidden: &[usize], num_classes: usize, rng: &mut Stream) -> Result<Self> {
        if hidden.is_empty() {
            return Err(invalid("MLP-BN needs at least one hidden layer"));
        }
        let mut layers = Vec::with_capacity(3 * hidden.len() + 1);
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Linear(LinearLayer::init(width, h, rng)));
            layers.push(Layer::BatchNorm(BatchNormLayer::new(h)));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Linear(LinearLayer::init(width, num_classes, rng)));
        let model = ModelParams { input_dim, num_classes, layers };
        model.validate()?;
        Ok(model)
    }

    /// Checks that layer shapes chain, the head emits `num_classes` logits,
    /// at least one BatchNorm is present and all values are finite.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(invalid("input_dim and num_classes must be positive"));
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    if l.in_dim != width || l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                        return Err(shape(format!("linear layer {i} does not chain (expects input {width})")));
                    }
                }
                Layer::BatchNorm(bn) => {
                    let c = bn.channels();
                    if c != width || bn.beta.len() != c || bn.running_mean.len() != c || bn.running_var.len() != c {
                        return Err(shape(format!("batchnorm layer {i} has wrong channel count")));
                    }
                    if bn.running_var.iter().any(|&v| v < 0.0) {
                        return Err(invalid(format!("batchnorm layer {i} has negative running variance")));
                    }
                    if !(bn.momentum > 0.0 && bn.momentum < 1.0) || !(bn.eps > 0.0) {
                        return Err(invalid(format!("batchnorm layer {i} has bad momentum/eps")));
                    }
                }
                Layer::Relu => {}
            }
            width = layer.out_width(width);
        }
        match self.layers.last() {
            Some(Layer::Linear(l)) if l.out_dim == self.num_classes => {}
            _ => return Err(shape("last layer must be linear with num_classes outputs")),
        }
        if self.bn_layers().next().is_none() {
            return Err(Error::NoBatchNorm);
        }
        let finite = self.trainable().iter().chain(self.running_stats().iter()).all(|t| t.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Trainable tensors in canonical order: per layer, linear weight then
    /// bias, batchnorm gamma then beta.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push(l.weight.as_slice());
                    out.push(l.bias.as_slice());
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice());
                    out.push(bn.beta.as_slice());
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Running means and variances, layer by layer.
    pub fn running_stats(&self) -> Vec<&[f64]> {
        self.bn_layers()
            .flat_map(|bn| [bn.running_mean.as_slice(), bn.running_var.as_slice()])
            .collect()
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.bn_layers_mut()
            .flat_map(|bn| [&mut bn.running_mean, &mut bn.running_var])
            .collect()
    }

    /// Trainable tensors followed by running statistics.
    pub fn all_tensors(&self) -> Vec<&[f64]> {
        let mut t = self.trainable();
        t.extend(self.running_stats());
        t
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut trainable = Vec::new();
        let mut stats = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    trainable.push(&mut l.weight);
                    trainable.push(&mut l.bias);
                }
                Layer::BatchNorm(bn) => {
                    trainable.push(&mut bn.gamma);
                    trainable.push(&mut bn.beta);
                    stats.push(&mut bn.running_mean);
                    stats.push(&mut bn.running_var);
                }
                Layer::Relu => {}
            }
        }
        trainable.extend(stats);
        trainable
    }

    pub fn flat_trainable(&self) -> Vec<f64> {
        self.trainable().concat()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Same architecture (layer kinds and every tensor length).
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.input_dim == other.input_dim
            && self.num_classes == other.num_classes
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                std::mem::discriminant(a) == std::mem::discriminant(b)
            })
            && self
                .all_tensors()
                .iter()
                .zip(other.all_tensors())
                .all(|(a, b)| a.len() == b.len())
    }

    pub(crate) fn ensure_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape("models have different architectures"))
        }
    }

    /// Unweighted mean of every tensor, running statistics included. Sums run
    /// over `models` in order.
    pub fn average(models: &[&ModelParams]) -> Result<ModelParams> {
        let first = *models.first().ok_or_else(|| invalid("cannot average zero models"))?;
        for m in &models[1..] {
            first.ensure_same_shape(m)?;
        }
        let n = models.len() as f64;
        let mut out = first.clone();
        let sources: Vec<Vec<&[f64]>> = models.iter().map(|m| m.all_tensors()).collect();
        for (t, dst) in out.all_tensors_mut().into_iter().enumerate() {
            for (k, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for src in &sources {
                    acc += src[t][k];
                }
                *d = acc / n;
            }
        }
        Ok(out)
    }

    /// Stable 64-bit fingerprint of every parameter bit pattern (FNV-1a).
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.input_dim as u64);
        eat(self.num_classes as u64);
        for t in self.all_tensors() {
            eat(t.len() as u64);
            for x in t {
                eat(x.to_bits());
            }
        }
        format!("{h:016x}")
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    input_dim: usize,
    num_classes: usize,
    layers: Vec<LayerRepr>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerRepr {
    Linear {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Batchnorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
        momentum: f64,
    },
    Relu,
}

impl From<ModelParams> for ModelRepr {
    fn from(m: ModelParams) -> Self {
        let layers = m
            .layers
            .into_iter()
            .map(|l| match l {
                Layer::Linear(l) => LayerRepr::Linear {
                    weight: l.weight.chunks(l.in_dim).map(<[f64]>::to_vec).collect(),
                    bias: l.bias,
                },
                Layer::BatchNorm(bn) => LayerRepr::Batchnorm {
                    gamma: bn.gamma,
                    beta: bn.beta,
                    running_mean: bn.running_mean,
                    running_var: bn.running_var,
                    eps: bn.eps,
                    momentum: bn.momentum,
                },
                Layer::Relu => LayerRepr::Relu,
            })
            .collect();
        ModelRepr { input_dim: m.input_dim, num_classes: m.num_classes, layers }
    }
}

impl TryFrom<ModelRepr> for ModelParams {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        let mut layers = Vec::with_capacity(r.layers.len());
        for l in r.layers {
            layers.push(match l {
                LayerRepr::Linear { weight, bias } => {
                    let out_dim = weight.len();
                    let in_dim = weight.first().map_or(0, Vec::len);
                    if in_dim == 0 || weight.iter().any(|row| row.len() != in_dim) {
                        return Err(shape("linear weight must be a non-empty rectangular matrix"));
                    }
                    Layer::Linear(LinearLayer { in_dim, out_dim, weight: weight.concat(), bias })
                }
                LayerRepr::Batchnorm { gamma, beta, running_mean, running_var, eps, momentum } => {
                    Layer::BatchNorm(BatchNormLayer { gamma, beta, running_mean, running_var, momentum, eps })
                }
                LayerRepr::Relu => Layer::Relu,
            });
        }
        let m = ModelParams { input_dim: r.input_dim, num_classes: r.num_classes, layers };
        m.validate()?;
        Ok(m)
    }
}
