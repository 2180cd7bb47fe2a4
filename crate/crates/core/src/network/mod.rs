//! Layer specifications, the [`Network`] container, and its forward and
//! backward passes.
//!
//! A network is an ordered list of [`LayerSpec`]s applied to per-sample
//! inputs of a fixed shape (`C×H×W` for images, `F` for feature vectors).
//! Batches add a leading `N` axis. Convolution and dense layers own a
//! weight and a bias; every other layer is parameter-free.

mod builders;
mod diagnostics;
pub mod gradcheck;
pub(crate) mod layers;

use std::fmt;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Scalar, Tensor};

pub use builders::{
    build_logistic_head, build_paper_net, build_paper_net_variant, build_vgg16_shaped,
    build_vgg16_shaped_variant, compose_feature_head, ActivationVariant, DropoutVariant,
    NetVariant, LEAKY_ALPHA,
};
pub use diagnostics::{
    conv_stage_layers, dead_filter_report, export_activation_maps, DeadFilterReport,
};

/// Lower and upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// `max(alpha·x, x)` with `0 < alpha < 1`.
    LeakyRelu { alpha: f64 },
    Sigmoid,
}

impl Activation {
    /// Applies the activation elementwise.
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        Ok(layers::activation_forward(self, x))
    }

    fn validate(self) -> Result<()> {
        if let Activation::LeakyRelu { alpha } = self {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::validation(format!(
                    "leaky ReLU slope must lie in (0, 1), got {alpha}"
                )));
            }
        }
        Ok(())
    }
}

/// One layer of a network.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// 3×3 stride-1 convolution; `pad` is 0 (valid) or 1 (same).
    Conv3x3 { out_channels: usize, pad: usize },
    /// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped.
    MaxPool2x2,
    Activation(Activation),
    Flatten,
    /// Inverted dropout, identity in eval mode.
    Dropout { rate: f64 },
    Dense { out_units: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv3x3 { out_channels, pad } => {
                if out_channels == 0 {
                    return Err(Error::validation("convolution needs at least one output channel"));
                }
                if pad > 1 {
                    return Err(Error::validation(format!(
                        "3×3 convolution supports padding 0 or 1, got {pad}"
                    )));
                }
            }
            LayerSpec::Dense { out_units: 0 } => {
                return Err(Error::validation("dense layer needs at least one unit"));
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return Err(Error::validation(format!(
                    "dropout rate must lie in [0, 1), got {rate}"
                )));
            }
            LayerSpec::Activation(a) => a.validate()?,
            _ => {}
        }
        Ok(())
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match *self {
            LayerSpec::Conv3x3 { out_channels, pad } => {
                let &[_, h, w] = input else {
                    return Err(Error::shape(format!(
                        "convolution expects C×H×W input, got {input:?}"
                    )));
                };
                match (conv_out_extent(h, 3, 1, pad), conv_out_extent(w, 3, 1, pad)) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(Error::shape(format!(
                        "{h}×{w} input is too small for a 3×3 convolution"
                    ))),
                }
            }
            LayerSpec::MaxPool2x2 => {
                let &[c, h, w] = input else {
                    return Err(Error::shape(format!(
                        "max pooling expects C×H×W input, got {input:?}"
                    )));
                };
                if h < 2 || w < 2 {
                    return Err(Error::shape(format!("{h}×{w} input is too small for 2×2 pooling")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Activation(_) | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { out_units } => {
                if input.len() != 1 {
                    return Err(Error::shape(format!(
                        "dense layer expects a flat input, got {input:?}; insert a flatten layer"
                    )));
                }
                Ok(vec![out_units])
            }
        }
    }

    /// Weight and bias shapes for a per-sample input shape.
    fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv3x3 { out_channels, .. } => {
                Some((vec![out_channels, input[0], 3, 3], vec![out_channels]))
            }
            LayerSpec::Dense { out_units } => Some((vec![out_units, input[0]], vec![out_units])),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv3x3 { out_channels, pad } => write!(f, "conv3x3 {out_channels} pad={pad}"),
            LayerSpec::MaxPool2x2 => write!(f, "maxpool2x2"),
            LayerSpec::Activation(Activation::Relu) => write!(f, "activation relu"),
            LayerSpec::Activation(Activation::LeakyRelu { alpha }) => {
                write!(f, "activation leaky_relu {alpha}")
            }
            LayerSpec::Activation(Activation::Sigmoid) => write!(f, "activation sigmoid"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Dropout { rate } => write!(f, "dropout {rate}"),
            LayerSpec::Dense { out_units } => write!(f, "dense {out_units}"),
        }
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation(format!("unrecognised layer descriptor `{s}`"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let count = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split_whitespace().collect();
        let spec = match parts.as_slice() {
            ["conv3x3", ch, pad] => LayerSpec::Conv3x3 {
                out_channels: count(ch)?,
                pad: count(pad.strip_prefix("pad=").ok_or_else(bad)?)?,
            },
            ["maxpool2x2"] => LayerSpec::MaxPool2x2,
            ["activation", "relu"] => LayerSpec::Activation(Activation::Relu),
            ["activation", "leaky_relu", alpha] => {
                LayerSpec::Activation(Activation::LeakyRelu { alpha: num(alpha)? })
            }
            ["activation", "sigmoid"] => LayerSpec::Activation(Activation::Sigmoid),
            ["flatten"] => LayerSpec::Flatten,
            ["dropout", rate] => LayerSpec::Dropout { rate: num(rate)? },
            ["dense", units] => LayerSpec::Dense {
                out_units: count(units)?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Forward-pass mode. Training draws dropout masks from the supplied generator.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Per-layer state captured during a forward pass for use in backward.
#[derive(Clone, Debug)]
enum LayerCache<T> {
    None,
    PoolArgmax(Vec<u32>),
    DropoutMask(Vec<T>),
}

/// Everything a forward pass produced: the input batch, every layer's output
/// in order, and the routing state backward needs.
#[derive(Clone, Debug)]
pub struct ForwardPass<T: Scalar> {
    activations: Vec<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
    train: bool,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.activations[0]
    }

    /// Output of layer `index`.
    pub fn layer_output(&self, index: usize) -> &Tensor<T> {
        &self.activations[index + 1]
    }

    /// Final layer output; probabilities when the network ends in a sigmoid.
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("input is always present")
    }

    /// Number of layers that ran.
    pub fn depth(&self) -> usize {
        self.caches.len()
    }

    pub fn is_train(&self) -> bool {
        self.train
    }
}

/// One row of a Table-1-style architecture summary.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub layer_index: usize,
    pub spec: LayerSpec,
    pub output_shape: Vec<usize>,
    pub param_count: usize,
}

/// An ordered stack of layers with parameters and gradient buffers.
///
/// Parameters live in one flat list in layer order, weight before bias;
/// gradients mirror that list exactly.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shape_trace: Vec<Vec<usize>>,
    /// Index into `params` of each layer's weight (its bias follows).
    slots: Vec<Option<usize>>,
    params: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with zero-initialised parameters.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut shape_trace = Vec::with_capacity(layers.len());
        let mut slots = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(&shape)
                .map_err(|e| Error::shape(format!("layer {i} ({layer}): {e}")))?;
            if let Some((w, b)) = layer.param_shapes(&shape) {
                slots.push(Some(params.len()));
                params.push(Tensor::zeros(&w)?);
                params.push(Tensor::zeros(&b)?);
            } else {
                slots.push(None);
            }
            shape_trace.push(next.clone());
            shape = next;
        }
        let grads = params.iter().map(Tensor::zeros_like).collect();
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            shape_trace,
            slots,
            params,
            grads,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shape_trace.last().map_or(&self.input_shape, Vec::as_slice)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample output shape of every layer, in order.
    pub fn shape_trace(&self) -> &[Vec<usize>] {
        &self.shape_trace
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    /// Parameters paired with their gradients, for optimizers.
    pub fn params_and_grads(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &Tensor<T>)> {
        self.params.iter_mut().zip(self.grads.iter())
    }

    /// True for weight tensors (even slots), false for biases.
    pub fn is_weight(&self, param_index: usize) -> bool {
        param_index.is_multiple_of(2)
    }

    /// Weight and bias of layer `index`, if it has parameters.
    pub fn layer_params(&self, index: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.slots[index].map(|s| (&self.params[s], &self.params[s + 1]))
    }

    pub fn layer_params_mut(&mut self, index: usize) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        self.slots[index].map(|s| {
            let (w, b) = self.params[s..s + 2].split_at_mut(1);
            (&mut w[0], &mut b[0])
        })
    }

    pub fn layer_param_count(&self, index: usize) -> usize {
        self.layer_params(index).map_or(0, |(w, b)| w.len() + b.len())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Architecture rows with activations folded into the layer they follow.
    pub fn summary(&self) -> Vec<LayerSummary> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !matches!(l, LayerSpec::Activation(_)))
            .map(|(i, l)| LayerSummary {
                layer_index: i,
                spec: l.clone(),
                output_shape: self.shape_trace[i].clone(),
                param_count: self.layer_param_count(i),
            })
            .collect()
    }

    /// Copies parameters from another network with the same layout.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("parameter list does not match the network layout"));
        }
        self.params = params;
        Ok(())
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            shape_trace: self.shape_trace.clone(),
            slots: self.slots.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
        }
    }

    /// Xavier-uniform weights and zero biases.
    pub fn init_xavier(&mut self, rng: &mut impl Rng) {
        for i in 0..self.layers.len() {
            let Some((w, b)) = self.layer_params_mut(i) else {
                continue;
            };
            let (fan_in, fan_out) = match *w.shape() {
                [o, c, kh, kw] => (c * kh * kw, o * kh * kw),
                [u, f] => (f, u),
                _ => unreachable!("weights are rank 2 or 4"),
            };
            *w = crate::optim::xavier_init(w.shape(), fan_in, fan_out, rng)
                .expect("weight shapes are valid");
            b.data_mut().fill(T::zero());
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match network input N×{:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Runs every layer.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode<'_>) -> Result<ForwardPass<T>> {
        self.forward_prefix(batch, self.layers.len(), mode)
    }

    /// Runs layers `0..end` only.
    pub fn forward_prefix(&self, batch: &Tensor<T>, end: usize, mut mode: Mode<'_>) -> Result<ForwardPass<T>> {
        self.check_batch(batch)?;
        let end = end.min(self.layers.len());
        let train = mode.is_train();
        let mut activations = Vec::with_capacity(end + 1);
        let mut caches = Vec::with_capacity(end);
        activations.push(batch.clone());
        for i in 0..end {
            let x = &activations[i];
            let n = x.shape()[0];
            let (y, cache) = match &self.layers[i] {
                LayerSpec::Conv3x3 { pad, .. } => {
                    let (w, b) = self.layer_params(i).expect("conv has params");
                    (layers::conv_forward(x, w, b, *pad), LayerCache::None)
                }
                LayerSpec::MaxPool2x2 => {
                    let (y, arg) = layers::maxpool_forward(x);
                    (y, LayerCache::PoolArgmax(arg))
                }
                LayerSpec::Activation(kind) => (layers::activation_forward(*kind, x), LayerCache::None),
                LayerSpec::Flatten => {
                    let width = x.item_len();
                    (x.clone().reshape(&[n, width])?, LayerCache::None)
                }
                LayerSpec::Dropout { rate } => match &mut mode {
                    Mode::Train(rng) if *rate > 0.0 => {
                        let mask = layers::dropout_mask(x.len(), *rate, &mut **rng);
                        (layers::apply_mask(x, &mask), LayerCache::DropoutMask(mask))
                    }
                    _ => (x.clone(), LayerCache::None),
                },
                LayerSpec::Dense { .. } => {
                    let (w, b) = self.layer_params(i).expect("dense has params");
                    (layers::dense_forward(x, w, b), LayerCache::None)
                }
            };
            activations.push(y);
            caches.push(cache);
        }
        Ok(ForwardPass {
            activations,
            caches,
            train,
        })
    }

    /// Eval-mode probabilities for a batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pass = self.forward(batch, Mode::Eval)?;
        Ok(pass.activations.pop().expect("output present"))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    /// Backpropagates `grad_output` (gradient of some objective with respect
    /// to the pass output) through a complete pass, accumulating parameter
    /// gradients. Returns the gradient with respect to the input batch when
    /// `need_input_grad` is set.
    pub fn backprop(
        &mut self,
        pass: &ForwardPass<T>,
        grad_output: Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if pass.depth() != self.layers.len() {
            return Err(Error::Usage("backward needs a full forward pass".into()));
        }
        if grad_output.shape() != pass.output().shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_output.shape(),
                pass.output().shape()
            )));
        }
        let mut grad = grad_output;
        for i in (0..self.layers.len()).rev() {
            let x = &pass.activations[i];
            let y = &pass.activations[i + 1];
            let want_input = need_input_grad || i > 0;
            let next = match (&self.layers[i], &pass.caches[i]) {
                (LayerSpec::Conv3x3 { pad, .. }, _) => {
                    let s = self.slots[i].expect("conv has params");
                    let (weights, grads) = (&self.params, &mut self.grads);
                    let (wg, bg) = grads[s..s + 2].split_at_mut(1);
                    layers::conv_backward(x, &weights[s], *pad, &grad, &mut wg[0], &mut bg[0], want_input)
                }
                (LayerSpec::Dense { .. }, _) => {
                    let s = self.slots[i].expect("dense has params");
                    let (weights, grads) = (&self.params, &mut self.grads);
                    let (wg, bg) = grads[s..s + 2].split_at_mut(1);
                    layers::dense_backward(x, &weights[s], &grad, &mut wg[0], &mut bg[0], want_input)
                }
                (LayerSpec::MaxPool2x2, LayerCache::PoolArgmax(arg)) => {
                    Some(layers::maxpool_backward(x.shape(), arg, &grad))
                }
                (LayerSpec::Activation(kind), _) => Some(layers::activation_backward(*kind, x, y, &grad)),
                (LayerSpec::Flatten, _) => Some(grad.reshape(x.shape())?),
                (LayerSpec::Dropout { .. }, LayerCache::DropoutMask(mask)) => Some(layers::apply_mask(&grad, mask)),
                (LayerSpec::Dropout { .. }, _) => Some(grad),
                (LayerSpec::MaxPool2x2, _) => unreachable!("pooling always caches its argmax"),
            };
            match next {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    /// Squared L2 norm of all weight tensors (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.params
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_weight(*i))
            .map(|(_, w)| w.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
            .sum()
    }

    /// Mean binary cross-entropy plus `l2_lambda·Σ‖W‖²`.
    pub fn loss(&self, probabilities: &Tensor<T>, labels: &Tensor<T>, l2_lambda: f64) -> Result<f64> {
        Ok(bce_loss(probabilities, labels)? + l2_lambda * self.weight_sq_norm())
    }

    /// Loss of a completed forward pass and its gradients. Parameter
    /// gradients are overwritten.
    pub fn backward(&mut self, pass: &ForwardPass<T>, labels: &Tensor<T>, l2_lambda: f64) -> Result<f64> {
        let probs = pass.output();
        let loss = self.loss(probs, labels, l2_lambda)?;
        let grad_output = bce_grad(probs, labels);
        self.zero_grads();
        self.backprop(pass, grad_output, false)?;
        if l2_lambda != 0.0 {
            let scale = T::from_f64(2.0 * l2_lambda);
            for (i, (g, w)) in self.grads.iter_mut().zip(&self.params).enumerate() {
                if i % 2 == 0 {
                    for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                        *gv = *gv + scale * wv;
                    }
                }
            }
        }
        Ok(loss)
    }

    /// Flatten-layer output in eval mode: the convolutional feature vector.
    pub fn extract_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let flatten = self
            .layers
            .iter()
            .position(|l| *l == LayerSpec::Flatten)
            .ok_or_else(|| Error::Usage("network has no flatten layer to read features from".into()))?;
        let mut pass = self.forward_prefix(batch, flatten + 1, Mode::Eval)?;
        Ok(pass.activations.pop().expect("flatten output present"))
    }
}

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<()> {
    if probs.shape() != labels.shape() {
        return Err(Error::shape(format!(
            "labels {:?} do not match predictions {:?}",
            labels.shape(),
            probs.shape()
        )));
    }
    if let Some(bad) = labels.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::validation(format!("label {bad} lies outside [0, 1]")));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`. A hard label matched exactly costs zero.
pub fn bce_loss<T: Scalar>(probabilities: &Tensor<T>, labels: &Tensor<T>) -> Result<f64> {
    check_labels(probabilities, labels)?;
    let n = probabilities.len() as f64;
    let total: f64 = probabilities
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            if p == y && (y == 0.0 || y == 1.0) {
                return 0.0;
            }
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let mut l = 0.0;
            if y > 0.0 {
                l -= y * p.ln();
            }
            if y < 1.0 {
                l -= (1.0 - y) * (1.0 - p).ln();
            }
            l
        })
        .sum();
    Ok(total / n)
}

/// Gradient of [`bce_loss`] with respect to the probabilities. Zero where
/// the clamp is active.
fn bce_grad<T: Scalar>(probabilities: &Tensor<T>, labels: &Tensor<T>) -> Tensor<T> {
    let n = T::from_f64(probabilities.len() as f64);
    let lo = T::from_f64(PROB_CLAMP);
    let hi = T::one() - lo;
    let data = probabilities
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                (p - y) / (p * (T::one() - p)) / n
            }
        })
        .collect();
    Tensor::from_vec(probabilities.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layer_spec_text_roundtrip() {
        let specs = [
            LayerSpec::Conv3x3 { out_channels: 32, pad: 0 },
            LayerSpec::Conv3x3 { out_channels: 64, pad: 1 },
            LayerSpec::MaxPool2x2,
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Activation(Activation::LeakyRelu { alpha: 0.1 }),
            LayerSpec::Activation(Activation::Sigmoid),
            LayerSpec::Flatten,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Dense { out_units: 512 },
        ];
        for spec in specs {
            let text = spec.to_string();
            assert_eq!(text.parse::<LayerSpec>().unwrap(), spec, "{text}");
        }
        assert!("conv5x5 3".parse::<LayerSpec>().is_err());
        assert!("dropout 1.0".parse::<LayerSpec>().is_err());
        assert!("activation leaky_relu 1.5".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn invalid_layers_rejected() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Activation(Activation::LeakyRelu { alpha: 0.0 }).validate().is_err());
        assert!(Network::<f32>::new(&[3, 8, 8], vec![LayerSpec::Dense { out_units: 2 }]).is_err());
        assert!(Network::<f32>::new(&[1, 2, 2], vec![LayerSpec::Conv3x3 { out_channels: 1, pad: 0 }]).is_err());
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let net = build_paper_net();
        let batch = Tensor::<f32>::new(&[1, 3, 150, 150], 0.7).unwrap();
        let p = net.predict(&batch).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
        assert_eq!(p.data(), &[0.5]);
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let mut net = Network::<f32>::new(
            &[2, 8, 8],
            vec![
                LayerSpec::Conv3x3 { out_channels: 4, pad: 0 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { out_units: 1 },
                LayerSpec::Activation(Activation::Sigmoid),
            ],
        )
        .unwrap();
        net.init_xavier(&mut ChaCha8Rng::seed_from_u64(4));
        let batch = random_batch(&[3, 2, 8, 8], 8).cast::<f32>();
        let a = net.predict(&batch).unwrap();
        let b = net.predict(&batch).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn single_conv_net_matches_nested_loops() {
        // conv(1→1) → relu → flatten → dense(1) → sigmoid on a 5×5 input.
        let mut net = Network::<f64>::new(
            &[1, 5, 5],
            vec![
                LayerSpec::Conv3x3 { out_channels: 1, pad: 0 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 1 },
                LayerSpec::Activation(Activation::Sigmoid),
            ],
        )
        .unwrap();
        net.init_xavier(&mut ChaCha8Rng::seed_from_u64(21));
        net.layer_params_mut(0).unwrap().1.data_mut()[0] = 0.05;
        net.layer_params_mut(3).unwrap().1.data_mut()[0] = -0.1;
        let x = random_batch(&[1, 1, 5, 5], 22);
        let got = net.predict(&x).unwrap().data()[0];

        let (kw, kb) = net.layer_params(0).unwrap();
        let (dw, db) = net.layer_params(3).unwrap();
        let mut logit = db.data()[0];
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = kb.data()[0];
                for ky in 0..3 {
                    for kx in 0..3 {
                        acc += kw.at(&[0, 0, ky, kx]) * x.at(&[0, 0, oy + ky, ox + kx]);
                    }
                }
                logit += dw.at(&[0, oy * 3 + ox]) * acc.max(0.0);
            }
        }
        let expected = 1.0 / (1.0 + (-logit).exp());
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn bce_values() {
        let p = Tensor::from_vec(&[1, 1], vec![0.5f64]).unwrap();
        let y = Tensor::from_vec(&[1, 1], vec![1.0f64]).unwrap();
        assert!((bce_loss(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        for label in [0.0, 1.0] {
            let y = Tensor::from_vec(&[1], vec![label]).unwrap();
            let exact = Tensor::from_vec(&[1], vec![label]).unwrap();
            assert_eq!(bce_loss(&exact, &y).unwrap(), 0.0);
            for p in [0.01, 0.3, 0.5, 0.8, 0.99] {
                if p == label {
                    continue;
                }
                let off = Tensor::from_vec(&[1], vec![p]).unwrap();
                assert!(bce_loss(&off, &y).unwrap() > 0.0);
            }
        }

        let bad = Tensor::from_vec(&[1, 1], vec![1.5f64]).unwrap();
        assert!(matches!(bce_loss(&p, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn backward_rejects_out_of_range_labels() {
        let mut net = build_logistic_head::<f64>(4);
        let x = random_batch(&[2, 4], 3);
        let pass = net.forward(&x, Mode::Eval).unwrap();
        let labels = Tensor::from_vec(&[2, 1], vec![0.0, -1.0]).unwrap();
        assert!(matches!(net.backward(&pass, &labels, 0.0), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_weight_l2_contribution_is_zero() {
        let mut net = build_logistic_head::<f64>(4);
        let x = random_batch(&[2, 4], 3);
        let pass = net.forward(&x, Mode::Eval).unwrap();
        let labels = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap();
        let plain = net.backward(&pass, &labels, 0.0).unwrap();
        let with_l2 = net.backward(&pass, &labels, 1e-3).unwrap();
        assert_eq!(plain, with_l2);
        assert!((plain - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn grads_mirror_params() {
        let net = build_paper_net();
        assert_eq!(net.params().len(), net.grads().len());
        for (p, g) in net.params().iter().zip(net.grads()) {
            assert_eq!(p.shape(), g.shape());
        }
    }

    #[test]
    fn features_are_nonnegative_under_relu() {
        let mut net = Network::<f32>::new(
            &[3, 20, 20],
            vec![
                LayerSpec::Conv3x3 { out_channels: 4, pad: 0 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::MaxPool2x2,
                LayerSpec::Conv3x3 { out_channels: 4, pad: 0 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 1 },
                LayerSpec::Activation(Activation::Sigmoid),
            ],
        )
        .unwrap();
        for seed in 0..5 {
            net.init_xavier(&mut ChaCha8Rng::seed_from_u64(seed));
            let x = random_batch(&[2, 3, 20, 20], seed + 100).cast::<f32>();
            let f = net.extract_features(&x).unwrap();
            assert_eq!(f.shape(), &[2, 4 * 3 * 3]);
            assert!(f.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn full_net_feature_width() {
        let net = build_paper_net();
        let x = Tensor::<f32>::zeros(&[1, 3, 150, 150]).unwrap();
        let f = net.extract_features(&x).unwrap();
        assert_eq!(f.shape(), &[1, 6272]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}
