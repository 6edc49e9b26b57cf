//! Deep Taylor relevance propagation.
//!
//! [`explain`] runs a forward pass, seeds the target class with its logit,
//! and walks the layers in reverse applying one rule per layer kind:
//!
//! * relu: relevance passes through unchanged;
//! * max-pool: relevance goes to the selected input of each window;
//! * avg-pool: each window position receives `R / N` for a window of `N`;
//! * conv3d / linear: the alpha-beta rule
//!   `R_i = sum_j (a * z+_ij / (sum_i z+_ij + b+_j) - b * z-_ij / (sum_i z-_ij + b-_j)) R_j`;
//! * the first conv3d / linear layer: the bounded z-beta rule
//!   `R_i = sum_j (z_ij - l_i w+_ij - h_i w-_ij) / (sum_i' z_i'j - l_i' w+_i'j - h_i' w-_i'j) R_j`;
//! * flatten: relevance is reshaped back.
//!
//! Here `z_ij = x_i w_ij`. Denominators are stabilized away from zero with
//! the sign-preserving `eps`. Every rule is linear in the incoming relevance.

use log::warn;

use crate::error::{Error, Result};
use crate::network::ops::{self, Geometry, PoolMask};
use crate::network::{ActivationCache, Conv3dLayer, Layer, LinearLayer, Network, Normalization};
use crate::tensor::{elementwise, split_signs, BinaryOp, Tensor};

/// Which output neuron to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Argmax,
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceConfig {
    pub alpha: f32,
    pub beta: f32,
    /// Denominator stabilizer, `> 0`.
    pub eps: f32,
    /// Lowest admissible input value per channel (one entry broadcasts).
    pub input_low: Vec<f32>,
    /// Highest admissible input value per channel (one entry broadcasts).
    pub input_high: Vec<f32>,
    pub target: Target,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            eps: 1e-9,
            input_low: vec![0.0],
            input_high: vec![255.0],
            target: Target::Argmax,
        }
    }
}

impl RelevanceConfig {
    pub fn alpha_beta(alpha: f32, beta: f32) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_target(mut self, target: Target) -> Self {
        self.target = target;
        self
    }

    pub fn with_eps(mut self, eps: f32) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_bounds(mut self, low: Vec<f32>, high: Vec<f32>) -> Self {
        self.input_low = low;
        self.input_high = high;
        self
    }

    /// Bounds set to the images of pixel values 0 and 255 under `norm`.
    pub fn with_normalization(self, norm: &Normalization, channels: usize) -> Self {
        let (low, high) = norm.bounds(channels, 0.0, 255.0);
        self.with_bounds(low, high)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Relevance(m));
        if !(self.alpha >= 1.0) || !(self.beta >= 0.0) {
            return fail(format!(
                "need alpha >= 1 and beta >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            ));
        }
        if ((self.alpha - self.beta) - 1.0).abs() > 1e-6 {
            return fail(format!(
                "alpha - beta must equal 1, got alpha={} beta={}",
                self.alpha, self.beta
            ));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.input_low.is_empty() || self.input_low.len() != self.input_high.len() {
            return fail("input bounds must be non-empty and of equal length".into());
        }
        if let Some((l, h)) = self
            .input_low
            .iter()
            .zip(&self.input_high)
            .find(|(l, h)| !(l <= h))
        {
            return fail(format!("input bounds need low <= high, got [{l}, {h}]"));
        }
        Ok(())
    }
}

/// Relevance over the network input for one target class.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    pub relevance: Tensor,
    pub target_class: usize,
    pub target_logit: f32,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.relevance.sum()
    }
}

pub fn relu_relevance(relevance: &Tensor) -> Tensor {
    relevance.clone()
}

pub fn maxpool_relevance(mask: &PoolMask, relevance: &Tensor) -> Result<Tensor> {
    ops::maxpool3d_route(mask, relevance)
}

pub fn avgpool_relevance(relevance: &Tensor, input_shape: &[usize], geometry: &Geometry) -> Result<Tensor> {
    ops::avgpool3d_spread(relevance, input_shape, geometry)
}

/// A conv3d or linear layer viewed as `x -> W x + b`.
#[derive(Clone, Copy)]
enum Affine<'a> {
    Conv(&'a Conv3dLayer),
    Linear(&'a LinearLayer),
}

impl<'a> Affine<'a> {
    fn of(layer: &'a Layer) -> Result<Self> {
        match layer {
            Layer::Conv3d(c) => Ok(Affine::Conv(c)),
            Layer::Linear(l) => Ok(Affine::Linear(l)),
            other => Err(Error::Relevance(format!(
                "{} layers have no affine relevance rule",
                other.kind()
            ))),
        }
    }

    fn weight(&self) -> &'a Tensor {
        match self {
            Affine::Conv(c) => &c.weight,
            Affine::Linear(l) => &l.weight,
        }
    }

    fn bias(&self) -> &'a Tensor {
        match self {
            Affine::Conv(c) => &c.bias,
            Affine::Linear(l) => &l.bias,
        }
    }

    /// Bias-free forward map with substituted weights.
    fn apply(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        match self {
            Affine::Conv(c) => ops::conv3d_forward(x, weight, None, &c.geometry),
            Affine::Linear(_) => ops::linear_forward(x, weight, None),
        }
    }

    fn transpose(&self, g: &Tensor, weight: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        match self {
            Affine::Conv(c) => ops::conv3d_transpose(g, weight, input_shape, &c.geometry),
            Affine::Linear(_) => ops::linear_transpose(g, weight, input_shape.iter().product()),
        }
    }
}

fn check_relevance_shape(affine: Affine, input: &Tensor, relevance: &Tensor) -> Result<()> {
    let ws = affine.weight().shape();
    let expected = match affine {
        Affine::Conv(c) => {
            let (channels, extents) = ops::spatial_dims(input.shape())?;
            if ws[1] != channels {
                return Err(Error::shape(&[ws[0], channels], &ws[..2]));
            }
            let out = c
                .geometry
                .output_extents(extents)
                .map_err(Error::InvalidTensor)?;
            vec![ws[0], out[0], out[1], out[2]]
        }
        Affine::Linear(_) => {
            if input.shape() != [ws[1]] {
                return Err(Error::shape(&[ws[1]], input.shape()));
            }
            vec![ws[0]]
        }
    };
    if relevance.shape() != expected.as_slice() {
        return Err(Error::shape(&expected, relevance.shape()));
    }
    Ok(())
}

fn is_all_zero(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0)
}

fn div(r: &Tensor, denom: &Tensor, eps: f32) -> Result<Tensor> {
    elementwise(BinaryOp::DivStabilized, r, denom, eps)
}

/// Alpha-beta rule for a conv3d or linear layer. `input` is the cached
/// forward input to the layer; `relevance` is shaped like its output.
pub fn alpha_beta_relevance(
    layer: &Layer,
    input: &Tensor,
    relevance: &Tensor,
    cfg: &RelevanceConfig,
) -> Result<Tensor> {
    let affine = Affine::of(layer)?;
    check_relevance_shape(affine, input, relevance)?;
    let shape = input.shape();
    if is_all_zero(relevance) {
        return Tensor::zeros(shape);
    }

    let (x_pos, x_neg) = split_signs(input);
    let (w_pos, w_neg) = split_signs(affine.weight());
    let (b_pos, b_neg) = split_signs(affine.bias());
    let has_neg_input = !is_all_zero(&x_neg);

    // z+_ij = x+ w+ + x- w-
    let mut z_pos = affine.apply(&x_pos, &w_pos)?;
    if has_neg_input {
        z_pos = z_pos.add(&affine.apply(&x_neg, &w_neg)?)?;
    }
    let z_pos = z_pos.add(&bias_like(&b_pos, z_pos.shape())?)?;
    let s_pos = div(relevance, &z_pos, cfg.eps)?.scale(cfg.alpha);
    let mut r_in = x_pos.mul(&affine.transpose(&s_pos, &w_pos, shape)?)?;
    if has_neg_input {
        r_in = r_in.add(&x_neg.mul(&affine.transpose(&s_pos, &w_neg, shape)?)?)?;
    }

    if cfg.beta != 0.0 {
        // z-_ij = x+ w- + x- w+
        let mut z_neg = affine.apply(&x_pos, &w_neg)?;
        if has_neg_input {
            z_neg = z_neg.add(&affine.apply(&x_neg, &w_pos)?)?;
        }
        let z_neg = z_neg.add(&bias_like(&b_neg, z_neg.shape())?)?;
        let s_neg = div(relevance, &z_neg, cfg.eps)?.scale(cfg.beta);
        let mut r_neg = x_pos.mul(&affine.transpose(&s_neg, &w_neg, shape)?)?;
        if has_neg_input {
            r_neg = r_neg.add(&x_neg.mul(&affine.transpose(&s_neg, &w_pos, shape)?)?)?;
        }
        r_in = r_in.sub(&r_neg)?;
    }
    Ok(r_in)
}

/// Broadcasts a per-output-channel bias over an output-shaped tensor.
fn bias_like(bias: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let per_channel = shape.iter().product::<usize>() / bias.numel();
    let data = bias
        .data()
        .iter()
        .flat_map(|&b| std::iter::repeat_n(b, per_channel))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Expands per-channel values over `shape`, treating the leading axis as
/// the channel axis. A single value broadcasts.
fn channel_tensor(values: &[f32], shape: &[usize]) -> Result<Tensor> {
    let channels = shape[0];
    if values.len() != 1 && values.len() != channels {
        return Err(Error::Relevance(format!(
            "{} bound values given for {channels} input channels",
            values.len()
        )));
    }
    let per_channel = shape.iter().product::<usize>() / channels;
    let data = (0..channels)
        .flat_map(|c| std::iter::repeat_n(values[c % values.len()], per_channel))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// z-beta rule for the input layer, with per-channel bounds from `cfg`
/// laid over the leading axis of `input`.
pub fn z_beta_relevance(
    layer: &Layer,
    input: &Tensor,
    relevance: &Tensor,
    cfg: &RelevanceConfig,
) -> Result<Tensor> {
    let low = channel_tensor(&cfg.input_low, input.shape())?;
    let high = channel_tensor(&cfg.input_high, input.shape())?;
    z_beta_with_bounds(layer, input, relevance, &low, &high, cfg.eps)
}

fn z_beta_with_bounds(
    layer: &Layer,
    input: &Tensor,
    relevance: &Tensor,
    low: &Tensor,
    high: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let affine = Affine::of(layer)?;
    check_relevance_shape(affine, input, relevance)?;
    let shape = input.shape();
    if low.shape() != shape || high.shape() != shape {
        return Err(Error::shape(shape, low.shape()));
    }
    let outside = input
        .data()
        .iter()
        .zip(low.data().iter().zip(high.data()))
        .filter(|(x, (l, h))| x < l || x > h)
        .count();
    if outside > 0 {
        warn!("{outside} input values lie outside the z-beta bounds");
    }
    if is_all_zero(relevance) {
        return Tensor::zeros(shape);
    }

    let w = affine.weight();
    let (w_pos, w_neg) = split_signs(w);
    let denom = affine
        .apply(input, w)?
        .sub(&affine.apply(low, &w_pos)?)?
        .sub(&affine.apply(high, &w_neg)?)?;
    let s = div(relevance, &denom, eps)?;
    input
        .mul(&affine.transpose(&s, w, shape)?)?
        .sub(&low.mul(&affine.transpose(&s, &w_pos, shape)?)?)?
        .sub(&high.mul(&affine.transpose(&s, &w_neg, shape)?)?)
}

fn resolve_target(target: Target, logits: &Tensor) -> Result<usize> {
    match target {
        Target::Argmax => Ok(logits.argmax()),
        Target::Class(k) if k < logits.numel() => Ok(k),
        Target::Class(k) => Err(Error::TargetOutOfRange {
            target: k,
            num_classes: logits.numel(),
        }),
    }
}

/// Index of the layer that receives the z-beta rule: the first conv3d or
/// linear layer, provided only flatten layers precede it.
fn z_beta_layer(net: &Network) -> Option<usize> {
    let first = net
        .layers()
        .iter()
        .position(|l| matches!(l, Layer::Conv3d(_) | Layer::Linear(_)))?;
    if net.layers()[..first].iter().all(|l| matches!(l, Layer::Flatten)) {
        Some(first)
    } else {
        warn!("first affine layer is preceded by non-reshaping layers; using alpha-beta there");
        None
    }
}

/// Backward relevance pass over a cached forward pass, seeding `target`
/// with `seed`. Returns the input relevance and, for every layer boundary,
/// the total relevance (`sums[k]` at the input of layer `k`, the last entry
/// at the output).
pub fn propagate_traced(
    net: &Network,
    cache: &ActivationCache,
    target: usize,
    seed: f32,
    cfg: &RelevanceConfig,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    let layers = net.layers();
    if cache.inputs.len() != layers.len() || cache.masks.len() != layers.len() {
        return Err(Error::Relevance(
            "activation cache does not match the network".into(),
        ));
    }
    if target >= net.num_classes() {
        return Err(Error::TargetOutOfRange {
            target,
            num_classes: net.num_classes(),
        });
    }

    let mut relevance = Tensor::zeros(&[net.num_classes()])?;
    relevance.data_mut()[target] = seed;

    let zb = z_beta_layer(net);
    let bounds = match zb {
        Some(k) => {
            let low = channel_tensor(&cfg.input_low, net.input_shape())?;
            let high = channel_tensor(&cfg.input_high, net.input_shape())?;
            let shape = cache.inputs[k].shape();
            Some((low.reshape(shape)?, high.reshape(shape)?))
        }
        None => None,
    };

    let mut sums = vec![0.0; layers.len() + 1];
    sums[layers.len()] = relevance.sum();
    for (index, layer) in layers.iter().enumerate().rev() {
        let input = &cache.inputs[index];
        let wrap = |e: Error| Error::Layer {
            index,
            kind: layer.kind(),
            message: e.to_string(),
        };
        relevance = match layer {
            Layer::Conv3d(_) | Layer::Linear(_) => match (&bounds, zb) {
                (Some((low, high)), Some(k)) if k == index => {
                    z_beta_with_bounds(layer, input, &relevance, low, high, cfg.eps)
                }
                _ => alpha_beta_relevance(layer, input, &relevance, cfg),
            },
            Layer::Relu => Ok(relu_relevance(&relevance)),
            Layer::MaxPool3d(_) => match &cache.masks[index] {
                Some(mask) => maxpool_relevance(mask, &relevance),
                None => Err(Error::Relevance("missing max-pool mask".into())),
            },
            Layer::AvgPool3d(g) => avgpool_relevance(&relevance, input.shape(), g),
            Layer::Flatten => relevance.reshape(input.shape()),
        }
        .map_err(wrap)?;
        sums[index] = relevance.sum();
    }
    Ok((relevance, sums))
}

pub fn propagate(
    net: &Network,
    cache: &ActivationCache,
    target: usize,
    seed: f32,
    cfg: &RelevanceConfig,
) -> Result<Tensor> {
    Ok(propagate_traced(net, cache, target, seed, cfg)?.0)
}

/// Explains `input` (already normalized) for the class selected by
/// `cfg.target`, seeding with that class's logit.
pub fn explain(net: &Network, input: &Tensor, cfg: &RelevanceConfig) -> Result<RelevanceMap> {
    Ok(explain_with_logits(net, input, cfg)?.0)
}

/// [`explain`], also returning the logits of the forward pass.
pub fn explain_with_logits(
    net: &Network,
    input: &Tensor,
    cfg: &RelevanceConfig,
) -> Result<(RelevanceMap, Tensor)> {
    cfg.validate()?;
    let (logits, cache) = net.forward(input)?;
    let target_class = resolve_target(cfg.target, &logits)?;
    let target_logit = logits.data()[target_class];
    if target_logit < 0.0 {
        warn!("target class {target_class} has negative logit {target_logit}; propagating a negative seed");
    }
    let relevance = propagate(net, &cache, target_class, target_logit, cfg)?;
    let map = RelevanceMap {
        relevance,
        target_class,
        target_logit,
    };
    Ok((map, logits))
}
