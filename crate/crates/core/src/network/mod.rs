//! Config-described sequential 3D CNNs.
//!
//! An [`Architecture`] is the parsed, shape-checked layer list from a JSON
//! config. Binding it against a [`WeightContainer`] produces a [`Network`]
//! in which every batch-norm layer has been folded into the preceding
//! convolution or linear layer, so downstream code only ever sees
//! conv3d / linear / relu / pooling / flatten.
//!
//! Parameter tensors are looked up by `<layer name>.<param>`:
//!
//! | kind        | tensors                                                       |
//! |-------------|---------------------------------------------------------------|
//! | `conv3d`    | `weight [O, C, kt, kh, kw]`, `bias [O]` (unless `"bias": false`) |
//! | `linear`    | `weight [out, in]`, `bias [out]` (unless `"bias": false`)       |
//! | `batchnorm` | `weight`, `bias`, `running_mean`, `running_var`, each `[C]`     |

mod batchnorm;
pub mod ops;

use serde::{Deserialize, Serialize};

pub use batchnorm::{fold_batchnorm, BatchNormParams};
pub use ops::{Geometry, PoolMask};

use crate::error::{Error, Result};
use crate::io::WeightContainer;
use crate::tensor::Tensor;

/// C3D layout for UCF-101: 8 convolutions, 5 max-pools, 3 linear layers.
pub const C3D_CONFIG: &str = include_str!("../../assets/c3d.json");

/// Small 4-class network over `3 x 16 x 32 x 32` clips, for demos and tests.
pub const TINY_CONFIG: &str = include_str!("../../assets/tiny.json");

fn one3() -> [usize; 3] {
    [1; 3]
}

fn yes() -> bool {
    true
}

fn default_bn_eps() -> f32 {
    1e-5
}

/// One entry of the `layers` array in an architecture config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv3d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        #[serde(default = "one3")]
        stride: [usize; 3],
        #[serde(default)]
        padding: [usize; 3],
        #[serde(default = "yes")]
        bias: bool,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    Maxpool3d {
        kernel: [usize; 3],
        /// Defaults to the kernel extents.
        #[serde(default)]
        stride: Option<[usize; 3]>,
        #[serde(default)]
        padding: [usize; 3],
    },
    Avgpool3d {
        kernel: [usize; 3],
        #[serde(default)]
        stride: Option<[usize; 3]>,
        #[serde(default)]
        padding: [usize; 3],
    },
    Batchnorm {
        name: String,
        num_features: usize,
        #[serde(default = "default_bn_eps")]
        eps: f32,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool3d { .. } => "maxpool3d",
            LayerSpec::Avgpool3d { .. } => "avgpool3d",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Container entries this layer binds, with their expected shapes.
    pub fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerSpec::Conv3d {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut p = vec![(
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, kernel[0], kernel[1], kernel[2]],
                )];
                if *bias {
                    p.push((format!("{name}.bias"), vec![*out_channels]));
                }
                p
            }
            LayerSpec::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                let mut p = vec![(format!("{name}.weight"), vec![*out_features, *in_features])];
                if *bias {
                    p.push((format!("{name}.bias"), vec![*out_features]));
                }
                p
            }
            LayerSpec::Batchnorm {
                name, num_features, ..
            } => ["weight", "bias", "running_mean", "running_var"]
                .iter()
                .map(|p| (format!("{name}.{p}"), vec![*num_features]))
                .collect(),
            _ => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if *in_channels == 0 || *out_channels == 0 {
                    return Err("channel counts must be >= 1".into());
                }
                let (c, extents) = spatial(input)?;
                if c != *in_channels {
                    return Err(format!(
                        "expects {in_channels} input channels, input shape is {input:?}"
                    ));
                }
                let out = Geometry::new(*kernel, *stride, *padding).output_extents(extents)?;
                Ok(vec![*out_channels, out[0], out[1], out[2]])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                if *out_features == 0 {
                    return Err("out_features must be >= 1".into());
                }
                if input != [*in_features] {
                    return Err(format!(
                        "expects input [{in_features}], input shape is {input:?}"
                    ));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Maxpool3d { .. } | LayerSpec::Avgpool3d { .. } => {
                let geometry = self.pool_geometry().expect("pool layer");
                let (c, extents) = spatial(input)?;
                if matches!(self, LayerSpec::Maxpool3d { .. }) {
                    for d in 0..3 {
                        if 2 * geometry.padding[d] > geometry.kernel[d] {
                            return Err(format!(
                                "max-pool padding {:?} exceeds half the kernel {:?}",
                                geometry.padding, geometry.kernel
                            ));
                        }
                    }
                }
                let out = geometry.output_extents(extents)?;
                Ok(vec![c, out[0], out[1], out[2]])
            }
            LayerSpec::Batchnorm { num_features, .. } => {
                if input.first() != Some(num_features) {
                    return Err(format!(
                        "expects {num_features} channels, input shape is {input:?}"
                    ));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn pool_geometry(&self) -> Option<Geometry> {
        match self {
            LayerSpec::Maxpool3d {
                kernel,
                stride,
                padding,
            }
            | LayerSpec::Avgpool3d {
                kernel,
                stride,
                padding,
            } => Some(Geometry::new(*kernel, stride.unwrap_or(*kernel), *padding)),
            _ => None,
        }
    }
}

fn spatial(shape: &[usize]) -> std::result::Result<(usize, [usize; 3]), String> {
    match *shape {
        [c, t, h, w] => Ok((c, [t, h, w])),
        _ => Err(format!("expects a C x T x H x W input, got {shape:?}")),
    }
}

/// Per-channel input normalization `x' = (x - mean) / std` for clips in
/// `[0, 255]`. Single-element vectors broadcast across channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    #[serde(default = "unit_std")]
    pub std: Vec<f32>,
}

fn unit_std() -> Vec<f32> {
    vec![1.0]
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }
}

impl Normalization {
    pub fn validate(&self, channels: usize) -> Result<()> {
        for (what, v) in [("mean", &self.mean), ("std", &self.std)] {
            if v.len() != 1 && v.len() != channels {
                return Err(Error::Config(format!(
                    "normalization {what} has {} entries, expected 1 or {channels}",
                    v.len()
                )));
            }
        }
        if self.std.iter().any(|s| !(s.abs() > 0.0)) {
            return Err(Error::Config("normalization std must be non-zero".into()));
        }
        Ok(())
    }

    fn channel_value(values: &[f32], c: usize) -> f32 {
        if values.len() == 1 {
            values[0]
        } else {
            values[c]
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.std.iter().all(|&s| s == 1.0)
    }

    /// Normalizes a tensor whose leading axis is the channel axis.
    pub fn apply(&self, clip: &Tensor) -> Result<Tensor> {
        let channels = clip.shape()[0];
        self.validate(channels)?;
        if self.is_identity() {
            return Ok(clip.clone());
        }
        let per_channel = clip.numel() / channels;
        let data = clip
            .data()
            .chunks(per_channel)
            .enumerate()
            .flat_map(|(c, chunk)| {
                let m = Self::channel_value(&self.mean, c);
                let s = Self::channel_value(&self.std, c);
                chunk.iter().map(move |&v| (v - m) / s)
            })
            .collect();
        Tensor::new(clip.shape().to_vec(), data)
    }

    /// Images of the pixel range `[low, high]` under this normalization, per
    /// channel, ordered so that `lo <= hi`.
    pub fn bounds(&self, channels: usize, low: f32, high: f32) -> (Vec<f32>, Vec<f32>) {
        (0..channels)
            .map(|c| {
                let m = Self::channel_value(&self.mean, c);
                let s = Self::channel_value(&self.std, c);
                let (a, b) = ((low - m) / s, (high - m) / s);
                (a.min(b), a.max(b))
            })
            .unzip()
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ArchConfig {
    #[serde(default)]
    name: Option<String>,
    input_shape: Vec<usize>,
    #[serde(default)]
    num_classes: Option<usize>,
    #[serde(default)]
    normalization: Option<Normalization>,
    layers: Vec<LayerSpec>,
}

/// A parsed, shape-checked layer list without parameters.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub name: Option<String>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
    pub layers: Vec<LayerSpec>,
    /// `shapes[k]` is the input shape of layer `k`; the last entry is the
    /// network output shape.
    pub shapes: Vec<Vec<usize>>,
}

/// Parses and shape-checks an architecture config.
pub fn load_architecture(config_text: &str) -> Result<Architecture> {
    let config: ArchConfig = serde_json::from_str(config_text)
        .map_err(|e| Error::Config(format!("parse error: {e}")))?;
    Architecture::new(
        config.name,
        config.input_shape,
        config.num_classes,
        config.normalization.unwrap_or_default(),
        config.layers,
    )
}

impl Architecture {
    pub fn new(
        name: Option<String>,
        input_shape: Vec<usize>,
        num_classes: Option<usize>,
        normalization: Normalization,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input_shape must have positive extents, got {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config("layer list is empty".into()));
        }
        normalization.validate(input_shape[0])?;

        let mut shapes = vec![input_shape.clone()];
        for (index, layer) in layers.iter().enumerate() {
            let input = shapes.last().expect("non-empty");
            let out = layer.output_shape(input).map_err(|message| Error::Layer {
                index,
                kind: layer.kind(),
                message,
            })?;
            shapes.push(out);
        }

        let output = shapes.last().expect("non-empty");
        let classes = match output.as_slice() {
            [n] => *n,
            other => {
                return Err(Error::Config(format!(
                    "network output must be rank 1, got {other:?}"
                )))
            }
        };
        if let Some(declared) = num_classes {
            if declared != classes {
                return Err(Error::Config(format!(
                    "num_classes is {declared} but the final layer produces {classes}"
                )));
            }
        }

        Ok(Self {
            name,
            input_shape,
            num_classes: classes,
            normalization,
            layers,
            shapes,
        })
    }

    /// All container entries the architecture binds, in layer order.
    pub fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(LayerSpec::parameters).collect()
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }

    /// Attaches parameters from `container`, folding batch-norm layers into
    /// their predecessor.
    pub fn bind(&self, container: &WeightContainer) -> Result<Network> {
        bind_weights(self, container)
    }
}

fn fetch(container: &WeightContainer, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = container
        .get(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if t.shape() != shape {
        return Err(Error::ParameterShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t.clone())
}

pub fn bind_weights(arch: &Architecture, container: &WeightContainer) -> Result<Network> {
    let mut layers: Vec<Layer> = Vec::with_capacity(arch.layers.len());
    for (index, spec) in arch.layers.iter().enumerate() {
        let params = spec.parameters();
        let tensor = |k: usize| fetch(container, &params[k].0, &params[k].1);
        let layer = match spec {
            LayerSpec::Conv3d {
                name,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
                ..
            } => Layer::Conv3d(Conv3dLayer {
                name: name.clone(),
                geometry: Geometry::new(*kernel, *stride, *padding),
                weight: tensor(0)?,
                bias: if *bias {
                    tensor(1)?
                } else {
                    Tensor::zeros(&[*out_channels])?
                },
            }),
            LayerSpec::Linear {
                name,
                out_features,
                bias,
                ..
            } => Layer::Linear(LinearLayer {
                name: name.clone(),
                weight: tensor(0)?,
                bias: if *bias {
                    tensor(1)?
                } else {
                    Tensor::zeros(&[*out_features])?
                },
            }),
            LayerSpec::Batchnorm { eps, .. } => {
                let bn = BatchNormParams {
                    gamma: tensor(0)?,
                    beta: tensor(1)?,
                    mean: tensor(2)?,
                    var: tensor(3)?,
                    eps: *eps,
                };
                let fold_err = |message: String| Error::Layer {
                    index,
                    kind: "batchnorm",
                    message,
                };
                match layers.last_mut() {
                    Some(Layer::Conv3d(conv)) => {
                        let (w, b) = fold_batchnorm(&conv.weight, &conv.bias, &bn)
                            .map_err(|e| fold_err(e.to_string()))?;
                        conv.weight = w;
                        conv.bias = b;
                    }
                    Some(Layer::Linear(lin)) => {
                        let (w, b) = fold_batchnorm(&lin.weight, &lin.bias, &bn)
                            .map_err(|e| fold_err(e.to_string()))?;
                        lin.weight = w;
                        lin.bias = b;
                    }
                    _ => {
                        return Err(fold_err(
                            "batch norm must directly follow a conv3d or linear layer".into(),
                        ))
                    }
                }
                continue;
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Maxpool3d { .. } => Layer::MaxPool3d(spec.pool_geometry().expect("pool")),
            LayerSpec::Avgpool3d { .. } => Layer::AvgPool3d(spec.pool_geometry().expect("pool")),
            LayerSpec::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    let mut net = Network::new(arch.input_shape.clone(), layers)?;
    net.normalization = arch.normalization.clone();
    Ok(net)
}

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub name: String,
    pub geometry: Geometry,
    /// `[O, C, kt, kh, kw]`
    pub weight: Tensor,
    /// `[O]`
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// A bound layer. Batch norm has no variant: it is folded at bind time.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv3d(Conv3dLayer),
    Linear(LinearLayer),
    Relu,
    MaxPool3d(Geometry),
    AvgPool3d(Geometry),
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv3d(_) => "conv3d",
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::MaxPool3d(_) => "maxpool3d",
            Layer::AvgPool3d(_) => "avgpool3d",
            Layer::Flatten => "flatten",
        }
    }

    pub fn conv3d(weight: Tensor, bias: Tensor, geometry: Geometry) -> Layer {
        Layer::Conv3d(Conv3dLayer {
            name: String::new(),
            geometry,
            weight,
            bias,
        })
    }

    pub fn linear(weight: Tensor, bias: Tensor) -> Layer {
        Layer::Linear(LinearLayer {
            name: String::new(),
            weight,
            bias,
        })
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Conv3d(conv) => {
                let ws = conv.weight.shape();
                if ws.len() != 5 || ws[2..] != conv.geometry.kernel {
                    return Err(format!(
                        "weight shape {ws:?} does not match kernel {:?}",
                        conv.geometry.kernel
                    ));
                }
                if conv.bias.shape() != [ws[0]] {
                    return Err(format!("bias shape {:?}, expected [{}]", conv.bias.shape(), ws[0]));
                }
                let (c, extents) = spatial(input)?;
                if c != ws[1] {
                    return Err(format!("expects {} input channels, input shape is {input:?}", ws[1]));
                }
                let out = conv.geometry.output_extents(extents)?;
                Ok(vec![ws[0], out[0], out[1], out[2]])
            }
            Layer::Linear(lin) => {
                let ws = lin.weight.shape();
                if ws.len() != 2 || input != [ws[1]] {
                    return Err(format!("weight shape {ws:?} incompatible with input {input:?}"));
                }
                if lin.bias.shape() != [ws[0]] {
                    return Err(format!("bias shape {:?}, expected [{}]", lin.bias.shape(), ws[0]));
                }
                Ok(vec![ws[0]])
            }
            Layer::MaxPool3d(g) | Layer::AvgPool3d(g) => {
                let (c, extents) = spatial(input)?;
                let out = g.output_extents(extents)?;
                if matches!(self, Layer::MaxPool3d(_)) && (0..3).any(|d| 2 * g.padding[d] > g.kernel[d]) {
                    return Err("max-pool padding exceeds half the kernel".into());
                }
                Ok(vec![c, out[0], out[1], out[2]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Applies the layer; max-pool also returns its selection mask.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Option<PoolMask>)> {
        Ok(match self {
            Layer::Conv3d(conv) => (
                ops::conv3d_forward(input, &conv.weight, Some(&conv.bias), &conv.geometry)?,
                None,
            ),
            Layer::Linear(lin) => (ops::linear_forward(input, &lin.weight, Some(&lin.bias))?, None),
            Layer::Relu => (ops::relu_forward(input), None),
            Layer::MaxPool3d(g) => {
                let (out, mask) = ops::maxpool3d_forward(input, g)?;
                (out, Some(mask))
            }
            Layer::AvgPool3d(g) => (ops::avgpool3d_forward(input, g)?, None),
            Layer::Flatten => (input.reshape(&[input.numel()])?, None),
        })
    }
}

/// Per-layer inputs recorded during a forward pass, plus max-pool masks.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    /// `inputs[k]` is the tensor layer `k` consumed.
    pub inputs: Vec<Tensor>,
    /// `masks[k]` is set for max-pool layers.
    pub masks: Vec<Option<PoolMask>>,
}

/// A bound, shape-checked sequential network. Immutable once built; forward
/// passes can run concurrently.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
    /// Applied by front ends to raw `[0, 255]` clips; [`Network::forward`]
    /// expects already-normalized input.
    pub normalization: Normalization,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape must have positive extents, got {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config("layer list is empty".into()));
        }
        let mut shape = input_shape.clone();
        for (index, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|message| Error::Layer {
                index,
                kind: layer.kind(),
                message,
            })?;
        }
        let num_classes = match shape.as_slice() {
            [n] => *n,
            other => {
                return Err(Error::Config(format!(
                    "network output must be rank 1, got {other:?}"
                )))
            }
        };
        Ok(Self {
            input_shape,
            num_classes,
            layers,
            normalization: Normalization::default(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Runs the network, recording each layer's input.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ActivationCache)> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(&self.input_shape, input.shape()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            let (out, mask) = layer.forward(&current).map_err(|e| Error::Layer {
                index,
                kind: layer.kind(),
                message: e.to_string(),
            })?;
            inputs.push(std::mem::replace(&mut current, out));
            masks.push(mask);
        }
        Ok((current, ActivationCache { inputs, masks }))
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.0)
    }
}
