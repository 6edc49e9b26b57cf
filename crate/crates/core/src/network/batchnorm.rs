use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inference-time batch-norm statistics for one layer.
#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub mean: Tensor,
    pub var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.mean.numel()
    }
}

/// Folds `bn(conv(x))` into a single affine layer. `weight` has the output
/// channel as its leading axis (conv3d `[O, C, kt, kh, kw]` or linear
/// `[O, I]`), `bias` has shape `[O]`.
///
/// `w' = w * g / sqrt(var + eps)`, `b' = (b - mean) * g / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(weight: &Tensor, bias: &Tensor, bn: &BatchNormParams) -> Result<(Tensor, Tensor)> {
    let out_channels = weight.shape()[0];
    for (what, t) in [
        ("mean", &bn.mean),
        ("var", &bn.var),
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
    ] {
        if t.shape() != [out_channels] {
            return Err(Error::Config(format!(
                "batch-norm {what} has shape {:?}, layer has {out_channels} output channels",
                t.shape()
            )));
        }
    }
    if bias.shape() != [out_channels] {
        return Err(Error::shape(&[out_channels], bias.shape()));
    }
    if let Some(v) = bn.var.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Config(format!("batch-norm variance must be >= 0, got {v}")));
    }

    let scale: Vec<f64> = bn
        .gamma
        .data()
        .iter()
        .zip(bn.var.data())
        .map(|(&g, &v)| g as f64 / (v as f64 + bn.eps as f64).sqrt())
        .collect();

    let per_channel = weight.numel() / out_channels;
    let w: Vec<f32> = weight
        .data()
        .chunks(per_channel)
        .zip(&scale)
        .flat_map(|(row, &s)| row.iter().map(move |&v| (v as f64 * s) as f32))
        .collect();
    let b: Vec<f32> = (0..out_channels)
        .map(|o| {
            let shifted = bias.data()[o] as f64 - bn.mean.data()[o] as f64;
            (shifted * scale[o] + bn.beta.data()[o] as f64) as f32
        })
        .collect();

    Ok((
        Tensor::new(weight.shape().to_vec(), w)?,
        Tensor::new(vec![out_channels], b)?,
    ))
}
