#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrel::network::Geometry;
use vrel::{Layer, Network, RelevanceConfig, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], low: f32, high: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(low..high)).collect()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs() / y.abs().max(1.0)))
}

pub struct ConvCase {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
    pub geometry: Geometry,
}

/// Random conv3d instance with up to 3 channels and extents of at most 6.
pub fn conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    let c_in = rng.gen_range(1..=3);
    let c_out = rng.gen_range(1..=3);
    let extents = [0; 3].map(|_: i32| rng.gen_range(2..=6usize));
    let mut kernel = [1; 3];
    let mut stride = [1; 3];
    let mut padding = [0; 3];
    for d in 0..3 {
        kernel[d] = rng.gen_range(1..=3usize.min(extents[d]));
        stride[d] = rng.gen_range(1..=2);
        padding[d] = rng.gen_range(0..=1);
    }
    ConvCase {
        input: tensor(rng, &[c_in, extents[0], extents[1], extents[2]], -1.0, 1.0),
        weight: tensor(rng, &[c_out, c_in, kernel[0], kernel[1], kernel[2]], -1.0, 1.0),
        bias: tensor(rng, &[c_out], -0.5, 0.5),
        geometry: Geometry::new(kernel, stride, padding),
    }
}

/// Random pooling input and geometry (padding at most half the kernel).
pub fn pool_case(rng: &mut ChaCha8Rng) -> (Tensor, Geometry) {
    let c = rng.gen_range(1..=3);
    let extents = [0; 3].map(|_: i32| rng.gen_range(2..=6usize));
    let mut kernel = [1; 3];
    let mut stride = [1; 3];
    let mut padding = [0; 3];
    for d in 0..3 {
        kernel[d] = rng.gen_range(1..=3usize.min(extents[d]));
        stride[d] = rng.gen_range(1..=3);
        padding[d] = rng.gen_range(0..=kernel[d] / 2);
    }
    (
        tensor(rng, &[c, extents[0], extents[1], extents[2]], -1.0, 1.0),
        Geometry::new(kernel, stride, padding),
    )
}

pub fn linear_layer(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, zero_bias: bool) -> Layer {
    let bias = if zero_bias {
        Tensor::zeros(&[n_out]).unwrap()
    } else {
        tensor(rng, &[n_out], -0.5, 0.5)
    };
    Layer::linear(tensor(rng, &[n_out, n_in], -1.0, 1.0), bias)
}

/// Input shape used by [`random_net`].
pub const NET_INPUT: [usize; 4] = [2, 4, 6, 6];

/// conv - relu - pool - flatten - linear over [`NET_INPUT`], 3 classes.
pub fn random_net(rng: &mut ChaCha8Rng, zero_bias: bool) -> Network {
    let [c, t, h, w] = NET_INPUT;
    let filters = rng.gen_range(2..=4);
    let kernel = [if rng.gen_bool(0.5) { 1 } else { 3 }, 3, 3];
    let padding = [kernel[0] / 2, 1, 1];
    let bias = if zero_bias {
        Tensor::zeros(&[filters]).unwrap()
    } else {
        tensor(rng, &[filters], -0.3, 0.3)
    };
    let conv = Layer::conv3d(
        tensor(rng, &[filters, c, kernel[0], kernel[1], kernel[2]], -1.0, 1.0),
        bias,
        Geometry::new(kernel, [1; 3], padding),
    );
    let pool_geometry = Geometry::tiled([rng.gen_range(1..=2), 2, 2]);
    let pool = if rng.gen_bool(0.7) {
        Layer::MaxPool3d(pool_geometry)
    } else {
        Layer::AvgPool3d(pool_geometry)
    };
    let pt = (t - pool_geometry.kernel[0]) / pool_geometry.kernel[0] + 1;
    let features = filters * pt * (h / 2) * (w / 2);
    let fc = linear_layer(rng, features, 3, zero_bias);
    Network::new(NET_INPUT.to_vec(), vec![conv, Layer::Relu, pool, Layer::Flatten, fc]).unwrap()
}

/// Relevance config whose input bounds match [`random_clip`] values.
pub fn clip_config() -> RelevanceConfig {
    RelevanceConfig::default().with_bounds(vec![-1.0], vec![1.0])
}

pub fn random_clip(rng: &mut ChaCha8Rng) -> Tensor {
    tensor(rng, &NET_INPUT, -1.0, 1.0)
}

/// A clip whose frames are all identical.
pub fn static_clip(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (c, t, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let frame = tensor(rng, &[c, plane], -1.0, 1.0);
    let mut data = Vec::with_capacity(c * t * plane);
    for ch in 0..c {
        for _ in 0..t {
            data.extend_from_slice(&frame.data()[ch * plane..(ch + 1) * plane]);
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reorders frames: frame `k` of the result is frame `order[k]` of `clip`.
pub fn permute_frames(clip: &Tensor, order: &[usize]) -> Tensor {
    let s = clip.shape();
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(clip.numel());
    for ch in 0..c {
        for &src in order.iter().take(t) {
            let start = (ch * t + src) * plane;
            data.extend_from_slice(&clip.data()[start..start + plane]);
        }
    }
    Tensor::new(s.to_vec(), data).unwrap()
}
