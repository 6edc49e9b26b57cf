//! Brute-force reference implementations used by the test suites.
//!
//! Everything here is written directly from the definitions with explicit
//! loops and `f64` arithmetic, and reuses none of the engine's kernels or
//! rules: only the [`Tensor`] container and the layer parameter structs are
//! shared. Intended for small shapes only.

use crate::network::{Layer, Network};
use crate::relevance::{RelevanceConfig, Target};
use crate::tensor::Tensor;

fn out_extent(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

fn stab(d: f64, eps: f64) -> f64 {
    if d >= 0.0 {
        d + eps
    } else {
        d - eps
    }
}

/// Direct cross-correlation, `f64` accumulation. `weight` is
/// `[O, C, kt, kh, kw]`.
pub fn naive_conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Tensor {
    let [c_in, t, h, w] = dims4(input.shape());
    let ws = weight.shape();
    let (c_out, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let ot = out_extent(t, kt, stride[0], padding[0]);
    let oh = out_extent(h, kh, stride[1], padding[1]);
    let ow = out_extent(w, kw, stride[2], padding[2]);
    let x = input.data();
    let wd = weight.data();
    let mut out = Vec::with_capacity(c_out * ot * oh * ow);
    for o in 0..c_out {
        for yt in 0..ot {
            for yh in 0..oh {
                for yw in 0..ow {
                    let mut acc = bias.data()[o] as f64;
                    for c in 0..c_in {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let it = (yt * stride[0] + dt) as isize - padding[0] as isize;
                                    let ih = (yh * stride[1] + dh) as isize - padding[1] as isize;
                                    let iw = (yw * stride[2] + dw) as isize - padding[2] as isize;
                                    if it < 0
                                        || ih < 0
                                        || iw < 0
                                        || it >= t as isize
                                        || ih >= h as isize
                                        || iw >= w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((c * t + it as usize) * h + ih as usize) * w + iw as usize;
                                    let wi = (((o * c_in + c) * kt + dt) * kh + dh) * kw + dw;
                                    acc += wd[wi] as f64 * x[xi] as f64;
                                }
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(vec![c_out, ot, oh, ow], out).expect("oracle conv shape")
}

pub fn naive_linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    let out = (0..n_out)
        .map(|j| {
            let mut acc = bias.data()[j] as f64;
            for i in 0..n_in {
                acc += weight.data()[j * n_in + i] as f64 * input.data()[i] as f64;
            }
            acc as f32
        })
        .collect();
    Tensor::new(vec![n_out], out).expect("oracle linear shape")
}

/// Input flat indices covered by every pooling window, padding excluded.
fn pool_windows(
    shape: &[usize],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> (Vec<usize>, Vec<Vec<usize>>) {
    let [c, t, h, w] = dims4(shape);
    let ot = out_extent(t, kernel[0], stride[0], padding[0]);
    let oh = out_extent(h, kernel[1], stride[1], padding[1]);
    let ow = out_extent(w, kernel[2], stride[2], padding[2]);
    let mut windows = Vec::new();
    for ch in 0..c {
        for yt in 0..ot {
            for yh in 0..oh {
                for yw in 0..ow {
                    let mut members = Vec::new();
                    for dt in 0..kernel[0] {
                        for dh in 0..kernel[1] {
                            for dw in 0..kernel[2] {
                                let it = (yt * stride[0] + dt) as isize - padding[0] as isize;
                                let ih = (yh * stride[1] + dh) as isize - padding[1] as isize;
                                let iw = (yw * stride[2] + dw) as isize - padding[2] as isize;
                                if (0..t as isize).contains(&it)
                                    && (0..h as isize).contains(&ih)
                                    && (0..w as isize).contains(&iw)
                                {
                                    members.push(
                                        ((ch * t + it as usize) * h + ih as usize) * w + iw as usize,
                                    );
                                }
                            }
                        }
                    }
                    members.sort_unstable();
                    windows.push(members);
                }
            }
        }
    }
    (vec![c, ot, oh, ow], windows)
}

/// Max pooling and the argmax (lowest flat index on ties) of each window.
pub fn naive_maxpool3d(
    input: &Tensor,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> (Tensor, Vec<usize>) {
    let (shape, windows) = pool_windows(input.shape(), kernel, stride, padding);
    let x = input.data();
    let argmax: Vec<usize> = windows
        .iter()
        .map(|members| {
            let mut best = members[0];
            for &i in members {
                if x[i] > x[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let values = argmax.iter().map(|&i| x[i]).collect();
    (Tensor::new(shape, values).expect("oracle pool shape"), argmax)
}

/// Average pooling dividing by the full window volume.
pub fn naive_avgpool3d(input: &Tensor, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Tensor {
    let (shape, windows) = pool_windows(input.shape(), kernel, stride, padding);
    let volume = (kernel[0] * kernel[1] * kernel[2]) as f64;
    let values = windows
        .iter()
        .map(|members| (members.iter().map(|&i| input.data()[i] as f64).sum::<f64>() / volume) as f32)
        .collect();
    Tensor::new(shape, values).expect("oracle pool shape")
}

/// An affine layer written out as an explicit `n_in x n_out` matrix.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// `w[i * n_out + j]` connects input `i` to output `j`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n_out + j]
    }
}

/// Expands a conv3d or linear layer applied to `input_shape` into its
/// dense matrix. Panics on other layer kinds.
pub fn dense_layer(layer: &Layer, input_shape: &[usize]) -> DenseLayer {
    match layer {
        Layer::Linear(lin) => {
            let (n_out, n_in) = (lin.weight.shape()[0], lin.weight.shape()[1]);
            let mut w = vec![0.0; n_in * n_out];
            for j in 0..n_out {
                for i in 0..n_in {
                    w[i * n_out + j] = lin.weight.data()[j * n_in + i] as f64;
                }
            }
            DenseLayer {
                n_in,
                n_out,
                w,
                b: lin.bias.data().iter().map(|&v| v as f64).collect(),
            }
        }
        Layer::Conv3d(conv) => {
            let [c_in, t, h, w_in] = dims4(input_shape);
            let ws = conv.weight.shape();
            let (c_out, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
            let (stride, padding) = (conv.geometry.stride, conv.geometry.padding);
            let ot = out_extent(t, kt, stride[0], padding[0]);
            let oh = out_extent(h, kh, stride[1], padding[1]);
            let ow = out_extent(w_in, kw, stride[2], padding[2]);
            let n_in = c_in * t * h * w_in;
            let n_out = c_out * ot * oh * ow;
            let mut w = vec![0.0; n_in * n_out];
            let mut b = Vec::with_capacity(n_out);
            let mut j = 0;
            for o in 0..c_out {
                for yt in 0..ot {
                    for yh in 0..oh {
                        for yw in 0..ow {
                            for c in 0..c_in {
                                for dt in 0..kt {
                                    for dh in 0..kh {
                                        for dw in 0..kw {
                                            let it = (yt * stride[0] + dt) as isize - padding[0] as isize;
                                            let ih = (yh * stride[1] + dh) as isize - padding[1] as isize;
                                            let iw = (yw * stride[2] + dw) as isize - padding[2] as isize;
                                            if it < 0
                                                || ih < 0
                                                || iw < 0
                                                || it >= t as isize
                                                || ih >= h as isize
                                                || iw >= w_in as isize
                                            {
                                                continue;
                                            }
                                            let i = ((c * t + it as usize) * h + ih as usize) * w_in + iw as usize;
                                            let wi = (((o * c_in + c) * kt + dt) * kh + dh) * kw + dw;
                                            w[i * n_out + j] += conv.weight.data()[wi] as f64;
                                        }
                                    }
                                }
                            }
                            b.push(conv.bias.data()[o] as f64);
                            j += 1;
                        }
                    }
                }
            }
            DenseLayer { n_in, n_out, w, b }
        }
        other => panic!("no dense form for {} layers", other.kind()),
    }
}

/// Term-by-term alpha-beta rule over explicit `i`, `j` loops.
pub fn naive_alpha_beta(d: &DenseLayer, x: &[f64], r: &[f64], alpha: f64, beta: f64, eps: f64) -> Vec<f64> {
    let mut pos_denom = vec![0.0; d.n_out];
    let mut neg_denom = vec![0.0; d.n_out];
    for j in 0..d.n_out {
        let mut zp = d.b[j].max(0.0);
        let mut zn = d.b[j].min(0.0);
        for (i, &xi) in x.iter().enumerate() {
            let z = xi * d.at(i, j);
            zp += z.max(0.0);
            zn += z.min(0.0);
        }
        pos_denom[j] = stab(zp, eps);
        neg_denom[j] = stab(zn, eps);
    }
    (0..d.n_in)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..d.n_out {
                let z = x[i] * d.at(i, j);
                acc += (alpha * z.max(0.0) / pos_denom[j] - beta * z.min(0.0) / neg_denom[j]) * r[j];
            }
            acc
        })
        .collect()
}

/// Term-by-term z-beta rule with per-input bounds `low[i]`, `high[i]`.
pub fn naive_z_beta(d: &DenseLayer, x: &[f64], low: &[f64], high: &[f64], r: &[f64], eps: f64) -> Vec<f64> {
    let term = |i: usize, j: usize| {
        let w = d.at(i, j);
        x[i] * w - low[i] * w.max(0.0) - high[i] * w.min(0.0)
    };
    let denom: Vec<f64> = (0..d.n_out)
        .map(|j| stab((0..d.n_in).map(|i| term(i, j)).sum(), eps))
        .collect();
    (0..d.n_in)
        .map(|i| (0..d.n_out).map(|j| term(i, j) / denom[j] * r[j]).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaiveRule {
    AlphaBeta,
    ZBeta,
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Per-input bounds with the leading axis as channel axis.
fn expand_bounds(values: &[f32], shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let per_channel = n / shape[0];
    (0..n)
        .map(|i| {
            let c = i / per_channel;
            let v = if values.len() == 1 { values[0] } else { values[c] };
            v as f64
        })
        .collect()
}

/// Applies one rule to a conv3d or linear layer via its dense matrix.
pub fn naive_rule(rule: NaiveRule, layer: &Layer, input: &Tensor, r_out: &Tensor, cfg: &RelevanceConfig) -> Tensor {
    let d = dense_layer(layer, input.shape());
    let x = to_f64(input);
    let r = to_f64(r_out);
    let out = match rule {
        NaiveRule::AlphaBeta => naive_alpha_beta(&d, &x, &r, cfg.alpha as f64, cfg.beta as f64, cfg.eps as f64),
        NaiveRule::ZBeta => naive_z_beta(
            &d,
            &x,
            &expand_bounds(&cfg.input_low, input.shape()),
            &expand_bounds(&cfg.input_high, input.shape()),
            &r,
            cfg.eps as f64,
        ),
    };
    Tensor::new(input.shape().to_vec(), out.into_iter().map(|v| v as f32).collect()).expect("oracle rule shape")
}

/// Relevance totals at every layer boundary of a naive end-to-end pass.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub target: usize,
    pub target_logit: f64,
    pub logits: Vec<f64>,
    /// `layer_sums[k]` is the total relevance entering layer `k` from above,
    /// i.e. at its input; the last entry is the seeded output.
    pub layer_sums: Vec<f64>,
    pub input_relevance: Vec<f64>,
}

/// Runs a forward pass and a relevance pass with the reference
/// implementations, reporting the relevance total at every layer boundary.
pub fn conservation_audit(net: &Network, input: &Tensor, cfg: &RelevanceConfig) -> AuditReport {
    let layers = net.layers();
    let mut inputs: Vec<Tensor> = Vec::with_capacity(layers.len());
    let mut argmaxes: Vec<Option<Vec<usize>>> = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for layer in layers {
        let (next, mask) = match layer {
            Layer::Conv3d(c) => (
                naive_conv3d(&current, &c.weight, &c.bias, c.geometry.stride, c.geometry.padding),
                None,
            ),
            Layer::Linear(l) => (naive_linear(&current, &l.weight, &l.bias), None),
            Layer::Relu => (current.map(|v| v.max(0.0)), None),
            Layer::MaxPool3d(g) => {
                let (out, arg) = naive_maxpool3d(&current, g.kernel, g.stride, g.padding);
                (out, Some(arg))
            }
            Layer::AvgPool3d(g) => (naive_avgpool3d(&current, g.kernel, g.stride, g.padding), None),
            Layer::Flatten => (
                Tensor::new(vec![current.numel()], current.data().to_vec()).expect("flatten"),
                None,
            ),
        };
        inputs.push(std::mem::replace(&mut current, next));
        argmaxes.push(mask);
    }

    let logits = to_f64(&current);
    let target = match cfg.target {
        Target::Argmax => {
            let mut best = 0;
            for (k, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = k;
                }
            }
            best
        }
        Target::Class(k) => k,
    };
    let mut r = vec![0.0; logits.len()];
    r[target] = logits[target];

    let first_affine = layers
        .iter()
        .position(|l| matches!(l, Layer::Conv3d(_) | Layer::Linear(_)))
        .filter(|&k| layers[..k].iter().all(|l| matches!(l, Layer::Flatten)));

    let mut sums = vec![0.0; layers.len() + 1];
    sums[layers.len()] = r.iter().sum();
    for (k, layer) in layers.iter().enumerate().rev() {
        let x = &inputs[k];
        r = match layer {
            Layer::Conv3d(_) | Layer::Linear(_) => {
                let d = dense_layer(layer, x.shape());
                let xs = to_f64(x);
                if Some(k) == first_affine {
                    let shape = net.input_shape();
                    naive_z_beta(
                        &d,
                        &xs,
                        &expand_bounds(&cfg.input_low, shape),
                        &expand_bounds(&cfg.input_high, shape),
                        &r,
                        cfg.eps as f64,
                    )
                } else {
                    naive_alpha_beta(&d, &xs, &r, cfg.alpha as f64, cfg.beta as f64, cfg.eps as f64)
                }
            }
            Layer::Relu | Layer::Flatten => r,
            Layer::MaxPool3d(_) => {
                let mut back = vec![0.0; x.numel()];
                for (j, &i) in argmaxes[k].as_ref().expect("mask").iter().enumerate() {
                    back[i] += r[j];
                }
                back
            }
            Layer::AvgPool3d(g) => {
                let (_, windows) = pool_windows(x.shape(), g.kernel, g.stride, g.padding);
                let volume = (g.kernel[0] * g.kernel[1] * g.kernel[2]) as f64;
                let mut back = vec![0.0; x.numel()];
                for (j, members) in windows.iter().enumerate() {
                    for &i in members {
                        back[i] += r[j] / volume;
                    }
                }
                back
            }
        };
        sums[k] = r.iter().sum();
    }

    AuditReport {
        target,
        target_logit: logits[target],
        logits,
        layer_sums: sums,
        input_relevance: r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Geometry;

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|v| v as f32).collect()).unwrap();
        let mut w = vec![0.0; 27];
        w[13] = 1.0; // centre tap
        let w = Tensor::new(vec![1, 1, 3, 3, 3], w).unwrap();
        let y = naive_conv3d(&x, &w, &Tensor::from_slice(&[0.0]), [1; 3], [1; 3]);
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::full(&[2, 2, 2, 2], 3.0).unwrap();
        let w = Tensor::zeros(&[1, 2, 2, 2, 2]).unwrap();
        let y = naive_conv3d(&x, &w, &Tensor::from_slice(&[0.75]), [1; 3], [0; 3]);
        assert_eq!(y.data(), &[0.75]);
    }

    #[test]
    fn zero_relevance_in_zero_out() {
        let layer = Layer::linear(
            Tensor::new(vec![2, 3], vec![1., -2., 0.5, 0.3, 0.1, -1.]).unwrap(),
            Tensor::from_slice(&[0.1, -0.2]),
        );
        let x = Tensor::from_slice(&[1., 2., 3.]);
        let zero = Tensor::zeros(&[2]).unwrap();
        let cfg = RelevanceConfig::default();
        for rule in [NaiveRule::AlphaBeta, NaiveRule::ZBeta] {
            assert!(naive_rule(rule, &layer, &x, &zero, &cfg).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dense_conv_matches_direct_conv() {
        let x = Tensor::new(vec![2, 2, 3, 3], (0..36).map(|v| (v % 5) as f32 - 2.0).collect()).unwrap();
        let w = Tensor::new(vec![2, 2, 1, 2, 2], (0..16).map(|v| (v % 3) as f32 - 1.0).collect()).unwrap();
        let b = Tensor::from_slice(&[0.5, -0.5]);
        let layer = Layer::conv3d(w.clone(), b.clone(), Geometry::new([1, 2, 2], [1, 1, 1], [0, 1, 0]));
        let d = dense_layer(&layer, x.shape());
        let direct = naive_conv3d(&x, &w, &b, [1, 1, 1], [0, 1, 0]);
        assert_eq!(d.n_out, direct.numel());
        for j in 0..d.n_out {
            let v: f64 = (0..d.n_in).map(|i| d.at(i, j) * x.data()[i] as f64).sum::<f64>() + d.b[j];
            assert!((v as f32 - direct.data()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_input_audit_sums_are_zero() {
        let net = Network::new(
            vec![1, 1, 2, 2],
            vec![
                Layer::conv3d(
                    Tensor::new(vec![1, 1, 1, 2, 2], vec![1., -1., 0.5, 2.]).unwrap(),
                    Tensor::from_slice(&[0.0]),
                    Geometry::dense([1, 2, 2]),
                ),
                Layer::Flatten,
            ],
        )
        .unwrap();
        let report = conservation_audit(&net, &Tensor::zeros(&[1, 1, 2, 2]).unwrap(), &RelevanceConfig::default());
        assert!(report.layer_sums.iter().all(|&s| s == 0.0));
    }
}
