//! Forward kernels for the layer kinds, plus the adjoint (transpose) maps
//! the relevance rules are built from.
//!
//! Spatial layers operate on `C x T x H x W` tensors; batch size is fixed
//! at one. Convolution is cross-correlation with zero padding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel, stride and zero-padding extents along `(t, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Geometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Unit stride, no padding.
    pub fn dense(kernel: [usize; 3]) -> Self {
        Self::new(kernel, [1; 3], [0; 3])
    }

    /// Stride equal to the kernel, no padding.
    pub fn tiled(kernel: [usize; 3]) -> Self {
        Self::new(kernel, kernel, [0; 3])
    }

    pub fn window_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.kernel.contains(&0) {
            return Err(format!("kernel extents must be >= 1, got {:?}", self.kernel));
        }
        if self.stride.contains(&0) {
            return Err(format!("stride extents must be >= 1, got {:?}", self.stride));
        }
        Ok(())
    }

    /// Output `(t, h, w)` extents for an input of `(t, h, w)` extents.
    pub fn output_extents(&self, input: [usize; 3]) -> std::result::Result<[usize; 3], String> {
        self.validate()?;
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * self.padding[d];
            if padded < self.kernel[d] {
                return Err(format!(
                    "kernel {:?} larger than padded input {:?}",
                    self.kernel, input
                ));
            }
            out[d] = (padded - self.kernel[d]) / self.stride[d] + 1;
        }
        Ok(out)
    }
}

/// Argmax positions recorded by a max-pool forward pass: for every output
/// element, the flat index of the selected input element. This is the
/// one-hot window mask in compact form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMask {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    selected: Vec<usize>,
}

impl PoolMask {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    /// Flat input index selected for each output element.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }
}

pub(crate) fn spatial_dims(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, t, h, w] => Ok((c, [t, h, w])),
        _ => Err(Error::InvalidTensor(format!(
            "expected a C x T x H x W tensor, got shape {shape:?}"
        ))),
    }
}

/// Output positions `o` in `0..out_len` with `0 <= o * stride + offset < in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let limit = in_len as isize - offset;
    let hi = if limit <= 0 {
        0
    } else {
        (limit as usize).div_ceil(stride).min(out_len)
    };
    (lo, hi.max(lo))
}

fn check_conv_weight(
    in_shape: &[usize],
    weight: &Tensor,
    geometry: &Geometry,
) -> Result<(usize, usize, [usize; 3], [usize; 3])> {
    let (c, extents) = spatial_dims(in_shape)?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[1] != c || ws[2..] != geometry.kernel {
        let expected = [
            ws.first().copied().unwrap_or(1),
            c,
            geometry.kernel[0],
            geometry.kernel[1],
            geometry.kernel[2],
        ];
        return Err(Error::shape(&expected, ws));
    }
    let out = geometry
        .output_extents(extents)
        .map_err(Error::InvalidTensor)?;
    Ok((c, ws[0], extents, out))
}

/// 3D cross-correlation: `[C, T, H, W] * [O, C, kt, kh, kw] (+ bias[O])`.
pub fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geometry: &Geometry,
) -> Result<Tensor> {
    let (channels, out_channels, [t, h, w], [ot, oh, ow]) =
        check_conv_weight(input.shape(), weight, geometry)?;
    if let Some(b) = bias {
        if b.shape() != [out_channels] {
            return Err(Error::shape(&[out_channels], b.shape()));
        }
    }
    let [kt, kh, kw] = geometry.kernel;
    let [st, sh, sw] = geometry.stride;
    let [pt, ph, pw] = geometry.padding;
    let x = input.data();
    let wd = weight.data();
    let plane = ot * oh * ow;
    let mut out = vec![0.0f32; out_channels * plane];

    out.par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
        if let Some(b) = bias {
            dst.fill(b.data()[o]);
        }
        for c in 0..channels {
            let src = &x[c * t * h * w..(c + 1) * t * h * w];
            for dt in 0..kt {
                let (t_lo, t_hi) = valid_range(ot, t, st, dt as isize - pt as isize);
                for dh in 0..kh {
                    let (h_lo, h_hi) = valid_range(oh, h, sh, dh as isize - ph as isize);
                    for dw in 0..kw {
                        let wv = wd[(((o * channels + c) * kt + dt) * kh + dh) * kw + dw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (w_lo, w_hi) = valid_range(ow, w, sw, dw as isize - pw as isize);
                        for yt in t_lo..t_hi {
                            let it = yt * st + dt - pt;
                            for yh in h_lo..h_hi {
                                let ih = yh * sh + dh - ph;
                                let row = &src[(it * h + ih) * w..(it * h + ih + 1) * w];
                                let acc = &mut dst[(yt * oh + yh) * ow..(yt * oh + yh + 1) * ow];
                                for yw in w_lo..w_hi {
                                    acc[yw] += wv * row[yw * sw + dw - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    Tensor::new(vec![out_channels, ot, oh, ow], out)
}

/// Adjoint of the bias-free convolution: maps an output-shaped tensor back
/// onto `input_shape`.
pub fn conv3d_transpose(
    grad_out: &Tensor,
    weight: &Tensor,
    input_shape: &[usize],
    geometry: &Geometry,
) -> Result<Tensor> {
    let (channels, out_channels, [t, h, w], [ot, oh, ow]) =
        check_conv_weight(input_shape, weight, geometry)?;
    let expected = [out_channels, ot, oh, ow];
    if grad_out.shape() != expected {
        return Err(Error::shape(&expected, grad_out.shape()));
    }
    let [kt, kh, kw] = geometry.kernel;
    let [st, sh, sw] = geometry.stride;
    let [pt, ph, pw] = geometry.padding;
    let g = grad_out.data();
    let wd = weight.data();
    let plane = t * h * w;
    let out_plane = ot * oh * ow;
    let mut out = vec![0.0f32; channels * plane];

    out.par_chunks_mut(plane).enumerate().for_each(|(c, dst)| {
        for o in 0..out_channels {
            let src = &g[o * out_plane..(o + 1) * out_plane];
            for dt in 0..kt {
                let (t_lo, t_hi) = valid_range(ot, t, st, dt as isize - pt as isize);
                for dh in 0..kh {
                    let (h_lo, h_hi) = valid_range(oh, h, sh, dh as isize - ph as isize);
                    for dw in 0..kw {
                        let wv = wd[(((o * channels + c) * kt + dt) * kh + dh) * kw + dw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (w_lo, w_hi) = valid_range(ow, w, sw, dw as isize - pw as isize);
                        for yt in t_lo..t_hi {
                            let it = yt * st + dt - pt;
                            for yh in h_lo..h_hi {
                                let ih = yh * sh + dh - ph;
                                let grow = &src[(yt * oh + yh) * ow..(yt * oh + yh + 1) * ow];
                                let acc = &mut dst[(it * h + ih) * w..(it * h + ih + 1) * w];
                                for yw in w_lo..w_hi {
                                    acc[yw * sw + dw - pw] += wv * grow[yw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    Tensor::new(input_shape.to_vec(), out)
}

fn check_linear(input_len: usize, weight: &Tensor) -> Result<(usize, usize)> {
    match *weight.shape() {
        [out, inp] if inp == input_len => Ok((out, inp)),
        _ => Err(Error::shape(
            &[weight.shape().first().copied().unwrap_or(1), input_len],
            weight.shape(),
        )),
    }
}

/// `y = W x (+ b)` with `W` of shape `[out, in]` and rank-1 `x`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if input.rank() != 1 {
        return Err(Error::InvalidTensor(format!(
            "linear layers take rank-1 input, got shape {:?}",
            input.shape()
        )));
    }
    let (out, inp) = check_linear(input.numel(), weight)?;
    if let Some(b) = bias {
        if b.shape() != [out] {
            return Err(Error::shape(&[out], b.shape()));
        }
    }
    let x = input.data();
    let data = weight
        .data()
        .par_chunks(inp)
        .enumerate()
        .map(|(j, row)| {
            let dot: f64 = row.iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum();
            let b = bias.map_or(0.0, |b| b.data()[j] as f64);
            (dot + b) as f32
        })
        .collect();
    Tensor::new(vec![out], data)
}

/// `W^T g`: maps an output-shaped vector back onto the input features.
pub fn linear_transpose(grad_out: &Tensor, weight: &Tensor, input_len: usize) -> Result<Tensor> {
    let (out, inp) = check_linear(input_len, weight)?;
    if grad_out.shape() != [out] {
        return Err(Error::shape(&[out], grad_out.shape()));
    }
    let g = grad_out.data();
    let w = weight.data();
    let data = (0..inp)
        .into_par_iter()
        .map(|i| {
            (0..out)
                .map(|j| w[j * inp + i] as f64 * g[j] as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::new(vec![inp], data)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Iterates the real (non-padding) input positions of every pooling window,
/// in window order, calling `visit(window, flat_input_index)`.
fn for_each_window_input(
    channels: usize,
    extents: [usize; 3],
    out: [usize; 3],
    geometry: &Geometry,
    mut visit: impl FnMut(usize, usize),
) {
    let [t, h, w] = extents;
    let [ot, oh, ow] = out;
    let [kt, kh, kw] = geometry.kernel;
    let [st, sh, sw] = geometry.stride;
    let [pt, ph, pw] = geometry.padding;
    let mut window = 0;
    for c in 0..channels {
        for yt in 0..ot {
            for yh in 0..oh {
                for yw in 0..ow {
                    for dt in 0..kt {
                        let Some(it) = (yt * st + dt).checked_sub(pt).filter(|&v| v < t) else {
                            continue;
                        };
                        for dh in 0..kh {
                            let Some(ih) = (yh * sh + dh).checked_sub(ph).filter(|&v| v < h)
                            else {
                                continue;
                            };
                            for dw in 0..kw {
                                let Some(iw) = (yw * sw + dw).checked_sub(pw).filter(|&v| v < w)
                                else {
                                    continue;
                                };
                                visit(window, ((c * t + it) * h + ih) * w + iw);
                            }
                        }
                    }
                    window += 1;
                }
            }
        }
    }
}

fn pool_shapes(input_shape: &[usize], geometry: &Geometry) -> Result<(usize, [usize; 3], [usize; 3])> {
    let (c, extents) = spatial_dims(input_shape)?;
    let out = geometry
        .output_extents(extents)
        .map_err(Error::InvalidTensor)?;
    Ok((c, extents, out))
}

/// Max pooling; padded positions never win. Ties go to the lowest flat index.
pub fn maxpool3d_forward(input: &Tensor, geometry: &Geometry) -> Result<(Tensor, PoolMask)> {
    let (c, extents, out) = pool_shapes(input.shape(), geometry)?;
    let n_out = c * out.iter().product::<usize>();
    let x = input.data();
    let mut best = vec![f32::NEG_INFINITY; n_out];
    let mut selected = vec![usize::MAX; n_out];
    for_each_window_input(c, extents, out, geometry, |j, i| {
        if selected[j] == usize::MAX || x[i] > best[j] {
            best[j] = x[i];
            selected[j] = i;
        }
    });
    if selected.contains(&usize::MAX) {
        return Err(Error::InvalidTensor(
            "max-pool window lies entirely in padding".into(),
        ));
    }
    let output_shape = vec![c, out[0], out[1], out[2]];
    let mask = PoolMask {
        input_shape: input.shape().to_vec(),
        output_shape: output_shape.clone(),
        selected,
    };
    Ok((Tensor::new(output_shape, best)?, mask))
}

/// Average pooling; padded positions count toward the window size.
pub fn avgpool3d_forward(input: &Tensor, geometry: &Geometry) -> Result<Tensor> {
    let (c, extents, out) = pool_shapes(input.shape(), geometry)?;
    let n_out = c * out.iter().product::<usize>();
    let x = input.data();
    let mut acc = vec![0.0f64; n_out];
    for_each_window_input(c, extents, out, geometry, |j, i| acc[j] += x[i] as f64);
    let volume = geometry.window_volume() as f64;
    Tensor::new(
        vec![c, out[0], out[1], out[2]],
        acc.into_iter().map(|v| (v / volume) as f32).collect(),
    )
}

/// Routes each output value to the input position its window selected.
pub fn maxpool3d_route(mask: &PoolMask, values: &Tensor) -> Result<Tensor> {
    if values.shape() != mask.output_shape() {
        return Err(Error::shape(mask.output_shape(), values.shape()));
    }
    let mut out = Tensor::zeros(mask.input_shape())?;
    let dst = out.data_mut();
    for (&i, &v) in mask.selected.iter().zip(values.data()) {
        dst[i] += v;
    }
    Ok(out)
}

/// Spreads each output value evenly over its window (`value / window_volume`
/// per position); shares falling on padding are dropped.
pub fn avgpool3d_spread(values: &Tensor, input_shape: &[usize], geometry: &Geometry) -> Result<Tensor> {
    let (c, extents, out) = pool_shapes(input_shape, geometry)?;
    let expected = [c, out[0], out[1], out[2]];
    if values.shape() != expected {
        return Err(Error::shape(&expected, values.shape()));
    }
    let volume = geometry.window_volume() as f32;
    let v = values.data();
    let mut acc = vec![0.0f32; input_shape.iter().product()];
    for_each_window_input(c, extents, out, geometry, |j, i| acc[i] += v[j] / volume);
    Tensor::new(input_shape.to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_conv() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_slice(&[1.0]);
        let y = conv3d_forward(&x, &w, Some(&b), &Geometry::dense([1, 1, 1])).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn maxpool_window_and_mask() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 3., 2., 0.]).unwrap();
        let (y, mask) = maxpool3d_forward(&x, &Geometry::tiled([1, 2, 2])).unwrap();
        assert_eq!(y.data(), &[3.0]);
        // (h, w) = (0, 1)
        assert_eq!(mask.selected(), &[1]);
    }

    #[test]
    fn maxpool_ties_pick_lowest_index() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0., 4., 4., 4.]).unwrap();
        let (_, mask) = maxpool3d_forward(&x, &Geometry::tiled([1, 2, 2])).unwrap();
        assert_eq!(mask.selected(), &[1]);
    }

    #[test]
    fn avgpool_window() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 3., 2., 0.]).unwrap();
        let y = avgpool3d_forward(&x, &Geometry::tiled([1, 2, 2])).unwrap();
        assert_eq!(y.data(), &[1.5]);
    }

    #[test]
    fn padded_maxpool_ignores_padding() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![-1., -2., -3., -4.]).unwrap();
        let g = Geometry::new([1, 2, 2], [1, 2, 2], [0, 1, 1]);
        let (y, _) = maxpool3d_forward(&x, &g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[-1., -2., -3., -4.]);
    }

    #[test]
    fn geometry_rejects_zero_stride_and_oversized_kernel() {
        assert!(Geometry::new([1, 1, 1], [0, 1, 1], [0; 3]).validate().is_err());
        assert!(Geometry::dense([3, 3, 3]).output_extents([2, 5, 5]).is_err());
        assert_eq!(
            Geometry::new([2, 2, 2], [2, 2, 2], [0, 1, 1]).output_extents([2, 7, 7]),
            Ok([1, 4, 4])
        );
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 1, 3, 3]).unwrap();
        let w = Tensor::zeros(&[1, 3, 1, 1, 1]).unwrap();
        assert!(conv3d_forward(&x, &w, None, &Geometry::dense([1, 1, 1])).is_err());
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), g> == <x, conv^T(g)>
        let x = Tensor::new(vec![2, 3, 4, 4], (0..96).map(|v| (v % 7) as f32 - 3.0).collect()).unwrap();
        let w = Tensor::new(vec![3, 2, 2, 3, 3], (0..108).map(|v| (v % 5) as f32 - 2.0).collect()).unwrap();
        let g = Geometry::new([2, 3, 3], [1, 2, 1], [1, 1, 0]);
        let y = conv3d_forward(&x, &w, None, &g).unwrap();
        let go = Tensor::new(y.shape().to_vec(), (0..y.numel()).map(|v| (v % 3) as f32).collect()).unwrap();
        let gi = conv3d_transpose(&go, &w, x.shape(), &g).unwrap();
        let lhs: f64 = y.data().iter().zip(go.data()).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(gi.data()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
    }

    #[test]
    fn linear_and_transpose() {
        let w = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = linear_forward(&Tensor::from_slice(&[1., 0., -1.]), &w, Some(&Tensor::from_slice(&[0.5, 0.]))).unwrap();
        assert_eq!(y.data(), &[-1.5, -2.0]);
        let t = linear_transpose(&Tensor::from_slice(&[1., 1.]), &w, 3).unwrap();
        assert_eq!(t.data(), &[5., 7., 9.]);
    }
}
