//! Dense row-major `f32` tensors.
//!
//! Every activation, weight and relevance array in the crate is a [`Tensor`].
//! Tensors are immutable values: operations allocate fresh outputs, so a
//! tensor can be shared freely between threads.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Binary elementwise operation selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// `a / (b + sign(b) * eps)` with `sign(0) = +1`.
    DivStabilized,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        validate_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    /// Rank-1 tensor over `values`. Panics on an empty slice.
    pub fn from_slice(values: &[f32]) -> Self {
        assert!(!values.is_empty(), "tensor must hold at least one element");
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(shape, &self.shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn sum_abs(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64).abs()).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(BinaryOp::Add, self, other, 0.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(BinaryOp::Sub, self, other, 0.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(BinaryOp::Mul, self, other, 0.0)
    }

    /// Bitwise equality of shape and payload (distinguishes `0.0` and `-0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidTensor("rank must be at least 1".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Stabilized division `a / (b + sign(b) * eps)` with `sign(0) = +1`.
#[inline]
pub fn stabilized_div(a: f32, b: f32, eps: f32) -> f32 {
    let sign = if b >= 0.0 { 1.0 } else { -1.0 };
    a / (b + sign * eps)
}

pub fn elementwise(op: BinaryOp, a: &Tensor, b: &Tensor, eps: f32) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(&a.shape, &b.shape));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidTensor(format!(
            "stabilizer must be non-negative, got {eps}"
        )));
    }
    let f: fn(f32, f32, f32) -> f32 = match op {
        BinaryOp::Add => |x, y, _| x + y,
        BinaryOp::Sub => |x, y, _| x - y,
        BinaryOp::Mul => |x, y, _| x * y,
        BinaryOp::DivStabilized => stabilized_div,
    };
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| f(x, y, eps))
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Sums over `axes`, removing them from the shape. Reducing every axis
/// yields a rank-1 tensor of extent 1.
pub fn reduce_sum(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut reduced = vec![false; rank];
    for &axis in axes {
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        reduced[axis] = true;
    }

    let out_shape: Vec<usize> = a
        .shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&e, _)| e)
        .collect();
    let out_shape = if out_shape.is_empty() {
        vec![1]
    } else {
        out_shape
    };

    // Strides of the kept axes within the output.
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for axis in (0..rank).rev() {
        if !reduced[axis] {
            out_strides[axis] = stride;
            stride *= a.shape[axis];
        }
    }

    let mut acc = vec![0.0f64; out_shape.iter().product()];
    let mut index = vec![0usize; rank];
    for &v in &a.data {
        let out: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        acc[out] += v as f64;
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < a.shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }

    Tensor::new(out_shape, acc.into_iter().map(|v| v as f32).collect())
}

/// Splits `a` into `(max(a, 0), min(a, 0))`. Zeros keep their sign in both
/// parts so that `pos + neg` reproduces `a` bitwise.
pub fn split_signs(a: &Tensor) -> (Tensor, Tensor) {
    let pos = a.map(|v| if v > 0.0 { v } else { 0.0f32.copysign(v) });
    let neg = a.map(|v| if v < 0.0 { v } else { 0.0f32.copysign(v) });
    (pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let sub = elementwise(BinaryOp::Sub, &t(&[2], &[3., 1.]), &t(&[2], &[1., 1.]), 0.0).unwrap();
        assert_eq!(sub.data(), &[2., 0.]);
        let mul = elementwise(BinaryOp::Mul, &t(&[2], &[2., 3.]), &t(&[2], &[4., 5.]), 0.0).unwrap();
        assert_eq!(mul.data(), &[8., 15.]);
        let div = elementwise(BinaryOp::DivStabilized, &t(&[1], &[1.]), &t(&[1], &[0.]), 1e-9).unwrap();
        assert_eq!(div.data(), &[1.0 / 1e-9f32]);
    }

    #[test]
    fn stabilizer_follows_denominator_sign() {
        assert!(stabilized_div(1.0, -1e-12, 1e-3) < 0.0);
        assert!(stabilized_div(1.0, 0.0, 1e-3) > 0.0);
        assert_eq!(stabilized_div(2.0, 1.0, 0.0), 2.0);
    }

    #[test]
    fn elementwise_rejects_mismatched_shapes() {
        let err = elementwise(BinaryOp::Add, &t(&[2], &[1., 2.]), &t(&[1, 2], &[1., 2.]), 0.0);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn reduce_sum_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(reduce_sum(&a, &[0, 1]).unwrap().data(), &[10.]);
        let rows = reduce_sum(&a, &[1]).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[3., 7.]);
        let cols = reduce_sum(&a, &[0]).unwrap();
        assert_eq!(cols.data(), &[4., 6.]);
        let z = Tensor::zeros(&[2, 2, 2]).unwrap();
        assert_eq!(reduce_sum(&z, &[0, 1, 2]).unwrap().data(), &[0.]);
        assert!(matches!(reduce_sum(&a, &[2]), Err(Error::Axis { axis: 2, rank: 2 })));
    }

    #[test]
    fn reduce_middle_axis() {
        let a = t(&[2, 3, 2], &(0..12).map(|v| v as f32).collect::<Vec<_>>());
        let r = reduce_sum(&a, &[1]).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[6., 9., 24., 27.]);
    }

    #[test]
    fn split_signs_examples() {
        let (p, n) = split_signs(&t(&[3], &[2., -3., 0.]));
        assert_eq!(p.data(), &[2., 0., 0.]);
        assert_eq!(n.data(), &[0., -3., 0.]);
        let (p, n) = split_signs(&t(&[1], &[-1.]));
        assert_eq!(p.data(), &[0.]);
        assert_eq!(n.data(), &[-1.]);
        let pos = t(&[2], &[1., 5.]);
        let (p, n) = split_signs(&pos);
        assert!(p.bitwise_eq(&pos));
        assert_eq!(n.data(), &[0., 0.]);
    }

    #[test]
    fn construction_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::zeros(&[2, 0]).is_err());
        assert!(t(&[4], &[1., 2., 3., 4.]).reshape(&[3]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(t(&[4], &[1., 3., 3., 2.]).argmax(), 1);
    }
}
