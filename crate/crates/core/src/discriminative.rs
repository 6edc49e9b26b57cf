//! Spatial / temporal relevance decomposition.
//!
//! The spatial relevance of frame `t` is obtained by explaining a
//! freeze-frame clip, frame `t` repeated over the whole temporal extent, for
//! the class of the original explanation, and keeping its slice `t`. What
//! remains after subtracting the spatial map from the original explanation
//! is relevance attributed to motion. A `T`-frame clip costs `T + 1`
//! explanation passes.

use std::sync::atomic::{AtomicUsize, Ordering};

use log::info;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::relevance::{explain_with_logits, RelevanceConfig, RelevanceMap, Target};
use crate::tensor::Tensor;

/// Original, spatial and temporal relevance of one clip.
#[derive(Debug, Clone)]
pub struct ExplanationTriple {
    pub original: RelevanceMap,
    pub spatial: RelevanceMap,
    /// `original - spatial`, computed exactly (see [`ExplanationTriple::quantum`]).
    pub temporal: RelevanceMap,
    pub target_class: usize,
    /// Argmax class of every freeze-frame input, by frame.
    pub per_frame_predictions: Vec<usize>,
    /// Target-class logit of every freeze-frame input, by frame.
    pub per_frame_logits: Vec<f32>,
    /// Explanation passes performed.
    pub explain_passes: usize,
    /// Grid spacing the original and spatial maps were rounded to so that the
    /// subtraction is exact in `f32`. Zero when both maps are all zero. The
    /// rounding error is at most `quantum / 2`, i.e. below `2^-23` of the
    /// largest magnitude in either map.
    pub quantum: f32,
}

/// Counts explanation passes over one network and configuration.
pub struct Explainer<'a> {
    net: &'a Network,
    cfg: &'a RelevanceConfig,
    passes: AtomicUsize,
}

impl<'a> Explainer<'a> {
    pub fn new(net: &'a Network, cfg: &'a RelevanceConfig) -> Self {
        Self {
            net,
            cfg,
            passes: AtomicUsize::new(0),
        }
    }

    /// One explanation pass; also returns the logits.
    pub fn explain(&self, input: &Tensor, target: Target) -> Result<(RelevanceMap, Tensor)> {
        let n = self.passes.fetch_add(1, Ordering::SeqCst) + 1;
        info!("explain pass {n}");
        explain_with_logits(self.net, input, &self.cfg.clone().with_target(target))
    }

    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::SeqCst)
    }
}

fn clip_dims(video: &Tensor) -> Result<(usize, usize, usize)> {
    match *video.shape() {
        [c, t, h, w] => Ok((c, t, h * w)),
        _ => Err(Error::InvalidTensor(format!(
            "expected a C x T x H x W clip, got shape {:?}",
            video.shape()
        ))),
    }
}

/// A clip of the same shape in which every frame equals frame `t`.
pub fn freeze_frame(video: &Tensor, t: usize) -> Result<Tensor> {
    let (channels, frames, plane) = clip_dims(video)?;
    if t >= frames {
        return Err(Error::FrameOutOfRange { index: t, frames });
    }
    let src = video.data();
    let mut data = Vec::with_capacity(video.numel());
    for c in 0..channels {
        let frame = &src[(c * frames + t) * plane..(c * frames + t + 1) * plane];
        for _ in 0..frames {
            data.extend_from_slice(frame);
        }
    }
    Tensor::new(video.shape().to_vec(), data)
}

/// Explanation of the freeze-frame clip built from frame `t`, for `target`,
/// together with the freeze-frame's own argmax class.
pub fn explain_freeze_frame(
    explainer: &Explainer,
    video: &Tensor,
    t: usize,
    target: usize,
) -> Result<(RelevanceMap, usize)> {
    let frozen = freeze_frame(video, t)?;
    let (map, logits) = explainer.explain(&frozen, Target::Class(target))?;
    Ok((map, logits.argmax()))
}

/// Spatial relevance assembled frame by frame, plus per-frame predictions
/// and freeze-frame target logits.
pub fn spatial_relevance_with(
    explainer: &Explainer,
    video: &Tensor,
    target: usize,
) -> Result<(RelevanceMap, Vec<usize>, Vec<f32>)> {
    let (channels, frames, plane) = clip_dims(video)?;
    let per_frame: Vec<(RelevanceMap, usize)> = (0..frames)
        .into_par_iter()
        .map(|t| explain_freeze_frame(explainer, video, t, target))
        .collect::<Result<_>>()?;

    let mut data = vec![0.0f32; video.numel()];
    for (t, (map, _)) in per_frame.iter().enumerate() {
        let src = map.relevance.data();
        for c in 0..channels {
            let range = (c * frames + t) * plane..(c * frames + t + 1) * plane;
            data[range.clone()].copy_from_slice(&src[range]);
        }
    }
    let logits: Vec<f32> = per_frame.iter().map(|(m, _)| m.target_logit).collect();
    let predictions = per_frame.iter().map(|(_, p)| *p).collect();
    let map = RelevanceMap {
        relevance: Tensor::new(video.shape().to_vec(), data)?,
        target_class: target,
        target_logit: logits.iter().sum::<f32>() / frames as f32,
    };
    Ok((map, predictions, logits))
}

/// Spatial relevance of `video` for `target`. Costs `T` explanation passes.
pub fn spatial_relevance(
    net: &Network,
    video: &Tensor,
    cfg: &RelevanceConfig,
    target: usize,
) -> Result<(RelevanceMap, Vec<usize>)> {
    let explainer = Explainer::new(net, cfg);
    let (map, predictions, _) = spatial_relevance_with(&explainer, video, target)?;
    Ok((map, predictions))
}

/// Rounds both tensors onto a shared power-of-two grid fine enough that
/// their difference, and its sum with either operand, is exact in `f32`.
/// Negative zeros are canonicalized to `+0`.
fn snap_to_common_grid(a: &Tensor, b: &Tensor) -> (Tensor, Tensor, f32) {
    let peak = a.max_abs().max(b.max_abs()) as f64;
    if peak == 0.0 {
        let canon = |t: &Tensor| t.map(|v| v + 0.0);
        return (canon(a), canon(b), 0.0);
    }
    // Smallest e with peak < 2^e; snapped magnitudes then stay below 2^23
    // grid steps and differences below 2^24, both exactly representable.
    let mut e = peak.log2().floor() as i32 + 1;
    while 2f64.powi(e) <= peak {
        e += 1;
    }
    while 2f64.powi(e - 1) > peak {
        e -= 1;
    }
    let quantum = 2f64.powi((e - 23).max(-149));
    let snap = |t: &Tensor| t.map(|v| (((v as f64) / quantum).round() * quantum) as f32 + 0.0);
    (snap(a), snap(b), quantum as f32)
}

/// Full decomposition of `video`: original explanation, spatial relevance
/// for the original target, and their difference.
pub fn discriminative_decompose(
    net: &Network,
    video: &Tensor,
    cfg: &RelevanceConfig,
) -> Result<ExplanationTriple> {
    let explainer = Explainer::new(net, cfg);
    let (original, _) = explainer.explain(video, cfg.target)?;
    let target = original.target_class;
    let (spatial, per_frame_predictions, per_frame_logits) =
        spatial_relevance_with(&explainer, video, target)?;

    let (original_snapped, spatial_snapped, quantum) =
        snap_to_common_grid(&original.relevance, &spatial.relevance);
    let temporal = original_snapped.sub(&spatial_snapped)?;

    let logit = original.target_logit;
    Ok(ExplanationTriple {
        original: RelevanceMap {
            relevance: original_snapped,
            ..original
        },
        spatial: RelevanceMap {
            relevance: spatial_snapped,
            ..spatial
        },
        temporal: RelevanceMap {
            relevance: temporal,
            target_class: target,
            target_logit: logit,
        },
        target_class: target,
        per_frame_predictions,
        per_frame_logits,
        explain_passes: explainer.passes(),
        quantum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: usize) -> Tensor {
        let shape = vec![2, frames, 2, 3];
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn freeze_frame_repeats_one_frame() {
        let v = clip(4);
        let f = freeze_frame(&v, 2).unwrap();
        assert_eq!(f.shape(), v.shape());
        for c in 0..2 {
            for t in 0..4 {
                let got = &f.data()[(c * 4 + t) * 6..(c * 4 + t + 1) * 6];
                let want = &v.data()[(c * 4 + 2) * 6..(c * 4 + 3) * 6];
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn freeze_frame_is_identity_on_static_clips() {
        let f = freeze_frame(&clip(3), 0).unwrap();
        assert!(freeze_frame(&f, 2).unwrap().bitwise_eq(&f));
    }

    #[test]
    fn freeze_frame_range_check() {
        assert!(matches!(
            freeze_frame(&clip(4), 4),
            Err(Error::FrameOutOfRange { index: 4, frames: 4 })
        ));
    }

    #[test]
    fn grid_snapping_makes_subtraction_exact() {
        let a = Tensor::from_slice(&[1e-8, 0.3, -0.0, 5.0, -2.5e-3, 0.0]);
        let b = Tensor::from_slice(&[1.0, -0.7, -0.0, 5.0, 7.0, -1e-30]);
        let (sa, sb, q) = snap_to_common_grid(&a, &b);
        assert!(q > 0.0);
        let diff = sa.sub(&sb).unwrap();
        let back = sb.add(&diff).unwrap();
        assert!(back.bitwise_eq(&sa));
        for (x, y) in a.data().iter().zip(sa.data()) {
            assert!((x - y).abs() <= q / 2.0);
        }
    }

    #[test]
    fn grid_snapping_of_zero_maps() {
        let z = Tensor::from_slice(&[0.0, -0.0]);
        let (a, b, q) = snap_to_common_grid(&z, &z);
        assert_eq!(q, 0.0);
        assert!(a.data().iter().chain(b.data()).all(|v| v.to_bits() == 0));
    }
}
