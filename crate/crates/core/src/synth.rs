//! Seeded synthetic weights and clips for demos and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::WeightContainer;
use crate::network::{Architecture, LayerSpec};
use crate::tensor::Tensor;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], low: f32, high: f32) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(low..high)).collect())
}

/// He-uniform weights, small uniform biases and mild batch-norm statistics
/// for every parameter of `arch`.
pub fn synthetic_weights(arch: &Architecture, seed: u64) -> Result<WeightContainer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut container = WeightContainer::new();
    for spec in &arch.layers {
        for (name, shape) in spec.parameters() {
            let tensor = match spec {
                LayerSpec::Batchnorm { .. } => {
                    let (low, high) = if name.ends_with(".weight") || name.ends_with(".running_var") {
                        (0.5, 1.5)
                    } else {
                        (-0.1, 0.1)
                    };
                    uniform(&mut rng, &shape, low, high)?
                }
                _ if name.ends_with(".weight") => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f32).sqrt();
                    uniform(&mut rng, &shape, -bound, bound)?
                }
                _ => uniform(&mut rng, &shape, -0.05, 0.05)?,
            };
            container.insert(name, tensor)?;
        }
    }
    Ok(container)
}

/// A `3 x T x H x W` clip with values in `[0, 255]`: a bright square moving
/// diagonally over a noisy dark background. With `moving == false` every
/// frame equals the first.
pub fn synthetic_clip(frames: usize, height: usize, width: usize, seed: u64, moving: bool) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let background: Vec<[f32; 3]> = (0..plane)
        .map(|_| [0; 3].map(|_: i32| rng.gen_range(0.0..64.0f32).round()))
        .collect();
    let colour = [0; 3].map(|_: i32| rng.gen_range(160.0..256.0f32).floor());
    let side = (height.min(width) / 4).max(1);
    let start = (rng.gen_range(0..height), rng.gen_range(0..width));

    let mut data = vec![0.0f32; 3 * frames * plane];
    for t in 0..frames {
        let step = if moving { t } else { 0 };
        let (top, left) = ((start.0 + step) % height, (start.1 + step) % width);
        for y in 0..height {
            for x in 0..width {
                let inside = (y + height - top) % height < side && (x + width - left) % width < side;
                for c in 0..3 {
                    let v = if inside { colour[c] } else { background[y * width + x][c] };
                    data[(c * frames + t) * plane + y * width + x] = v;
                }
            }
        }
    }
    Tensor::new(vec![3, frames, height, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{load_architecture, TINY_CONFIG};

    #[test]
    fn weights_bind_and_are_seeded() {
        let arch = load_architecture(TINY_CONFIG).unwrap();
        let a = synthetic_weights(&arch, 7).unwrap();
        let b = synthetic_weights(&arch, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), synthetic_weights(&arch, 8).unwrap().to_bytes());
        arch.bind(&a).unwrap();
    }

    #[test]
    fn static_clip_has_identical_frames() {
        let clip = synthetic_clip(4, 8, 8, 1, false).unwrap();
        let d = clip.data();
        for c in 0..3 {
            for t in 1..4 {
                assert_eq!(d[(c * 4) * 64..(c * 4 + 1) * 64], d[(c * 4 + t) * 64..(c * 4 + t + 1) * 64]);
            }
        }
        assert!(d.iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn moving_clip_changes_between_frames() {
        let clip = synthetic_clip(2, 8, 8, 1, true).unwrap();
        assert_ne!(clip.data()[..64], clip.data()[64..128]);
    }
}
