//! Diverging red/white/blue heatmaps of relevance maps.
//!
//! Channels are summed per voxel, then every voxel is divided by the largest
//! absolute channel sum over the whole clip. `+1` renders pure red, `0`
//! white, `-1` pure blue. Normalizing per clip keeps relative frame
//! importance visible, and makes the output invariant to positive scaling.

use std::path::{Path, PathBuf};

use image::{ImageEncoder, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::io::video::frame_file_name;
use crate::network::ops::spatial_dims;
use crate::tensor::Tensor;

/// Which component of a decomposition a heatmap shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapMode {
    Original,
    Spatial,
    Temporal,
}

impl HeatmapMode {
    pub const ALL: [HeatmapMode; 3] = [HeatmapMode::Original, HeatmapMode::Spatial, HeatmapMode::Temporal];

    pub fn name(self) -> &'static str {
        match self {
            HeatmapMode::Original => "original",
            HeatmapMode::Spatial => "spatial",
            HeatmapMode::Temporal => "temporal",
        }
    }
}

/// Colour for a normalized value in `[-1, 1]`.
pub fn diverging_color(v: f64) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let fade = ((1.0 - v.abs()) * 255.0).round() as u8;
    if v >= 0.0 {
        Rgb([255, fade, fade])
    } else {
        Rgb([fade, fade, 255])
    }
}

/// One image per frame of a `C x T x H x W` relevance tensor.
pub fn render_heatmap(relevance: &Tensor) -> Result<Vec<RgbImage>> {
    let (channels, [t, h, w]) = spatial_dims(relevance.shape())?;
    if !relevance.is_finite() {
        return Err(Error::InvalidTensor(
            "cannot render a relevance map with non-finite values".into(),
        ));
    }
    let plane = t * h * w;
    let data = relevance.data();
    let summed: Vec<f64> = (0..plane)
        .map(|i| (0..channels).map(|c| data[c * plane + i] as f64).sum())
        .collect();
    let peak = summed.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    Ok((0..t)
        .map(|ti| {
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let s = summed[(ti * h + y as usize) * w + x as usize];
                if peak == 0.0 {
                    Rgb([255, 255, 255])
                } else {
                    diverging_color(s / peak)
                }
            })
        })
        .collect())
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(
            image.as_raw(),
            image.width(),
            image.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: PathBuf::from("<memory>"),
            source,
        })?;
    Ok(out)
}

/// Writes `frame_000.png`, `frame_001.png`, ... into `dir`.
pub fn write_heatmap_frames(dir: impl AsRef<Path>, frames: &[RgbImage]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(frame_file_name(i));
            std::fs::write(&path, encode_png(img)?).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
