//! Clip input and raw tensor files.
//!
//! A clip is either a directory of PNG frames (sorted by file name) or a
//! raw `VRELV001` file:
//!
//! ```text
//! magic    8 bytes  "VRELV001"
//! extents  4 x u32  C, T, H, W
//! payload  C*T*H*W x f32, row-major
//! ```
//!
//! Relevance maps are written in the same raw format.

use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 8] = b"VRELV001";
pub const RAW_HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Debug, Clone, PartialEq)]
pub enum ClipSource {
    Frames(Vec<PathBuf>),
    Raw(PathBuf),
}

/// A `3 x T x H x W` clip with pixel values in `[0, 255]` (before
/// normalization).
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub tensor: Tensor,
    pub source: ClipSource,
}

impl VideoClip {
    pub fn frames(&self) -> usize {
        self.tensor.shape()[1]
    }
}

pub fn encode_raw(tensor: &Tensor) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidTensor(format!(
            "raw files hold C x T x H x W tensors, got shape {shape:?}"
        )));
    }
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * tensor.numel());
    out.extend_from_slice(RAW_MAGIC);
    for &e in shape {
        let e = u32::try_from(e)
            .map_err(|_| Error::InvalidTensor(format!("extent {e} does not fit in u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::Video("bad magic, expected \"VRELV001\"".into()));
    }
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::Video("truncated extents".into()));
    }
    let shape: Vec<usize> = bytes[8..RAW_HEADER_LEN]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Video(format!("extents {shape:?} overflow")))?;
    let payload = &bytes[RAW_HEADER_LEN..];
    if numel.checked_mul(4) != Some(payload.len()) {
        return Err(Error::Video(format!(
            "extents {shape:?} need {} payload bytes, found {}",
            numel.saturating_mul(4),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Video(e.to_string()))
}

pub fn read_raw_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes)
}

pub fn write_raw_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_raw(tensor)?).map_err(|e| Error::io(path, e))
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a clip from a PNG frame directory or a raw file. When
/// `expected_frames` is given the frame count must match it.
pub fn read_video(path: impl AsRef<Path>, expected_frames: Option<usize>) -> Result<VideoClip> {
    let path = path.as_ref();
    let clip = if path.is_dir() {
        read_frame_dir(path)?
    } else {
        VideoClip {
            tensor: read_raw_tensor(path)?,
            source: ClipSource::Raw(path.to_path_buf()),
        }
    };

    let shape = clip.tensor.shape();
    if shape[0] != 3 {
        return Err(Error::Video(format!(
            "clips must have 3 channels, got shape {shape:?}"
        )));
    }
    if let Some(expected) = expected_frames {
        if shape[1] != expected {
            return Err(Error::Video(format!(
                "frame count mismatch: found {}, expected {expected}",
                shape[1]
            )));
        }
    }
    if !clip.tensor.is_finite() {
        return Err(Error::Video("clip contains non-finite values".into()));
    }
    Ok(clip)
}

fn read_frame_dir(dir: &Path) -> Result<VideoClip> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::Video(format!("no PNG frames in {}", dir.display())));
    }

    let mut images = Vec::with_capacity(frames.len());
    for frame in &frames {
        let img = image::open(frame)
            .map_err(|source| Error::Image {
                path: frame.clone(),
                source,
            })?
            .to_rgb8();
        if let Some(first) = images.first() {
            let first: &RgbImage = first;
            if img.dimensions() != first.dimensions() {
                return Err(Error::Video(format!(
                    "inconsistent frame sizes: {} is {:?}, first frame is {:?}",
                    frame.display(),
                    img.dimensions(),
                    first.dimensions()
                )));
            }
        }
        images.push(img);
    }

    let t = images.len();
    let (w, h) = images[0].dimensions();
    let (h, w) = (h as usize, w as usize);
    let mut data = vec![0.0f32; 3 * t * h * w];
    for (ti, img) in images.iter().enumerate() {
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[((c * t + ti) * h + y as usize) * w + x as usize] = px[c] as f32;
            }
        }
    }
    Ok(VideoClip {
        tensor: Tensor::new(vec![3, t, h, w], data)?,
        source: ClipSource::Frames(frames),
    })
}

/// Writes a `3 x T x H x W` clip as `frame_000.png`, ... with values clamped
/// to `[0, 255]` and rounded.
pub fn write_frames(dir: impl AsRef<Path>, clip: &Tensor) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let shape = clip.shape();
    if shape.len() != 4 || shape[0] != 3 {
        return Err(Error::Video(format!(
            "frames are written from 3 x T x H x W tensors, got {shape:?}"
        )));
    }
    let (t, h, w) = (shape[1], shape[2], shape[3]);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = clip.data();
    let mut paths = Vec::with_capacity(t);
    for ti in 0..t {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = data[((c * t + ti) * h + y as usize) * w + x as usize];
                v.clamp(0.0, 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        });
        let path = dir.join(frame_file_name(ti));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:03}.png")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_header_layout() {
        let t = Tensor::zeros(&[1, 2, 1, 1]).unwrap();
        let bytes = encode_raw(&t).unwrap();
        assert_eq!(&bytes[..8], b"VRELV001");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), RAW_HEADER_LEN + 8);
        assert!(decode_raw(&bytes).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn raw_rejects_bad_payload_length() {
        let mut bytes = encode_raw(&Tensor::zeros(&[1, 1, 1, 2]).unwrap()).unwrap();
        bytes.pop();
        assert!(decode_raw(&bytes).is_err());
        assert!(decode_raw(b"VRELW001").is_err());
    }

    #[test]
    fn raw_requires_rank_four() {
        assert!(encode_raw(&Tensor::from_slice(&[1.0])).is_err());
    }
}
