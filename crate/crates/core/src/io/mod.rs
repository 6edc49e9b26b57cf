//! Weight containers, clip ingestion and relevance output.

mod container;
mod heatmap;
mod video;

pub use container::{read_weight_container, WeightContainer, WEIGHT_MAGIC};
pub use heatmap::{diverging_color, encode_png, render_heatmap, write_heatmap_frames, HeatmapMode};
pub use video::{
    decode_raw, encode_raw, frame_file_name, read_raw_tensor, read_video, write_frames, write_raw_tensor,
    ClipSource, VideoClip, RAW_HEADER_LEN, RAW_MAGIC,
};

use std::path::Path;

use crate::error::Result;
use crate::relevance::RelevanceMap;

/// Writes a relevance map in the raw `VRELV001` format.
pub fn write_relevance(map: &RelevanceMap, path: impl AsRef<Path>) -> Result<()> {
    write_raw_tensor(path, &map.relevance)
}
