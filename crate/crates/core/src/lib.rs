//! 3D CNN inference over video clips with deep Taylor relevance
//! propagation, and a decomposition of the resulting relevance into a
//! spatial part (what single frames show) and a temporal part (what only
//! motion explains).
//!
//! ```no_run
//! use vrel::{discriminative_decompose, load_architecture, read_video, RelevanceConfig, WeightContainer};
//!
//! let arch = load_architecture(vrel::network::TINY_CONFIG)?;
//! let net = arch.bind(&WeightContainer::load("tiny.vrelw")?)?;
//! let clip = read_video("clip/", Some(16))?.tensor;
//! let cfg = RelevanceConfig::default().with_normalization(&net.normalization, 3);
//! let triple = discriminative_decompose(&net, &net.normalization.apply(&clip)?, &cfg)?;
//! println!("temporal share {}", triple.temporal.relevance.sum_abs());
//! # Ok::<(), vrel::Error>(())
//! ```

// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod discriminative;
pub mod error;
pub mod io;
pub mod network;
pub mod oracle;
pub mod relevance;
pub mod synth;
pub mod tensor;

pub use discriminative::{discriminative_decompose, freeze_frame, spatial_relevance, ExplanationTriple, Explainer};
pub use error::{Error, Result};
pub use io::{read_video, read_weight_container, render_heatmap, VideoClip, WeightContainer};
pub use network::{bind_weights, load_architecture, Architecture, Layer, Network};
pub use relevance::{explain, RelevanceConfig, RelevanceMap, Target};
pub use tensor::Tensor;
