//! Few-shot ischemic lesion segmentation driven by supervoxel pseudolabels.
//!
//! The crate covers the whole offline pipeline: volume I/O, contrast
//! preprocessing, parametric maps from perfusion series, multi-channel
//! graph-based supervoxels, self-supervised episode sampling, a prototype
//! segmentation head with a trainable threshold, and evaluation metrics.

pub mod episodes;
pub mod error;
pub mod metrics;
pub mod perfusion;
pub mod pipeline;
pub mod preproc;
pub mod proto;
pub mod supervox;
pub mod volgrid;

pub use error::{Error, Result};
