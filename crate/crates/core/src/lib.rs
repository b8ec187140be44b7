//! Efficient data sampling (EDS) for segmentation datasets.
//!
//! Unlabeled images are embedded from their road region, clustered with
//! k-means, and sampled uniformly per cluster so that rare capture scenarios
//! are not drowned out by common ones. The selected subsets feed a
//! teacher → pseudo-label → student self-training loop evaluated by mIoU.

mod binfmt;
pub mod cli;
pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod raster;
pub mod sampler;
pub mod segmodel;
pub mod synth;

pub use error::{Error, Result};
