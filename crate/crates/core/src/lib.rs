//! Dataset-side machinery for training and evaluating semantic and panoptic
//! segmentation across datasets with heterogeneous label spaces.
//!
//! - [`taxonomy`]: unified semantic-atom taxonomy and per-dataset group maps.
//! - [`raster_io`]: class, UID and probability rasters plus confusion matrices.
//! - [`conversion`]: atom-to-label probability conversion, losses and gradients.
//! - [`weak_supervision`]: box/tag pseudo-labels, refinement, mixed loss.
//! - [`metrics`]: mIoU, mPA, Knowledgeability, PQ, PartPQ, PartIoU, Impact.
//! - [`panoptic_uid`]: the 7-digit hierarchical panoptic-parts label codec.
//! - [`data_selection`]: GMM similarity ranking and object-diversity scoring.
//! - [`toy_trainer`]: a linear atom classifier trained on synthetic data.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conversion;
pub mod data_selection;
pub mod error;
pub mod metrics;
pub mod panoptic_uid;
pub mod raster_io;
pub mod taxonomy;
pub mod toy_trainer;
pub mod weak_supervision;

pub use error::{Error, Result};
