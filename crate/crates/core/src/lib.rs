//! Semi-automatic kidney segmentation from CT.
//!
//! An operator outlines each kidney on one axial slice. The outlines seed
//! intensity-weighted geodesic distance volumes that join the CT as extra
//! channels for a random-forest voxel classifier built on two-box features.

// `!(a > b)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod geodesic;
pub mod mhd;
pub mod pipeline;
pub mod postprocess;
pub mod render;
pub mod service;
pub mod volume;

pub use error::{Error, Result};
