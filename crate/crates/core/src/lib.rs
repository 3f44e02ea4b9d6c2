//! Interactive multi-view segmentation: point-prompted 2D confidence masks
//! fused into a probabilistic voxel occupancy grid.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod planner;
pub mod render;
pub mod scene;
pub mod segment;
pub mod session;

pub use error::{Error, Result};
