//! Multi-atlas guided 3D fully convolutional network ensembles for
//! volumetric ROI segmentation.

pub mod ensemble;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
mod io_util;
pub mod patchsearch;
pub mod pipeline;
pub mod sfcn;
pub mod synthetic;
pub mod tensornn;
pub mod volume;

pub use error::{Error, Result};
