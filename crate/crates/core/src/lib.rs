//! Omnidirectional multi-view stereo from a rig of wide-angle fisheye cameras.
//!
//! Input images are matched on concentric spheres around the rig
//! ("spherical sweeping"). The crate provides the camera geometry, the
//! differentiable warping onto sweep spheres, a small reverse-mode autodiff
//! substrate, the end-to-end cost-volume network, classical ZNCC/SGM and
//! rectify-and-stitch baselines, a procedural scene generator with exact
//! ground truth, and index-error metrics.

pub mod autodiff;
pub mod calib;
pub mod classic;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod network;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod sweeping;
pub mod synthdata;

pub use error::{Error, ErrorKind, Result};
