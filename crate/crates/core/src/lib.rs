//! Recovery of part segmentation, per-part rigid motion, and joint parameters
//! (revolute/prismatic) of articulated objects from Gaussian-splat point sets
//! captured in different articulation states and unrelated coordinate frames.
//!
//! The pipeline (see [`pipeline::run_pipeline`]):
//!
//! 1. camera intrinsic averaging and extrinsic refinement ([`render`]),
//! 2. a low-frequency deformation field aligning the source splats to the
//!    target state ([`deform`]),
//! 3. robust recursive part discovery over the induced correspondences
//!    ([`parts`]),
//! 4. three-phase joint optimization of transforms, displacements, colors,
//!    and labels ([`artopt`]),
//! 5. articulation parameter decomposition and evaluation ([`joints`]).
//!
//! A synthetic scene generator ([`synth`]) stands in for a sparse-view
//! reconstruction front-end and provides ground truth for end-to-end
//! validation.

pub mod artopt;
pub mod config;
pub mod deform;
pub mod error;
pub mod geom;
pub mod joints;
pub mod parts;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
