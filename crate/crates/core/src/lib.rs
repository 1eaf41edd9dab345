//! Correspondence-attention alignment for multi-view diffusion, at desk scale.
//!
//! The crate covers synthetic multi-view scenes with analytic geometry,
//! pointmap-derived token correspondences with cycle-consistency masks,
//! multi-view (3D) self-attention with exact manual gradients, a toy
//! multi-view denoiser trained with an attention-alignment loss, and the
//! correspondence-precision probe used to evaluate it.

pub mod attention;
pub mod correspondence;
pub mod dataset;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod scene;
pub mod structural;
pub mod train;
