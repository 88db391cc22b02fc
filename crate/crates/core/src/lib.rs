//! Dynamic-feature classification and camera tracking from optical flow,
//! segmentation masks and depth, plus a synthetic rigid-body scene
//! simulator for verification and TUM-style trajectory evaluation.
//!
//! The per-frame path is: flow gradients → motion boundaries → dynamic
//! segment selection → quasi-static pose estimation → scene-flow
//! consistency refinement. See the crate README for the CLI and file
//! formats.

pub mod config;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod io;
mod par;
pub mod pipeline;
pub mod segmentation;
pub mod sim;
pub mod tracking;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, PipelineOutput};
