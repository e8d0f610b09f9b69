//! Coarse-to-fine cascade detection for hand-held actions.
//!
//! A pose-scale detector proposes regions, each region is cropped and
//! letterboxed, and a cigarette-scale detector confirms or rejects it.
//! Oracle detectors driven by a symbolic scene simulator stand in for
//! trained networks; external models plug in over a line-delimited JSON
//! protocol.

pub mod cascade;
pub mod dataset;
pub mod detectors;
pub mod evaluation;
pub mod exec;
pub mod geometry;
pub mod jsonl;
pub mod rng;
pub mod simulator;

pub use cascade::{run_cascade, run_single, Cascade, CascadeError, CascadeResult, PipelineConfig};
pub use detectors::{Detection, Detector, Input, Role};
pub use exec::Execution;
pub use geometry::{BBox, CropTransform};
pub use simulator::{Scene, SceneClass};
