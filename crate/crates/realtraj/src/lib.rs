//! Desk-scale lab for pedestrian trajectory forecasting from raw detections.
//!
//! The pipeline: synthesize crowd trajectories with an ORCA-style simulator,
//! pretrain a detection-input transformer (`Det2TrajFormer`) with unmasking,
//! denoising and person-ID reconstruction pretext tasks, fine-tune it weakly
//! on future detections alone, and measure robustness to detection and
//! tracking errors.
//!
//! Everything is deterministic given a root seed and runs on a single
//! desktop CPU with 64-bit floats throughout.
//!
//! Start with the runnable examples (`cargo run --release --example <name>`):
//!
//! - `simulate_crowd` — generate and roll out ORCA scenarios, write TSV
//! - `windows_and_centering` — sliding windows, target centering, ID stripping
//! - `corrupt_inputs` — miss-detections, localization noise, identity switches
//! - `gradcheck` — finite-difference verification of the autodiff engine
//! - `pretrain_tiny` — a small end-to-end pretraining run
//! - `finetune_weak` — weakly-supervised fine-tuning with the closest-detection loss
//! - `evaluate_metrics` — ADE/FDE/minADE against a constant-velocity baseline
//! - `robustness_sweep` — error-ratio sweeps with CSV + SVG output
//!
//! The same capabilities are exposed by the thin `realtraj` binary
//! (`simulate`, `pretrain`, `finetune`, `evaluate`, `sweep`, `plot`,
//! `gradcheck` subcommands).

pub mod autodiff;
pub mod config;
pub mod corruption;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod sim;
pub mod training;
pub mod vec2;

pub use error::{Error, Result};
pub use vec2::Vec2;
