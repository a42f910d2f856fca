//! LiDAR–camera bird's-eye-view fusion at desk scale.
//!
//! The crate implements a complete, CPU-only BEV perception stack: a
//! reverse-mode autodiff tensor core, sparse multi-scale voxel encoding for
//! LiDAR, a camera stream with depth-distribution lifting, LiDAR-guided
//! occupancy gating, dual-path windowed BEV attention, adaptive gated
//! cross-modal fusion, temporal aggregation, and a center-heatmap detection
//! head — together with a synthetic multi-sensor scene generator so the
//! whole pipeline trains and evaluates without external data.
//!
//! Everything runs in 64-bit floats and is finite-difference checkable end
//! to end. Hot kernels are data-parallel via rayon (the `parallel` feature,
//! on by default) with a sequential fallback; both modes produce
//! bit-identical results because parallel loops only ever write disjoint
//! outputs in a fixed per-element order.

pub mod camera;
pub mod config;
pub mod detect;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod guidance;
pub mod lgaft;
pub mod metrics;
pub mod model;
pub mod msdpt;
pub mod par;
pub mod pipeline;
pub mod scenegen;
pub mod sparse;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
