//! Geometry-aware low-rank adaptation.
//!
//! Rank-space K-FAC preconditioning of LoRA factors, curvature-guided
//! reprojection with dynamic rank, geometry telemetry and a fitter for a
//! forgetting scaling law with geometry multipliers.

pub mod cli;
pub mod error;
pub mod forgetting;
pub mod kfac;
pub mod linalg;
pub mod model;
pub mod reprojection;
pub mod telemetry;
pub mod trainer;

pub use error::{GritError, Result};
