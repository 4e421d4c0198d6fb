//! Self-supervised transfer learning for four-class chest X-ray classification.
//!
//! The crate covers the full workflow: an asymmetric two-branch learner with a
//! momentum target encoder ([`ssl`]), stochastic view generation ([`augment`]),
//! dataset handling ([`data`]), the three-stage training driver and checkpoint
//! format ([`pipeline`]), COVID-vs-rest screening metrics ([`metrics`]) and
//! Grad-CAM++ heatmaps ([`explain`]).

pub mod augment;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod ssl;

pub use error::{Error, ErrorKind, Result};

/// Environment variable that switches on deterministic execution.
pub const DETERMINISTIC_ENV: &str = "CXR_SSLX_DETERMINISTIC";

/// Whether `CXR_SSLX_DETERMINISTIC=1` is set.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v.trim() == "1")
}
