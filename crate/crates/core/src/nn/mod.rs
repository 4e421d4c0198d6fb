//! Minimal dense layers with hand-written backward passes.
//!
//! Layers are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks. Every layer
//! owns its [`Param`]s; gradients accumulate into `Param::grad` and are
//! consumed by [`optim::Sgd`].

mod backbone;
mod conv;
mod layers;
mod mlp;
pub mod optim;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use backbone::{Backbone, BackboneCache, BackboneFamily, BackboneLayout, BackboneSpec};
pub use conv::{global_avg_pool, global_avg_pool_backward, Conv2d, ConvCache};
pub use layers::{relu, relu_backward, BatchNorm, BatchNormCache, Linear};
pub use mlp::{MlpCache, MlpHead};
pub use params::{Param, ParamRole, ParameterSet, Parameterized};

/// Floating point element type accepted by all layers.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// How normalization layers treat batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and fold them into the running estimates.
    Train,
    /// Normalize with batch statistics, leave running estimates untouched.
    BatchStats,
    /// Normalize with running estimates.
    Eval,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
