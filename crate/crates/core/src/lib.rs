//! Continual semantic segmentation with class-balanced instance replay.
//!
//! The pipeline trains a segmentation model over a sequence of learning
//! steps, each introducing new classes while pixels of previously learned
//! classes are relabeled to background in the incoming data. Forgetting is
//! countered by replaying stored object instances: candidate classes are
//! ranked with the previous model's predictions, stored instances are pasted
//! into background-rich regions of new images, and the paste is blended with
//! a mixup coefficient. A relation-aware distillation term preserves the old
//! model's view of the background channel.
//!
//! All numeric code is generic over [`Scalar`], implemented for `f32` and
//! `f64`. Experiments run in `f32`; the test oracles and gradient checks run
//! in `f64`.

pub mod combination;
pub mod config;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod placement;
pub mod protocol;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the pipeline math is generic over.
///
/// Conversions to and from `f64` are explicit and infallible; all random
/// draws and file formats use `f64`/`u8` and convert at the boundary.
pub trait Scalar:
    Float
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum<Self>
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Training-precision aliases. Experiments run in `f32`.
pub type Sample32 = protocol::SegSample<f32>;
pub type Buffer32 = memory::MemoryBuffer<f32>;
pub type Fused32 = placement::FusedSample<f32>;
pub type Net32 = model::ConvSegNet<f32>;

/// Oracle-precision aliases, used by tests and numeric checks.
pub type Sample64 = protocol::SegSample<f64>;
pub type Buffer64 = memory::MemoryBuffer<f64>;
pub type Fused64 = placement::FusedSample<f64>;
pub type Net64 = model::ConvSegNet<f64>;
