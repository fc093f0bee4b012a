//! Floating-point scalar abstraction shared by the model, the data pipeline
//! and the aggregation code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the simulator computes in.
///
/// Implemented for `f32` and `f64`. Hyperparameters (learning rates,
/// temperatures) and reported metrics stay in `f64`; only model parameters,
/// features and gradients use `T`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    fn of(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
