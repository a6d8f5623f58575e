//! Scalar abstraction for the numeric kernels.

use num_traits::{Float, FromPrimitive};
use rand::distributions::uniform::SampleUniform;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the network and optimizer kernels.
pub trait Scalar:
    Float + FromPrimitive + SampleUniform + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
