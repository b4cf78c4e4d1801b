//! Floating-point scalar abstraction.
//!
//! Every numeric routine in the crate is written against [`Scalar`] so the same
//! code runs in `f32` and `f64`. The on-disk formats always go through `f64`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::Serialize;

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + LowerExp
    + Sum
    + Default
    + Serialize
    + NumAssign
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for the float types we support.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Relative tolerance used for exact-by-construction identities.
    ///
    /// `1e-12` in double precision, widened to a few ulps for narrower types.
    #[inline]
    fn identity_tolerance() -> Self {
        let ulps = Self::epsilon() * Self::lit(64.0);
        ulps.max(Self::lit(1e-12))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
