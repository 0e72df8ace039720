//! Scalar abstraction for the numerical core.
//!
//! All core math is generic over [`Real`], so the same routines run at `f32`
//! or `f64`. The concrete aliases exported from the crate root use `f64`,
//! which is what the kHz-precision sensing pipeline needs.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + LowerExp
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Shorthand for lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal not representable")
    }

    /// Lossy conversion back to `f64` (exact for `f64` itself).
    fn to64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Angular frequency (rad/ns) from a linear frequency in GHz (ω/2π).
pub fn ghz_to_rad<T: Real>(f_ghz: T) -> T {
    T::TAU() * f_ghz
}

/// Linear frequency in GHz (ω/2π) from an angular frequency in rad/ns.
pub fn rad_to_ghz<T: Real>(w_rad: T) -> T {
    w_rad / T::TAU()
}

/// Linear frequency in MHz from an angular frequency in rad/ns.
pub fn rad_to_mhz<T: Real>(w_rad: T) -> T {
    w_rad / T::TAU() * T::of(1e3)
}

/// Angular frequency (rad/ns) from a linear frequency in MHz.
pub fn mhz_to_rad<T: Real>(f_mhz: T) -> T {
    T::TAU() * f_mhz * T::of(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_round_trips() {
        let f: f64 = 4.685;
        assert!((rad_to_ghz(ghz_to_rad(f)) - f).abs() < 1e-15);
        assert!((ghz_to_rad(1.0) - std::f64::consts::TAU).abs() < 1e-15);
        assert!((rad_to_mhz(mhz_to_rad(1.25_f64)) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn works_at_f32() {
        let w = ghz_to_rad(1.0_f32);
        assert!((w - std::f32::consts::TAU).abs() < 1e-6);
    }
}
