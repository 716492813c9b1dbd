//! Scalar abstraction shared by every numerical module.
//!
//! The toolkit is written against [`Scalar`], a thin alias over
//! `nalgebra::RealField`, so the same code runs in `f64` (the default, used
//! by all I/O and pinned tolerances) and in `f32` for cheap sweeps.

use nalgebra::RealField;

/// Real floating-point scalar usable by the whole toolkit.
pub trait Scalar: RealField + Copy + Send + Sync + 'static {}

impl<T> Scalar for T where T: RealField + Copy + Send + Sync + 'static {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    nalgebra::convert::<f64, T>(v)
}

/// Converts `x` to `f64` (NaN if the conversion is not representable).
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    nalgebra::try_convert::<T, f64>(x).unwrap_or(f64::NAN)
}

#[inline]
pub(crate) fn is_finite<T: Scalar>(x: T) -> bool {
    to_f64(x).is_finite()
}

#[inline]
pub(crate) fn max<T: Scalar>(a: T, b: T) -> T {
    if a >= b {
        a
    } else {
        b
    }
}

#[inline]
pub(crate) fn min<T: Scalar>(a: T, b: T) -> T {
    if a <= b {
        a
    } else {
        b
    }
}
