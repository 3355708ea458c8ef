//! Scalar math shims usable with and without `std`.
//!
//! All transcendental functions route through here so the crate builds on
//! `no_std` targets (via `libm`) without sprinkling `cfg` through the
//! numeric code.

#[cfg(feature = "std")]
macro_rules! shim {
    ($name:ident, $method:ident) => {
        #[inline]
        pub fn $name(x: f64) -> f64 {
            x.$method()
        }
    };
}

#[cfg(not(feature = "std"))]
macro_rules! shim {
    ($name:ident, $method:ident) => {
        #[inline]
        pub fn $name(x: f64) -> f64 {
            libm::$name(x)
        }
    };
}

shim!(sin, sin);
shim!(cos, cos);
shim!(tan, tan);
shim!(exp, exp);
shim!(sqrt, sqrt);
shim!(floor, floor);
shim!(round, round);

#[cfg(feature = "std")]
#[inline]
pub fn ln(x: f64) -> f64 {
    x.ln()
}

#[cfg(not(feature = "std"))]
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[cfg(feature = "std")]
#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    y.atan2(x)
}

#[cfg(not(feature = "std"))]
#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

#[cfg(feature = "std")]
#[inline]
pub fn hypot(x: f64, y: f64) -> f64 {
    x.hypot(y)
}

#[cfg(not(feature = "std"))]
#[inline]
pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    f64::abs(x)
}

/// Normalize an angle into the half-open interval `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut t = theta % two_pi;
    if t <= -core::f64::consts::PI {
        t += two_pi;
    } else if t > core::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Sine and cosine with exact snapping at the cardinal directions.
///
/// Rasterization of axis-aligned poses must land sample points exactly on
/// pixel centers; `sin(pi)` alone leaves a ~1e-16 residue that can flip a
/// `floor` on an exact boundary. Values within 1e-12 of the cardinal
/// sin/cos pairs are snapped to exact 0/±1.
pub fn rot_components(theta: f64) -> (f64, f64) {
    let (mut s, mut c) = (sin(theta), cos(theta));
    if abs(s) < 1e-12 {
        s = 0.0;
        c = if c > 0.0 { 1.0 } else { -1.0 };
    } else if abs(c) < 1e-12 {
        c = 0.0;
        s = if s > 0.0 { 1.0 } else { -1.0 };
    }
    (s, c)
}
