//! Scalar filter functions and the step-size-constant matrices used by the
//! two-step scheme.
//!
//! For a fixed `(h, epsilon, b0)` the pack holds
//!
//! * `Psi = I + (1 - tanc(h/2eps)) hat(b0)^2`
//! * `Phi = I + (1 - 1/sinc(h/2eps)) hat(b0)^2`
//! * `M   = (I + (h/2eps) Psi hat(b0))^-1`
//!
//! All three act as the identity along `b0` and rescale the perpendicular
//! plane.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use crate::linalg3::{hat, LinalgError, Mat3, Vec3};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("resonant step size: h/(2 eps) = {z} is within {dist:e} of a pole of {func}")]
    ResonantStepSize { z: f64, dist: f64, func: &'static str },
    #[error("invalid filter parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

// Below this threshold the direct quotients lose accuracy to 0/0
// cancellation; 3-term Taylor series keep the relative error under 1e-16 at
// the switch point.
const SERIES_SWITCH: f64 = 1e-4;

/// `tan(z)/z`, continued by 1 at `z = 0`.
pub fn tanc(z: f64) -> f64 {
    if z.abs() < SERIES_SWITCH {
        let z2 = z * z;
        1.0 + z2 / 3.0 + 2.0 * z2 * z2 / 15.0
    } else {
        z.tan() / z
    }
}

/// `sin(z)/z`, continued by 1 at `z = 0`.
pub fn sinc(z: f64) -> f64 {
    if z.abs() < SERIES_SWITCH {
        let z2 = z * z;
        1.0 - z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sin() / z
    }
}

/// `tanh(z)/z`, continued by 1 at `z = 0`.
pub fn tanch(z: f64) -> f64 {
    if z.abs() < SERIES_SWITCH {
        let z2 = z * z;
        1.0 - z2 / 3.0 + 2.0 * z2 * z2 / 15.0
    } else {
        z.tanh() / z
    }
}

/// `z/sinh(z)`, continued by 1 at `z = 0`.
pub fn sinch_inv(z: f64) -> f64 {
    if z.abs() < SERIES_SWITCH {
        let z2 = z * z;
        1.0 - z2 / 6.0 + 7.0 * z2 * z2 / 360.0
    } else {
        z / z.sinh()
    }
}

/// Distance from `z` to the nearest odd multiple of pi/2 (pole of tan).
fn dist_to_tan_pole(z: f64) -> f64 {
    let k = ((z - FRAC_PI_2) / PI).round();
    (z - (FRAC_PI_2 + k * PI)).abs()
}

/// Distance from `z` to the nearest nonzero multiple of pi (zero of sin,
/// hence pole of 1/sinc).
fn dist_to_sinc_zero(z: f64) -> f64 {
    let mut k = (z / PI).round();
    if k == 0.0 {
        k = if z >= 0.0 { 1.0 } else { -1.0 };
    }
    (z - k * PI).abs()
}

const POLE_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResonanceKind {
    Sin,
    Cos,
}

/// One violated non-resonance bound `|sin(k h / 2eps)| >= c` or
/// `|cos(k h / 2eps)| >= c`.
#[derive(Debug, Clone, Copy)]
pub struct ResonanceViolation {
    pub k: u32,
    pub kind: ResonanceKind,
    pub value: f64,
}

/// Check the non-resonance bounds for truncation indices `1..=n_max` at
/// margin `c`. An empty list means the step size is admissible.
pub fn check_resonance(h: f64, epsilon: f64, n_max: u32, c: f64) -> Vec<ResonanceViolation> {
    let z = h / (2.0 * epsilon);
    let mut violations = Vec::new();
    for k in 1..=n_max {
        let kz = k as f64 * z;
        let s = kz.sin().abs();
        if s < c {
            violations.push(ResonanceViolation {
                k,
                kind: ResonanceKind::Sin,
                value: s,
            });
        }
        let co = kz.cos().abs();
        if co < c {
            violations.push(ResonanceViolation {
                k,
                kind: ResonanceKind::Cos,
                value: co,
            });
        }
    }
    violations
}

/// Precomputed filter matrices and resolvent for a fixed `(h, epsilon)`.
/// Immutable; rebuild whenever `(h, epsilon, b0)` changes.
#[derive(Debug, Clone, Copy)]
pub struct FilterPack {
    pub h: f64,
    pub epsilon: f64,
    pub b0: Vec3,
    pub b0_hat: Mat3,
    pub psi: Mat3,
    pub phi: Mat3,
    pub resolvent: Mat3,
}

/// Build the filter pack. `h` may be negative (the reversed-step direction
/// used by symmetry checks); it must be nonzero. Hard errors only at the
/// poles of tanc and 1/sinc; the softer margin bounds are reported through
/// [`check_resonance`].
pub fn build_filters(h: f64, epsilon: f64, b0: Vec3) -> Result<FilterPack, FilterError> {
    if h == 0.0 || !h.is_finite() {
        return Err(FilterError::InvalidParams(format!("invalid step size {h}")));
    }
    if !(epsilon > 0.0) {
        return Err(FilterError::InvalidParams(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if (b0.norm() - 1.0).abs() > 1e-12 {
        return Err(FilterError::InvalidParams(format!(
            "|b0| must be 1, got {}",
            b0.norm()
        )));
    }
    let z = h / (2.0 * epsilon);
    let tan_dist = dist_to_tan_pole(z);
    if tan_dist < POLE_GUARD {
        return Err(FilterError::ResonantStepSize {
            z,
            dist: tan_dist,
            func: "tanc",
        });
    }
    let sin_dist = dist_to_sinc_zero(z);
    if sin_dist < POLE_GUARD {
        return Err(FilterError::ResonantStepSize {
            z,
            dist: sin_dist,
            func: "1/sinc",
        });
    }
    let b0_hat = hat(b0);
    let b0_hat2 = b0_hat * b0_hat;
    let psi = Mat3::identity() + b0_hat2 * (1.0 - tanc(z));
    let phi = Mat3::identity() + b0_hat2 * (1.0 - 1.0 / sinc(z));
    let resolvent = (Mat3::identity() + psi * b0_hat * (h / (2.0 * epsilon))).inverse()?;
    Ok(FilterPack {
        h,
        epsilon,
        b0,
        b0_hat,
        psi,
        phi,
        resolvent,
    })
}
