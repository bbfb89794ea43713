//! The van der Pol oscillator as a first-order system on t in [0, 1]:
//!
//! dx/dt = rho y
//! dy/dt = rho [ a (1 - x^2) y - x ]
//!
//! with x(0) = 1, y(0) = 0 and the time-scale factor rho fixed at 10. The
//! damping knob `a` is the family parameter; a = 0 is the plain harmonic
//! oscillator and growing `a` strengthens the non-linear damping term.

use crate::autodiff::dual::Field;

pub const RHO: f64 = 10.0;
/// Head bindings spanning the training range [0.0, 1.5].
pub const A_HEADS: [f64; 5] = [0.0, 0.375, 0.75, 1.125, 1.5];
pub const T_END: f64 = 1.0;

/// Residual pair (r1, r2); both zero on exact solutions.
pub fn residuals<F: Field>(x: F, y: F, dx_dt: F, dy_dt: F, a: f64, rho: f64) -> (F, F) {
    let r1 = dx_dt - y * rho;
    // a (1 - x^2) y - x
    let forcing = x.powi(2).rsub_from(1.0) * y * a - x;
    let r2 = dy_dt - forcing * rho;
    (r1, r2)
}

/// Trial pair with x(0) = 1, y(0) = 0 exactly for any raw outputs.
pub fn constrain<F: Field>(t: F, raw_x: F, raw_y: F) -> (F, F) {
    let ramp = (-t).exp().rsub_from(1.0);
    (raw_x * ramp + 1.0, raw_y * ramp)
}
