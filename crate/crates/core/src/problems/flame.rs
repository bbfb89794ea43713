//! The flame equation: dy/dt = rho (y^2 - y^3), y(0) = delta, on
//! t in [0, 2/(delta rho)].
//!
//! A flame ball of radius y consumes oxygen with its volume (~y^3) and
//! receives it through its surface (~y^2); small ignition radii delta make
//! the solution loiter near delta for most of the window and then snap to 1
//! in a thin ignition layer, which is what makes the family stiff. The body
//! domain is fixed by the smallest delta in the range, giving the widest
//! time interval.

use crate::autodiff::dual::Field;

pub const RHO: f64 = 300.0;
/// Head bindings spanning the training range [0.02, 0.04].
pub const DELTA_HEADS: [f64; 4] = [0.02, 0.0267, 0.0333, 0.04];
/// The body's time domain is taken at the smallest delta (widest window).
pub const DELTA_BODY: f64 = 0.02;

/// End of the integration window, 2/(delta rho); shrinks as delta grows.
pub fn t_end(delta: f64) -> f64 {
    2.0 / (delta * RHO)
}

/// DE residual dy/dt - rho (y^2 - y^3); zero on exact solutions.
pub fn residual<F: Field>(y: F, dy_dt: F, rho: f64) -> F {
    dy_dt - (y.powi(2) - y.powi(3)) * rho
}

/// Trial solution y = delta + (1 - e^{-t}) * raw, so y(0) = delta exactly
/// for any raw network output.
pub fn constrain<F: Field>(t: F, delta: f64, raw: F) -> F {
    raw * (-t).exp().rsub_from(1.0) + delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::reference::flame_implicit_solve;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_hand_values() {
        // Equilibria.
        assert_eq!(residual(1.0, 0.0, RHO), 0.0);
        assert_eq!(residual(0.0, 0.0, RHO), 0.0);
        // y = 0.5 at rest: -300 * (0.25 - 0.125) = -37.5.
        assert_eq!(residual(0.5, 0.0, RHO), -37.5);
    }

    #[test]
    fn residual_is_field_generic() {
        let tape = Tape::new();
        let y = tape.lift(0.37).unwrap();
        let dy = tape.lift(1.25).unwrap();
        let on_tape = residual(y, dy, RHO).value();
        assert_eq!(on_tape, residual(0.37, 1.25, RHO));
    }

    #[test]
    fn constraint_hits_initial_condition_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let raw: f64 = rng.gen_range(-100.0..100.0);
            let delta = rng.gen_range(0.005..0.05);
            assert_eq!(constrain(0.0, delta, raw), delta);
        }
        // Degenerate net: identically delta.
        for &t in &[0.0, 0.1, 0.3] {
            assert_eq!(constrain(t, 0.02, 0.0), 0.02);
        }
    }

    #[test]
    fn domain_shrinks_as_delta_grows() {
        assert!((t_end(0.02) - 1.0 / 3.0).abs() < 1e-15);
        let grid = DELTA_HEADS;
        for w in grid.windows(2) {
            assert!(t_end(w[1]) < t_end(w[0]));
        }
    }

    #[test]
    fn residual_vanishes_on_oracle_at_difference_order() {
        // Feed the implicit solution and a central-difference derivative:
        // the residual then equals the O(h^2) differencing error, so
        // halving h should cut it ~4x.
        let (delta, rho) = (0.02, RHO);
        let r_at = |h: f64| {
            let t = 0.15;
            let y = flame_implicit_solve(delta, rho, t);
            let dy = (flame_implicit_solve(delta, rho, t + h)
                - flame_implicit_solve(delta, rho, t - h))
                / (2.0 * h);
            residual(y, dy, rho).abs()
        };
        let r1 = r_at(1e-3);
        let r2 = r_at(5e-4);
        assert!(r1 < 1e-1, "coarse residual too large: {r1}");
        let ratio = r1 / r2;
        assert!(
            (3.2..=4.8).contains(&ratio),
            "expected ~2nd-order decay, got ratio {ratio}"
        );
    }
}
