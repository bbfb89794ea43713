//! The Einstein-field-equation residual layer: seven first-order ODE
//! residuals in the radial coordinate u on [0, 1], six unknown functions
//! psi = (sigma, a, phi, nu_sigma, nu_a, nu_phi), and a free potential
//! V(phi) entering through its value and phi-derivative.
//!
//! `sigma` and `a` stand for the tilded metric functions, the `nu_*` are
//! the rescaled derivatives that turn the second-order system first-order,
//! and the seventh equation is purely algebraic — it contains no u
//! derivatives, which gives a cheap structural test. Boundary data come in
//! bundles of (T, S) pairs sampled from an entropy-temperature curve: each
//! pair fixes sigma(1) = (S/pi)^(1/3) and nu_a(1) = -4 pi T, while the u = 0
//! end pins sigma, a, phi, nu_phi. The stiffness knob phi_M indexes family
//! members; lower values make the underlying phase transition sharper.
//!
//! At desk scale the bundle is synthetic, drawn from the asymptotic
//! high-temperature regime where S = pi T^3 (so the sigma boundary value
//! reduces to T itself).

use super::ProblemError;
use crate::autodiff::dual::Field;
use crate::reference::linspace;
use std::f64::consts::PI;
use std::path::Path;

/// Head bindings for the stiffness parameter, stiffest last.
pub const PHI_M_HEADS: [f64; 5] = [3.0, 2.0, 1.5, 1.08, 1.0];

/// The six unknown functions at one point, generic over the scalar type.
#[derive(Debug, Clone, Copy)]
pub struct EfeState<F> {
    pub sigma: F,
    pub a: F,
    pub phi: F,
    pub nu_sigma: F,
    pub nu_a: F,
    pub nu_phi: F,
}

/// The seven residuals given the state, its u-derivative, and the potential
/// with its phi-derivative. All are zero on exact solutions; the seventh
/// never reads `ds`.
pub fn residuals<F: Field>(u: F, s: &EfeState<F>, ds: &EfeState<F>, v: F, dv_dphi: F) -> [F; 7] {
    let u2 = u.powi(2);
    let r1 = s.nu_sigma - ds.sigma;
    let r2 = s.nu_a - ds.a;
    let r3 = s.nu_phi - ds.phi;
    let r4 = ds.nu_sigma + s.sigma * s.nu_phi.powi(2) * (2.0 / 3.0);
    let r5 = u2 * s.sigma * ds.nu_a
        + v * s.sigma * (8.0 / 3.0)
        + s.nu_a * (u2 * s.nu_sigma * 3.0 - u * s.sigma * 5.0)
        + s.a * (s.sigma * 8.0 - u * s.nu_sigma * 6.0);
    let r6 = u2 * s.sigma * s.a * ds.nu_phi - s.sigma * dv_dphi
        + s.nu_phi
            * (-(u * s.a * s.sigma * 3.0) + u2 * s.sigma * s.nu_a + u2 * s.nu_sigma * s.a * 3.0);
    let r7 = (u * s.nu_sigma - s.sigma)
        * (u2 * s.sigma * s.nu_a + u2 * s.a * s.nu_sigma * 2.0 - u * s.a * s.sigma * 4.0)
        - u * s.sigma.powi(2) * (u2 * s.a * s.nu_phi.powi(2) - v * 2.0) * (2.0 / 3.0);
    [r1, r2, r3, r4, r5, r6, r7]
}

/// One boundary-condition set: an (index, T, S) sample of the S(T) curve
/// plus the derived boundary values it fixes at u = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundlePoint {
    pub index: usize,
    pub temperature: f64,
    pub entropy: f64,
    /// sigma(1) = (S/pi)^(1/3)
    pub sigma_h: f64,
    /// nu_a(1) = -4 pi T
    pub nu_a_h: f64,
}

impl BundlePoint {
    pub fn new(index: usize, temperature: f64, entropy: f64) -> Result<Self, String> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(format!("temperature must be positive, got {temperature}"));
        }
        if !(entropy > 0.0) || !entropy.is_finite() {
            return Err(format!("entropy must be positive, got {entropy}"));
        }
        Ok(BundlePoint {
            index,
            temperature,
            entropy,
            sigma_h: (entropy / PI).cbrt(),
            nu_a_h: -4.0 * PI * temperature,
        })
    }
}

/// Parses bundle CSV text with columns (i, T, S); an optional header row is
/// skipped. Rows are validated and the result sorted by index.
pub fn parse_bundle(text: &str) -> Result<Vec<BundlePoint>, ProblemError> {
    let mut pts = Vec::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        let line_no = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && fields[0].parse::<usize>().is_err() {
            continue; // header row
        }
        if fields.len() != 3 {
            return Err(ProblemError::BundleParse {
                line: line_no,
                msg: format!("expected 3 columns (i, T, S), got {}", fields.len()),
            });
        }
        let index: usize = fields[0].parse().map_err(|_| ProblemError::BundleParse {
            line: line_no,
            msg: format!("bad index '{}'", fields[0]),
        })?;
        let temperature: f64 = fields[1].parse().map_err(|_| ProblemError::BundleParse {
            line: line_no,
            msg: format!("bad temperature '{}'", fields[1]),
        })?;
        let entropy: f64 = fields[2].parse().map_err(|_| ProblemError::BundleParse {
            line: line_no,
            msg: format!("bad entropy '{}'", fields[2]),
        })?;
        let pt = BundlePoint::new(index, temperature, entropy)
            .map_err(|msg| ProblemError::BundleValue { line: line_no, msg })?;
        pts.push(pt);
    }
    if pts.is_empty() {
        return Err(ProblemError::EmptyBundle);
    }
    pts.sort_by_key(|p| p.index);
    Ok(pts)
}

pub fn load_bundle_csv(path: &Path) -> Result<Vec<BundlePoint>, ProblemError> {
    parse_bundle(&std::fs::read_to_string(path)?)
}

/// Synthetic desk-scale bundle from the asymptotic regime S = pi T^3 over
/// an even temperature grid.
pub fn synthetic_bundle(n: usize, t_lo: f64, t_hi: f64) -> Vec<BundlePoint> {
    assert!(t_lo > 0.0 && t_hi > t_lo);
    linspace(t_lo, t_hi, n)
        .into_iter()
        .enumerate()
        .map(|(i, t)| BundlePoint::new(i, t, PI * t.powi(3)).expect("positive by construction"))
        .collect()
}

/// Trial solution absorbing all seven boundary conditions: anchored
/// components interpolate their boundary values, with the raw network
/// outputs entering through factors that vanish where a condition applies.
pub fn constrain<F: Field>(u: F, bc: &BundlePoint, raw: &EfeState<F>) -> EfeState<F> {
    let one_minus = u.rsub_from(1.0);
    let bump = u * one_minus;
    EfeState {
        sigma: one_minus + u * bc.sigma_h + bump * raw.sigma,
        a: one_minus + bump * raw.a,
        phi: u * raw.phi,
        nu_sigma: raw.nu_sigma,
        nu_a: one_minus * raw.nu_a + bc.nu_a_h,
        nu_phi: u * raw.nu_phi + 1.0,
    }
}
