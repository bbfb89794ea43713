//! Classical reference integrators and the error metrics used to judge the
//! networks against them.
//!
//! Two integrators are provided: fixed-step fourth-order Runge-Kutta with
//! linear dense output, and adaptive Dormand-Prince 4(5) with FSAL reuse and
//! cubic Hermite dense output from the stored node derivatives. Both return
//! a [`Trajectory`] that can be sampled anywhere inside the integration
//! window. The flame problem additionally admits an implicit closed-form
//! solution; [`flame_implicit_solve`] inverts it by bisection in a
//! log-transformed variable, which stays well conditioned even where the
//! solution saturates toward 1 beyond f64 resolution.
//!
//! Relative errors follow the shifted form |y_ref - y_nn| / (1 + |y_ref|),
//! in percent, which remains meaningful when the reference passes through
//! zero.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceError {
    /// The right-hand side or state went non-finite near time `t`.
    NonFinite { t: f64 },
    /// Adaptive stepping drove the step size below f64 resolution at `t`.
    StepUnderflow { t: f64 },
    /// The adaptive loop exceeded its step budget before reaching the end.
    MaxStepsExceeded,
}

impl fmt::Display for ReferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferenceError::NonFinite { t } => write!(f, "non-finite state near t = {t}"),
            ReferenceError::StepUnderflow { t } => write!(f, "step size underflow at t = {t}"),
            ReferenceError::MaxStepsExceeded => write!(f, "exceeded maximum step count"),
        }
    }
}

impl std::error::Error for ReferenceError {}

/// `n` evenly spaced points from `a` to `b` inclusive (`n >= 2`).
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let h = (b - a) / (n - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| a + h * i as f64).collect();
    out[n - 1] = b;
    out
}

/// A solved trajectory: node times, states, and (for the adaptive solver)
/// node derivatives enabling cubic Hermite interpolation between nodes.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub ts: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
    derivs: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.ys[0].len()
    }

    pub fn t_end(&self) -> f64 {
        *self.ts.last().unwrap()
    }

    pub fn y_end(&self) -> &[f64] {
        self.ys.last().unwrap()
    }

    /// Interpolates the state at `t`, clamped to the solved window: linear
    /// between nodes when no derivatives were stored, cubic Hermite when
    /// they were.
    pub fn sample(&self, t: f64) -> Vec<f64> {
        let t0 = self.ts[0];
        let t1 = self.t_end();
        let t = t.clamp(t0.min(t1), t0.max(t1));
        // Index of the segment [ts[i], ts[i+1]] containing t.
        let mut i = self.ts.partition_point(|&x| x <= t);
        i = i.clamp(1, self.ts.len() - 1) - 1;
        let (ta, tb) = (self.ts[i], self.ts[i + 1]);
        let h = tb - ta;
        if h == 0.0 {
            return self.ys[i].clone();
        }
        let theta = (t - ta) / h;
        let ya = &self.ys[i];
        let yb = &self.ys[i + 1];
        match &self.derivs {
            None => (0..ya.len())
                .map(|k| ya[k] + theta * (yb[k] - ya[k]))
                .collect(),
            Some(ds) => {
                let (da, db) = (&ds[i], &ds[i + 1]);
                let t2 = theta * theta;
                let t3 = t2 * theta;
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + theta;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                (0..ya.len())
                    .map(|k| h00 * ya[k] + h10 * h * da[k] + h01 * yb[k] + h11 * h * db[k])
                    .collect()
            }
        }
    }

    /// Writes `t, <names...>` rows for every stored node.
    pub fn write_csv(&self, path: &Path, names: &[&str]) -> std::io::Result<()> {
        assert_eq!(names.len(), self.dim());
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "t,{}", names.join(","))?;
        for (t, y) in self.ts.iter().zip(&self.ys) {
            let row: Vec<String> = y.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{t},{}", row.join(","))?;
        }
        Ok(())
    }
}

fn all_finite(y: &[f64]) -> bool {
    y.iter().all(|v| v.is_finite())
}

/// Classical fixed-step RK4 over `[t0, t1]` with `n_steps` equal steps.
pub fn rk4_fixed<F>(
    f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    n_steps: usize,
) -> Result<Trajectory, ReferenceError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    assert!(n_steps >= 1);
    let dim = y0.len();
    let h = (t1 - t0) / n_steps as f64;
    let mut ts = Vec::with_capacity(n_steps + 1);
    let mut ys = Vec::with_capacity(n_steps + 1);
    ts.push(t0);
    ys.push(y0.to_vec());
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for step in 0..n_steps {
        let t = t0 + h * step as f64;
        f(t, &y, &mut k1);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = y[i] + h * k3[i];
        }
        f(t + h, &tmp, &mut k4);
        for i in 0..dim {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !all_finite(&y) {
            return Err(ReferenceError::NonFinite { t: t + h });
        }
        ts.push(t0 + h * (step + 1) as f64);
        ys.push(y.clone());
    }
    Ok(Trajectory {
        ts,
        ys,
        derivs: None,
    })
}

// Dormand-Prince coefficients.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MAX_ADAPTIVE_STEPS: usize = 10_000_000;

/// Adaptive Dormand-Prince 4(5) with FSAL and cubic Hermite dense output.
/// Error control uses a mixed tolerance `atol + rtol * |y|` per component,
/// RMS-combined; accepted steps scale the next step by
/// `clamp(0.9 * err^(-1/5), 0.2, 5.0)`.
pub fn rk45<F>(
    f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    rtol: f64,
    atol: f64,
) -> Result<Trajectory, ReferenceError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let dim = y0.len();
    let span = t1 - t0;
    let mut ts = vec![t0];
    let mut ys = vec![y0.to_vec()];
    let mut k1 = vec![0.0; dim];
    f(t0, y0, &mut k1);
    if !all_finite(&k1) {
        return Err(ReferenceError::NonFinite { t: t0 });
    }
    let mut derivs = vec![k1.clone()];
    if span == 0.0 {
        return Ok(Trajectory {
            ts,
            ys,
            derivs: Some(derivs),
        });
    }

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut h = span / 100.0;
    let mut ks = vec![vec![0.0; dim]; 7];
    ks[0].copy_from_slice(&k1);
    let mut stage = vec![0.0; dim];
    let mut y5 = vec![0.0; dim];

    for _ in 0..MAX_ADAPTIVE_STEPS {
        if (span > 0.0 && t >= t1) || (span < 0.0 && t <= t1) {
            return Ok(Trajectory {
                ts,
                ys,
                derivs: Some(derivs),
            });
        }
        if (t + h - t).abs() <= f64::EPSILON * t.abs().max(1.0) {
            return Err(ReferenceError::StepUnderflow { t });
        }
        // Do not overshoot the end point.
        if span > 0.0 {
            h = h.min(t1 - t);
        } else {
            h = h.max(t1 - t);
        }

        for s in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, k) in ks.iter().enumerate().take(s) {
                    acc += DP_A[s - 1][j] * k[i];
                }
                stage[i] = y[i] + h * acc;
            }
            let (head, tail) = ks.split_at_mut(s);
            let _ = head;
            f(t + DP_C[s] * h, &stage, &mut tail[0]);
        }

        let mut err_sq = 0.0;
        for i in 0..dim {
            let mut acc5 = 0.0;
            let mut acc4 = 0.0;
            for s in 0..7 {
                acc5 += DP_B5[s] * ks[s][i];
                acc4 += DP_B4[s] * ks[s][i];
            }
            y5[i] = y[i] + h * acc5;
            let e = h * (acc5 - acc4);
            let scale = atol + rtol * y[i].abs().max(y5[i].abs());
            err_sq += (e / scale) * (e / scale);
        }
        let err = (err_sq / dim as f64).sqrt();

        if !err.is_finite() || !all_finite(&y5) {
            // Retry with a much smaller step before giving up.
            h *= 0.1;
            if h.abs() < f64::EPSILON * t.abs().max(1.0) {
                return Err(ReferenceError::NonFinite { t });
            }
            // Restore FSAL base derivative for the retried step.
            let last = derivs.last().unwrap().clone();
            ks[0].copy_from_slice(&last);
            continue;
        }

        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&y5);
            ts.push(t);
            ys.push(y.clone());
            // FSAL: stage 7 was evaluated at (t + h, y5).
            let k_last = ks[6].clone();
            derivs.push(k_last.clone());
            ks[0].copy_from_slice(&k_last);
        } else {
            let last = derivs.last().unwrap().clone();
            ks[0].copy_from_slice(&last);
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
    Err(ReferenceError::MaxStepsExceeded)
}

/// Residual of the flame problem's implicit solution,
/// `[1/y + ln(1/y - 1)] - [1/delta + ln(1/delta - 1) - rho t]`.
/// Returns non-finite values when `y` lies outside (0, 1).
pub fn flame_implicit_check(delta: f64, rho: f64, t: f64, y: f64) -> f64 {
    let lhs = 1.0 / y + (1.0 / y - 1.0).ln();
    let rhs = 1.0 / delta + (1.0 / delta - 1.0).ln() - rho * t;
    lhs - rhs
}

/// Inverts the implicit flame solution at time `t` by bisection on
/// `u = ln(1/y - 1)`, where the relation becomes `1 + e^u + u = const`
/// (strictly increasing in u). The transform keeps full precision through
/// ignition; past saturation the result rounds to the nearest representable
/// value below or equal to 1.
pub fn flame_implicit_solve(delta: f64, rho: f64, t: f64) -> f64 {
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
    let c = 1.0 / delta + (1.0 / delta - 1.0).ln() - rho * t;
    let g = |u: f64| 1.0 + u.exp() + u;
    // At t = 0 the solution is exactly delta, i.e. u = ln(1/delta - 1).
    let mut hi = (1.0 / delta - 1.0).ln();
    if t <= 0.0 {
        return delta;
    }
    let mut lo = hi.min(c) - 2.0;
    let mut guard = 0;
    while g(lo) >= c {
        lo -= 8.0;
        guard += 1;
        assert!(guard < 200, "bisection bracket failed to expand");
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) >= c {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let u = 0.5 * (lo + hi);
    1.0 / (1.0 + u.exp())
}

/// Shifted relative error in percent: |y_ref - y_nn| / (1 + |y_ref|) * 100.
pub fn relative_error(y_ref: f64, y_nn: f64) -> f64 {
    (y_ref - y_nn).abs() / (1.0 + y_ref.abs()) * 100.0
}

/// Root-mean-square of the pointwise relative errors over a grid.
pub fn rms_relative_error(y_ref: &[f64], y_nn: &[f64]) -> f64 {
    assert_eq!(y_ref.len(), y_nn.len());
    assert!(!y_ref.is_empty());
    let sum_sq: f64 = y_ref
        .iter()
        .zip(y_nn)
        .map(|(&r, &n)| {
            let e = relative_error(r, n);
            e * e
        })
        .sum();
    (sum_sq / y_ref.len() as f64).sqrt()
}
