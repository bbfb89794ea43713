//! Geometry of the latent embedding: induced metric, determinant, and the
//! regularization losses built on them.
//!
//! The body's latent functions H_i(x) define a hypersurface through the
//! embedding Omega = (x, H(x)) in R^{n+d}. Its induced metric is
//! `g = I_n + A A^T` with `A[mu][i] = dH_i/dx_mu` (the latent Jacobian), so
//! `det g >= 1` always, with equality exactly when the latent space is flat
//! at that point. The unimodular penalty drives `sqrt(det g)` toward 1; the
//! Jacobian penalty (ablation baseline) drives `A` itself toward 0. At
//! n = d = 2 the determinant expands to `1 + J^2 + (a11 a22 - a12 a21)^2`
//! with `J^2` the squared Frobenius norm, which makes the containment of the
//! Jacobian penalty inside the unimodular one explicit.
//!
//! Plain-`f64` entry points serve diagnostics and finite-difference oracles;
//! `Var`-based ones record the loss on the tape for training.

use crate::autodiff::dual::{DualNum, MAX_DIRS};
use crate::autodiff::{Tape, Var};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    NonFiniteJacobian,
    /// Computed determinant was not strictly positive; the metric cannot be
    /// `I + A A^T` for any real A, so the upstream jacobian is corrupt.
    NonPositiveDet { det: f64 },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::NonFiniteJacobian => write!(f, "non-finite jacobian entry"),
            GeometryError::NonPositiveDet { det } => {
                write!(f, "metric determinant {det} is not positive")
            }
        }
    }
}

impl std::error::Error for GeometryError {}

/// Concatenates inputs and latent values into the embedding vector
/// Omega = (x, H), inputs first.
pub fn embed(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() + h.len());
    out.extend_from_slice(x);
    out.extend_from_slice(h);
    out
}

/// `I_n + A A^T` for an n x d jacobian (rows indexed by input direction).
pub fn induced_metric(jac: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = jac.len();
    let mut g = vec![vec![0.0; n]; n];
    for mu in 0..n {
        for nu in 0..n {
            let dot: f64 = jac[mu].iter().zip(&jac[nu]).map(|(a, b)| a * b).sum();
            g[mu][nu] = dot + if mu == nu { 1.0 } else { 0.0 };
        }
    }
    g
}

/// Determinant of a (small) symmetric positive-definite matrix: closed form
/// for n <= 3, LU with partial pivoting otherwise.
pub fn metric_det(g: &[Vec<f64>]) -> f64 {
    let n = g.len();
    match n {
        0 => 1.0,
        1 => g[0][0],
        2 => g[0][0] * g[1][1] - g[0][1] * g[1][0],
        3 => {
            g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1])
                - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
                + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0])
        }
        _ => lu_det(g),
    }
}

fn lu_det(g: &[Vec<f64>]) -> f64 {
    let n = g.len();
    let mut a: Vec<Vec<f64>> = g.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    det
}

/// One evaluated metric point: the jacobian, the metric it induces, and the
/// determinant pair. Construction validates finiteness and positivity.
#[derive(Debug, Clone)]
pub struct MetricSample {
    pub point: Vec<f64>,
    pub jacobian: Vec<Vec<f64>>,
    pub metric: Vec<Vec<f64>>,
    pub det: f64,
    pub sqrt_det: f64,
}

impl MetricSample {
    pub fn from_jacobian(point: Vec<f64>, jacobian: Vec<Vec<f64>>) -> Result<Self, GeometryError> {
        if jacobian
            .iter()
            .any(|row| row.iter().any(|v| !v.is_finite()))
        {
            return Err(GeometryError::NonFiniteJacobian);
        }
        let metric = induced_metric(&jacobian);
        let det = metric_det(&metric);
        if !(det > 0.0) {
            return Err(GeometryError::NonPositiveDet { det });
        }
        Ok(MetricSample {
            point,
            jacobian,
            metric,
            det,
            sqrt_det: det.sqrt(),
        })
    }
}

/// Collects the latent jacobian as tape nodes from a dual forward pass:
/// row `mu` holds d(H_i)/d(dir_mu) for the first `n_dirs` directions.
pub fn jacobian_from_duals<'t>(
    tape: &'t Tape,
    latent: &[DualNum<'t>],
    n_dirs: usize,
) -> Vec<Vec<Var<'t>>> {
    assert!(n_dirs <= MAX_DIRS);
    (0..n_dirs)
        .map(|mu| latent.iter().map(|h| h.d[mu].to_var(tape)).collect())
        .collect()
}

/// sqrt(det(I_n + A A^T)) as a tape expression, n <= 3 (the widest input
/// space in use). Row lengths must agree.
pub fn sqrt_g<'t>(tape: &'t Tape, jac: &[Vec<Var<'t>>]) -> Var<'t> {
    let n = jac.len();
    assert!(
        (1..=3).contains(&n),
        "tape-side metric determinant supports 1 <= n <= 3 inputs"
    );
    let dot = |a: &[Var<'t>], b: &[Var<'t>]| -> Var<'t> {
        let pairs: Vec<(Var, Var)> = a.iter().copied().zip(b.iter().copied()).collect();
        tape.dot_pairs(&pairs)
    };
    let det = match n {
        1 => dot(&jac[0], &jac[0]) + 1.0,
        2 => {
            let g00 = dot(&jac[0], &jac[0]) + 1.0;
            let g11 = dot(&jac[1], &jac[1]) + 1.0;
            let g01 = dot(&jac[0], &jac[1]);
            g00 * g11 - g01 * g01
        }
        _ => {
            let g00 = dot(&jac[0], &jac[0]) + 1.0;
            let g11 = dot(&jac[1], &jac[1]) + 1.0;
            let g22 = dot(&jac[2], &jac[2]) + 1.0;
            let g01 = dot(&jac[0], &jac[1]);
            let g02 = dot(&jac[0], &jac[2]);
            let g12 = dot(&jac[1], &jac[2]);
            g00 * (g11 * g22 - g12 * g12) - g01 * (g01 * g22 - g12 * g02)
                + g02 * (g01 * g12 - g11 * g02)
        }
    };
    det.sqrt()
}

/// Unimodular penalty `lambda * sum_batch (sqrt(g) - 1)^2` over per-sample
/// sqrt-determinants already on the tape. Zero lambda yields an exact zero
/// term; a zero loss implies every sqrt(g) equals 1 by the sum-of-squares
/// structure.
pub fn ur_loss<'t>(tape: &'t Tape, sqrt_gs: &[Var<'t>], lambda: f64) -> Var<'t> {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let terms: Vec<Var> = sqrt_gs.iter().map(|&s| (s - 1.0).powi(2)).collect();
    tape.sum(&terms) * lambda
}

/// Jacobian (Frobenius) penalty `lambda_jr * sum_batch sum_{mu,i} A[mu][i]^2`,
/// the ablation baseline contained within the unimodular term.
pub fn jr_loss<'t>(tape: &'t Tape, jacs: &[Vec<Vec<Var<'t>>>], lambda_jr: f64) -> Var<'t> {
    assert!(lambda_jr >= 0.0, "lambda must be non-negative");
    let mut terms = Vec::new();
    for jac in jacs {
        for row in jac {
            let pairs: Vec<(Var, Var)> = row.iter().map(|&v| (v, v)).collect();
            terms.push(tape.dot_pairs(&pairs));
        }
    }
    tape.sum(&terms) * lambda_jr
}

/// Largest singular value of a (small, dense) matrix, via power iteration on
/// J^T J restarted from a fixed basis set so the result is deterministic.
pub fn spectral_norm(jac: &[Vec<f64>]) -> f64 {
    let m = jac.len();
    if m == 0 {
        return 0.0;
    }
    let n = jac[0].len();
    if n == 0 {
        return 0.0;
    }
    // B = J^T J, n x n symmetric PSD.
    let mut b = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            b[i][j] = (0..m).map(|r| jac[r][i] * jac[r][j]).sum();
        }
    }
    let mut best = 0.0_f64;
    let mut starts: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    for k in 0..n {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        starts.push(e);
    }
    for mut v in starts {
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    w[i] += b[i][j] * v[j];
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            lambda = norm;
            for i in 0..n {
                v[i] = w[i] / norm;
            }
        }
        best = best.max(lambda);
    }
    best.sqrt()
}

/// Maximum spectral norm of the solution jacobian over probe points: an
/// estimate of the Lipschitz constant, reported as a diagnostic only.
/// `jac_at` must return the output-by-input jacobian at a probe.
pub fn lipschitz_diagnostic<F>(jac_at: F, probes: &[Vec<f64>]) -> f64
where
    F: Fn(&[f64]) -> Vec<Vec<f64>>,
{
    assert!(probes.len() >= 2, "need at least two probe points");
    probes
        .iter()
        .map(|p| spectral_norm(&jac_at(p)))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mlp, MlpSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_concatenates_inputs_first() {
        assert_eq!(
            embed(&[1.0, 2.0], &[3.0, 4.0, 5.0]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0]
        );
        assert_eq!(embed(&[1.0, 2.0], &[]), vec![1.0, 2.0]);
        assert_eq!(embed(&[7.0], &[0.5]), vec![7.0, 0.5]);
    }

    #[test]
    fn induced_metric_hand_cases() {
        // Flat latent space: identity metric.
        let g = induced_metric(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(g, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(metric_det(&g), 1.0);

        // n=1, d=1, dH/dx = 2 -> g = [5].
        let g = induced_metric(&[vec![2.0]]);
        assert_eq!(g[0][0], 5.0);
        assert_eq!(metric_det(&g), 5.0);

        // n=2, d=2, A = I: g = diag(2,2), det 4 = 1 + J^2 + minor^2 = 1+2+1.
        let g = induced_metric(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(g, vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(metric_det(&g), 4.0);
    }

    #[test]
    fn det_hand_cases_and_lu_agreement() {
        assert_eq!(metric_det(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 1.0);
        assert_eq!(metric_det(&[vec![2.0, 0.0], vec![0.0, 3.0]]), 6.0);
        // n=4 goes through LU; cross-check with Sylvester duality against
        // the d=2 closed form.
        let a = [
            vec![0.3, -0.8],
            vec![1.1, 0.4],
            vec![-0.5, 0.9],
            vec![0.2, 0.7],
        ];
        let lhs = metric_det(&induced_metric(&a)); // det(I4 + A A^T)
        // det(I2 + A^T A): build A^T (2 x 4) and reuse the closed form.
        let at: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..4).map(|mu| a[mu][i]).collect())
            .collect();
        let rhs = metric_det(&induced_metric(&at));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    fn random_jac(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn determinant_bounds_and_sylvester_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..400 {
            let n = rng.gen_range(1..=4usize);
            let d = rng.gen_range(1..=8usize);
            let a = random_jac(&mut rng, n, d);
            let det = metric_det(&induced_metric(&a));
            assert!(det >= 1.0, "det {det} below 1 for n={n} d={d}");
            let at: Vec<Vec<f64>> = (0..d)
                .map(|i| (0..n).map(|mu| a[mu][i]).collect())
                .collect();
            let dual = metric_det(&induced_metric(&at));
            assert!(
                (det - dual).abs() <= 1e-10 * det.max(1.0),
                "Sylvester violated: {det} vs {dual}"
            );
        }
        // Equality case.
        assert_eq!(metric_det(&induced_metric(&[vec![0.0; 5], vec![0.0; 5]])), 1.0);
    }

    #[test]
    fn closed_form_n2_d2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_jac(&mut rng, 2, 2);
            let det = metric_det(&induced_metric(&a));
            let j2: f64 = a.iter().flatten().map(|x| x * x).sum();
            let minor = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let closed = 1.0 + j2 + minor * minor;
            assert!((det - closed).abs() < 1e-12 * closed, "{det} vs {closed}");
        }
    }

    #[test]
    fn metric_sample_validates() {
        let s = MetricSample::from_jacobian(vec![0.1], vec![vec![2.0]]).unwrap();
        assert_eq!(s.det, 5.0);
        assert!((s.sqrt_det - 5.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.metric[0][0], 5.0);
        assert!(matches!(
            MetricSample::from_jacobian(vec![0.0], vec![vec![f64::NAN]]),
            Err(GeometryError::NonFiniteJacobian)
        ));
    }

    #[test]
    fn tape_sqrt_g_matches_f64_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tape = Tape::new();
        for n in 1..=3usize {
            for d in [1usize, 3, 8] {
                let a = random_jac(&mut rng, n, d);
                let jac_vars: Vec<Vec<Var>> = a
                    .iter()
                    .map(|row| tape.lift_slice(row).unwrap())
                    .collect();
                let s = sqrt_g(&tape, &jac_vars);
                let want = metric_det(&induced_metric(&a)).sqrt();
                assert!(
                    (s.value() - want).abs() < 1e-12 * want,
                    "n={n} d={d}: {} vs {want}",
                    s.value()
                );
            }
        }
    }

    #[test]
    fn ur_loss_hand_values() {
        let tape = Tape::new();
        // Flat latent space: exact zero.
        let jac = vec![tape.lift_slice(&[0.0, 0.0]).unwrap()];
        let s = sqrt_g(&tape, &jac);
        assert_eq!(ur_loss(&tape, &[s], 1.0).value(), 0.0);

        // Single sample, n=1, d=1, dH/dx = 2, lambda = 1: (sqrt(5) - 1)^2.
        let jac = vec![tape.lift_slice(&[2.0]).unwrap()];
        let s = sqrt_g(&tape, &jac);
        let loss = ur_loss(&tape, &[s], 1.0);
        let want = (5.0_f64.sqrt() - 1.0).powi(2);
        assert!((loss.value() - want).abs() < 1e-12);
        assert!((want - 1.527_864_045_000_420_6).abs() < 1e-12);

        // Zero lambda: exactly zero regardless of samples.
        assert_eq!(ur_loss(&tape, &[s], 0.0).value(), 0.0);
    }

    #[test]
    fn jr_loss_hand_values_and_containment() {
        let tape = Tape::new();
        let zero = vec![
            tape.lift_slice(&[0.0, 0.0]).unwrap(),
            tape.lift_slice(&[0.0, 0.0]).unwrap(),
        ];
        assert_eq!(jr_loss(&tape, &[zero], 1.0).value(), 0.0);

        let eye = vec![
            tape.lift_slice(&[1.0, 0.0]).unwrap(),
            tape.lift_slice(&[0.0, 1.0]).unwrap(),
        ];
        assert_eq!(jr_loss(&tape, &[eye], 1.0).value(), 2.0);

        // At n=2, d=2: det = 1 + (jr term) + minor^2.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_jac(&mut rng, 2, 2);
            let det = metric_det(&induced_metric(&a));
            let jac_vars: Vec<Vec<Var>> = a
                .iter()
                .map(|row| tape.lift_slice(row).unwrap())
                .collect();
            let jr = jr_loss(&tape, &[jac_vars], 1.0).value();
            let minor = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            assert!((det - (1.0 + jr + minor * minor)).abs() < 1e-12 * det);
        }
    }

    #[test]
    fn ur_gradient_matches_finite_differences_through_body() {
        // Parameter gradient of the unimodular loss on a small random body:
        // mixed second order (reverse over the forward tangents).
        let mut body = Mlp::init(MlpSpec::new(2, vec![6], 4), 31);
        let pts: Vec<[f64; 2]> = vec![[0.1, 0.9], [0.4, 0.3], [0.8, 0.6], [0.25, 0.75]];
        let lambda = 0.7;

        let loss_f64 = |m: &Mlp| -> f64 {
            let mut acc = 0.0;
            for p in &pts {
                let (_, d) = m.forward_dual_f64(&p[..], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
                let det = metric_det(&induced_metric(&d));
                acc += (det.sqrt() - 1.0) * (det.sqrt() - 1.0);
            }
            lambda * acc
        };

        let tape = Tape::new();
        let lifted = body.lift(&tape).unwrap();
        let mut sqrt_gs = Vec::new();
        for p in &pts {
            let xs = tape.lift_slice(&p[..]).unwrap();
            let duals = [DualNum::seed(xs[0], 0), DualNum::seed(xs[1], 1)];
            let latent = lifted.forward_dual(&duals, 2);
            let jac = jacobian_from_duals(&tape, &latent, 2);
            sqrt_gs.push(sqrt_g(&tape, &jac));
        }
        let loss = ur_loss(&tape, &sqrt_gs, lambda);
        assert!((loss.value() - loss_f64(&body)).abs() < 1e-12);

        let params = lifted.param_vars();
        let grads = tape.grad(loss, &params).unwrap();

        let flat = body.params_flat();
        let h = 1e-6;
        for idx in (0..flat.len()).step_by(7) {
            let mut fp = flat.clone();
            fp[idx] += h;
            let mut fm = flat.clone();
            fm[idx] -= h;
            body.set_params_flat(&fp);
            let lp = loss_f64(&body);
            body.set_params_flat(&fm);
            let lm = loss_f64(&body);
            body.set_params_flat(&flat);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grads[idx] - fd).abs() / (1.0 + fd.abs());
            assert!(rel < 1e-3, "param {idx}: ad {} fd {fd}", grads[idx]);
        }
    }

    #[test]
    fn lipschitz_diagnostic_hand_cases() {
        // Constant solution: zero jacobian everywhere.
        let d = lipschitz_diagnostic(|_| vec![vec![0.0]], &[vec![0.0], vec![1.0]]);
        assert_eq!(d, 0.0);

        // u = 3x in one dimension: spectral norm 3 at every probe.
        let d = lipschitz_diagnostic(|_| vec![vec![3.0]], &[vec![0.0], vec![0.5]]);
        assert!((d - 3.0).abs() < 1e-12);

        // Known singular values: diag(2, 0.5) -> 2.
        let j = vec![vec![2.0, 0.0], vec![0.0, 0.5]];
        assert!((spectral_norm(&j) - 2.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn spectral_norm_non_negative_and_bounds_frobenius(
            entries in proptest::collection::vec(-3.0f64..3.0, 6)
        ) {
            let j = vec![
                entries[0..3].to_vec(),
                entries[3..6].to_vec(),
            ];
            let s = spectral_norm(&j);
            prop_assert!(s >= 0.0);
            let fro: f64 = entries.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(s <= fro + 1e-9);
            // sigma_max >= fro / sqrt(rank bound)
            prop_assert!(s * 2.0_f64.sqrt() + 1e-9 >= fro);
        }
    }
}
