//! The three differential-equation families: residuals, constraint layers,
//! samplers, and family-parameter descriptors.
//!
//! Each family lives in its own submodule with residual and constraint
//! functions generic over [`Field`](crate::autodiff::dual::Field), so one
//! definition serves plain-`f64` oracles, tape `Var`s during training, and
//! `DualNum`s when forward tangents ride along. Residuals are identically
//! zero on exact solutions; constraint layers absorb the ICs/BCs into the
//! trial form so any raw network output satisfies them exactly.
//!
//! Samplers produce the per-epoch collocation grids: evenly spaced points
//! with uniform jitter for the time-domain problems, Chebyshev-Gauss-Lobatto
//! nodes with spacing-aware jitter for the EFE radial coordinate. The family
//! parameter axis itself is never jittered; heads bind exact grid values.

pub mod efe;
pub mod flame;
pub mod vdp;

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug)]
pub enum ProblemError {
    Io(std::io::Error),
    /// A bundle CSV row failed to parse; `line` is 1-based.
    BundleParse { line: usize, msg: String },
    /// A bundle row parsed but carried an out-of-range value.
    BundleValue { line: usize, msg: String },
    EmptyBundle,
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemError::Io(e) => write!(f, "bundle io error: {e}"),
            ProblemError::BundleParse { line, msg } => {
                write!(f, "bundle line {line}: {msg}")
            }
            ProblemError::BundleValue { line, msg } => {
                write!(f, "bundle line {line}: {msg}")
            }
            ProblemError::EmptyBundle => write!(f, "bundle contains no data rows"),
        }
    }
}

impl std::error::Error for ProblemError {}

impl From<std::io::Error> for ProblemError {
    fn from(e: std::io::Error) -> Self {
        ProblemError::Io(e)
    }
}

/// Which DE family a run targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Flame,
    Vdp,
    Efe,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProblemKind::Flame => "flame",
            ProblemKind::Vdp => "vdp",
            ProblemKind::Efe => "efe",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flame" => Ok(ProblemKind::Flame),
            "vdp" => Ok(ProblemKind::Vdp),
            "efe" => Ok(ProblemKind::Efe),
            other => Err(format!("unknown problem '{other}' (flame | vdp | efe)")),
        }
    }
}

/// Descriptive facts about one family: input arity, unknown names, and the
/// family-parameter axis with its training range and default head grid.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: &'static str,
    pub n_inputs: usize,
    pub unknowns: &'static [&'static str],
    pub family_param: &'static str,
    pub family_range: (f64, f64),
    pub head_grid: Vec<f64>,
}

impl ProblemKind {
    pub fn spec(self) -> ProblemSpec {
        match self {
            ProblemKind::Flame => ProblemSpec {
                name: "flame",
                n_inputs: 2,
                unknowns: &["y"],
                family_param: "delta",
                family_range: (0.02, 0.04),
                head_grid: flame::DELTA_HEADS.to_vec(),
            },
            ProblemKind::Vdp => ProblemSpec {
                name: "vdp",
                n_inputs: 2,
                unknowns: &["x", "y"],
                family_param: "a",
                family_range: (0.0, 1.5),
                head_grid: vdp::A_HEADS.to_vec(),
            },
            ProblemKind::Efe => ProblemSpec {
                name: "efe",
                n_inputs: 3,
                unknowns: &["sigma", "a", "phi", "nu_sigma", "nu_a", "nu_phi"],
                family_param: "phi_m",
                family_range: (1.0, 3.0),
                head_grid: efe::PHI_M_HEADS.to_vec(),
            },
        }
    }
}

/// `n` evenly spaced base points on `[a, b]`, each perturbed by
/// `noise_scale` times a uniform draw within half the inter-point spacing,
/// clamped back into the domain. Zero noise returns the exact grid.
pub fn uniform_jitter<R: Rng>(
    a: f64,
    b: f64,
    n: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Vec<f64> {
    assert!(n >= 2 && b > a && noise_scale >= 0.0);
    let h = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let base = a + h * i as f64;
            let off = if noise_scale == 0.0 {
                0.0
            } else {
                noise_scale * rng.gen_range(-0.5 * h..=0.5 * h)
            };
            (base + off).clamp(a, b)
        })
        .collect()
}

/// Chebyshev-Gauss-Lobatto nodes on [0, 1], ascending, endpoints exact.
pub fn chebyshev_lobatto(n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let mut nodes: Vec<f64> = (0..n)
        .map(|k| 0.5 * (1.0 - (std::f64::consts::PI * k as f64 / (n - 1) as f64).cos()))
        .collect();
    nodes[0] = 0.0;
    nodes[n - 1] = 1.0;
    nodes
}

/// CGL nodes with interior points jittered by `noise_scale` times half the
/// smaller adjacent gap; the boundary nodes carry BCs and stay exact.
pub fn chebyshev_jitter<R: Rng>(n: usize, noise_scale: f64, rng: &mut R) -> Vec<f64> {
    assert!(noise_scale >= 0.0);
    let base = chebyshev_lobatto(n);
    let mut out = base.clone();
    for k in 1..n - 1 {
        let gap = (base[k] - base[k - 1]).min(base[k + 1] - base[k]);
        if noise_scale > 0.0 {
            out[k] = (base[k] + noise_scale * rng.gen_range(-0.5 * gap..=0.5 * gap))
                .clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_reproduces_exact_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = uniform_jitter(0.0, 1.0, 5, 0.0, &mut rng);
        assert_eq!(grid, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let cgl = chebyshev_jitter(5, 0.0, &mut rng);
        assert_eq!(cgl, chebyshev_lobatto(5));
    }

    #[test]
    fn jitter_stays_within_domain_and_half_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, n) = (0.0, 1.0 / 3.0, 100);
        let h = (b - a) / (n - 1) as f64;
        for _ in 0..50 {
            let pts = uniform_jitter(a, b, n, 1.0, &mut rng);
            assert_eq!(pts.len(), n);
            for (i, &t) in pts.iter().enumerate() {
                assert!((a..=b).contains(&t));
                let base = a + h * i as f64;
                assert!((t - base).abs() <= 0.5 * h + 1e-15);
            }
        }
    }

    #[test]
    fn chebyshev_nodes_cluster_at_boundaries() {
        let nodes = chebyshev_lobatto(9);
        assert_eq!(nodes[0], 0.0);
        assert_eq!(nodes[8], 1.0);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        // Edge gaps are tighter than central ones.
        assert!(nodes[1] - nodes[0] < nodes[5] - nodes[4]);
        // Midpoint node of an odd count sits at 1/2.
        assert!((nodes[4] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_jitter_keeps_endpoints_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pts = chebyshev_jitter(12, 1.0, &mut rng);
            assert_eq!(pts[0], 0.0);
            assert_eq!(pts[11], 1.0);
            assert!(pts.iter().all(|&u| (0.0..=1.0).contains(&u)));
        }
    }

    #[test]
    fn problem_specs_are_consistent() {
        for kind in [ProblemKind::Flame, ProblemKind::Vdp, ProblemKind::Efe] {
            let spec = kind.spec();
            assert_eq!(spec.name, kind.to_string());
            assert!(!spec.head_grid.is_empty());
            let (lo, hi) = spec.family_range;
            assert!(spec.head_grid.iter().all(|&v| v >= lo && v <= hi));
            assert_eq!(kind.to_string().parse::<ProblemKind>().unwrap(), kind);
        }
        assert!("heat".parse::<ProblemKind>().is_err());
    }
}
