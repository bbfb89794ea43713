//! Evaluation of trained artifacts against the classical oracles: dense-grid
//! solutions, pointwise relative error, RMS/max aggregates, a Lipschitz
//! diagnostic from the solution jacobian, and — for the EFE, which has no
//! in-repo trajectory solver — per-equation residual norms plus the
//! recovered potential table.
//!
//! A [`HeadView`] names one family member: the shared bodies, one head per
//! body slot, and the bound parameter value. Views come either from a
//! trained multi-head model (pick a member) or from a transfer run (frozen
//! bodies plus fresh heads), so both paths evaluate identically.

use super::engine::{efe_point, LiftedModel};
use super::TrainError;
use crate::autodiff::Tape;
use crate::geometry::lipschitz_diagnostic;
use crate::nn::{Mlp, MultiHeadModel};
use crate::problems::efe::BundlePoint;
use crate::problems::{flame, vdp, ProblemKind};
use crate::reference::{
    flame_implicit_solve, linspace, relative_error, rk45, rk4_fixed, rms_relative_error,
};
use serde_json::json;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

/// Which classical solver supplies the reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Rk45,
    Rk4,
    /// Analytic implicit solution; flame only.
    Implicit,
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OracleKind::Rk45 => "rk45",
            OracleKind::Rk4 => "rk4",
            OracleKind::Implicit => "implicit",
        };
        f.write_str(s)
    }
}

impl FromStr for OracleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rk45" => Ok(OracleKind::Rk45),
            "rk4" => Ok(OracleKind::Rk4),
            "implicit" => Ok(OracleKind::Implicit),
            other => Err(format!("unknown oracle '{other}' (rk45, rk4, implicit)")),
        }
    }
}

const RK45_RTOL: f64 = 1e-9;
const RK45_ATOL: f64 = 1e-12;
const RK4_STEPS: usize = 20_000;

/// One family member's networks: shared bodies plus one head per slot.
pub struct HeadView<'a> {
    pub bodies: &'a [Mlp],
    pub heads: Vec<&'a Mlp>,
    pub param: f64,
}

impl<'a> HeadView<'a> {
    /// The member'th head of a trained model, bound to its grid value.
    pub fn member(model: &'a MultiHeadModel, head_grid: &[f64], member: usize) -> HeadView<'a> {
        assert!(member < head_grid.len());
        HeadView {
            bodies: &model.bodies,
            heads: model.heads.iter().map(|ms| &ms[member]).collect(),
            param: head_grid[member],
        }
    }

    /// Frozen bodies with transfer-learned heads.
    pub fn with_heads(bodies: &'a [Mlp], heads: &'a [Mlp], param: f64) -> HeadView<'a> {
        assert_eq!(bodies.len(), heads.len());
        HeadView {
            bodies,
            heads: heads.iter().collect(),
            param,
        }
    }
}

fn flame_solution(view: &HeadView, t: f64) -> f64 {
    let latent = view.bodies[0].forward_f64(&[t, view.param]);
    let raw = view.heads[0].forward_f64(&latent)[0];
    flame::constrain(t, view.param, raw)
}

fn vdp_solution(view: &HeadView, t: f64) -> (f64, f64) {
    let lx = view.bodies[0].forward_f64(&[t, view.param]);
    let ly = view.bodies[1].forward_f64(&[t, view.param]);
    let raw_x = view.heads[0].forward_f64(&lx)[0];
    let raw_y = view.heads[1].forward_f64(&ly)[0];
    vdp::constrain(t, raw_x, raw_y)
}

/// d(trial)/d(t, param) through the frozen chain plus the constraint layer,
/// in plain f64. Rows are outputs, columns are inputs.
fn flame_jacobian(view: &HeadView, x: &[f64]) -> Vec<Vec<f64>> {
    let (t, _) = (x[0], x[1]);
    let seeds = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let (latent, ltans) = view.bodies[0].forward_dual_f64(x, &seeds);
    let (raw, rtans) = view.heads[0].forward_dual_f64(&latent, &ltans);
    let ramp = 1.0 - (-t).exp();
    let dramp = (-t).exp();
    let dy_dt = dramp * raw[0] + ramp * rtans[0][0];
    let dy_dp = 1.0 + ramp * rtans[1][0];
    vec![vec![dy_dt, dy_dp]]
}

fn vdp_jacobian(view: &HeadView, x: &[f64]) -> Vec<Vec<f64>> {
    let t = x[0];
    let seeds = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let (lx, lxt) = view.bodies[0].forward_dual_f64(x, &seeds);
    let (ly, lyt) = view.bodies[1].forward_dual_f64(x, &seeds);
    let (raw_x, rxt) = view.heads[0].forward_dual_f64(&lx, &lxt);
    let (raw_y, ryt) = view.heads[1].forward_dual_f64(&ly, &lyt);
    let ramp = 1.0 - (-t).exp();
    let dramp = (-t).exp();
    vec![
        vec![dramp * raw_x[0] + ramp * rxt[0][0], ramp * rxt[1][0]],
        vec![dramp * raw_y[0] + ramp * ryt[0][0], ramp * ryt[1][0]],
    ]
}

/// Metrics of one member's solution against a classical reference.
#[derive(Debug, Clone)]
pub struct TrajectoryEval {
    pub problem: ProblemKind,
    pub oracle: OracleKind,
    pub param: f64,
    /// RMS of the primary component's relative error, percent.
    pub rms_percent: f64,
    pub max_re_percent: f64,
    /// Per-component RMS, in component order.
    pub component_rms: Vec<(String, f64)>,
    /// Largest solution-jacobian spectral norm over probe points.
    pub lipschitz: f64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryEval {
    pub fn report_json(&self) -> serde_json::Value {
        json!({
            "problem": self.problem.to_string(),
            "oracle": self.oracle.to_string(),
            "param": self.param,
            "rms_percent": self.rms_percent,
            "max_re_percent": self.max_re_percent,
            "component_rms_percent": self.component_rms
                .iter()
                .map(|(name, v)| (name.clone(), *v))
                .collect::<std::collections::BTreeMap<_, _>>(),
            "lipschitz": self.lipschitz,
        })
    }

    pub fn write_plot_csv(&self, path: &Path) -> std::io::Result<()> {
        write_rows_csv(path, &self.columns, &self.rows)
    }
}

fn write_rows_csv(path: &Path, columns: &[String], rows: &[Vec<f64>]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", columns.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

fn lipschitz_probes(t_end: f64, param: f64) -> Vec<Vec<f64>> {
    linspace(0.0, t_end, 16)
        .into_iter()
        .map(|t| vec![t, param])
        .collect()
}

/// Evaluates a flame member on `n_grid` evenly spaced points of its domain.
pub fn evaluate_flame(
    view: &HeadView,
    oracle: OracleKind,
    n_grid: usize,
) -> Result<TrajectoryEval, TrainError> {
    assert!(n_grid >= 2);
    let delta = view.param;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(TrainError::Config(format!(
            "flame delta must lie in (0, 1), got {delta}"
        )));
    }
    let t1 = flame::t_end(delta);
    let ts = linspace(0.0, t1, n_grid);
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        dy[0] = flame::RHO * (y[0].powi(2) - y[0].powi(3));
    };
    let refs: Vec<f64> = match oracle {
        OracleKind::Implicit => ts
            .iter()
            .map(|&t| flame_implicit_solve(delta, flame::RHO, t))
            .collect(),
        OracleKind::Rk45 => {
            let traj = rk45(rhs, 0.0, &[delta], t1, RK45_RTOL, RK45_ATOL)?;
            ts.iter().map(|&t| traj.sample(t)[0]).collect()
        }
        OracleKind::Rk4 => {
            let traj = rk4_fixed(rhs, 0.0, &[delta], t1, RK4_STEPS)?;
            ts.iter().map(|&t| traj.sample(t)[0]).collect()
        }
    };
    let nns: Vec<f64> = ts.iter().map(|&t| flame_solution(view, t)).collect();
    let res: Vec<f64> = refs
        .iter()
        .zip(&nns)
        .map(|(&r, &n)| relative_error(r, n))
        .collect();
    let rows: Vec<Vec<f64>> = ts
        .iter()
        .zip(&nns)
        .zip(&refs)
        .zip(&res)
        .map(|(((&t, &y_nn), &y_ref), &re)| vec![t, y_nn, y_ref, re])
        .collect();
    Ok(TrajectoryEval {
        problem: ProblemKind::Flame,
        oracle,
        param: delta,
        rms_percent: rms_relative_error(&refs, &nns),
        max_re_percent: res.iter().fold(0.0, |m, &r| m.max(r)),
        component_rms: vec![("y".into(), rms_relative_error(&refs, &nns))],
        lipschitz: lipschitz_diagnostic(
            |x| flame_jacobian(view, x),
            &lipschitz_probes(t1, delta),
        ),
        columns: ["t", "y_nn", "y_oracle", "re_percent"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows,
    })
}

/// Evaluates a Van der Pol member; the displacement x is the primary
/// error component.
pub fn evaluate_vdp(
    view: &HeadView,
    oracle: OracleKind,
    n_grid: usize,
) -> Result<TrajectoryEval, TrainError> {
    assert!(n_grid >= 2);
    let a = view.param;
    let ts = linspace(0.0, vdp::T_END, n_grid);
    let rhs = move |_t: f64, y: &[f64], dy: &mut [f64]| {
        dy[0] = vdp::RHO * y[1];
        dy[1] = vdp::RHO * ((1.0 - y[0] * y[0]) * y[1] * a - y[0]);
    };
    let traj = match oracle {
        OracleKind::Rk45 => rk45(rhs, 0.0, &[1.0, 0.0], vdp::T_END, RK45_RTOL, RK45_ATOL)?,
        OracleKind::Rk4 => rk4_fixed(rhs, 0.0, &[1.0, 0.0], vdp::T_END, RK4_STEPS)?,
        OracleKind::Implicit => {
            return Err(TrainError::Config(
                "the implicit oracle applies to the flame problem only".into(),
            ))
        }
    };
    let refs: Vec<Vec<f64>> = ts.iter().map(|&t| traj.sample(t)).collect();
    let nns: Vec<(f64, f64)> = ts.iter().map(|&t| vdp_solution(view, t)).collect();
    let refs_x: Vec<f64> = refs.iter().map(|y| y[0]).collect();
    let refs_y: Vec<f64> = refs.iter().map(|y| y[1]).collect();
    let nns_x: Vec<f64> = nns.iter().map(|p| p.0).collect();
    let nns_y: Vec<f64> = nns.iter().map(|p| p.1).collect();
    let res_x: Vec<f64> = refs_x
        .iter()
        .zip(&nns_x)
        .map(|(&r, &n)| relative_error(r, n))
        .collect();
    let res_y: Vec<f64> = refs_y
        .iter()
        .zip(&nns_y)
        .map(|(&r, &n)| relative_error(r, n))
        .collect();
    let rows: Vec<Vec<f64>> = (0..ts.len())
        .map(|i| {
            vec![
                ts[i], nns_x[i], nns_y[i], refs_x[i], refs_y[i], res_x[i], res_y[i],
            ]
        })
        .collect();
    Ok(TrajectoryEval {
        problem: ProblemKind::Vdp,
        oracle,
        param: a,
        rms_percent: rms_relative_error(&refs_x, &nns_x),
        max_re_percent: res_x.iter().fold(0.0, |m, &r| m.max(r)),
        component_rms: vec![
            ("x".into(), rms_relative_error(&refs_x, &nns_x)),
            ("y".into(), rms_relative_error(&refs_y, &nns_y)),
        ],
        lipschitz: lipschitz_diagnostic(
            |x| vdp_jacobian(view, x),
            &lipschitz_probes(vdp::T_END, a),
        ),
        columns: [
            "t",
            "x_nn",
            "y_nn",
            "x_oracle",
            "y_oracle",
            "re_x_percent",
            "re_y_percent",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        rows,
    })
}

/// EFE metrics: per-equation residual RMS over a dense (bundle x u) grid,
/// the pooled squared-residual total (the single-member DE loss on that
/// grid), and the recovered potential sampled along the trial phi.
#[derive(Debug, Clone)]
pub struct EfeEval {
    pub param: f64,
    /// Root-mean-square of each residual over the evaluation grid.
    pub residual_rms: [f64; 7],
    /// Sum of all squared residuals over the grid.
    pub total_sq: f64,
    /// (phi, V(phi)) pairs, ascending in phi.
    pub v_table: Vec<(f64, f64)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl EfeEval {
    pub fn report_json(&self) -> serde_json::Value {
        json!({
            "problem": "efe",
            "param": self.param,
            "residual_rms": self.residual_rms.to_vec(),
            "total_sq": self.total_sq,
            "v_table_len": self.v_table.len(),
        })
    }

    pub fn write_plot_csv(&self, path: &Path) -> std::io::Result<()> {
        write_rows_csv(path, &self.columns, &self.rows)
    }

    pub fn write_v_table_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "phi,v")?;
        for (phi, v) in &self.v_table {
            writeln!(f, "{phi},{v}")?;
        }
        Ok(())
    }
}

/// Evaluates one EFE member on an even u-grid against every bundle point.
pub fn evaluate_efe(
    view: &HeadView,
    bundle: &[BundlePoint],
    n_u: usize,
) -> Result<EfeEval, TrainError> {
    assert!(n_u >= 2);
    if view.bodies.len() != 7 {
        return Err(TrainError::Config(format!(
            "efe evaluation expects 7 body slots, got {}",
            view.bodies.len()
        )));
    }
    if bundle.is_empty() {
        return Err(TrainError::Config("empty bundle".into()));
    }
    let us = linspace(0.0, 1.0, n_u);
    let tape = Tape::new();
    let lm = LiftedModel {
        bodies: view
            .bodies
            .iter()
            .map(|b| b.lift(&tape))
            .collect::<Result<Vec<_>, _>>()?,
        heads: view
            .heads
            .iter()
            .map(|h| Ok(vec![h.lift(&tape)?]))
            .collect::<Result<Vec<_>, TrainError>>()?,
    };
    let mut sq_sums = [0.0f64; 7];
    let mut total_sq = 0.0;
    let mut v_table = Vec::with_capacity(bundle.len() * us.len());
    let mut rows = Vec::with_capacity(bundle.len() * us.len());
    for bc in bundle {
        for &u in &us {
            let p = efe_point(&tape, &lm, 0, bc, u, view.param, false);
            let mut row = vec![bc.index as f64, u];
            let s = &p.state;
            for comp in [s.sigma, s.a, s.phi, s.nu_sigma, s.nu_a, s.nu_phi] {
                row.push(comp.value());
            }
            row.push(p.v.value());
            for (j, r) in p.residuals.iter().enumerate() {
                let val = r.value();
                sq_sums[j] += val * val;
                total_sq += val * val;
                row.push(val);
            }
            v_table.push((s.phi.value(), p.v.value()));
            rows.push(row);
        }
    }
    let count = (bundle.len() * us.len()) as f64;
    let mut residual_rms = [0.0f64; 7];
    for j in 0..7 {
        residual_rms[j] = (sq_sums[j] / count).sqrt();
    }
    v_table.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut columns: Vec<String> = vec!["bundle_index".into(), "u".into()];
    columns.extend(
        ["sigma", "a", "phi", "nu_sigma", "nu_a", "nu_phi", "v"]
            .iter()
            .map(|s| s.to_string()),
    );
    for j in 1..=7 {
        columns.push(format!("r{j}"));
    }
    Ok(EfeEval {
        param: view.param,
        residual_rms,
        total_sq,
        v_table,
        columns,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec};
    use crate::problems::efe;

    fn flame_model() -> MultiHeadModel {
        let body = MlpSpec::new(2, vec![8], 6);
        let head = MlpSpec::new(6, vec![6], 1);
        MultiHeadModel::init(&[body], &[head], 2, 42)
    }

    #[test]
    fn flame_eval_schema_and_metric_consistency() {
        let model = flame_model();
        let grid = [0.02, 0.04];
        let view = HeadView::member(&model, &grid, 0);
        let ev = evaluate_flame(&view, OracleKind::Implicit, 33).unwrap();
        assert_eq!(ev.columns, ["t", "y_nn", "y_oracle", "re_percent"]);
        assert_eq!(ev.rows.len(), 33);
        // The stored rows regenerate the aggregates exactly.
        let sum_sq: f64 = ev.rows.iter().map(|r| r[3] * r[3]).sum();
        let rms = (sum_sq / 33.0).sqrt();
        assert!((rms - ev.rms_percent).abs() < 1e-12);
        let max = ev.rows.iter().map(|r| r[3]).fold(0.0f64, f64::max);
        assert_eq!(max, ev.max_re_percent);
        assert!(ev.lipschitz.is_finite() && ev.lipschitz > 0.0);
        // An untrained network is far from the solution but the trial still
        // hits the initial condition, so the t = 0 error is exactly zero.
        assert_eq!(ev.rows[0][3], 0.0);
    }

    #[test]
    fn flame_oracles_agree_on_the_reference_column() {
        let model = flame_model();
        let grid = [0.02, 0.04];
        let view = HeadView::member(&model, &grid, 0);
        let imp = evaluate_flame(&view, OracleKind::Implicit, 21).unwrap();
        let rk = evaluate_flame(&view, OracleKind::Rk45, 21).unwrap();
        let rk4 = evaluate_flame(&view, OracleKind::Rk4, 21).unwrap();
        for i in 0..21 {
            assert!((imp.rows[i][2] - rk.rows[i][2]).abs() < 1e-6);
            assert!((imp.rows[i][2] - rk4.rows[i][2]).abs() < 1e-6);
        }
    }

    #[test]
    fn vdp_eval_rejects_implicit_and_reports_components() {
        let body = MlpSpec::new(2, vec![8], 6);
        let head = MlpSpec::new(6, vec![6], 1);
        let model = MultiHeadModel::init(&[body.clone(), body], &[head.clone(), head], 2, 7);
        let grid = [0.0, 1.5];
        let view = HeadView::member(&model, &grid, 1);
        assert!(matches!(
            evaluate_vdp(&view, OracleKind::Implicit, 11),
            Err(TrainError::Config(_))
        ));
        let ev = evaluate_vdp(&view, OracleKind::Rk45, 17).unwrap();
        assert_eq!(ev.component_rms.len(), 2);
        assert_eq!(ev.component_rms[0].0, "x");
        assert_eq!(ev.rows[0].len(), 7);
        // x(0) = 1 and y(0) = 0 exactly by the constraint layer.
        assert_eq!(ev.rows[0][5], 0.0);
        assert_eq!(ev.rows[0][6], 0.0);
        let report = ev.report_json();
        assert_eq!(report["oracle"], "rk45");
    }

    #[test]
    fn efe_eval_reports_all_seven_residuals() {
        let body = MlpSpec::new(3, vec![6], 4);
        let head = MlpSpec::new(4, vec![4], 1);
        let mut bodies = vec![body; 6];
        let mut heads = vec![head; 6];
        bodies.push(MlpSpec::new(1, vec![6], 4).with_activation(Activation::Silu));
        heads.push(MlpSpec::new(4, vec![4], 1).with_activation(Activation::Silu));
        let model = MultiHeadModel::init(&bodies, &heads, 1, 3);
        let bundle = efe::synthetic_bundle(3, 0.8, 1.2);
        let view = HeadView::member(&model, &[1.0], 0);
        let ev = evaluate_efe(&view, &bundle, 9).unwrap();
        assert_eq!(ev.rows.len(), 27);
        assert_eq!(ev.v_table.len(), 27);
        assert!(ev.residual_rms.iter().all(|r| r.is_finite()));
        assert!(ev.total_sq > 0.0);
        // phi table is sorted ascending.
        for w in ev.v_table.windows(2) {
            assert!(w[0].0 <= w[1].0);
        }
        assert_eq!(ev.columns.len(), ev.rows[0].len());
        // Row layout: index, u, six components, V, then r1..r7.
        assert_eq!(ev.columns[8], "v");
        assert_eq!(ev.columns[9], "r1");
    }

    #[test]
    fn oracle_kind_round_trips() {
        for s in ["rk45", "rk4", "implicit"] {
            let k: OracleKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert!("euler".parse::<OracleKind>().is_err());
    }

    #[test]
    fn plot_csv_written_with_header() {
        let model = flame_model();
        let grid = [0.02, 0.04];
        let view = HeadView::member(&model, &grid, 1);
        let ev = evaluate_flame(&view, OracleKind::Implicit, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        ev.write_plot_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,y_nn,y_oracle,re_percent");
        assert_eq!(lines.count(), 5);
    }
}
