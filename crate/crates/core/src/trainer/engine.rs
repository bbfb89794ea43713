//! The training engine: builds one loss graph per epoch on a reusable tape,
//! takes one Adam step on all unfrozen parameters, and records the loss
//! decomposition row by row.
//!
//! Every epoch stands alone: the tape is cleared, the current parameters
//! are lifted as leaves, the collocation batch is drawn from the config's
//! seed stream, and the per-head DE losses plus (on cadence epochs) the
//! regularization term are summed into a single total-loss node whose
//! gradient drives the step. Derivatives of the trial solutions with
//! respect to their inputs ride forward alongside the reverse tape as dual
//! numbers, so the regularizers — which need the latent jacobian over every
//! input direction — reuse the same machinery with more seeded directions.
//!
//! Transfer learning runs the same loop with the body frozen. For the
//! trajectory problems the frozen body is evaluated in plain f64 and only
//! the fresh head lives on the tape, which makes the freeze contract
//! structural rather than a matter of masking gradients. The EFE potential
//! network takes its input from a trainable head's output, so EFE transfer
//! keeps the whole graph on the tape and simply restricts the gradient to
//! the new heads' parameters.

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::{
    config_hash, BundleConfig, EpochRow, RunMeta, RunRecord, SqrtGStats, TrainConfig, TrainError,
    TransferConfig,
};
use crate::autodiff::dual::{DualNum, Tangent};
use crate::autodiff::{Tape, Var};
use crate::geometry::{jacobian_from_duals, jr_loss, sqrt_g, ur_loss};
use crate::nn::{LiftedMlp, Mlp, MlpSpec, MultiHeadModel};
use crate::optim::{AdamState, OptimError, StepScheduler};
use crate::problems::efe::{self, BundlePoint, EfeState};
use crate::problems::{chebyshev_jitter, flame, uniform_jitter, vdp, ProblemKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Sampling draws come from stream 1 of the seed; stream 0 belongs to
/// parameter initialization. Keeping them apart means adding epochs never
/// rewinds the init draws and vice versa.
const SAMPLE_STREAM: u64 = 1;

/// Body and head specs for a config, in model slot order. The EFE model
/// carries its six unknown-function bodies first and the potential network
/// as the last slot.
pub(crate) fn model_specs(cfg: &TrainConfig) -> (Vec<MlpSpec>, Vec<MlpSpec>) {
    let body = MlpSpec::new(
        cfg.problem.spec().n_inputs,
        cfg.body.hidden.clone(),
        cfg.body.latent,
    )
    .with_activation(cfg.body.activation);
    let head = MlpSpec::new(cfg.body.latent, cfg.head.hidden.clone(), 1)
        .with_activation(cfg.head.activation);
    match cfg.problem {
        ProblemKind::Flame => (vec![body], vec![head]),
        ProblemKind::Vdp => (vec![body.clone(), body], vec![head.clone(), head]),
        ProblemKind::Efe => {
            let vb = cfg.v_body.as_ref().expect("validated");
            let vh = cfg.v_head.as_ref().expect("validated");
            let mut bodies = vec![body; 6];
            let mut heads = vec![head; 6];
            bodies.push(
                MlpSpec::new(1, vb.hidden.clone(), vb.latent).with_activation(vb.activation),
            );
            heads.push(MlpSpec::new(vb.latent, vh.hidden.clone(), 1).with_activation(vh.activation));
            (bodies, heads)
        }
    }
}

/// All parameters, bodies then heads grouped by body, concatenated. This
/// order also fixes gradient accumulation and the optimizer state layout.
fn flat_params(model: &MultiHeadModel) -> Vec<f64> {
    let mut out = Vec::new();
    for b in &model.bodies {
        out.extend(b.params_flat());
    }
    for members in &model.heads {
        for h in members {
            out.extend(h.params_flat());
        }
    }
    out
}

fn set_flat_params(model: &mut MultiHeadModel, flat: &[f64]) {
    let mut off = 0;
    for b in &mut model.bodies {
        let n = b.param_count();
        b.set_params_flat(&flat[off..off + n]);
        off += n;
    }
    for members in &mut model.heads {
        for h in members {
            let n = h.param_count();
            h.set_params_flat(&flat[off..off + n]);
            off += n;
        }
    }
    assert_eq!(off, flat.len(), "flat parameter length mismatch");
}

/// A model's networks lifted onto one tape for an epoch.
pub(crate) struct LiftedModel<'t> {
    pub bodies: Vec<LiftedMlp<'t>>,
    pub heads: Vec<Vec<LiftedMlp<'t>>>,
}

pub(crate) fn lift_model<'t>(
    tape: &'t Tape,
    model: &MultiHeadModel,
) -> Result<LiftedModel<'t>, TrainError> {
    let bodies = model
        .bodies
        .iter()
        .map(|b| b.lift(tape))
        .collect::<Result<Vec<_>, _>>()?;
    let heads = model
        .heads
        .iter()
        .map(|members| {
            members
                .iter()
                .map(|h| h.lift(tape))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LiftedModel { bodies, heads })
}

impl<'t> LiftedModel<'t> {
    /// Leaves in `flat_params` order.
    fn param_vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for b in &self.bodies {
            out.extend(b.param_vars());
        }
        for members in &self.heads {
            for h in members {
                out.extend(h.param_vars());
            }
        }
        out
    }

    fn head_param_vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for members in &self.heads {
            for h in members {
                out.extend(h.param_vars());
            }
        }
        out
    }
}

/// Per-sample geometry collected on cadence epochs: one jacobian and one
/// sqrt-determinant per (body, batch point).
struct GeomBatch<'t> {
    jacs: Vec<Vec<Vec<Var<'t>>>>,
    sqrt_gs: Vec<Var<'t>>,
}

impl<'t> GeomBatch<'t> {
    fn new() -> Self {
        GeomBatch {
            jacs: Vec::new(),
            sqrt_gs: Vec::new(),
        }
    }

    fn push(&mut self, tape: &'t Tape, latent: &[DualNum<'t>], n_dirs: usize) {
        let jac = jacobian_from_duals(tape, latent, n_dirs);
        self.sqrt_gs.push(sqrt_g(tape, &jac));
        self.jacs.push(jac);
    }

    fn values(&self) -> Vec<f64> {
        self.sqrt_gs.iter().map(|s| s.value()).collect()
    }
}

/// One flame collocation point: squared-residual term plus the body latent
/// (for geometry). Direction 0 is d/dt; direction 1 (geometry epochs) is
/// d/d-delta.
fn flame_point<'t>(
    tape: &'t Tape,
    body: &LiftedMlp<'t>,
    head: &LiftedMlp<'t>,
    delta: f64,
    t: f64,
    geom: bool,
) -> (Var<'t>, Vec<DualNum<'t>>) {
    let k = if geom { 2 } else { 1 };
    let t_dual = DualNum::seed(tape.constant(t), 0);
    let d_c = tape.constant(delta);
    let d_dual = if geom {
        DualNum::seed(d_c, 1)
    } else {
        DualNum::plain(d_c)
    };
    let latent = body.forward_dual(&[t_dual, d_dual], k);
    let raw = head.forward_dual(&latent, k)[0];
    let y = flame::constrain(t_dual, delta, raw);
    let r = flame::residual(y.v, y.tangent_var(0), flame::RHO);
    (r * r, latent)
}

/// One Van der Pol collocation point: both equations' squared residuals
/// summed, plus each body's latent.
fn vdp_point<'t>(
    tape: &'t Tape,
    bodies: &[LiftedMlp<'t>],
    head_x: &LiftedMlp<'t>,
    head_y: &LiftedMlp<'t>,
    a: f64,
    t: f64,
    geom: bool,
) -> (Var<'t>, [Vec<DualNum<'t>>; 2]) {
    let k = if geom { 2 } else { 1 };
    let t_dual = DualNum::seed(tape.constant(t), 0);
    let a_c = tape.constant(a);
    let a_dual = if geom {
        DualNum::seed(a_c, 1)
    } else {
        DualNum::plain(a_c)
    };
    let lat_x = bodies[0].forward_dual(&[t_dual, a_dual], k);
    let lat_y = bodies[1].forward_dual(&[t_dual, a_dual], k);
    let raw_x = head_x.forward_dual(&lat_x, k)[0];
    let raw_y = head_y.forward_dual(&lat_y, k)[0];
    let (x, y) = vdp::constrain(t_dual, raw_x, raw_y);
    let (r1, r2) = vdp::residuals(
        x.v,
        y.v,
        x.tangent_var(0),
        y.tangent_var(0),
        a,
        vdp::RHO,
    );
    (r1 * r1 + r2 * r2, [lat_x, lat_y])
}

/// Everything one EFE collocation point produces. Residuals always; the
/// trial state and potential value feed evaluation reports; the latents are
/// populated for geometry collection (the slot layout mirrors the model:
/// six unknown-function bodies, then the potential body).
pub(crate) struct EfePoint<'t> {
    pub residuals: [Var<'t>; 7],
    pub state: EfeState<Var<'t>>,
    pub v: Var<'t>,
    pub psi_latents: Vec<Vec<DualNum<'t>>>,
    pub v_latent: Vec<DualNum<'t>>,
}

/// One EFE collocation point for family member `member` at (u, bundle
/// point). Direction 0 is d/du through the unknown functions and d/d-phi
/// through the potential network; directions 1 and 2 (geometry epochs)
/// carry d/dT and d/d-phi_M.
pub(crate) fn efe_point<'t>(
    tape: &'t Tape,
    lm: &LiftedModel<'t>,
    member: usize,
    bc: &BundlePoint,
    u: f64,
    phi_m: f64,
    geom: bool,
) -> EfePoint<'t> {
    let k = if geom { 3 } else { 1 };
    let u_c = tape.constant(u);
    let u_dual = DualNum::seed(u_c, 0);
    let t_c = tape.constant(bc.temperature);
    let m_c = tape.constant(phi_m);
    let (t_dual, m_dual) = if geom {
        (DualNum::seed(t_c, 1), DualNum::seed(m_c, 2))
    } else {
        (DualNum::plain(t_c), DualNum::plain(m_c))
    };
    let x = [u_dual, t_dual, m_dual];
    let mut psi_latents = Vec::with_capacity(6);
    let mut raws = Vec::with_capacity(6);
    for slot in 0..6 {
        let latent = lm.bodies[slot].forward_dual(&x, k);
        raws.push(lm.heads[slot][member].forward_dual(&latent, k)[0]);
        psi_latents.push(latent);
    }
    let raw_state = EfeState {
        sigma: raws[0],
        a: raws[1],
        phi: raws[2],
        nu_sigma: raws[3],
        nu_a: raws[4],
        nu_phi: raws[5],
    };
    let trial = efe::constrain(u_dual, bc, &raw_state);
    let state = EfeState {
        sigma: trial.sigma.v,
        a: trial.a.v,
        phi: trial.phi.v,
        nu_sigma: trial.nu_sigma.v,
        nu_a: trial.nu_a.v,
        nu_phi: trial.nu_phi.v,
    };
    let ds = EfeState {
        sigma: trial.sigma.tangent_var(0),
        a: trial.a.tangent_var(0),
        phi: trial.phi.tangent_var(0),
        nu_sigma: trial.nu_sigma.tangent_var(0),
        nu_a: trial.nu_a.tangent_var(0),
        nu_phi: trial.nu_phi.tangent_var(0),
    };
    // The potential network reads the trial phi; seeding direction 0 with
    // d-phi/d-phi = 1 makes its output tangent exactly dV/d-phi, which both
    // the sixth residual and the potential body's own metric need.
    let phi_dual = DualNum::seed(trial.phi.v, 0);
    let v_latent = lm.bodies[6].forward_dual(&[phi_dual], 1);
    let v_out = lm.heads[6][member].forward_dual(&v_latent, 1)[0];
    let residuals = efe::residuals(u_c, &state, &ds, v_out.v, v_out.tangent_var(0));
    EfePoint {
        residuals,
        state,
        v: v_out.v,
        psi_latents,
        v_latent,
    }
}

/// Per-head DE losses plus collected geometry for one epoch's batch.
fn build_epoch<'t>(
    tape: &'t Tape,
    lm: &LiftedModel<'t>,
    cfg: &TrainConfig,
    grid: &[f64],
    bundle: Option<&[BundlePoint]>,
    rng: &mut ChaCha8Rng,
    geom: bool,
) -> (Vec<Var<'t>>, Option<GeomBatch<'t>>) {
    let mut geo = geom.then(GeomBatch::new);
    let mut l_de = Vec::with_capacity(grid.len());
    match cfg.problem {
        ProblemKind::Flame => {
            // One collocation batch per epoch, shared by every head, drawn
            // from the widest window in the grid (the smallest delta) so the
            // body sees each member far past its own ignition time.
            let widest = grid.iter().cloned().fold(f64::INFINITY, f64::min);
            let ts = uniform_jitter(0.0, flame::t_end(widest), cfg.points, cfg.noise_scale, rng);
            for (a, &delta) in grid.iter().enumerate() {
                let mut terms = Vec::with_capacity(ts.len());
                for &t in &ts {
                    let (sq, latent) =
                        flame_point(tape, &lm.bodies[0], &lm.heads[0][a], delta, t, geom);
                    terms.push(sq);
                    if let Some(g) = geo.as_mut() {
                        g.push(tape, &latent, 2);
                    }
                }
                l_de.push(tape.sum(&terms));
            }
        }
        ProblemKind::Vdp => {
            let ts = uniform_jitter(0.0, vdp::T_END, cfg.points, cfg.noise_scale, rng);
            for (a, &a_val) in grid.iter().enumerate() {
                let mut terms = Vec::with_capacity(ts.len());
                for &t in &ts {
                    let (sq, latents) = vdp_point(
                        tape,
                        &lm.bodies,
                        &lm.heads[0][a],
                        &lm.heads[1][a],
                        a_val,
                        t,
                        geom,
                    );
                    terms.push(sq);
                    if let Some(g) = geo.as_mut() {
                        g.push(tape, &latents[0], 2);
                        g.push(tape, &latents[1], 2);
                    }
                }
                l_de.push(tape.sum(&terms));
            }
        }
        ProblemKind::Efe => {
            let bundle = bundle.expect("efe bundle resolved before training");
            let us = chebyshev_jitter(cfg.points, cfg.noise_scale, rng);
            for (member, &phi_m) in grid.iter().enumerate() {
                let mut terms = Vec::with_capacity(bundle.len() * us.len());
                for bc in bundle {
                    for &u in &us {
                        let p = efe_point(tape, lm, member, bc, u, phi_m, geom);
                        let sqs: Vec<Var> = p.residuals.iter().map(|&r| r * r).collect();
                        terms.push(tape.sum(&sqs));
                        if let Some(g) = geo.as_mut() {
                            for latent in &p.psi_latents {
                                g.push(tape, latent, 3);
                            }
                            g.push(tape, &p.v_latent, 1);
                        }
                    }
                }
                l_de.push(tape.sum(&terms));
            }
        }
    }
    (l_de, geo)
}

/// Materializes a bundle config: a CSV file when a path is given, otherwise
/// the synthetic even-temperature grid.
pub fn resolve_bundle(bc: &BundleConfig) -> Result<Vec<BundlePoint>, TrainError> {
    if let Some(path) = &bc.path {
        return Ok(efe::load_bundle_csv(Path::new(path))?);
    }
    match (bc.synthetic_points, bc.t_range) {
        (Some(n), Some((lo, hi))) => {
            if n < 2 || !(lo > 0.0) || !(hi > lo) {
                return Err(TrainError::Config(format!(
                    "synthetic bundle wants >= 2 points and 0 < t_lo < t_hi, got n={n}, range=({lo}, {hi})"
                )));
            }
            Ok(efe::synthetic_bundle(n, lo, hi))
        }
        _ => Err(TrainError::Config(
            "bundle needs a csv path or synthetic_points + t_range".into(),
        )),
    }
}

/// The cadence on which geometry statistics are sampled; matches whichever
/// regularizer is enabled so matched runs log comparable rows.
fn geom_cadence(cfg: &TrainConfig) -> usize {
    if cfg.jr.enabled {
        cfg.jr.every_n
    } else {
        cfg.ur.every_n
    }
}

pub struct TrainedArtifacts {
    pub model: MultiHeadModel,
    pub record: RunRecord,
    pub meta: RunMeta,
    pub checkpoint_path: PathBuf,
    pub record_path: PathBuf,
    pub warnings: Vec<String>,
}

/// Trains all bodies and heads per the config and writes the checkpoint,
/// run record, and metadata into `out_dir`.
pub fn train_body(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainedArtifacts, TrainError> {
    let warnings = cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let hash = config_hash(cfg);
    let grid = cfg.grid();
    let (body_specs, head_specs) = model_specs(cfg);
    let mut model = MultiHeadModel::init(&body_specs, &head_specs, grid.len(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLE_STREAM);
    let bundle = match &cfg.bundle {
        Some(bc) => Some(resolve_bundle(bc)?),
        None => None,
    };
    let scheduler = StepScheduler::new(cfg.lr, cfg.lr_decay, cfg.lr_period);
    let mut adam = AdamState::new(flat_params(&model).len(), cfg.lr);
    adam.clip = cfg.clip_norm;
    let ckpt_path = out_dir.join(format!("{}_body{}.ckpt", cfg.problem, cfg.run_label()));
    let mut record = RunRecord::new(grid.len());
    let mut last_ckpt: Option<PathBuf> = None;
    let cadence = geom_cadence(cfg);

    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        adam.lr = scheduler.lr_at(epoch as u64);
        let geom = epoch % cadence == 0 || epoch + 1 == cfg.epochs;
        let apply_ur = cfg.ur.enabled && epoch % cfg.ur.every_n == 0;
        let apply_jr = cfg.jr.enabled && epoch % cfg.jr.every_n == 0;
        tape.clear();
        let (row, grads) = {
            let lm = lift_model(&tape, &model)?;
            let (l_de, geo) = build_epoch(&tape, &lm, cfg, &grid, bundle.as_deref(), &mut rng, geom);
            let mut parts = l_de.clone();
            let mut l_reg = None;
            if let Some(g) = &geo {
                if apply_ur {
                    let v = ur_loss(&tape, &g.sqrt_gs, cfg.ur.lambda);
                    parts.push(v);
                    l_reg = Some(v);
                } else if apply_jr {
                    let v = jr_loss(&tape, &g.jacs, cfg.jr.lambda);
                    parts.push(v);
                    l_reg = Some(v);
                }
            }
            let l_tot = tape.sum(&parts);
            if let Err(e) = l_tot.checked_value() {
                return Err(TrainError::NonFinite {
                    epoch,
                    what: format!("total loss: {e}"),
                    last_checkpoint: last_ckpt,
                });
            }
            let wrt = lm.param_vars();
            let grads = tape.grad(l_tot, &wrt)?;
            let row = EpochRow {
                epoch,
                lr: adam.lr,
                l_de: l_de.iter().map(|v| v.value()).collect(),
                l_reg: l_reg.map(|v| v.value()),
                l_tot: l_tot.value(),
                sqrtg: geo.as_ref().and_then(|g| SqrtGStats::from_values(&g.values())),
            };
            (row, grads)
        };
        let mut flat = flat_params(&model);
        if let Err(OptimError::NonFiniteGrad { index }) = adam.apply(&mut flat, &grads) {
            return Err(TrainError::NonFinite {
                epoch,
                what: format!("gradient at parameter {index}"),
                last_checkpoint: last_ckpt,
            });
        }
        set_flat_params(&mut model, &flat);
        record.rows.push(row);
        if (epoch + 1) % cfg.checkpoint_every == 0 {
            let ckpt = Checkpoint::from_model(
                &model,
                &cfg.problem.to_string(),
                &hash,
                cfg.seed,
                epoch + 1,
                grid.clone(),
            );
            save_checkpoint(&ckpt_path, &ckpt)?;
            last_ckpt = Some(ckpt_path.clone());
        }
    }

    let ckpt = Checkpoint::from_model(
        &model,
        &cfg.problem.to_string(),
        &hash,
        cfg.seed,
        cfg.epochs,
        grid.clone(),
    );
    save_checkpoint(&ckpt_path, &ckpt)?;
    let record_path = out_dir.join("run.csv");
    record.write_csv(&record_path)?;
    let meta = RunMeta {
        problem: cfg.problem.to_string(),
        config_hash: hash,
        completed_epochs: cfg.epochs,
        final_checkpoint: ckpt_path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    meta.write(&out_dir.join("run_meta.json"))?;
    Ok(TrainedArtifacts {
        model,
        record,
        meta,
        checkpoint_path: ckpt_path,
        record_path,
        warnings,
    })
}

/// Squared-residual sum for one flame transfer epoch: the frozen body runs
/// in plain f64 with a forward d/dt tangent, and only the head sees the
/// tape.
fn flame_tl_l_de<'t>(
    tape: &'t Tape,
    body: &Mlp,
    head: &LiftedMlp<'t>,
    delta: f64,
    ts: &[f64],
) -> Var<'t> {
    let mut terms = Vec::with_capacity(ts.len());
    for &t in ts {
        let (latent, tans) = body.forward_dual_f64(&[t, delta], &[vec![1.0, 0.0]]);
        let inputs: Vec<DualNum> = latent
            .iter()
            .zip(&tans[0])
            .map(|(&h, &dh)| {
                let mut d = [Tangent::Zero; crate::autodiff::dual::MAX_DIRS];
                d[0] = Tangent::V(tape.constant(dh));
                DualNum {
                    v: tape.constant(h),
                    d,
                }
            })
            .collect();
        let raw = head.forward_dual(&inputs, 1)[0];
        let t_dual = DualNum::seed(tape.constant(t), 0);
        let y = flame::constrain(t_dual, delta, raw);
        let r = flame::residual(y.v, y.tangent_var(0), flame::RHO);
        terms.push(r * r);
    }
    tape.sum(&terms)
}

/// Same scheme for Van der Pol's two frozen bodies and two fresh heads.
fn vdp_tl_l_de<'t>(
    tape: &'t Tape,
    bodies: &[Mlp],
    heads: &[LiftedMlp<'t>],
    a: f64,
    ts: &[f64],
) -> Var<'t> {
    let mut terms = Vec::with_capacity(ts.len());
    for &t in ts {
        let mut duals = Vec::with_capacity(2);
        for body in bodies.iter().take(2) {
            let (latent, tans) = body.forward_dual_f64(&[t, a], &[vec![1.0, 0.0]]);
            let inputs: Vec<DualNum> = latent
                .iter()
                .zip(&tans[0])
                .map(|(&h, &dh)| {
                    let mut d = [Tangent::Zero; crate::autodiff::dual::MAX_DIRS];
                    d[0] = Tangent::V(tape.constant(dh));
                    DualNum {
                        v: tape.constant(h),
                        d,
                    }
                })
                .collect();
            duals.push(inputs);
        }
        let raw_x = heads[0].forward_dual(&duals[0], 1)[0];
        let raw_y = heads[1].forward_dual(&duals[1], 1)[0];
        let t_dual = DualNum::seed(tape.constant(t), 0);
        let (x, y) = vdp::constrain(t_dual, raw_x, raw_y);
        let (r1, r2) = vdp::residuals(x.v, y.v, x.tangent_var(0), y.tangent_var(0), a, vdp::RHO);
        terms.push(r1 * r1 + r2 * r2);
    }
    tape.sum(&terms)
}

pub struct TransferArtifacts {
    pub heads: Vec<Mlp>,
    pub record: RunRecord,
    pub meta: RunMeta,
    pub checkpoint_path: PathBuf,
    pub record_path: PathBuf,
}

/// Trains fresh heads for one new family-parameter value against a frozen
/// body checkpoint. The body parameters are never touched; the returned
/// heads plus the body reproduce the new solution.
pub fn transfer(
    body_ckpt: &Checkpoint,
    param: f64,
    tcfg: &TransferConfig,
    out_dir: &Path,
) -> Result<TransferArtifacts, TrainError> {
    tcfg.validate()?;
    let problem: ProblemKind = body_ckpt
        .header
        .problem
        .parse()
        .map_err(TrainError::Config)?;
    if !param.is_finite() {
        return Err(TrainError::Config(format!(
            "family parameter must be finite, got {param}"
        )));
    }
    if matches!(problem, ProblemKind::Flame) && !(param > 0.0) {
        return Err(TrainError::Config(format!(
            "flame delta must be positive, got {param}"
        )));
    }
    let bundle = match problem {
        ProblemKind::Efe => {
            let bc = tcfg.bundle.as_ref().ok_or_else(|| {
                TrainError::Config("efe transfer requires a bundle".into())
            })?;
            Some(resolve_bundle(bc)?)
        }
        _ => {
            if tcfg.bundle.is_some() {
                return Err(TrainError::Config("bundle only applies to efe".into()));
            }
            None
        }
    };
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let model = body_ckpt.into_model()?;
    let hash = config_hash(tcfg);

    let mut init_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut heads: Vec<Mlp> = body_ckpt
        .header
        .head_specs
        .iter()
        .map(|s| Mlp::init(s.clone(), init_rng.gen()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(SAMPLE_STREAM);

    let scheduler = StepScheduler::new(tcfg.lr, tcfg.lr_decay, tcfg.lr_period);
    let n_params: usize = heads.iter().map(Mlp::param_count).sum();
    let mut adam = AdamState::new(n_params, tcfg.lr);
    adam.clip = tcfg.clip_norm;
    let ckpt_path = out_dir.join(format!("{problem}_head_{param}.ckpt"));
    let mut record = RunRecord::new(1);
    let mut last_ckpt: Option<PathBuf> = None;

    let mut tape = Tape::new();
    for epoch in 0..tcfg.epochs {
        adam.lr = scheduler.lr_at(epoch as u64);
        tape.clear();
        let (row, grads) = {
            let (l_de, wrt) = match problem {
                ProblemKind::Flame => {
                    let lifted = heads[0].lift(&tape)?;
                    let ts = uniform_jitter(
                        0.0,
                        flame::t_end(param),
                        tcfg.points,
                        tcfg.noise_scale,
                        &mut rng,
                    );
                    let l = flame_tl_l_de(&tape, &model.bodies[0], &lifted, param, &ts);
                    (l, lifted.param_vars())
                }
                ProblemKind::Vdp => {
                    let lifted: Vec<LiftedMlp> = heads
                        .iter()
                        .map(|h| h.lift(&tape))
                        .collect::<Result<Vec<_>, _>>()?;
                    let ts =
                        uniform_jitter(0.0, vdp::T_END, tcfg.points, tcfg.noise_scale, &mut rng);
                    let l = vdp_tl_l_de(&tape, &model.bodies, &lifted, param, &ts);
                    (l, lifted.iter().flat_map(|h| h.param_vars()).collect())
                }
                ProblemKind::Efe => {
                    // The potential network's input is a trainable head
                    // output, so the whole graph rides the tape; freezing
                    // is enforced by differentiating only head parameters.
                    let lm = LiftedModel {
                        bodies: model
                            .bodies
                            .iter()
                            .map(|b| b.lift(&tape))
                            .collect::<Result<Vec<_>, _>>()?,
                        heads: heads
                            .iter()
                            .map(|h| Ok(vec![h.lift(&tape)?]))
                            .collect::<Result<Vec<_>, TrainError>>()?,
                    };
                    let us = chebyshev_jitter(tcfg.points, tcfg.noise_scale, &mut rng);
                    let bundle = bundle.as_deref().expect("resolved above");
                    let mut terms = Vec::new();
                    for bc in bundle {
                        for &u in &us {
                            let p = efe_point(&tape, &lm, 0, bc, u, param, false);
                            let sqs: Vec<Var> = p.residuals.iter().map(|&r| r * r).collect();
                            terms.push(tape.sum(&sqs));
                        }
                    }
                    (tape.sum(&terms), lm.head_param_vars())
                }
            };
            if let Err(e) = l_de.checked_value() {
                return Err(TrainError::NonFinite {
                    epoch,
                    what: format!("transfer loss: {e}"),
                    last_checkpoint: last_ckpt,
                });
            }
            let grads = tape.grad(l_de, &wrt)?;
            let row = EpochRow {
                epoch,
                lr: adam.lr,
                l_de: vec![l_de.value()],
                l_reg: None,
                l_tot: l_de.value(),
                sqrtg: None,
            };
            (row, grads)
        };
        let mut flat: Vec<f64> = heads.iter().flat_map(|h| h.params_flat()).collect();
        if let Err(OptimError::NonFiniteGrad { index }) = adam.apply(&mut flat, &grads) {
            return Err(TrainError::NonFinite {
                epoch,
                what: format!("gradient at parameter {index}"),
                last_checkpoint: last_ckpt,
            });
        }
        let mut off = 0;
        for h in &mut heads {
            let n = h.param_count();
            h.set_params_flat(&flat[off..off + n]);
            off += n;
        }
        record.rows.push(row);
        if (epoch + 1) % tcfg.checkpoint_every == 0 {
            let ckpt = Checkpoint::from_heads(
                &heads,
                &problem.to_string(),
                &hash,
                tcfg.seed,
                epoch + 1,
                param,
            );
            save_checkpoint(&ckpt_path, &ckpt)?;
            last_ckpt = Some(ckpt_path.clone());
        }
    }

    let ckpt = Checkpoint::from_heads(
        &heads,
        &problem.to_string(),
        &hash,
        tcfg.seed,
        tcfg.epochs,
        param,
    );
    save_checkpoint(&ckpt_path, &ckpt)?;
    let record_path = out_dir.join(format!("head_{param}_run.csv"));
    record.write_csv(&record_path)?;
    let meta = RunMeta {
        problem: problem.to_string(),
        config_hash: hash,
        completed_epochs: tcfg.epochs,
        final_checkpoint: ckpt_path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let meta_path = out_dir.join(format!("head_{param}_meta.json"));
    meta.write(&meta_path)?;
    Ok(TransferArtifacts {
        heads,
        record,
        meta,
        checkpoint_path: ckpt_path,
        record_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::trainer::{HeadConfig, JrConfig, NetConfig, UrConfig};

    fn tiny_flame(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            problem: ProblemKind::Flame,
            seed,
            epochs,
            points: 6,
            noise_scale: 1.0,
            body: NetConfig {
                hidden: vec![8],
                latent: 6,
                activation: Activation::Tanh,
            },
            head: HeadConfig {
                hidden: vec![6],
                activation: Activation::Tanh,
            },
            v_body: None,
            v_head: None,
            head_grid: None,
            lr: 2e-3,
            lr_decay: 0.05,
            lr_period: 1000,
            clip_norm: None,
            ur: UrConfig {
                enabled: true,
                lambda: 5e-7,
                every_n: 10,
            },
            jr: JrConfig::default(),
            checkpoint_every: 10_000,
            bundle: None,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = tiny_flame(0, 5);
        let dir = tempfile::tempdir().unwrap();
        let art = train_body(&cfg, dir.path()).unwrap();
        assert!(art.record.rows.is_empty());
        let (bs, hs) = model_specs(&cfg);
        let init = MultiHeadModel::init(&bs, &hs, cfg.grid().len(), cfg.seed);
        assert_eq!(flat_params(&art.model), flat_params(&init));
        assert!(art.checkpoint_path.exists());
        assert!(art.record_path.exists());
    }

    #[test]
    fn flame_l_de_gradient_matches_finite_differences() {
        let cfg = tiny_flame(0, 21);
        let grid = cfg.grid();
        let (bs, hs) = model_specs(&cfg);
        let model = MultiHeadModel::init(&bs, &hs, grid.len(), cfg.seed);
        let ts: Vec<f64> = (0..5).map(|i| i as f64 * flame::t_end(0.02) / 4.0).collect();

        let loss_of = |m: &MultiHeadModel| -> f64 {
            let tape = Tape::new();
            let lm = lift_model(&tape, m).unwrap();
            let mut per_head = Vec::new();
            for (a, &delta) in grid.iter().enumerate() {
                let terms: Vec<Var> = ts
                    .iter()
                    .map(|&t| flame_point(&tape, &lm.bodies[0], &lm.heads[0][a], delta, t, false).0)
                    .collect();
                per_head.push(tape.sum(&terms));
            }
            tape.sum(&per_head).value()
        };

        let tape = Tape::new();
        let lm = lift_model(&tape, &model).unwrap();
        let mut per_head = Vec::new();
        for (a, &delta) in grid.iter().enumerate() {
            let terms: Vec<Var> = ts
                .iter()
                .map(|&t| flame_point(&tape, &lm.bodies[0], &lm.heads[0][a], delta, t, false).0)
                .collect();
            per_head.push(tape.sum(&terms));
        }
        let l_tot = tape.sum(&per_head);
        let wrt = lm.param_vars();
        let grads = tape.grad(l_tot, &wrt).unwrap();

        let flat = flat_params(&model);
        assert_eq!(grads.len(), flat.len());
        let mut probe = MultiHeadModel::init(&bs, &hs, grid.len(), cfg.seed);
        // Every 7th coordinate keeps the test cheap while touching body and
        // head layers alike.
        for i in (0..flat.len()).step_by(7) {
            let h = 1e-6 * flat[i].abs().max(1.0);
            let mut bumped = flat.clone();
            bumped[i] = flat[i] + h;
            set_flat_params(&mut probe, &bumped);
            let plus = loss_of(&probe);
            bumped[i] = flat[i] - h;
            set_flat_params(&mut probe, &bumped);
            let minus = loss_of(&probe);
            let fd = (plus - minus) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-8);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-4,
                "param {i}: tape {} vs fd {fd}",
                grads[i]
            );
        }
    }

    #[test]
    fn same_seed_reproduces_run_bitwise() {
        let cfg = tiny_flame(25, 11);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train_body(&cfg, d1.path()).unwrap();
        let b = train_body(&cfg, d2.path()).unwrap();
        assert_eq!(flat_params(&a.model), flat_params(&b.model));
        assert_eq!(a.record.rows, b.record.rows);
        let csv_a = std::fs::read(&a.record_path).unwrap();
        let csv_b = std::fs::read(&b.record_path).unwrap();
        assert_eq!(csv_a, csv_b);
        let mut other = cfg;
        other.seed = 12;
        let d3 = tempfile::tempdir().unwrap();
        let c = train_body(&other, d3.path()).unwrap();
        assert_ne!(flat_params(&a.model), flat_params(&c.model));
    }

    #[test]
    fn ur_lambda_zero_matches_disabled_bitwise() {
        let mut zero = tiny_flame(30, 3);
        zero.ur.lambda = 0.0;
        let mut off = zero.clone();
        off.ur.enabled = false;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train_body(&zero, d1.path()).unwrap();
        let b = train_body(&off, d2.path()).unwrap();
        assert_eq!(flat_params(&a.model), flat_params(&b.model));
        // The lambda = 0 run logs an exactly-zero regularizer column; the
        // disabled run leaves it empty. Loss trajectories agree exactly.
        for (ra, rb) in a.record.rows.iter().zip(&b.record.rows) {
            assert_eq!(ra.l_de, rb.l_de);
            assert_eq!(ra.l_tot, rb.l_tot);
        }
    }

    #[test]
    fn losses_are_additive_and_stats_on_cadence() {
        let cfg = tiny_flame(21, 9);
        let dir = tempfile::tempdir().unwrap();
        let art = train_body(&cfg, dir.path()).unwrap();
        assert!(art.record.additivity_ok(0.0));
        for row in &art.record.rows {
            let on_cadence = row.epoch % 10 == 0 || row.epoch == 20;
            assert_eq!(row.sqrtg.is_some(), on_cadence, "epoch {}", row.epoch);
            assert_eq!(row.l_reg.is_some(), row.epoch % 10 == 0);
            if let Some(s) = row.sqrtg {
                assert!(s.min >= 1.0 && s.min <= s.mean && s.mean <= s.max);
            }
        }
    }

    #[test]
    fn tiny_flame_loss_trends_down() {
        let mut cfg = tiny_flame(300, 2);
        cfg.ur.enabled = false;
        let dir = tempfile::tempdir().unwrap();
        let art = train_body(&cfg, dir.path()).unwrap();
        let rows = &art.record.rows;
        let head = &rows[..30];
        let tail = &rows[rows.len() - 30..];
        assert!(
            RunRecord::median_l_tot(tail) < RunRecord::median_l_tot(head),
            "median tail {} vs head {}",
            RunRecord::median_l_tot(tail),
            RunRecord::median_l_tot(head)
        );
    }

    #[test]
    fn huge_lr_aborts_with_nonfinite() {
        // One step of this size pushes weights to ~1e52; the cubic residual
        // term then squares past f64 range and the loss goes infinite.
        let mut cfg = tiny_flame(60, 4);
        cfg.lr = 1e52;
        let dir = tempfile::tempdir().unwrap();
        match train_body(&cfg, dir.path()) {
            Err(TrainError::NonFinite { epoch, .. }) => assert!(epoch < 60),
            other => panic!("expected non-finite abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn transfer_trains_heads_and_leaves_body_untouched() {
        let cfg = tiny_flame(15, 21);
        let dir = tempfile::tempdir().unwrap();
        let art = train_body(&cfg, dir.path()).unwrap();
        let body_bytes_before = std::fs::read(&art.checkpoint_path).unwrap();

        let tcfg = TransferConfig {
            seed: 77,
            epochs: 12,
            points: 6,
            noise_scale: 1.0,
            lr: 2e-3,
            lr_decay: 0.05,
            lr_period: 1000,
            clip_norm: None,
            checkpoint_every: 10_000,
            bundle: None,
        };
        let ckpt = super::super::load_checkpoint(&art.checkpoint_path).unwrap();
        let t = transfer(&ckpt, 0.018, &tcfg, dir.path()).unwrap();
        assert_eq!(t.record.rows.len(), 12);
        assert!(t.record.additivity_ok(0.0));
        assert!(t.checkpoint_path.exists());

        let body_bytes_after = std::fs::read(&art.checkpoint_path).unwrap();
        assert_eq!(body_bytes_before, body_bytes_after);
        // Re-run reproduces the heads bitwise; a different seed does not.
        let d2 = tempfile::tempdir().unwrap();
        let t2 = transfer(&ckpt, 0.018, &tcfg, d2.path()).unwrap();
        for (h1, h2) in t.heads.iter().zip(&t2.heads) {
            assert_eq!(h1.params_flat(), h2.params_flat());
        }
        // Zero-epoch transfer returns the freshly initialized head.
        let mut zero = tcfg.clone();
        zero.epochs = 0;
        let d3 = tempfile::tempdir().unwrap();
        let t0 = transfer(&ckpt, 0.018, &zero, d3.path()).unwrap();
        assert!(t0.record.rows.is_empty());
        let mut init_rng = ChaCha8Rng::seed_from_u64(zero.seed);
        let fresh = Mlp::init(ckpt.header.head_specs[0].clone(), init_rng.gen());
        assert_eq!(t0.heads[0].params_flat(), fresh.params_flat());
    }

    #[test]
    fn transfer_rejects_bad_params() {
        let cfg = tiny_flame(2, 1);
        let dir = tempfile::tempdir().unwrap();
        let art = train_body(&cfg, dir.path()).unwrap();
        let ckpt = super::super::load_checkpoint(&art.checkpoint_path).unwrap();
        let tcfg = TransferConfig {
            seed: 1,
            epochs: 1,
            points: 4,
            noise_scale: 0.0,
            lr: 1e-3,
            lr_decay: 0.0,
            lr_period: 1,
            clip_norm: None,
            checkpoint_every: 10_000,
            bundle: None,
        };
        assert!(matches!(
            transfer(&ckpt, -0.01, &tcfg, dir.path()),
            Err(TrainError::Config(_))
        ));
        assert!(matches!(
            transfer(&ckpt, f64::NAN, &tcfg, dir.path()),
            Err(TrainError::Config(_))
        ));
    }

    fn tiny_vdp(epochs: usize, seed: u64) -> TrainConfig {
        let mut cfg = tiny_flame(epochs, seed);
        cfg.problem = ProblemKind::Vdp;
        cfg.head_grid = Some(vec![0.0, 0.75, 1.5]);
        cfg
    }

    #[test]
    fn vdp_runs_with_two_bodies() {
        let cfg = tiny_vdp(8, 13);
        let dir = tempfile::tempdir().unwrap();
        let art = train_body(&cfg, dir.path()).unwrap();
        assert_eq!(art.model.n_bodies(), 2);
        assert_eq!(art.model.n_members(), 3);
        assert_eq!(art.record.rows.len(), 8);
        assert!(art.record.additivity_ok(0.0));
        // Geometry pools both bodies' batches.
        let first = &art.record.rows[0];
        assert!(first.sqrtg.is_some());
    }

    fn tiny_efe(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            problem: ProblemKind::Efe,
            seed,
            epochs,
            points: 4,
            noise_scale: 1.0,
            body: NetConfig {
                hidden: vec![6],
                latent: 4,
                activation: Activation::Tanh,
            },
            head: HeadConfig {
                hidden: vec![4],
                activation: Activation::Tanh,
            },
            v_body: Some(NetConfig {
                hidden: vec![6],
                latent: 4,
                activation: Activation::Silu,
            }),
            v_head: Some(HeadConfig {
                hidden: vec![4],
                activation: Activation::Silu,
            }),
            head_grid: Some(vec![1.0, 2.0]),
            lr: 1e-3,
            lr_decay: 0.015,
            lr_period: 5000,
            clip_norm: None,
            ur: UrConfig {
                enabled: true,
                lambda: 5e-8,
                every_n: 5,
            },
            jr: JrConfig::default(),
            checkpoint_every: 10_000,
            bundle: Some(BundleConfig {
                path: None,
                synthetic_points: Some(3),
                t_range: Some((0.8, 1.2)),
            }),
        }
    }

    #[test]
    fn efe_trains_and_transfers() {
        let cfg = tiny_efe(6, 17);
        let dir = tempfile::tempdir().unwrap();
        let art = train_body(&cfg, dir.path()).unwrap();
        assert_eq!(art.model.n_bodies(), 7);
        assert_eq!(art.record.rows.len(), 6);
        assert!(art.record.additivity_ok(0.0));
        assert!(art.record.rows[0].sqrtg.is_some());
        assert!(art.record.rows[0].l_reg.is_some());

        let ckpt = super::super::load_checkpoint(&art.checkpoint_path).unwrap();
        let tcfg = TransferConfig {
            seed: 3,
            epochs: 4,
            points: 4,
            noise_scale: 1.0,
            lr: 1e-3,
            lr_decay: 0.015,
            lr_period: 5000,
            clip_norm: None,
            checkpoint_every: 10_000,
            bundle: cfg.bundle.clone(),
        };
        let t = transfer(&ckpt, 0.9, &tcfg, dir.path()).unwrap();
        assert_eq!(t.heads.len(), 7);
        assert_eq!(t.record.rows.len(), 4);
        // Without a bundle the transfer is rejected up front.
        let mut no_bundle = tcfg;
        no_bundle.bundle = None;
        assert!(matches!(
            transfer(&ckpt, 0.9, &no_bundle, dir.path()),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn jr_runs_on_cadence() {
        let mut cfg = tiny_flame(12, 8);
        cfg.ur = UrConfig {
            enabled: false,
            lambda: 0.0,
            every_n: 10,
        };
        cfg.jr = JrConfig {
            enabled: true,
            lambda: 1e-6,
            every_n: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        let art = train_body(&cfg, dir.path()).unwrap();
        for row in &art.record.rows {
            assert_eq!(row.l_reg.is_some(), row.epoch % 4 == 0);
        }
        assert!(art.record.additivity_ok(0.0));
    }
}
