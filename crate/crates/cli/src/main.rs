//! Config-driven experiment runner: train multi-head bodies, transfer heads
//! to new family-parameter values against a frozen body, evaluate members
//! against classical oracles, and run matched-seed regularization ablations.
//!
//! Artifacts land in `--out` when given, else `$UPINN_OUT_DIR`, else
//! `./runs`. Exit codes are scripting-stable: 0 success, 2 configuration or
//! usage errors, 3 numerical failures (non-finite losses, solver
//! breakdowns), 1 for I/O faults. Re-running a command with unchanged
//! inputs rewrites every artifact byte-identically except the wall-time
//! metadata, which stays quarantined in the `*_meta.json` files.

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use upinn_core::nn::MultiHeadModel;
use upinn_core::problems::ProblemKind;
use upinn_core::trainer::{
    config_hash, evaluate_efe, evaluate_flame, evaluate_vdp, load_checkpoint, resolve_bundle,
    train_body, transfer, BundleConfig, HeadView, OracleKind, TrainConfig, TrainError,
    TrajectoryEval, TransferConfig,
};

/// Reports and tabular artifacts written by this binary carry this schema
/// version; bump it on any column or key change.
const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "upinn", version)]
#[command(about = "Multi-head differential-equation solvers with unimodular latent regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train bodies and heads from a JSON experiment config.
    TrainBody {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to $UPINN_OUT_DIR, then ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate and print the resolved config without any compute.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train fresh heads for one new family-parameter value on a frozen body.
    Transfer {
        /// Body checkpoint produced by train-body.
        #[arg(long)]
        body: PathBuf,
        /// New family-parameter value.
        #[arg(long)]
        param: f64,
        /// Transfer config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoint members against a classical oracle.
    Eval {
        /// Full-model checkpoint, or a head-only checkpoint with --body.
        #[arg(long)]
        model: PathBuf,
        /// Frozen-body checkpoint supplying bodies for a head-only model.
        #[arg(long)]
        body: Option<PathBuf>,
        /// rk45 | rk4 | implicit (implicit applies to the flame problem only).
        #[arg(long, default_value = "rk45")]
        oracle: String,
        /// Member index within the head grid; defaults to every member.
        #[arg(long)]
        member: Option<usize>,
        /// Evaluation grid size along the independent variable.
        #[arg(long, default_value_t = 201)]
        grid: usize,
        /// EFE only: bundle CSV with (index, temperature, entropy) rows.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// EFE only: synthetic bundle size (needs --t-lo and --t-hi).
        #[arg(long)]
        synthetic_points: Option<usize>,
        #[arg(long)]
        t_lo: Option<f64>,
        #[arg(long)]
        t_hi: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Matched-seed comparison of transfer accuracy with and without the
    /// unimodular term: body + transfer + oracle eval per seed and arm.
    Ablate {
        /// flame | vdp.
        #[arg(long)]
        problem: String,
        /// Number of matched seeds (>= 1).
        #[arg(long)]
        seeds: u64,
        /// Body-training config; the regularized arm runs it as given, the
        /// bare arm runs it with ur.enabled = false.
        #[arg(long)]
        config: PathBuf,
        /// Transfer config shared by both arms.
        #[arg(long)]
        tl_config: PathBuf,
        /// Transfer family-parameter value; defaults to 0.016 for flame and
        /// 1.75 for vdp (slightly beyond each training range).
        #[arg(long)]
        param: Option<f64>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainBody {
            config,
            out,
            dry_run,
        } => cmd_train_body(&config, out, dry_run),
        Command::Transfer {
            body,
            param,
            config,
            out,
        } => cmd_transfer(&body, param, &config, out),
        Command::Eval {
            model,
            body,
            oracle,
            member,
            grid,
            bundle,
            synthetic_points,
            t_lo,
            t_hi,
            out,
        } => cmd_eval(EvalArgs {
            model,
            body,
            oracle,
            member,
            grid,
            bundle,
            synthetic_points,
            t_lo,
            t_hi,
            out,
        }),
        Command::Ablate {
            problem,
            seeds,
            config,
            tl_config,
            param,
            jobs,
            out,
        } => cmd_ablate(&problem, seeds, &config, &tl_config, param, jobs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for anything the caller can fix in a config or command line, 3 for
/// numerical breakdowns mid-compute, 1 for I/O faults.
fn exit_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_)
        | TrainError::Json(_)
        | TrainError::Checkpoint(_)
        | TrainError::Problem(_) => 2,
        TrainError::NonFinite { .. }
        | TrainError::Ad(_)
        | TrainError::Optim(_)
        | TrainError::Reference(_) => 3,
        TrainError::Io(_) => 1,
    }
}

/// Errors while reading user-named input files are usage errors (exit 2),
/// not I/O faults: a missing or malformed path is the caller's to fix.
fn usage(path: &Path, e: TrainError) -> TrainError {
    TrainError::Config(format!("{}: {e}", path.display()))
}

fn resolve_out(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os("UPINN_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn file_sha256(path: &Path) -> Result<String, TrainError> {
    let digest = Sha256::digest(std::fs::read(path)?);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("writing to a string cannot fail");
    }
    Ok(out)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), TrainError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train_body(config: &Path, out: Option<PathBuf>, dry_run: bool) -> Result<(), TrainError> {
    let cfg = TrainConfig::load(config).map_err(|e| usage(config, e))?;
    let warnings = cfg.validate()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        println!("head grid: {:?}", cfg.grid());
        println!("config hash: {}", config_hash(&cfg));
        return Ok(());
    }
    let out_dir = resolve_out(out);
    let art = train_body(&cfg, &out_dir)?;
    art.record
        .write_geometry_csv(&out_dir.join("geometry.csv"))?;
    println!(
        "trained {} for {} epochs ({:.1} s)",
        cfg.problem, cfg.epochs, art.meta.wall_time_s
    );
    if let Some(row) = art.record.rows.last() {
        println!("final l_tot: {}", row.l_tot);
    }
    println!("checkpoint: {}", art.checkpoint_path.display());
    println!("record: {}", art.record_path.display());
    Ok(())
}

fn cmd_transfer(
    body: &Path,
    param: f64,
    config: &Path,
    out: Option<PathBuf>,
) -> Result<(), TrainError> {
    let tcfg = TransferConfig::load(config).map_err(|e| usage(config, e))?;
    let ckpt = load_checkpoint(body).map_err(|e| usage(body, e))?;
    let problem: ProblemKind = ckpt.header.problem.parse().map_err(TrainError::Config)?;
    let before = file_sha256(body)?;
    println!("frozen body sha256 before: {before}");
    let out_dir = resolve_out(out);
    let art = transfer(&ckpt, param, &tcfg, &out_dir)?;
    let after = file_sha256(body)?;
    println!("frozen body sha256 after:  {after}");
    if before != after {
        return Err(TrainError::Checkpoint(
            "frozen body checkpoint changed during transfer".into(),
        ));
    }
    println!(
        "transferred {problem} to {param} in {} epochs ({:.1} s)",
        tcfg.epochs, art.meta.wall_time_s
    );
    println!("head checkpoint: {}", art.checkpoint_path.display());

    // Score the fresh heads right away: the oracles are cheap next to the
    // training run, and the eval CSV is the artifact people plot.
    let model = ckpt.into_model()?;
    let view = HeadView::with_heads(&model.bodies, &art.heads, param);
    let mut report;
    match problem {
        ProblemKind::Flame => {
            let ev = evaluate_flame(&view, OracleKind::Rk45, 201)?;
            ev.write_plot_csv(&out_dir.join(format!("head_{param}_eval.csv")))?;
            println!(
                "rms {:.4}% / max {:.4}% vs rk45",
                ev.rms_percent, ev.max_re_percent
            );
            report = ev.report_json();
        }
        ProblemKind::Vdp => {
            let ev = evaluate_vdp(&view, OracleKind::Rk45, 201)?;
            ev.write_plot_csv(&out_dir.join(format!("head_{param}_eval.csv")))?;
            println!(
                "rms {:.4}% / max {:.4}% vs rk45",
                ev.rms_percent, ev.max_re_percent
            );
            report = ev.report_json();
        }
        ProblemKind::Efe => {
            let bc = tcfg
                .bundle
                .as_ref()
                .expect("transfer validated the bundle");
            let bundle = resolve_bundle(bc)?;
            let ev = evaluate_efe(&view, &bundle, 41)?;
            ev.write_plot_csv(&out_dir.join(format!("head_{param}_eval.csv")))?;
            ev.write_v_table_csv(&out_dir.join(format!("head_{param}_v.csv")))?;
            println!("total squared residual on the eval grid: {}", ev.total_sq);
            report = ev.report_json();
        }
    }
    report["schema_version"] = REPORT_SCHEMA_VERSION.into();
    write_json(&out_dir.join(format!("head_{param}_report.json")), &report)?;
    Ok(())
}

struct EvalArgs {
    model: PathBuf,
    body: Option<PathBuf>,
    oracle: String,
    member: Option<usize>,
    grid: usize,
    bundle: Option<PathBuf>,
    synthetic_points: Option<usize>,
    t_lo: Option<f64>,
    t_hi: Option<f64>,
    out: Option<PathBuf>,
}

/// The networks an eval run scores: either a full model, or transfer heads
/// joined to the frozen body they were trained against.
enum EvalNets {
    Full(MultiHeadModel, Vec<f64>),
    Joined(MultiHeadModel, Vec<upinn_core::nn::Mlp>, f64),
}

fn cmd_eval(args: EvalArgs) -> Result<(), TrainError> {
    let oracle: OracleKind = args.oracle.parse().map_err(TrainError::Config)?;
    if args.grid < 2 {
        return Err(TrainError::Config(format!(
            "--grid must be >= 2, got {}",
            args.grid
        )));
    }
    let ckpt = load_checkpoint(&args.model).map_err(|e| usage(&args.model, e))?;
    let problem: ProblemKind = ckpt.header.problem.parse().map_err(TrainError::Config)?;

    let nets = if ckpt.header.body_specs.is_empty() {
        let body_path = args.body.as_ref().ok_or_else(|| {
            TrainError::Config(
                "head-only checkpoint: pass --body with the frozen body it was trained on".into(),
            )
        })?;
        let body_ckpt = load_checkpoint(body_path).map_err(|e| usage(body_path, e))?;
        if body_ckpt.header.problem != ckpt.header.problem {
            return Err(TrainError::Config(format!(
                "problem mismatch: heads are {}, body is {}",
                ckpt.header.problem, body_ckpt.header.problem
            )));
        }
        let param = ckpt.header.head_grid[0];
        EvalNets::Joined(body_ckpt.into_model()?, ckpt.into_heads()?, param)
    } else {
        if args.body.is_some() {
            return Err(TrainError::Config(
                "--body only applies to head-only checkpoints".into(),
            ));
        }
        let grid = ckpt.header.head_grid.clone();
        EvalNets::Full(ckpt.into_model()?, grid)
    };

    let bundle = match problem {
        ProblemKind::Efe => {
            let bc = BundleConfig {
                path: args
                    .bundle
                    .as_ref()
                    .map(|p| p.to_string_lossy().into_owned()),
                synthetic_points: args.synthetic_points,
                t_range: match (args.t_lo, args.t_hi) {
                    (Some(lo), Some(hi)) => Some((lo, hi)),
                    _ => None,
                },
            };
            Some(resolve_bundle(&bc)?)
        }
        _ => {
            if args.bundle.is_some()
                || args.synthetic_points.is_some()
                || args.t_lo.is_some()
                || args.t_hi.is_some()
            {
                return Err(TrainError::Config(
                    "bundle flags only apply to the efe problem".into(),
                ));
            }
            None
        }
    };

    let out_dir = resolve_out(args.out);
    std::fs::create_dir_all(&out_dir)?;
    let mut entries = Vec::new();
    match &nets {
        EvalNets::Full(model, grid) => {
            let members: Vec<usize> = match args.member {
                Some(m) if m >= grid.len() => {
                    return Err(TrainError::Config(format!(
                        "--member {m} out of range; checkpoint has {} members",
                        grid.len()
                    )));
                }
                Some(m) => vec![m],
                None => (0..grid.len()).collect(),
            };
            for m in members {
                let view = HeadView::member(model, grid, m);
                let stem = format!("{problem}_member{m}");
                entries.push(eval_one(&view, problem, oracle, args.grid, bundle.as_deref(), &out_dir, &stem)?);
            }
        }
        EvalNets::Joined(body_model, heads, param) => {
            if args.member.unwrap_or(0) != 0 {
                return Err(TrainError::Config(
                    "head-only checkpoints hold a single member".into(),
                ));
            }
            let view = HeadView::with_heads(&body_model.bodies, heads, *param);
            let stem = format!("{problem}_head_{param}");
            entries.push(eval_one(&view, problem, oracle, args.grid, bundle.as_deref(), &out_dir, &stem)?);
        }
    }

    let mut report = if entries.len() == 1 {
        entries.pop().expect("one entry")
    } else {
        serde_json::json!({ "members": entries })
    };
    report["schema_version"] = REPORT_SCHEMA_VERSION.into();
    write_json(&out_dir.join("report.json"), &report)?;
    println!("report: {}", out_dir.join("report.json").display());
    Ok(())
}

/// Evaluates one member, writes its plot CSV(s), prints a summary line, and
/// returns its report entry.
fn eval_one(
    view: &HeadView,
    problem: ProblemKind,
    oracle: OracleKind,
    grid: usize,
    bundle: Option<&[upinn_core::problems::efe::BundlePoint]>,
    out_dir: &Path,
    stem: &str,
) -> Result<serde_json::Value, TrainError> {
    match problem {
        ProblemKind::Efe => {
            let bundle = bundle.expect("resolved for efe above");
            let ev = evaluate_efe(view, bundle, grid)?;
            ev.write_plot_csv(&out_dir.join(format!("{stem}_eval.csv")))?;
            ev.write_v_table_csv(&out_dir.join(format!("{stem}_v.csv")))?;
            println!(
                "param {}: total squared residual {}",
                view.param, ev.total_sq
            );
            Ok(ev.report_json())
        }
        _ => {
            let ev: TrajectoryEval = match problem {
                ProblemKind::Flame => evaluate_flame(view, oracle, grid)?,
                ProblemKind::Vdp => evaluate_vdp(view, oracle, grid)?,
                ProblemKind::Efe => unreachable!("handled above"),
            };
            ev.write_plot_csv(&out_dir.join(format!("{stem}_eval.csv")))?;
            println!(
                "param {}: rms {:.4}% / max {:.4}% vs {oracle}",
                view.param, ev.rms_percent, ev.max_re_percent
            );
            Ok(ev.report_json())
        }
    }
}

#[derive(Clone, Copy)]
struct AblateJob {
    seed_idx: u64,
    ur: bool,
}

struct AblateOutcome {
    seed_idx: u64,
    ur: bool,
    tl_rms: f64,
    sqrtg_mean: f64,
}

fn cmd_ablate(
    problem: &str,
    seeds: u64,
    config: &Path,
    tl_config: &Path,
    param: Option<f64>,
    jobs: usize,
    out: Option<PathBuf>,
) -> Result<(), TrainError> {
    let problem: ProblemKind = problem.parse().map_err(TrainError::Config)?;
    if matches!(problem, ProblemKind::Efe) {
        return Err(TrainError::Config(
            "ablate scores transfer accuracy against a trajectory oracle; it supports flame and vdp".into(),
        ));
    }
    if seeds == 0 {
        return Err(TrainError::Config("--seeds must be >= 1".into()));
    }
    if jobs == 0 {
        return Err(TrainError::Config("--jobs must be >= 1".into()));
    }
    let base = TrainConfig::load(config).map_err(|e| usage(config, e))?;
    if base.problem != problem {
        return Err(TrainError::Config(format!(
            "--problem {} does not match the config's {}",
            problem, base.problem
        )));
    }
    for w in base.validate()? {
        eprintln!("warning: {w}");
    }
    if base.jr.enabled {
        return Err(TrainError::Config(
            "ablate toggles the unimodular term; disable jr in the base config".into(),
        ));
    }
    if !(base.ur.lambda > 0.0) {
        return Err(TrainError::Config(
            "base config needs ur.lambda > 0 for the regularized arm".into(),
        ));
    }
    let tl = TransferConfig::load(tl_config).map_err(|e| usage(tl_config, e))?;
    tl.validate()?;
    let param = param.unwrap_or(match problem {
        ProblemKind::Flame => 0.016,
        ProblemKind::Vdp => 1.75,
        ProblemKind::Efe => unreachable!("rejected above"),
    });
    let out_dir = resolve_out(out);
    std::fs::create_dir_all(&out_dir)?;

    let queue: Mutex<Vec<AblateJob>> = Mutex::new(
        (0..seeds)
            .flat_map(|seed_idx| {
                [true, false].map(|ur| AblateJob { seed_idx, ur })
            })
            .collect(),
    );
    let results: Mutex<Vec<AblateOutcome>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<TrainError>> = Mutex::new(None);
    let workers = jobs.min(2 * seeds as usize);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    break;
                }
                let job = queue.lock().unwrap().pop();
                let Some(job) = job else { break };
                match ablate_arm(&base, &tl, param, &out_dir, job) {
                    Ok(outcome) => results.lock().unwrap().push(outcome),
                    Err(e) => {
                        *failure.lock().unwrap() = Some(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    let results = results.into_inner().unwrap();
    let pick = |seed_idx: u64, ur: bool| -> &AblateOutcome {
        results
            .iter()
            .find(|o| o.seed_idx == seed_idx && o.ur == ur)
            .expect("every job reported")
    };
    let mut rms_ur = Vec::new();
    let mut rms_nour = Vec::new();
    let mut wins = 0u64;
    for i in 0..seeds {
        let (u, n) = (pick(i, true), pick(i, false));
        rms_ur.push(u.tl_rms);
        rms_nour.push(n.tl_rms);
        if u.tl_rms <= n.tl_rms {
            wins += 1;
        }
    }
    let med_ur = median(&mut rms_ur);
    let med_nour = median(&mut rms_nour);
    let win_rate = wins as f64 / seeds as f64;

    let header = "seed,tl_rms_ur,tl_rms_nour,ur_win,sqrtg_mean_ur,sqrtg_mean_nour,\
                  median_tl_rms_ur,median_tl_rms_nour,win_rate";
    let mut table = String::new();
    writeln!(table, "{header}").expect("writing to a string cannot fail");
    for i in 0..seeds {
        let (u, n) = (pick(i, true), pick(i, false));
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            base.seed + i,
            u.tl_rms,
            n.tl_rms,
            u8::from(u.tl_rms <= n.tl_rms),
            u.sqrtg_mean,
            n.sqrtg_mean,
            med_ur,
            med_nour,
            win_rate
        )
        .expect("writing to a string cannot fail");
    }
    std::fs::write(out_dir.join("ablation.csv"), &table)?;
    print!("{table}");
    println!(
        "ur wins {wins}/{seeds} seeds on transfer rms (median {med_ur:.4}% vs {med_nour:.4}%)"
    );
    Ok(())
}

/// One (seed, arm) unit: train the body, transfer to the target parameter,
/// score the transfer against rk45, and return the final mean sqrt(det g).
fn ablate_arm(
    base: &TrainConfig,
    tl: &TransferConfig,
    param: f64,
    root: &Path,
    job: AblateJob,
) -> Result<AblateOutcome, TrainError> {
    let mut cfg = base.clone();
    cfg.seed = base.seed + job.seed_idx;
    cfg.ur.enabled = job.ur;
    let arm = if job.ur { "ur" } else { "nour" };
    let dir = root.join(format!("seed{}", cfg.seed)).join(arm);
    let art = train_body(&cfg, &dir)?;
    art.record.write_geometry_csv(&dir.join("geometry.csv"))?;
    let sqrtg_mean = art
        .record
        .final_sqrtg()
        .map(|s| s.mean)
        .ok_or_else(|| TrainError::Config("ablate needs at least one trained epoch".into()))?;

    let mut tcfg = tl.clone();
    tcfg.seed = tl.seed + job.seed_idx;
    let body_ckpt = load_checkpoint(&art.checkpoint_path)?;
    let tart = transfer(&body_ckpt, param, &tcfg, &dir)?;
    let view = HeadView::with_heads(&art.model.bodies, &tart.heads, param);
    let ev = match cfg.problem {
        ProblemKind::Flame => evaluate_flame(&view, OracleKind::Rk45, 201)?,
        ProblemKind::Vdp => evaluate_vdp(&view, OracleKind::Rk45, 201)?,
        ProblemKind::Efe => unreachable!("rejected in cmd_ablate"),
    };
    Ok(AblateOutcome {
        seed_idx: job.seed_idx,
        ur: job.ur,
        tl_rms: ev.rms_percent,
        sqrtg_mean,
    })
}

fn median(vals: &mut [f64]) -> f64 {
    assert!(!vals.is_empty());
    vals.sort_by(|a, b| a.partial_cmp(b).expect("rms values are finite"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}
