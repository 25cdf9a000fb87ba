use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use riccati_game::constraints::{check_ipc_riccati, sample_boundary, IpcReport};
use riccati_game::game::{solve_coupled, sup_over_constant_alpha, CoupledOptions, GameSolution};
use riccati_game::io::{alpha_csv, parse_alpha_csv, parse_vector_arg, riccati_csv, trajectory_csv};
use riccati_game::riccati::{
    solve_finite_horizon, solve_stabilizing, RiccatiKind, StabilizingOptions,
};
use riccati_game::synthesis::{cost_of_trajectory, simulate_closed_loop, value_from_riccati};
use riccati_game::{build_problem, AlphaPolicy, Error, ProblemSpec, Vector};
use serde::Serialize;

use crate::manifest::{sha256_hex, Output, RunIdentity, RunManifest};
use crate::{
    CliError, GameArgs, GlobalArgs, Overrides, RiccatiArgs, SynthesizeArgs, EXIT_NO_FIXED_POINT,
    EXIT_OK, EXIT_UNVERIFIED,
};

pub(crate) struct Loaded {
    pub spec: ProblemSpec,
    pub path: PathBuf,
    pub sha256: String,
}

pub(crate) fn load(global: &GlobalArgs) -> Result<Loaded, CliError> {
    let path = global
        .config
        .clone()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let bytes = fs::read(&path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Usage("config is not UTF-8".into()))?;
    let spec = build_problem(&text)?;
    Ok(Loaded {
        spec,
        path,
        sha256: sha256_hex(&bytes),
    })
}

pub(crate) fn open_output(
    global: &GlobalArgs,
    loaded: &Loaded,
    command: &str,
    overrides: Overrides,
    tolerances: &[(&str, f64)],
) -> Result<Output, CliError> {
    let identity = RunIdentity {
        command: command.to_string(),
        config_sha256: loaded.sha256.clone(),
        overrides,
        tolerances: tolerances
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        seed: global.seed,
    };
    let manifest = RunManifest::new(identity, &loaded.path, &global.out, global.jobs);
    Output::create(&manifest)
}

fn overrides(pairs: &[(&str, String)]) -> Overrides {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect::<BTreeMap<_, _>>()
}

fn initial_state(spec: &ProblemSpec, text: &str) -> Result<Vector, CliError> {
    let x0 = parse_vector_arg(text)?;
    if x0.len() != spec.dim_state {
        return Err(Error::DimensionMismatch {
            what: "x0".into(),
            expected: spec.dim_state.to_string(),
            found: x0.len().to_string(),
        }
        .into());
    }
    if !spec.omega.contains(&x0) {
        return Err(Error::OutsideDomain(x0.iter().cloned().collect()).into());
    }
    Ok(x0)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CertificateOut {
    Stabilizing {
        horizon: f64,
        previous_horizon: f64,
        gap: f64,
        tol: f64,
        sweeps: usize,
        window_end: f64,
    },
    FiniteHorizon {
        horizon: f64,
    },
}

pub(crate) fn riccati(global: &GlobalArgs, args: &RiccatiArgs) -> Result<i32, CliError> {
    let loaded = load(global)?;
    let spec = &loaded.spec;
    let t = args.t.unwrap_or(spec.grid.t0);
    let alpha = match args.alpha.parse::<f64>() {
        Ok(c) => AlphaPolicy::constant_forever(c, t)?,
        Err(_) => parse_alpha_csv(&fs::read_to_string(&args.alpha)?)?,
    };
    let out = open_output(
        global,
        &loaded,
        "riccati",
        overrides(&[
            ("alpha", args.alpha.clone()),
            ("horizon", args.horizon.clone()),
            ("t", t.to_string()),
        ]),
        &[("stabilizing_gap", args.tol), ("dt", spec.grid.dt)],
    )?;
    let sol = if args.horizon == "stabilizing" {
        let mut opts = StabilizingOptions::for_spec(spec);
        opts.tol = args.tol;
        solve_stabilizing(spec, &alpha, t, t + spec.grid.t_eval, &opts)?
    } else {
        let span: f64 = args.horizon.parse().map_err(|_| {
            CliError::Usage(format!(
                "--horizon `{}` is neither a number nor `stabilizing`",
                args.horizon
            ))
        })?;
        if !(span >= 0.0) || !span.is_finite() {
            return Err(CliError::Usage("--horizon must be nonnegative".into()));
        }
        solve_finite_horizon(spec, &alpha, t, t + span, spec.grid.dt)?
    };
    out.write_text("p.csv", &riccati_csv(&sol))?;
    let cert = match &sol.kind {
        RiccatiKind::Stabilizing(c) => CertificateOut::Stabilizing {
            horizon: c.horizon,
            previous_horizon: c.previous_horizon,
            gap: c.gap,
            tol: c.tol,
            sweeps: c.sweeps,
            window_end: sol.end(),
        },
        RiccatiKind::FiniteHorizon { horizon } => {
            CertificateOut::FiniteHorizon { horizon: *horizon }
        }
    };
    out.write_json("certificate.json", &cert)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ValueOut {
    value: f64,
    truncated_cost: f64,
    tail: f64,
    rel_gap: f64,
    exit_time: Option<f64>,
    ipc_checked: bool,
    verified: bool,
}

#[derive(Serialize)]
struct IpcOut<'a> {
    holds: bool,
    #[serde(flatten)]
    report: &'a IpcReport,
}

pub(crate) fn synthesize(global: &GlobalArgs, args: &SynthesizeArgs) -> Result<i32, CliError> {
    let loaded = load(global)?;
    let spec = &loaded.spec;
    let t = args.t.unwrap_or(spec.grid.t0);
    let x0 = initial_state(spec, &args.x0)?;
    let out = open_output(
        global,
        &loaded,
        "synthesize",
        overrides(&[
            ("x0", args.x0.clone()),
            ("check_ipc", args.check_ipc.to_string()),
            ("density", args.density.to_string()),
            ("time_samples", args.time_samples.to_string()),
            ("t", t.to_string()),
        ]),
        &[("stabilizing_gap", args.tol), ("dt", spec.grid.dt)],
    )?;
    let alpha = AlphaPolicy::zero();
    let mut opts = StabilizingOptions::for_spec(spec);
    opts.tol = args.tol;
    let t_end = t + spec.grid.t_eval;
    let p = solve_stabilizing(spec, &alpha, t, t_end, &opts)?;
    out.write_text("p.csv", &riccati_csv(&p))?;

    let mut ipc_ok = true;
    if args.check_ipc {
        let boundary = sample_boundary(&spec.omega, args.density)?;
        let n = args.time_samples.max(1);
        let times: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    t
                } else {
                    t + (t_end - t) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let report = check_ipc_riccati(spec, &p, &times, &boundary)?;
        ipc_ok = report.holds();
        out.write_json(
            "ipc.json",
            &IpcOut {
                holds: ipc_ok,
                report: &report,
            },
        )?;
    }

    let traj = simulate_closed_loop(spec, &p, &alpha, t, &x0, t_end - t)?;
    out.write_text("trajectory.csv", &trajectory_csv(&traj))?;
    let value = value_from_riccati(spec, &p, &alpha, t, &x0)?;
    let cost = cost_of_trajectory(spec, &traj, &alpha, Some(&p))?;
    let verified = ipc_ok && !traj.exited();
    out.write_json(
        "value.json",
        &ValueOut {
            value,
            truncated_cost: cost.truncated,
            tail: cost.tail.unwrap_or(0.0),
            rel_gap: (cost.total() - value).abs() / (1.0 + value.abs()),
            exit_time: traj.exit_time,
            ipc_checked: args.check_ipc,
            verified,
        },
    )?;
    if let Some(e) = traj.exit_time {
        eprintln!("warning: trajectory leaves the constraint set at s = {e}");
    }
    if !ipc_ok {
        eprintln!("warning: inward-pointing check failed; synthesis is unverified");
    }
    Ok(if verified { EXIT_OK } else { EXIT_UNVERIFIED })
}

pub(crate) fn game(global: &GlobalArgs, args: &GameArgs) -> Result<i32, CliError> {
    let loaded = load(global)?;
    let spec = &loaded.spec;
    let t = args.t.unwrap_or(spec.grid.t0);
    let x0 = initial_state(spec, &args.x0)?;
    if args.alpha_points == 0 || !(args.alpha_max >= 0.0) {
        return Err(CliError::Usage(
            "need --alpha-points >= 1 and --alpha-max >= 0".into(),
        ));
    }
    let out = open_output(
        global,
        &loaded,
        "game",
        overrides(&[
            ("x0", args.x0.clone()),
            ("max_iter", args.max_iter.to_string()),
            ("relaxation", args.relaxation.to_string()),
            ("alpha_max", args.alpha_max.to_string()),
            ("alpha_points", args.alpha_points.to_string()),
            ("t", t.to_string()),
        ]),
        &[
            ("fixed_point", args.tol),
            ("stabilizing_gap", StabilizingOptions::for_spec(spec).tol),
        ],
    )?;
    let opts = CoupledOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        relaxation: args.relaxation,
    };
    let (solution, code) = match solve_coupled(spec, t, &x0, &opts) {
        Ok(s) => (s, EXIT_OK),
        Err(Error::NoFixedPoint { last }) => (*last, EXIT_NO_FIXED_POINT),
        Err(e) => return Err(e.into()),
    };
    write_game(&out, &solution)?;

    let n = args.alpha_points;
    let grid: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                0.0
            } else {
                args.alpha_max * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let sweep = sup_over_constant_alpha(spec, t, &x0, &grid)?;
    let mut csv = String::from("alpha,value\n");
    for e in &sweep.entries {
        let v = e.value.map_or_else(|| "nan".to_string(), |v| v.to_string());
        csv.push_str(&format!("{},{v}\n", e.alpha));
    }
    out.write_text("constant_sweep.csv", &csv)?;
    if code == EXIT_NO_FIXED_POINT {
        eprintln!(
            "error: no fixed point after {} iterations (last update {:.3e})",
            solution.iterations, solution.alpha_update_norm
        );
    }
    Ok(code)
}

fn write_game(out: &Output, solution: &GameSolution) -> Result<(), CliError> {
    out.write_json("game.json", &solution.report())?;
    out.write_text("alpha_star.csv", &alpha_csv(&solution.alpha_star))?;
    out.write_text("trajectory.csv", &trajectory_csv(&solution.xi_star))?;
    Ok(())
}
