use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riccati_game::constraints::{check_ipc_riccati, sample_boundary};
use riccati_game::model::{StateWeight, R_SCALE};
use riccati_game::numerics::{eig_sym_extremes, max_abs};
use riccati_game::oracle::{brute_force_value, CostMode, DPProblem};
use riccati_game::riccati::{
    check_monotone_in_t, solve_are_constant, solve_finite_horizon, solve_stabilizing,
    StabilizingOptions,
};
use riccati_game::synthesis::{
    feedback_control, finite_value_from_riccati, hjb_residual, simulate_closed_loop,
};
use riccati_game::{AlphaPolicy, Error, ProblemSpec, SymMatrix, Vector};
use serde::Serialize;

use crate::commands::{load, open_output};
use crate::{CliError, GlobalArgs, Suite, VerifyArgs, EXIT_OK, EXIT_VERIFY_FAILED};

const EIG_FLOOR: f64 = -1e-9;
const HJB_RATIO: (f64, f64) = (3.0, 5.0);
/// Residuals below this are rounding noise and carry no order information.
const HJB_FLOOR: f64 = 1e-10;
const ORACLE_REL: f64 = 0.05;
const ARE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
}

fn check(name: &str, pass: bool, value: f64, threshold: f64) -> Check {
    Check {
        name: name.into(),
        pass,
        value: Some(value),
        threshold: Some(threshold),
    }
}

/// Reported but not gated.
fn info(name: &str, value: f64) -> Check {
    Check {
        name: name.into(),
        pass: true,
        value: Some(value),
        threshold: None,
    }
}

fn failed(name: &str, why: &Error) -> Check {
    log::warn!("{name}: {why}");
    Check {
        name: name.into(),
        pass: false,
        value: None,
        threshold: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl SuiteReport {
    fn new(suite: &str, checks: Vec<Check>, note: Option<String>) -> Self {
        Self {
            suite: suite.into(),
            pass: checks.iter().all(|c| c.pass),
            checks,
            note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub suites: Vec<SuiteReport>,
}

pub(crate) fn run(global: &GlobalArgs, args: &VerifyArgs) -> Result<i32, CliError> {
    let loaded = load(global)?;
    let spec = &loaded.spec;
    let suite_name = format!("{:?}", args.suite).to_lowercase();
    let out = open_output(
        global,
        &loaded,
        "verify",
        [
            ("suite".to_string(), suite_name),
            ("density".to_string(), args.density.to_string()),
            ("samples".to_string(), args.samples.to_string()),
        ]
        .into_iter()
        .collect(),
        &[
            ("min_eig", EIG_FLOOR),
            ("hjb_ratio_lo", HJB_RATIO.0),
            ("hjb_ratio_hi", HJB_RATIO.1),
            ("hjb_floor", HJB_FLOOR),
            ("oracle_rel", ORACLE_REL),
            ("are", ARE_TOL),
            ("stabilizing_gap", StabilizingOptions::for_spec(spec).tol),
        ],
    )?;
    let suites = match args.suite {
        Suite::Riccati => vec![riccati_suite(spec)],
        Suite::Ipc => vec![ipc_suite(spec, args, global.seed)],
        Suite::Hjb => vec![hjb_suite(spec)],
        Suite::Oracle => vec![oracle_suite(spec)],
        Suite::All => vec![
            riccati_suite(spec),
            ipc_suite(spec, args, global.seed),
            hjb_suite(spec),
            oracle_suite(spec),
        ],
    };
    let report = VerifyReport {
        pass: suites.iter().all(|s| s.pass),
        suites,
    };
    let text = out.write_json("report.json", &report)?;
    print!("{text}");
    Ok(if report.pass {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    })
}

fn window(spec: &ProblemSpec) -> (f64, f64) {
    (spec.grid.t0, spec.grid.t0 + spec.grid.t_eval)
}

pub fn riccati_suite(spec: &ProblemSpec) -> SuiteReport {
    let (t0, t1) = window(spec);
    let zero = AlphaPolicy::zero();
    let mut checks = Vec::new();
    let mut note = None;
    match solve_finite_horizon(spec, &zero, t0, t1, spec.grid.dt) {
        Ok(sol) => {
            let terminal = max_abs(sol.last().as_matrix());
            checks.push(check("terminal_zero", terminal == 0.0, terminal, 0.0));
            let asym = sol
                .p
                .iter()
                .map(|p| max_abs(&(p.as_matrix() - p.as_matrix().transpose())))
                .fold(0.0_f64, f64::max);
            checks.push(check("symmetry", asym == 0.0, asym, 0.0));
            let min_eig = sol
                .p
                .iter()
                .map(|p| eig_sym_extremes(p).0)
                .fold(f64::INFINITY, f64::min);
            checks.push(check(
                "min_eigenvalue",
                min_eig >= EIG_FLOOR,
                min_eig,
                EIG_FLOOR,
            ));
        }
        Err(e) => checks.push(failed("finite_horizon", &e)),
    }
    let mid = t0 + 0.5 * (t1 - t0);
    let mut worst = f64::INFINITY;
    let mut mono_err = None;
    for s in [t0, t0 + 0.25 * (t1 - t0)] {
        match check_monotone_in_t(spec, &zero, t0, s, (mid, t1), spec.grid.dt) {
            Ok(m) => worst = worst.min(m.min_eig),
            Err(e) => mono_err = Some(e),
        }
    }
    match mono_err {
        None => checks.push(check(
            "monotone_in_horizon",
            worst >= EIG_FLOOR,
            worst,
            EIG_FLOOR,
        )),
        Some(e) => checks.push(failed("monotone_in_horizon", &e)),
    }
    let opts = StabilizingOptions::for_spec(spec);
    match solve_stabilizing(spec, &zero, t0, t1, &opts) {
        Ok(stab) => {
            let cert = stab
                .certificate()
                .expect("stabilizing solve carries a certificate");
            checks.push(check(
                "stabilizing_gap",
                cert.gap < opts.tol,
                cert.gap,
                opts.tol,
            ));
            if let Some(are) = constant_are(spec) {
                match are {
                    Ok(p) => {
                        let diff = (stab.first() - &p).spectral_norm();
                        checks.push(check("are_agreement", diff <= ARE_TOL, diff, ARE_TOL));
                    }
                    // no stabilizing root exists; the horizon limit is then
                    // only the minimal solution and there is nothing to compare
                    Err(Error::NotStabilizable(why)) => {
                        note = Some(format!("algebraic cross-check not applicable: {why}"));
                    }
                    Err(e) => checks.push(failed("are_agreement", &e)),
                }
            }
        }
        Err(e) => checks.push(failed("stabilizing_gap", &e)),
    }
    SuiteReport::new("riccati", checks, note)
}

/// Newton–Kleinman root when the data are time invariant.
fn constant_are(spec: &ProblemSpec) -> Option<Result<SymMatrix, Error>> {
    let StateWeight::Constant { value } = spec.state_weight else {
        return None;
    };
    if !spec.drift.is_constant() || !spec.input.is_constant() {
        return None;
    }
    let n = spec.dim_state;
    let q = SymMatrix::scaled_identity(n, 0.5 * value + spec.reward.value(0.0));
    let r = SymMatrix::scaled_identity(spec.dim_control, R_SCALE);
    Some(solve_are_constant(
        &spec.a_at(0.0),
        &spec.b_at(0.0),
        &r,
        &q,
        1e-9,
    ))
}

pub fn ipc_suite(spec: &ProblemSpec, args: &VerifyArgs, seed: u64) -> SuiteReport {
    let (t0, t1) = window(spec);
    let zero = AlphaPolicy::zero();
    let mut checks = Vec::new();
    let p = match solve_stabilizing(spec, &zero, t0, t1, &StabilizingOptions::for_spec(spec)) {
        Ok(p) => p,
        Err(e) => return SuiteReport::new("ipc", vec![failed("stabilizing", &e)], None),
    };
    let boundary = match sample_boundary(&spec.omega, args.density) {
        Ok(b) => b,
        Err(e) => return SuiteReport::new("ipc", vec![failed("boundary_sampling", &e)], None),
    };
    let times: Vec<f64> = (0..21).map(|i| t0 + (t1 - t0) * i as f64 / 20.0).collect();
    let report = match check_ipc_riccati(spec, &p, &times, &boundary) {
        Ok(r) => r,
        Err(e) => return SuiteReport::new("ipc", vec![failed("ipc_margin", &e)], None),
    };
    checks.push(check(
        "ipc_margin",
        report.holds(),
        report.worst_margin,
        0.0,
    ));
    let mut note = None;
    if report.holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let starts = spec
            .omega
            .sample_interior(|| rng.gen::<f64>(), args.samples);
        let mut exits = 0usize;
        let mut min_margin = f64::INFINITY;
        for x0 in &starts {
            match simulate_closed_loop(spec, &p, &zero, t0, x0, t1 - t0) {
                Ok(traj) => {
                    exits += usize::from(traj.exited());
                    min_margin = min_margin.min(traj.min_margin());
                }
                Err(e) => {
                    checks.push(failed("closed_loop_feasible", &e));
                    return SuiteReport::new("ipc", checks, None);
                }
            }
        }
        checks.push(check("closed_loop_exits", exits == 0, exits as f64, 0.0));
        checks.push(check(
            "closed_loop_min_margin",
            min_margin >= -spec.omega.tol_active,
            min_margin,
            -spec.omega.tol_active,
        ));
        note = Some(format!("{} sampled initial states", starts.len()));
    }
    SuiteReport::new("ipc", checks, note)
}

fn hjb_probe_states(spec: &ProblemSpec) -> Vec<Vector> {
    let (lo, hi) = spec.omega.bounds();
    if spec.dim_state == 1 {
        return (0..20)
            .map(|j| Vector::from_element(1, lo[0] + (hi[0] - lo[0]) * j as f64 / 19.0))
            .collect();
    }
    // deterministic interior points along the segment interior -> corners
    let c = &spec.omega.interior;
    (0..20)
        .map(|j| {
            let dir = Vector::from_fn(spec.dim_state, |i, _| {
                if (j >> (i % 4)) & 1 == 1 {
                    hi[i]
                } else {
                    lo[i]
                }
            }) - c;
            let mut x = c + dir * (0.9 * (j as f64 + 1.0) / 20.0);
            while !spec.omega.contains(&x) {
                x = c + (&x - c) * 0.5;
            }
            x
        })
        .collect()
}

pub fn hjb_suite(spec: &ProblemSpec) -> SuiteReport {
    let (t0, t1) = window(spec);
    let zero = AlphaPolicy::zero();
    let states = hjb_probe_states(spec);
    let dt = spec.grid.dt;
    let coarse_dt = 2.0 * dt;
    let times: Vec<f64> = (0..20)
        .map(|i| t0 + coarse_dt + (t1 - t0 - 2.0 * coarse_dt) * i as f64 / 19.0)
        .collect();
    let residual = |step: f64| -> Result<f64, Error> {
        let p = solve_finite_horizon(spec, &zero, t0, t1, step)?;
        let mut worst = 0.0_f64;
        for &s in &times {
            for x in &states {
                worst = worst.max(hjb_residual(spec, &p, &zero, s, x)?);
            }
        }
        Ok(worst)
    };
    let (coarse, fine) = match (residual(coarse_dt), residual(dt)) {
        (Ok(c), Ok(f)) => (c, f),
        (Err(e), _) | (_, Err(e)) => {
            return SuiteReport::new("hjb", vec![failed("hjb_residual", &e)], None)
        }
    };
    let ratio = coarse / fine;
    let mut checks = vec![
        check("residual_dt", fine.is_finite(), fine, HJB_FLOOR),
        check("residual_2dt", coarse.is_finite(), coarse, HJB_FLOOR),
    ];
    let note;
    if fine < HJB_FLOOR {
        note = Some("residual at rounding level; order check not applicable".to_string());
        checks.push(check("order_ratio", true, ratio, HJB_RATIO.0));
    } else {
        note = None;
        checks.push(check(
            "order_ratio",
            (HJB_RATIO.0..=HJB_RATIO.1).contains(&ratio),
            ratio,
            HJB_RATIO.0,
        ));
    }
    SuiteReport::new("hjb", checks, note)
}

pub fn oracle_suite(spec: &ProblemSpec) -> SuiteReport {
    let n = spec.dim_state;
    if n > 2 {
        return SuiteReport::new(
            "oracle",
            Vec::new(),
            Some(format!(
                "skipped: dynamic programming oracle needs n <= 2, got {n}"
            )),
        );
    }
    let t0 = spec.grid.t0;
    let horizon = spec.grid.t_eval.min(4.0);
    let zero = AlphaPolicy::zero();
    let (lo, hi) = spec.omega.bounds();
    let c = spec.omega.interior.clone();
    let mut x0 = &c + (&hi - &c) * 0.5;
    while !spec.omega.contains(&x0) {
        x0 = &c + (&x0 - &c) * 0.5;
    }
    let p = match solve_finite_horizon(spec, &zero, t0, t0 + horizon, spec.grid.dt) {
        Ok(p) => p,
        Err(e) => return SuiteReport::new("oracle", vec![failed("riccati_value", &e)], None),
    };
    let reference = match finite_value_from_riccati(spec, &p, &zero, t0, t0 + horizon, &x0) {
        Ok(v) => v,
        Err(e) => return SuiteReport::new("oracle", vec![failed("riccati_value", &e)], None),
    };
    // control box wide enough for the Riccati feedback on the state box
    let mut u_max = 1.0_f64;
    for corner in [lo.clone(), hi.clone(), x0.clone()] {
        if let Ok(u) = feedback_control(spec, &p, t0, &corner) {
            u_max = u_max.max(2.0 * u.amax());
        }
    }
    let (states, controls, steps) = if n == 1 {
        (vec![401], 161, 400)
    } else {
        (vec![41, 41], 21, 100)
    };
    let dp = DPProblem {
        state_resolution: states,
        control_resolution: controls,
        u_max,
        t0,
        horizon,
        n_steps: steps,
        mode: CostMode::Fixed(zero),
    };
    let table = match brute_force_value(&dp, spec) {
        Ok(t) => t,
        Err(e) => return SuiteReport::new("oracle", vec![failed("oracle_value", &e)], None),
    };
    let value = table.value_at(&x0);
    let scale = reference.abs().max(1e-12);
    let lower = reference - ORACLE_REL * scale;
    let gap = (value - reference) / scale;
    // the 2-D grid is too coarse for a two-sided bound at this cost; only
    // the one-sided comparison is gated there
    let checks = vec![
        check("oracle_above_riccati", value >= lower, value, lower),
        if n == 1 {
            check("oracle_rel_gap", gap.abs() <= ORACLE_REL, gap, ORACLE_REL)
        } else {
            info("oracle_rel_gap", gap)
        },
    ];
    let note = format!(
        "x0 = {:?}, horizon {horizon}, cfl ratio {:.3}",
        x0.as_slice(),
        table.cfl_ratio
    );
    SuiteReport::new("oracle", checks, Some(note))
}
