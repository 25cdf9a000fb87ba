//! Acceptance criteria. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use riccati_game::constraints::{check_ipc_riccati, gamma_bar, geometric_condition};
use riccati_game::game::sup_over_constant_alpha;
use riccati_game::model::{build_problem_from_value, R_SCALE};
use riccati_game::oracle::{brute_force_value, CostMode, DPProblem};
use riccati_game::riccati::solve_are_constant;
use riccati_game::synthesis::{cost_of_trajectory, value_from_riccati};
use riccati_game::{
    build_problem, sample_boundary, simulate_closed_loop, solve_coupled, solve_stabilizing,
    AlphaPolicy, ConstraintSet, CoupledOptions, ProblemSpec, StabilizingOptions, SymMatrix, Vector,
};
use riccati_game_cli::verify::{hjb_suite, ipc_suite, riccati_suite};
use riccati_game_cli::{Suite, VerifyArgs};
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load(name: &str) -> ProblemSpec {
    build_problem(&std::fs::read_to_string(config_path(name)).unwrap()).unwrap()
}

fn stabilizing(spec: &ProblemSpec) -> riccati_game::RiccatiSolution {
    let (t0, t1) = (spec.grid.t0, spec.grid.t0 + spec.grid.t_eval);
    solve_stabilizing(
        spec,
        &AlphaPolicy::zero(),
        t0,
        t1,
        &StabilizingOptions::for_spec(spec),
    )
    .unwrap()
}

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

const REGRESSION: [&str; 4] = [
    "scalar.json",
    "cubic.json",
    "time_varying.json",
    "ball2d.json",
];

fn coupled_2d() -> ProblemSpec {
    build_problem_from_value(json!({
        "dims": {"state": 2, "control": 1},
        "A": {"variant": "constant", "params": {"value": [[-0.5, 1.0], [-1.0, -0.5]]}},
        "B": {"variant": "constant", "params": {"value": [[0.0], [1.0]]}},
        "K": {"variant": "window", "params": {"value": 3.0, "until": 6.0}},
        "a": {"variant": "linear", "params": {"c": 1}},
        "b": {"variant": "power", "params": {"c": 1, "q": 2}},
        "h": {"variant": "linear", "params": {"matrix": [[1.0, 0.3], [0.0, 1.0]]}},
        "omega": {"variant": "box", "params": {"lo": [-1, -1], "hi": [1, 1]}},
        "grid": {"t0": 0, "dt": 0.01, "t_max": 200, "t_eval": 10}
    }))
    .unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let spec = load("scalar.json");
    let p = stabilizing(&spec);
    let elapsed = start.elapsed().as_secs_f64();
    let exact = (3f64.sqrt() - 1.0) / 2.0;
    let got = p.first().as_matrix()[(0, 0)];
    let are = solve_are_constant(
        &spec.a_at(0.0),
        &spec.b_at(0.0),
        &SymMatrix::scaled_identity(1, R_SCALE),
        &SymMatrix::scaled_identity(1, 1.0),
        1e-12,
    )
    .map_err(|e| e.to_string())?;
    ensure(
        (got - exact).abs() <= 1e-6,
        format!("P = {got}, expected {exact}"),
    )?;
    ensure(
        (are.as_matrix()[(0, 0)] - exact).abs() <= 1e-10,
        "Newton-Kleinman root disagrees".into(),
    )?;
    ensure(elapsed < 1.0, format!("took {elapsed:.3} s"))?;
    Ok(format!(
        "P = {got:.9} (|err| {:.1e}), {elapsed:.3} s",
        (got - exact).abs()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut cases: Vec<(String, ProblemSpec, Vector)> = vec![
        (
            "scalar".into(),
            load("scalar.json"),
            Vector::from_element(1, 0.9),
        ),
        (
            "cubic".into(),
            load("cubic.json"),
            Vector::from_element(1, 0.6),
        ),
        (
            "time_varying".into(),
            load("time_varying.json"),
            Vector::from_element(1, -0.7),
        ),
        (
            "ball2d".into(),
            load("ball2d.json"),
            Vector::from_column_slice(&[0.4, -0.3]),
        ),
    ];
    cases.push((
        "coupled_2d".into(),
        coupled_2d(),
        Vector::from_column_slice(&[0.6, -0.5]),
    ));
    let mut worst = 0.0_f64;
    for (name, spec, x0) in &cases {
        let p = stabilizing(spec);
        let zero = AlphaPolicy::zero();
        let t0 = spec.grid.t0;
        let traj = simulate_closed_loop(spec, &p, &zero, t0, x0, spec.grid.t_eval)
            .map_err(|e| format!("{name}: {e}"))?;
        let cost =
            cost_of_trajectory(spec, &traj, &zero, Some(&p)).map_err(|e| format!("{name}: {e}"))?;
        let value =
            value_from_riccati(spec, &p, &zero, t0, x0).map_err(|e| format!("{name}: {e}"))?;
        let err = (cost.total() - value).abs() / (1.0 + value.abs());
        worst = worst.max(err);
        ensure(
            err <= 1e-3,
            format!("{name}: cost {} vs value {value} ({err:.2e})", cost.total()),
        )?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 30.0, format!("took {elapsed:.1} s"))?;
    Ok(format!(
        "{} instances, worst scaled gap {worst:.2e}, {elapsed:.1} s",
        cases.len()
    ))
}

fn criterion_3() -> Outcome {
    let mut ratios = Vec::new();
    for name in ["scalar.json", "cubic.json", "ball2d.json"] {
        let report = hjb_suite(&load(name));
        let ratio = report
            .checks
            .iter()
            .find(|c| c.name == "order_ratio")
            .and_then(|c| c.value)
            .ok_or_else(|| format!("{name}: no order ratio"))?;
        ensure(
            (3.0..=5.0).contains(&ratio),
            format!("{name}: ratio {ratio:.3}"),
        )?;
        ratios.push(format!("{ratio:.3}"));
    }
    Ok(format!("residual ratio at 2dt/dt: {}", ratios.join(", ")))
}

fn criterion_4() -> Outcome {
    let args = VerifyArgs {
        suite: Suite::Ipc,
        density: 64,
        samples: 50,
    };
    let mut checked = 0;
    for name in REGRESSION {
        let report = ipc_suite(&load(name), &args, 7);
        let margin = report
            .checks
            .iter()
            .find(|c| c.name == "ipc_margin")
            .and_then(|c| c.value);
        if margin.is_some_and(|m| m > 0.0) {
            ensure(report.pass, format!("{name}: {:?}", report.checks))?;
            checked += 1;
        }
    }
    ensure(checked >= 2, format!("only {checked} instances certified"))?;

    let spec = load("outward.json");
    let p = stabilizing(&spec);
    let traj = simulate_closed_loop(
        &spec,
        &p,
        &AlphaPolicy::zero(),
        0.0,
        &Vector::from_element(1, 0.5),
        spec.grid.t_eval,
    )
    .map_err(|e| e.to_string())?;
    let exit = traj.exit_time.ok_or("outward drift did not exit")?;
    let err = (exit - 2f64.ln()).abs();
    ensure(
        err <= 2.0 * spec.grid.dt,
        format!("exit at {exit}, expected ln 2"),
    )?;
    Ok(format!(
        "{checked} certified instances x 50 starts stay in the set; outward exit at {exit:.5} (|err| {err:.1e})"
    ))
}

fn ball_instance(gamma: f64, k: f64) -> ProblemSpec {
    build_problem_from_value(json!({
        "dims": {"state": 2, "control": 2},
        "A": {"variant": "constant", "params": {"value": [[-gamma, 0.0], [0.0, -gamma]]}},
        "B": {"variant": "constant", "params": {"value": [[1, 0], [0, 1]]}},
        "K": {"variant": "exponential", "params": {"value": k, "rate": 0.5}},
        "a": {"variant": "linear", "params": {"c": 1}},
        "b": {"variant": "power", "params": {"c": 1, "q": 2}},
        "h": {"variant": "identity"},
        "omega": {"variant": "ball", "params": {"center": [0, 0], "radius": 1}},
        "grid": {"t0": 0, "dt": 0.01, "t_max": 200, "t_eval": 10}
    }))
    .unwrap()
}

fn criterion_5() -> Outcome {
    let omega = ConstraintSet::unit_ball(2);
    let boundary = sample_boundary(&omega, 64).map_err(|e| e.to_string())?;
    let probe = ball_instance(1.0, 2.0);
    let geo = geometric_condition(&probe, 0.8, &boundary).map_err(|e| e.to_string())?;
    ensure(
        geo.holds && geo.consistent,
        format!("geometric condition: {geo:?}"),
    )?;
    let gbar =
        gamma_bar(&probe, &AlphaPolicy::zero(), geo.rho, geo.theta).map_err(|e| e.to_string())?;
    let times: Vec<f64> = (0..21).map(|i| i as f64 * 0.5).collect();

    let strong = ball_instance(2.0 * gbar + 1.0, 2.0);
    let p = stabilizing(&strong);
    let report = check_ipc_riccati(&strong, &p, &times, &boundary).map_err(|e| e.to_string())?;
    ensure(
        report.holds(),
        format!("IPC fails at gamma = 2 gamma_bar + 1: {report:?}"),
    )?;

    let weak = ball_instance(0.1 * gbar, 20.0);
    let weak_note = match solve_stabilizing(
        &weak,
        &AlphaPolicy::zero(),
        0.0,
        10.0,
        &StabilizingOptions::for_spec(&weak),
    ) {
        Ok(p) => {
            let r = check_ipc_riccati(&weak, &p, &times, &boundary).map_err(|e| e.to_string())?;
            format!("weak margin {:.3e}", r.worst_margin)
        }
        Err(e) => format!("weak solve: {e}"),
    };
    Ok(format!(
        "rho {:.3}, theta {:.3}, gamma_bar {gbar:.4}; margin {:.3e} at {} samples; {weak_note}",
        geo.rho, geo.theta, report.worst_margin, report.n_samples
    ))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let spec = load("scalar.json");
    let x0 = Vector::from_element(1, 0.7);
    let sol =
        solve_coupled(&spec, 0.0, &x0, &CoupledOptions::default()).map_err(|e| e.to_string())?;
    ensure(
        sol.converged && sol.alpha_update_norm < 1e-6 && sol.iterations <= 50,
        format!(
            "update {} after {} iterations",
            sol.alpha_update_norm, sol.iterations
        ),
    )?;
    let grid: Vec<f64> = (0..=10).map(|i| 0.1 * i as f64).collect();
    let sweep = sup_over_constant_alpha(&spec, 0.0, &x0, &grid).map_err(|e| e.to_string())?;
    for e in &sweep.entries {
        let v = e
            .value
            .ok_or(format!("sweep failed at alpha {}", e.alpha))?;
        ensure(
            sol.w >= v - 1e-6,
            format!("constant alpha {} gives {v} > W {}", e.alpha, sol.w),
        )?;
    }
    let dp = DPProblem {
        state_resolution: vec![201],
        control_resolution: 41,
        u_max: 1.0,
        t0: 0.0,
        horizon: 2.0,
        n_steps: 400,
        mode: CostMode::Sup,
    };
    let table = brute_force_value(&dp, &spec).map_err(|e| e.to_string())?;
    let v_dp = table.value_at(&x0);
    let gap = (v_dp - sol.w).abs() / sol.w.abs();
    ensure(gap <= 0.05, format!("DP {v_dp} vs W {} ({gap:.3})", sol.w))?;
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 60.0, format!("took {elapsed:.1} s"))?;
    Ok(format!(
        "W {:.6} in {} iterations; best constant {:.6}; DP {v_dp:.6} (gap {:.2}%), {elapsed:.1} s",
        sol.w,
        sol.iterations,
        sweep.w_lower,
        100.0 * gap
    ))
}

fn criterion_7() -> Outcome {
    let mut names: Vec<&str> = REGRESSION.to_vec();
    names.push("outward.json");
    for name in &names {
        let report = riccati_suite(&load(name));
        ensure(report.pass, format!("{name}: {:?}", report.checks))?;
    }
    let report = riccati_suite(&coupled_2d());
    ensure(report.pass, format!("coupled_2d: {:?}", report.checks))?;
    Ok(format!("{} instances", names.len() + 1))
}

fn criterion_8() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let status = Command::new(env!("CARGO_BIN_EXE_riccati-game"))
            .arg("--config")
            .arg(config_path("scalar.json"))
            .arg("--out")
            .arg(dir.path())
            .args([
                "--jobs",
                if i == 0 { "1" } else { "2" },
                "verify",
                "--suite",
                "all",
            ])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(
            status.status.success(),
            format!("verify exited {:?}", status.status.code()),
        )?;
        reports.push(std::fs::read(dir.path().join("report.json")).map_err(|e| e.to_string())?);
    }
    ensure(reports[0] == reports[1], "reports differ".into())?;
    Ok(format!("two runs, {} identical bytes", reports[0].len()))
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 8] = [
        (1, "scalar Riccati root", criterion_1),
        (2, "value equals closed-loop cost", criterion_2),
        (3, "second-order HJB residual", criterion_3),
        (
            4,
            "feasibility under the inward-pointing condition",
            criterion_4,
        ),
        (5, "geometric condition to inward pointing", criterion_5),
        (6, "game fixed point", criterion_6),
        (7, "Riccati structure", criterion_7),
        (8, "deterministic reports", criterion_8),
    ];
    let mut failed = 0;
    for (n, title, f) in criteria {
        if let Some(pat) = &filter {
            if !format!("criterion_{n}").contains(pat.as_str()) {
                continue;
            }
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {n}: {title}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n}: {title}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
