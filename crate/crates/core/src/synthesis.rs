//! Closed-loop simulation under the Riccati feedback, value formulas and
//! HJB checks.
//!
//! The feedback is `u = -R^{-1} B^T P h(x)` and the closed loop
//! `xi' = grad h(xi)^{-1} (A - B R^{-1} B^T P) h(xi)`. With `R = I/2` both carry
//! a factor 2.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{eval_dynamics, eval_lagrangian, AlphaPolicy, ProblemSpec};
use crate::numerics::{hermite, rk4_step, TimeGrid, Vector};
use crate::riccati::RiccatiSolution;

/// Sampled trajectory-control pair with running and accumulated cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub s: Vec<f64>,
    pub xi: Vec<Vector>,
    pub u: Vec<Vector>,
    /// `xi'(s_i)`
    pub velocity: Vec<Vector>,
    /// `l(s_i, xi_i, u_i, alpha(s_i))`
    pub running_cost: Vec<f64>,
    /// Integral of the running cost from `s_0` to `s_i`.
    pub cum_cost: Vec<f64>,
    /// Signed constraint margin, negative outside the set.
    pub margin: Vec<f64>,
    /// First exit from the constraint set, interpolated between nodes.
    pub exit_time: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn end(&self) -> f64 {
        *self.s.last().expect("nonempty trajectory")
    }

    pub fn last_state(&self) -> &Vector {
        self.xi.last().expect("nonempty trajectory")
    }

    pub fn total_cost(&self) -> f64 {
        self.cum_cost.last().copied().unwrap_or(0.0)
    }

    pub fn min_margin(&self) -> f64 {
        self.margin.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn exited(&self) -> bool {
        self.exit_time.is_some()
    }
}

/// `-R^{-1} B(s)^T P(s) h(x)`.
pub fn feedback_control(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    s: f64,
    x: &Vector,
) -> Result<Vector> {
    let ps = p.at(s)?;
    let hx = spec.h.forward(x);
    Ok(-(spec.b_at(s).transpose() * (ps.as_matrix() * hx)) * spec.r_inv_scale())
}

/// Closed loop from `(t, x0)` over `[t, t + t_sim]` on the grid of `p`.
pub fn simulate_closed_loop(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    alpha: &AlphaPolicy,
    t: f64,
    x0: &Vector,
    t_sim: f64,
) -> Result<Trajectory> {
    let m = spec.dim_control;
    simulate_perturbed(spec, p, alpha, t, x0, t_sim, &|_| Vector::zeros(m))
}

/// Same as [`simulate_closed_loop`] with control `feedback + w(s)`.
pub fn simulate_perturbed(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    alpha: &AlphaPolicy,
    t: f64,
    x0: &Vector,
    t_sim: f64,
    w: &dyn Fn(f64) -> Vector,
) -> Result<Trajectory> {
    if x0.len() != spec.dim_state {
        return Err(Error::DimensionMismatch {
            what: "initial state".into(),
            expected: spec.dim_state.to_string(),
            found: x0.len().to_string(),
        });
    }
    if !spec.omega.contains(x0) {
        return Err(Error::OutsideDomain(x0.iter().cloned().collect()));
    }
    if !(t_sim >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "simulation span {t_sim} is negative"
        )));
    }
    for s in [t, t + t_sim] {
        if !p.grid.contains(s) {
            return Err(Error::OutOfGrid {
                s,
                start: p.start(),
                end: p.end(),
            });
        }
    }
    let grid = TimeGrid::spanning(t, t + t_sim, p.grid.dt)?;
    let (lo, hi) = (p.start(), p.end());
    let clamp = |s: f64| s.clamp(lo, hi);
    let control = |s: f64, x: &Vector| -> Result<Vector> {
        Ok(feedback_control(spec, p, clamp(s), x)? + w(s))
    };
    // Errors inside the RK4 stages are surfaced as NaN and caught below.
    let field = |s: f64, x: &Vector| -> Vector {
        control(s, x)
            .and_then(|u| eval_dynamics(spec, s, x, &u))
            .unwrap_or_else(|_| Vector::from_element(x.len(), f64::NAN))
    };

    let len = grid.len();
    let mut traj = Trajectory {
        s: Vec::with_capacity(len),
        xi: Vec::with_capacity(len),
        u: Vec::with_capacity(len),
        velocity: Vec::with_capacity(len),
        running_cost: Vec::with_capacity(len),
        cum_cost: Vec::with_capacity(len),
        margin: Vec::with_capacity(len),
        exit_time: None,
    };
    let tol = spec.omega.tol_active;
    let mut x = x0.clone();
    let mut cum = 0.0;
    for i in 0..=grid.n_steps {
        let s = grid.node(i);
        let u = control(s, &x)?;
        let v = eval_dynamics(spec, s, &x, &u)?;
        if !x
            .iter()
            .chain(v.iter())
            .chain(u.iter())
            .all(|c| c.is_finite())
        {
            return Err(Error::NonFiniteState { time: s });
        }
        let margin = spec.omega.margin(&x);
        if traj.exit_time.is_none() && margin < -tol {
            let exit = match (traj.s.last(), traj.margin.last()) {
                (Some(&s_prev), Some(&m_prev)) if m_prev >= -tol => {
                    s_prev + (s - s_prev) * m_prev / (m_prev - margin)
                }
                _ => s,
            };
            traj.exit_time = Some(exit);
        }
        if i > 0 {
            let j = i - 1;
            let h = grid.dt;
            let (s_prev, x_prev, v_prev) = (traj.s[j], &traj.xi[j], &traj.velocity[j]);
            let a_val = alpha.at(s_prev + 0.5 * h);
            let mid_s = s_prev + 0.5 * h;
            let x_mid = hermite(s_prev, h, x_prev, v_prev, &x, &v, mid_s);
            let u_mid = control(mid_s, &x_mid)?;
            let l_left = eval_lagrangian(spec, s_prev, x_prev, &traj.u[j], a_val)?;
            let l_mid = eval_lagrangian(spec, mid_s, &x_mid, &u_mid, a_val)?;
            let l_right = eval_lagrangian(spec, s, &x, &u, a_val)?;
            cum += h / 6.0 * (l_left + 4.0 * l_mid + l_right);
        }
        traj.running_cost
            .push(eval_lagrangian(spec, s, &x, &u, alpha.at(s))?);
        traj.cum_cost.push(cum);
        traj.s.push(s);
        traj.margin.push(margin);
        traj.u.push(u);
        traj.velocity.push(v);
        traj.xi.push(x.clone());
        if i < grid.n_steps {
            x = rk4_step(&field, s, grid.dt, &x);
        }
    }
    if let Some(e) = traj.exit_time {
        log::debug!(
            "trajectory from {:?} leaves the constraint set at s = {e:.6}",
            x0.as_slice()
        );
    }
    Ok(traj)
}

/// `<h(x), P(t) h(x)> - int_t^inf b(alpha(s)) ds` for a stabilizing `P`.
pub fn value_from_riccati(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    alpha: &AlphaPolicy,
    t: f64,
    x: &Vector,
) -> Result<f64> {
    if !p.is_stabilizing() {
        return Err(Error::InvalidArgument(
            "infinite-horizon value needs a stabilizing solution".into(),
        ));
    }
    let quad = p.at(t)?.quad_form(&spec.h.forward(x));
    let tail = alpha.integral(|a| spec.penalty.value(a), t, f64::INFINITY)?;
    Ok(quad - tail)
}

/// `<h(x), P_T(t) h(x)> - int_t^T b(alpha(s)) ds`.
pub fn finite_value_from_riccati(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    alpha: &AlphaPolicy,
    t: f64,
    horizon: f64,
    x: &Vector,
) -> Result<f64> {
    let quad = p.at(t)?.quad_form(&spec.h.forward(x));
    Ok(quad - alpha.integral(|a| spec.penalty.value(a), t, horizon)?)
}

/// `inf_u <p, f(s, x, u)> + l(s, x, u, alpha)` in closed form.
pub fn hamiltonian(
    spec: &ProblemSpec,
    s: f64,
    x: &Vector,
    costate: &Vector,
    alpha: f64,
) -> Result<f64> {
    let hx = spec.h.forward(x);
    let w = spec.h.apply_jacobian_inverse_transpose(x, costate)?;
    let drift = w.dot(&(spec.a_at(s) * &hx));
    let bw = spec.b_at(s).transpose() * &w;
    // minimizer u = -R^{-1} B^T w / 2
    let control = -0.25 * spec.r_inv_scale() * bw.norm_squared();
    Ok(drift + control + spec.q_scale(s, alpha) * hx.norm_squared() - spec.penalty.value(alpha))
}

/// `|d_s V + H(s, x, grad_x V)|` for `V = <h, P h> - int_s^T b(alpha)`, with
/// `d_s P` by central differences over the grid spacing of `p`.
pub fn hjb_residual(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    alpha: &AlphaPolicy,
    s: f64,
    x: &Vector,
) -> Result<f64> {
    let dt = p.grid.dt;
    let slack = 1e-9 * dt;
    if s - dt < p.start() - slack || s + dt > p.end() + slack {
        return Err(Error::OutOfGrid {
            s,
            start: p.start() + dt,
            end: p.end() - dt,
        });
    }
    let hi = (s + dt).min(p.end());
    let lo = (s - dt).max(p.start());
    let dp = (p.at(hi)?.into_matrix() - p.at(lo)?.into_matrix()) / (hi - lo);
    let a_val = alpha.at(s);
    let hx = spec.h.forward(x);
    let ds_v = hx.dot(&(&dp * &hx)) + spec.penalty.value(a_val);
    let ps = p.at(s)?;
    let grad_v = spec.h.jacobian(x).transpose() * (ps.as_matrix() * &hx) * 2.0;
    Ok((ds_v + hamiltonian(spec, s, x, &grad_v, a_val)?).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostReport {
    /// Quadrature of the running cost over the simulated span.
    pub truncated: f64,
    /// Model-based remainder `<h(xi_end), P(s_end) h(xi_end)> - int b`, when a
    /// Riccati solution is supplied.
    pub tail: Option<f64>,
}

impl CostReport {
    pub fn total(&self) -> f64 {
        self.truncated + self.tail.unwrap_or(0.0)
    }
}

/// Accumulated cost of `traj`, plus the Riccati tail beyond its end.
pub fn cost_of_trajectory(
    spec: &ProblemSpec,
    traj: &Trajectory,
    alpha: &AlphaPolicy,
    p: Option<&RiccatiSolution>,
) -> Result<CostReport> {
    let truncated = traj.total_cost();
    let tail = match p {
        Some(p) => {
            let s_end = traj.end();
            let upper = if p.is_stabilizing() {
                f64::INFINITY
            } else {
                p.end()
            };
            let quad = p.at(s_end)?.quad_form(&spec.h.forward(traj.last_state()));
            Some(quad - alpha.integral(|a| spec.penalty.value(a), s_end, upper)?)
        }
        None => None,
    };
    Ok(CostReport { truncated, tail })
}

/// Empirical constant `C` in `|xi_{u + delta w} - xi_u| <= C delta`: the
/// largest ratio over the supplied `(delta, w)` pairs, `w` held constant.
pub fn closeness_constant(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    alpha: &AlphaPolicy,
    t: f64,
    x0: &Vector,
    t_sim: f64,
    trials: &[(f64, Vector)],
) -> Result<f64> {
    let base = simulate_closed_loop(spec, p, alpha, t, x0, t_sim)?;
    let mut worst = 0.0_f64;
    for (delta, w) in trials {
        if !(*delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta = {delta}")));
        }
        let push = w * *delta;
        let pert = simulate_perturbed(spec, p, alpha, t, x0, t_sim, &|_| push.clone())?;
        let dev = base
            .xi
            .iter()
            .zip(&pert.xi)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0_f64, f64::max);
        worst = worst.max(dev / delta);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scalar;
    use crate::model::{StateWeight, TimeMatrix};
    use crate::numerics::Mat;
    use crate::riccati::{solve_finite_horizon, solve_stabilizing, StabilizingOptions};

    fn v(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    fn root() -> f64 {
        (3.0f64.sqrt() - 1.0) / 2.0
    }

    fn stab(spec: &ProblemSpec, t_eval: f64) -> RiccatiSolution {
        solve_stabilizing(
            spec,
            &AlphaPolicy::zero(),
            0.0,
            t_eval,
            &StabilizingOptions::for_spec(spec),
        )
        .unwrap()
    }

    #[test]
    fn feedback_examples() {
        let spec = scalar();
        let p = stab(&spec, 1.0);
        let u = feedback_control(&spec, &p, 0.0, &v(1.0)).unwrap();
        assert!((u[0] - (1.0 - 3.0f64.sqrt())).abs() < 1e-8);
        assert_eq!(feedback_control(&spec, &p, 0.5, &v(0.0)).unwrap()[0], 0.0);
        let zero = RiccatiSolution::zeros(TimeGrid::new(0.0, 0.1, 10).unwrap(), 1);
        assert_eq!(
            feedback_control(&spec, &zero, 0.5, &v(0.7)).unwrap()[0],
            0.0
        );
        assert!(matches!(
            feedback_control(&spec, &p, 1.5, &v(1.0)),
            Err(Error::OutOfGrid { .. })
        ));
    }

    #[test]
    fn closed_loop_rate() {
        let spec = scalar();
        let p = stab(&spec, 5.0);
        let traj =
            simulate_closed_loop(&spec, &p, &AlphaPolicy::zero(), 0.0, &v(0.9), 5.0).unwrap();
        let rate = 3.0f64.sqrt();
        for (s, x) in traj.s.iter().zip(&traj.xi) {
            assert!((x[0] - 0.9 * (-rate * s).exp()).abs() < 1e-7);
        }
        assert!(!traj.exited());
        assert!(traj.cum_cost.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn equilibrium_stays_put() {
        let spec = scalar();
        let p = stab(&spec, 2.0);
        let traj =
            simulate_closed_loop(&spec, &p, &AlphaPolicy::zero(), 0.0, &v(0.0), 2.0).unwrap();
        assert!(traj.xi.iter().all(|x| x[0] == 0.0));
        assert_eq!(traj.total_cost(), 0.0);
    }

    #[test]
    fn outward_escape_time() {
        let mut spec = scalar();
        spec.drift = TimeMatrix::Constant(Mat::from_element(1, 1, 1.0));
        let p = RiccatiSolution::zeros(TimeGrid::new(0.0, 0.01, 200).unwrap(), 1);
        let traj =
            simulate_closed_loop(&spec, &p, &AlphaPolicy::zero(), 0.0, &v(0.5), 2.0).unwrap();
        let exit = traj.exit_time.unwrap();
        assert!((exit - 2.0f64.ln()).abs() <= 2.0 * 0.01);
        assert!(traj.s.len() == 201);
    }

    #[test]
    fn outside_start_rejected() {
        let spec = scalar();
        let p = stab(&spec, 1.0);
        let r = simulate_closed_loop(&spec, &p, &AlphaPolicy::zero(), 0.0, &v(1.5), 1.0);
        assert!(matches!(r, Err(Error::OutsideDomain(_))));
    }

    #[test]
    fn value_examples() {
        let spec = scalar();
        let p = stab(&spec, 1.0);
        let w = value_from_riccati(&spec, &p, &AlphaPolicy::zero(), 0.0, &v(1.0)).unwrap();
        assert!((w - root()).abs() < 1e-8);
        assert_eq!(
            value_from_riccati(&spec, &p, &AlphaPolicy::zero(), 0.0, &v(0.0)).unwrap(),
            0.0
        );
        let held = AlphaPolicy::constant_forever(0.5, 0.0).unwrap();
        assert!(matches!(
            value_from_riccati(&spec, &p, &held, 0.0, &v(1.0)),
            Err(Error::NotIntegrable(_))
        ));
    }

    #[test]
    fn finite_value_examples() {
        let spec = scalar();
        let z = AlphaPolicy::zero();
        let p = solve_finite_horizon(&spec, &z, 1.0, 1.0, 0.01).unwrap();
        assert_eq!(
            finite_value_from_riccati(&spec, &p, &z, 1.0, 1.0, &v(0.7)).unwrap(),
            0.0
        );
        let p10 = solve_finite_horizon(&spec, &z, 0.0, 10.0, 0.01).unwrap();
        let w = finite_value_from_riccati(&spec, &p10, &z, 0.0, 10.0, &v(1.0)).unwrap();
        assert!((w - root()).abs() < 1e-4);
        let c = AlphaPolicy::constant_forever(0.5, 0.0).unwrap();
        let pc = solve_finite_horizon(&spec, &c, 0.0, 2.0, 0.01).unwrap();
        let quad = pc.at(0.0).unwrap().quad_form(&v(1.0));
        let wc = finite_value_from_riccati(&spec, &pc, &c, 0.0, 2.0, &v(1.0)).unwrap();
        assert!((wc - (quad - 0.25 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_matches_grid_minimization() {
        let spec = scalar();
        let x = v(0.6);
        let p = v(2.0 * root() * 0.6);
        let closed = hamiltonian(&spec, 0.0, &x, &p, 0.0).unwrap();
        // inf over u of p f + l, by golden section on a bracketing interval
        let obj = |u: f64| {
            let f = eval_dynamics(&spec, 0.0, &x, &v(u)).unwrap();
            p.dot(&f) + eval_lagrangian(&spec, 0.0, &x, &v(u), 0.0).unwrap()
        };
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if obj(m1) < obj(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        assert!((closed - obj(0.5 * (lo + hi))).abs() < 1e-8);
        let zero = hamiltonian(&spec, 0.0, &x, &v(0.0), 0.0).unwrap();
        assert!((zero - 0.36).abs() < 1e-15);
    }

    #[test]
    fn hjb_residual_examples() {
        let mut spec = scalar();
        spec.state_weight = StateWeight::Constant { value: 0.0 };
        let z = AlphaPolicy::zero();
        let p = solve_finite_horizon(&spec, &z, 0.0, 2.0, 0.01).unwrap();
        assert_eq!(hjb_residual(&spec, &p, &z, 1.0, &v(0.4)).unwrap(), 0.0);
        assert!(matches!(
            hjb_residual(&spec, &p, &z, 0.001, &v(0.4)),
            Err(Error::OutOfGrid { .. })
        ));

        let spec = scalar();
        let r = |dt: f64| {
            let p = solve_finite_horizon(&spec, &z, 0.0, 3.0, dt).unwrap();
            let mut worst = 0.0_f64;
            for i in 0..20 {
                let s = 0.1 + 2.8 * i as f64 / 19.0;
                for j in 0..20 {
                    let x = -1.0 + 2.0 * j as f64 / 19.0;
                    worst = worst.max(hjb_residual(&spec, &p, &z, s, &v(x)).unwrap());
                }
            }
            worst
        };
        let ratio = r(0.02) / r(0.01);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn cost_matches_value() {
        let spec = scalar();
        let z = AlphaPolicy::zero();
        let p = stab(&spec, 10.0);
        let traj = simulate_closed_loop(&spec, &p, &z, 0.0, &v(1.0), 10.0).unwrap();
        let cost = cost_of_trajectory(&spec, &traj, &z, Some(&p)).unwrap();
        assert!((cost.total() - root()).abs() < 1e-4);
        let still = simulate_closed_loop(&spec, &p, &z, 0.0, &v(0.0), 1.0).unwrap();
        assert_eq!(
            cost_of_trajectory(&spec, &still, &z, None).unwrap().total(),
            0.0
        );

        let mut heavy = spec.clone();
        heavy.state_weight = StateWeight::Constant { value: 4.0 };
        let ph = stab(&heavy, 10.0);
        let th = simulate_closed_loop(&heavy, &ph, &z, 0.0, &v(1.0), 10.0).unwrap();
        assert!(
            cost_of_trajectory(&heavy, &th, &z, Some(&ph))
                .unwrap()
                .total()
                > cost.total()
        );
    }

    #[test]
    fn perturbed_controls_cost_more() {
        let spec = scalar();
        let z = AlphaPolicy::zero();
        let p = solve_finite_horizon(&spec, &z, 0.0, 3.0, 0.01).unwrap();
        let best = finite_value_from_riccati(&spec, &p, &z, 0.0, 3.0, &v(0.8)).unwrap();
        for k in 0..20 {
            let amp = 0.05 * (k as f64 - 9.5) / 10.0;
            let freq = 1.0 + k as f64 * 0.3;
            let traj = simulate_perturbed(&spec, &p, &z, 0.0, &v(0.8), 3.0, &|s| {
                v(amp * (freq * s).sin())
            })
            .unwrap();
            assert!(traj.total_cost() >= best - 1e-6);
        }
    }

    #[test]
    fn closeness_is_finite() {
        let spec = scalar();
        let p = stab(&spec, 3.0);
        let c = closeness_constant(
            &spec,
            &p,
            &AlphaPolicy::zero(),
            0.0,
            &v(0.5),
            3.0,
            &[(0.01, v(1.0)), (0.02, v(-1.0))],
        )
        .unwrap();
        // |xi_pert - xi| <= delta / sqrt(3) for the stable scalar loop
        assert!(c > 0.0 && c <= 1.0 / 3.0f64.sqrt() + 1e-6);
    }
}
