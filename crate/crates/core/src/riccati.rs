//! Riccati sweeps for the alpha-parametrized LQ problem.
//!
//! The finite-horizon solution solves
//! `-P' = A^T P + P A - P B R^{-1} B^T P + Q^alpha` backward from `P(T) = 0`.
//! The stabilizing solution is the limit of those sweeps as `T` grows; it is
//! detected by doubling the horizon until two consecutive sweeps agree on the
//! evaluation window. For constant data a Newton–Kleinman solver of the
//! algebraic equation serves as an independent cross-check.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AlphaPolicy, ProblemSpec};
use crate::numerics::{
    eig_sym_extremes, hermite, max_abs, rk4_step_mat, spectral_abscissa, steps_for,
    symmetrize_in_place, Mat, SymMatrix, TimeGrid,
};

/// Record of the horizon-doubling loop that produced a stabilizing solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceCertificate {
    /// Horizon of the sweep that was kept.
    pub horizon: f64,
    /// Horizon of the sweep it was compared against.
    pub previous_horizon: f64,
    /// Max over the evaluation window of `||P_next(s) - P_prev(s)||_2`.
    pub gap: f64,
    pub tol: f64,
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RiccatiKind {
    FiniteHorizon { horizon: f64 },
    Stabilizing(ConvergenceCertificate),
}

/// `P(s)` on a uniform grid, with Hermite dense output between nodes.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub p: Vec<SymMatrix>,
    /// `(dP/ds at s_i, dP/ds at s_{i+1})` for each interval, evaluated with
    /// the alpha value used on that interval.
    slopes: Vec<(Mat, Mat)>,
    pub kind: RiccatiKind,
    pub alpha: AlphaPolicy,
}

impl RiccatiSolution {
    /// `P = 0` on `grid`; the exact solution when `Q = 0`, and a surrogate
    /// for systems that cannot be stabilized.
    pub fn zeros(grid: TimeGrid, n: usize) -> Self {
        Self {
            grid,
            p: vec![SymMatrix::zeros(n); grid.n_steps + 1],
            slopes: vec![(Mat::zeros(n, n), Mat::zeros(n, n)); grid.n_steps],
            kind: RiccatiKind::FiniteHorizon {
                horizon: grid.t_end(),
            },
            alpha: AlphaPolicy::zero(),
        }
    }

    pub fn start(&self) -> f64 {
        self.grid.t0
    }

    pub fn end(&self) -> f64 {
        self.grid.t_end()
    }

    pub fn first(&self) -> &SymMatrix {
        &self.p[0]
    }

    pub fn last(&self) -> &SymMatrix {
        self.p.last().expect("nonempty sweep")
    }

    pub fn dim(&self) -> usize {
        self.p[0].dim()
    }

    pub fn is_stabilizing(&self) -> bool {
        matches!(self.kind, RiccatiKind::Stabilizing(_))
    }

    pub fn certificate(&self) -> Option<&ConvergenceCertificate> {
        match &self.kind {
            RiccatiKind::Stabilizing(c) => Some(c),
            RiccatiKind::FiniteHorizon { .. } => None,
        }
    }

    /// `P(s)` for `s` in the grid span.
    pub fn at(&self, s: f64) -> Result<SymMatrix> {
        if !self.grid.contains(s) {
            return Err(Error::OutOfGrid {
                s,
                start: self.start(),
                end: self.end(),
            });
        }
        if self.grid.n_steps == 0 {
            return Ok(self.p[0].clone());
        }
        let i = self.grid.locate(s);
        let (d0, d1) = &self.slopes[i];
        let m = hermite(
            self.grid.node(i),
            self.grid.dt,
            self.p[i].as_matrix(),
            d0,
            self.p[i + 1].as_matrix(),
            d1,
            s,
        );
        Ok(SymMatrix::from_matrix(m))
    }

    /// Restriction to the first `n_steps` intervals.
    fn truncated(mut self, n_steps: usize) -> Self {
        self.p.truncate(n_steps + 1);
        self.slopes.truncate(n_steps);
        self.grid.n_steps = n_steps;
        self
    }
}

/// `A^T P + P A - P B R^{-1} B^T P + Q(s, alpha)`, so that `P' = -riccati_rhs`.
pub fn riccati_rhs(spec: &ProblemSpec, s: f64, p: &Mat, alpha: f64) -> Mat {
    let a = spec.a_at(s);
    let b = spec.b_at(s);
    let n = p.nrows();
    let pb = p * &b;
    let mut out = a.transpose() * p + p * &a - (&pb * pb.transpose()) * spec.r_inv_scale();
    let q = spec.q_scale(s, alpha);
    for i in 0..n {
        out[(i, i)] += q;
    }
    out
}

fn alpha_on_interval(alpha: &AlphaPolicy, lo: f64, hi: f64) -> f64 {
    alpha.at(0.5 * (lo + hi))
}

fn backward_sweep(
    spec: &ProblemSpec,
    alpha: &AlphaPolicy,
    grid: TimeGrid,
) -> Result<RiccatiSolution> {
    let n = spec.dim_state;
    let steps = grid.n_steps;
    let mut p = vec![SymMatrix::zeros(n); steps + 1];
    let mut slopes = vec![(Mat::zeros(n, n), Mat::zeros(n, n)); steps];
    let mut current = Mat::zeros(n, n);
    for i in (0..steps).rev() {
        let (lo, hi) = (grid.node(i), grid.node(i + 1));
        let a_val = alpha_on_interval(alpha, lo, hi);
        let f = |s: f64, m: &Mat| -riccati_rhs(spec, s, m, a_val);
        let right_slope = f(hi, &current);
        let mut next = rk4_step_mat(&f, hi, -grid.dt, &current);
        symmetrize_in_place(&mut next);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { time: lo });
        }
        let left_slope = f(lo, &next);
        slopes[i] = (left_slope, right_slope);
        p[i] = SymMatrix::from_matrix(next.clone());
        current = next;
    }
    Ok(RiccatiSolution {
        grid,
        p,
        slopes,
        kind: RiccatiKind::FiniteHorizon {
            horizon: grid.t_end(),
        },
        alpha: alpha.clone(),
    })
}

/// Backward sweep on `[t, horizon]` from `P(horizon) = 0`.
pub fn solve_finite_horizon(
    spec: &ProblemSpec,
    alpha: &AlphaPolicy,
    t: f64,
    horizon: f64,
    max_dt: f64,
) -> Result<RiccatiSolution> {
    if !(horizon >= t) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} precedes start {t}"
        )));
    }
    let grid = TimeGrid::spanning(t, horizon, max_dt)?;
    backward_sweep(spec, alpha, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilizingOptions {
    pub tol: f64,
    /// Horizon growth factor between sweeps.
    pub growth: f64,
    /// Largest horizon allowed.
    pub t_max: f64,
    pub dt: f64,
}

impl StabilizingOptions {
    pub fn for_spec(spec: &ProblemSpec) -> Self {
        Self {
            tol: 1e-9,
            growth: 2.0,
            t_max: spec.grid.t_max,
            dt: spec.grid.dt,
        }
    }
}

/// Stabilizing solution on `[t, t_eval]` as the limit of finite-horizon
/// sweeps with growing horizons.
pub fn solve_stabilizing(
    spec: &ProblemSpec,
    alpha: &AlphaPolicy,
    t: f64,
    t_eval: f64,
    opts: &StabilizingOptions,
) -> Result<RiccatiSolution> {
    if !(opts.tol > 0.0) || !(opts.growth > 1.0) || !(t_eval >= t) {
        return Err(Error::InvalidArgument(format!(
            "tol = {}, growth = {}, window [{t}, {t_eval}]",
            opts.tol, opts.growth
        )));
    }
    let n_eval = steps_for(t_eval - t, opts.dt);
    let dt = if n_eval == 0 {
        opts.dt
    } else {
        (t_eval - t) / n_eval as f64
    };
    let max_steps = ((opts.t_max - t) / dt + 1e-9).floor() as usize;
    let mut steps = (2 * n_eval).max((1.0 / dt).ceil() as usize).max(1);
    if steps > max_steps {
        return Err(Error::NoConvergence {
            horizon: t + steps as f64 * dt,
            gap: f64::INFINITY,
            limit: opts.t_max,
        });
    }
    let mut prev = backward_sweep(spec, alpha, TimeGrid::new(t, dt, steps)?)?;
    let mut sweeps = 1;
    loop {
        if steps >= max_steps {
            let gap = f64::INFINITY;
            return Err(Error::NoConvergence {
                horizon: t + steps as f64 * dt,
                gap,
                limit: opts.t_max,
            });
        }
        let next_steps = ((steps as f64 * opts.growth).ceil() as usize).min(max_steps);
        let next = backward_sweep(spec, alpha, TimeGrid::new(t, dt, next_steps)?)?;
        sweeps += 1;
        let gap = (0..=n_eval)
            .map(|i| (&next.p[i] - &prev.p[i]).spectral_norm())
            .fold(0.0_f64, f64::max);
        log::debug!(
            "stabilizing sweep horizon {:.3}: gap {gap:.3e}",
            t + next_steps as f64 * dt
        );
        if gap < opts.tol {
            let certificate = ConvergenceCertificate {
                horizon: t + next_steps as f64 * dt,
                previous_horizon: t + steps as f64 * dt,
                gap,
                tol: opts.tol,
                sweeps,
            };
            let mut sol = next.truncated(n_eval);
            sol.kind = RiccatiKind::Stabilizing(certificate);
            return Ok(sol);
        }
        if next_steps >= max_steps {
            return Err(Error::NoConvergence {
                horizon: t + next_steps as f64 * dt,
                gap,
                limit: opts.t_max,
            });
        }
        prev = next;
        steps = next_steps;
    }
}

/// Solves `M^T X + X M = -C`.
pub fn solve_lyapunov(m: &Mat, c: &Mat) -> Option<Mat> {
    let n = m.nrows();
    let eye = Mat::identity(n, n);
    let mt = m.transpose();
    let op = eye.kronecker(&mt) + mt.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, c.as_slice());
    let sol = op.lu().solve(&rhs)?;
    let mut x = Mat::from_column_slice(n, n, sol.as_slice());
    symmetrize_in_place(&mut x);
    Some(x)
}

/// Stabilizing root of `A^T P + P A - P B R^{-1} B^T P + Q = 0` by
/// Newton–Kleinman iteration.
pub fn solve_are_constant(
    a: &Mat,
    b: &Mat,
    r: &SymMatrix,
    q: &SymMatrix,
    tol: f64,
) -> Result<SymMatrix> {
    let n = a.nrows();
    let r_inv = r
        .as_matrix()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;
    let r_mat = r.as_matrix();
    let mut gain = if spectral_abscissa(a) < 0.0 {
        Mat::zeros(b.ncols(), n)
    } else {
        initial_gain(a, b)?
    };
    let mut p = Mat::zeros(n, n);
    for iter in 0..100 {
        let closed = a - b * &gain;
        if spectral_abscissa(&closed) >= 0.0 {
            return Err(Error::NotStabilizable(format!(
                "closed loop unstable at Newton step {iter}"
            )));
        }
        let c = q.as_matrix() + gain.transpose() * r_mat * &gain;
        let next = solve_lyapunov(&closed, &c)
            .ok_or_else(|| Error::NotStabilizable("singular Lyapunov operator".into()))?;
        let change = max_abs(&(&next - &p));
        p = next;
        gain = &r_inv * b.transpose() * &p;
        if change <= 1e-14 * (1.0 + max_abs(&p)) {
            break;
        }
    }
    let residual =
        a.transpose() * &p + &p * a - &p * b * &r_inv * b.transpose() * &p + q.as_matrix();
    if max_abs(&residual) >= tol.max(1e-12 * (1.0 + max_abs(&p))) {
        return Err(Error::NotStabilizable(format!(
            "ARE residual {:.3e} above tolerance",
            max_abs(&residual)
        )));
    }
    let closed = a - b * &r_inv * b.transpose() * &p;
    if spectral_abscissa(&closed) >= 0.0 {
        return Err(Error::NotStabilizable("closed loop is not Hurwitz".into()));
    }
    Ok(SymMatrix::from_matrix(p))
}

/// Bass's construction: `K = B^T W^{-1}` with `W` the Gramian of the shifted
/// pair `-(A + beta I)`.
fn initial_gain(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let beta = a.norm() + 1.0;
    let shifted = -(a + Mat::identity(n, n) * beta);
    let w = solve_lyapunov(&shifted.transpose(), &(b * b.transpose() * 2.0))
        .ok_or_else(|| Error::NotStabilizable("singular Gramian equation".into()))?;
    let w_inv = w
        .try_inverse()
        .ok_or_else(|| Error::NotStabilizable("(A, B) is not controllable".into()))?;
    Ok(b.transpose() * w_inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotoneCheck {
    pub holds: bool,
    /// `lambda_min(P_{T2}(s) - P_{T1}(s))`
    pub min_eig: f64,
}

/// Compares two finite-horizon sweeps at `s_probe`; `P_T` is nondecreasing in
/// `T` for nonnegative weights.
pub fn check_monotone_in_t(
    spec: &ProblemSpec,
    alpha: &AlphaPolicy,
    t: f64,
    s_probe: f64,
    horizons: (f64, f64),
    dt: f64,
) -> Result<MonotoneCheck> {
    let (t1, t2) = horizons;
    if !(t1 <= t2) {
        return Err(Error::InvalidArgument(format!("T1 = {t1} > T2 = {t2}")));
    }
    let p1 = solve_finite_horizon(spec, alpha, t, t1, dt)?;
    let p2 = solve_finite_horizon(spec, alpha, t, t2, dt)?;
    let diff = &p2.at(s_probe)? - &p1.at(s_probe)?;
    let min_eig = eig_sym_extremes(&diff).0;
    Ok(MonotoneCheck {
        holds: min_eig >= -1e-9,
        min_eig,
    })
}

/// Max over interior nodes of `|| (P_{i+1} - P_{i-1}) / (2 dt) + rhs(s_i, P_i) ||`.
pub fn riccati_residual(spec: &ProblemSpec, sol: &RiccatiSolution) -> f64 {
    let g = sol.grid;
    let mut worst = 0.0_f64;
    for i in 1..g.n_steps {
        let s = g.node(i);
        let deriv = (sol.p[i + 1].as_matrix() - sol.p[i - 1].as_matrix()) / (2.0 * g.dt);
        let rhs = riccati_rhs(spec, s, sol.p[i].as_matrix(), sol.alpha.at(s));
        worst = worst.max(max_abs(&(deriv + rhs)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scalar;
    use crate::model::{StateWeight, TimeMatrix};

    fn are_root() -> f64 {
        (3.0f64.sqrt() - 1.0) / 2.0
    }

    #[test]
    fn terminal_value_is_zero() {
        let spec = scalar();
        let sol = solve_finite_horizon(&spec, &AlphaPolicy::zero(), 0.0, 3.0, 0.01).unwrap();
        assert!(sol.last().as_matrix().iter().all(|v| *v == 0.0));
        let single = solve_finite_horizon(&spec, &AlphaPolicy::zero(), 2.0, 2.0, 0.01).unwrap();
        assert_eq!(single.p.len(), 1);
        assert_eq!(single.first().as_matrix()[(0, 0)], 0.0);
    }

    #[test]
    fn long_horizon_approaches_are_root() {
        let spec = scalar();
        let sol = solve_finite_horizon(&spec, &AlphaPolicy::zero(), 0.0, 10.0, 0.01).unwrap();
        assert!((sol.first().as_matrix()[(0, 0)] - are_root()).abs() < 1e-5);
    }

    #[test]
    fn zero_weight_gives_zero_solution() {
        let mut spec = scalar();
        spec.state_weight = StateWeight::Constant { value: 0.0 };
        let sol = solve_finite_horizon(&spec, &AlphaPolicy::zero(), 0.0, 5.0, 0.01).unwrap();
        assert!(sol.p.iter().all(|p| p.as_matrix()[(0, 0)] == 0.0));
        let stab = solve_stabilizing(
            &spec,
            &AlphaPolicy::zero(),
            0.0,
            2.0,
            &StabilizingOptions::for_spec(&spec),
        )
        .unwrap();
        assert_eq!(stab.certificate().unwrap().sweeps, 2);
        assert_eq!(stab.first().as_matrix()[(0, 0)], 0.0);
    }

    #[test]
    fn stabilizing_scalar() {
        let spec = scalar();
        let mut opts = StabilizingOptions::for_spec(&spec);
        opts.tol = 1e-8;
        let sol = solve_stabilizing(&spec, &AlphaPolicy::zero(), 0.0, 5.0, &opts).unwrap();
        assert!(sol
            .p
            .iter()
            .all(|p| (p.as_matrix()[(0, 0)] - are_root()).abs() < 1e-6));
        assert!((sol.end() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn vanishing_weight_profile_is_monotone() {
        let mut spec = scalar();
        spec.state_weight = StateWeight::Exponential {
            value: 2.0,
            rate: 1.0,
        };
        let sol = solve_stabilizing(
            &spec,
            &AlphaPolicy::zero(),
            0.0,
            8.0,
            &StabilizingOptions::for_spec(&spec),
        )
        .unwrap();
        let vals: Vec<f64> = sol.p.iter().map(|p| p.as_matrix()[(0, 0)]).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert!(vals.last().unwrap() < &(vals[0] * 1e-3));
        // brute force: one very long finite-horizon sweep
        let long = solve_finite_horizon(&spec, &AlphaPolicy::zero(), 0.0, 60.0, 0.01).unwrap();
        for (i, v) in vals.iter().enumerate() {
            assert!((v - long.p[i].as_matrix()[(0, 0)]).abs() < 1e-8);
        }
    }

    #[test]
    fn are_examples() {
        let a = Mat::from_element(1, 1, -1.0);
        let b = Mat::from_element(1, 1, 1.0);
        let r = SymMatrix::scaled_identity(1, 0.5);
        let p = solve_are_constant(&a, &b, &r, &SymMatrix::identity(1), 1e-10).unwrap();
        assert!((p.as_matrix()[(0, 0)] - are_root()).abs() < 1e-12);
        let p0 = solve_are_constant(&a, &b, &r, &SymMatrix::zeros(1), 1e-10).unwrap();
        assert_eq!(p0.as_matrix()[(0, 0)], 0.0);
        let a2 = -Mat::identity(2, 2);
        let p2 = solve_are_constant(
            &a2,
            &Mat::identity(2, 2),
            &SymMatrix::scaled_identity(2, 0.5),
            &SymMatrix::identity(2),
            1e-10,
        )
        .unwrap();
        let expected = Mat::identity(2, 2) * are_root();
        assert!(max_abs(&(p2.as_matrix() - expected)) < 1e-12);
    }

    #[test]
    fn are_unstable_open_loop_and_unstabilizable() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 2.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let r = SymMatrix::scaled_identity(1, 0.5);
        let p = solve_are_constant(&a, &b, &r, &SymMatrix::identity(2), 1e-9).unwrap();
        let closed = &a - &b * 2.0 * b.transpose() * p.as_matrix();
        assert!(spectral_abscissa(&closed) < 0.0);
        let b_bad = Mat::from_row_slice(2, 1, &[1.0, 0.0]);
        let a_bad = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        assert!(matches!(
            solve_are_constant(&a_bad, &b_bad, &r, &SymMatrix::identity(2), 1e-9),
            Err(Error::NotStabilizable(_))
        ));
    }

    #[test]
    fn stabilizing_agrees_with_are() {
        let mut spec = scalar();
        spec.drift = TimeMatrix::Constant(Mat::from_element(1, 1, 0.5));
        let opts = StabilizingOptions::for_spec(&spec);
        let sol = solve_stabilizing(&spec, &AlphaPolicy::zero(), 0.0, 3.0, &opts).unwrap();
        let are = solve_are_constant(
            &spec.a_at(0.0),
            &spec.b_at(0.0),
            &SymMatrix::scaled_identity(1, 0.5),
            &SymMatrix::identity(1),
            1e-10,
        )
        .unwrap();
        assert!(
            (sol.first().as_matrix()[(0, 0)] - are.as_matrix()[(0, 0)]).abs() < 10.0 * opts.tol
        );
    }

    #[test]
    fn monotone_examples() {
        let spec = scalar();
        let z = AlphaPolicy::zero();
        let c = check_monotone_in_t(&spec, &z, 0.0, 0.0, (2.0, 4.0), 0.01).unwrap();
        assert!(c.holds && c.min_eig > 0.0);
        let same = check_monotone_in_t(&spec, &z, 0.0, 0.5, (3.0, 3.0), 0.01).unwrap();
        assert_eq!(same.min_eig, 0.0);
        let mut zero_q = spec.clone();
        zero_q.state_weight = StateWeight::Constant { value: 0.0 };
        assert_eq!(
            check_monotone_in_t(&zero_q, &z, 0.0, 0.0, (1.0, 5.0), 0.01)
                .unwrap()
                .min_eig,
            0.0
        );
    }

    #[test]
    fn no_convergence_when_not_stabilizable() {
        let mut spec = scalar();
        spec.drift = TimeMatrix::Constant(Mat::from_element(1, 1, 1.0));
        spec.input = TimeMatrix::Constant(Mat::zeros(1, 1));
        let mut opts = StabilizingOptions::for_spec(&spec);
        opts.t_max = 40.0;
        let r = solve_stabilizing(&spec, &AlphaPolicy::zero(), 0.0, 1.0, &opts);
        assert!(matches!(
            r,
            Err(Error::NoConvergence { .. }) | Err(Error::NonFiniteState { .. })
        ));
    }

    #[test]
    fn out_of_grid() {
        let spec = scalar();
        let sol = solve_finite_horizon(&spec, &AlphaPolicy::zero(), 0.0, 1.0, 0.1).unwrap();
        assert!(matches!(sol.at(1.5), Err(Error::OutOfGrid { .. })));
        assert!(sol.at(0.55).is_ok());
    }

    #[test]
    fn residual_is_second_order() {
        let mut spec = scalar();
        spec.state_weight = StateWeight::Exponential {
            value: 2.0,
            rate: 1.0,
        };
        let r = |dt: f64| {
            let sol = solve_finite_horizon(&spec, &AlphaPolicy::zero(), 0.0, 3.0, dt).unwrap();
            riccati_residual(&spec, &sol)
        };
        let ratio = r(0.02) / r(0.01);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}
