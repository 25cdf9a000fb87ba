//! The outer player: the argmax map, constant-policy lower bounds and the
//! coupled fixed point `(alpha*, P*, xi*)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AlphaPolicy, AlphaTail, ProblemSpec};
use crate::numerics::Vector;
use crate::riccati::{solve_stabilizing, RiccatiSolution, StabilizingOptions};
use crate::synthesis::{simulate_closed_loop, value_from_riccati, Trajectory};

/// `argmax_{beta >= 0} a(beta) |h(x)|^2 - b(beta)`, smallest maximizer.
pub fn lambda_map(spec: &ProblemSpec, _s: f64, x: &Vector) -> Result<f64> {
    spec.alpha_argmax(spec.h.forward(x).norm_squared())
}

/// `max |Lambda(s, x) - Lambda(s, y)| / |x - y|` over the pairs.
pub fn lambda_lipschitz_estimate(
    spec: &ProblemSpec,
    s: f64,
    pairs: &[(Vector, Vector)],
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for (x, y) in pairs {
        let d = (x - y).norm();
        if d == 0.0 {
            continue;
        }
        let diff = (lambda_map(spec, s, x)? - lambda_map(spec, s, y)?).abs();
        worst = worst.max(diff / d);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub alpha: f64,
    /// `None` when the stabilizing solve failed for this level.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantSweep {
    pub entries: Vec<SweepEntry>,
    pub best_alpha: f64,
    pub w_lower: f64,
}

/// Policy holding `c` over the evaluation window `[t, t + t_eval]`, zero
/// afterwards so that `int b(alpha)` stays finite.
pub fn windowed_constant(spec: &ProblemSpec, c: f64, t: f64) -> Result<AlphaPolicy> {
    AlphaPolicy::constant(c, t, t + spec.grid.t_eval)
}

/// Best `W^alpha(t, x)` over windowed constant policies; a lower bound on the
/// game value.
pub fn sup_over_constant_alpha(
    spec: &ProblemSpec,
    t: f64,
    x: &Vector,
    alpha_grid: &[f64],
) -> Result<ConstantSweep> {
    if alpha_grid.is_empty() {
        return Err(Error::InvalidArgument("empty alpha grid".into()));
    }
    let opts = StabilizingOptions::for_spec(spec);
    let t_eval = t + spec.grid.t_eval;
    let results: Vec<Result<f64>> = alpha_grid
        .par_iter()
        .map(|&c| {
            let policy = windowed_constant(spec, c, t)?;
            let p = solve_stabilizing(spec, &policy, t, t_eval, &opts)?;
            value_from_riccati(spec, &p, &policy, t, x)
        })
        .collect();
    let mut entries = Vec::with_capacity(alpha_grid.len());
    let mut best: Option<(f64, f64)> = None;
    let mut first_err = None;
    for (&c, r) in alpha_grid.iter().zip(results) {
        match r {
            Ok(w) => {
                if best.is_none_or(|(_, bw)| w > bw) {
                    best = Some((c, w));
                }
                entries.push(SweepEntry {
                    alpha: c,
                    value: Some(w),
                });
            }
            Err(e @ (Error::NoConvergence { .. } | Error::NonFiniteState { .. })) => {
                log::warn!("constant alpha = {c} skipped: {e}");
                entries.push(SweepEntry {
                    alpha: c,
                    value: None,
                });
                first_err.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((best_alpha, w_lower)) => Ok(ConstantSweep {
            entries,
            best_alpha,
            w_lower,
        }),
        None => Err(first_err.expect("every entry failed")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoupledOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub relaxation: f64,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            relaxation: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameSolution {
    pub alpha_star: AlphaPolicy,
    pub p_star: RiccatiSolution,
    pub xi_star: Trajectory,
    pub w: f64,
    pub iterations: usize,
    pub alpha_update_norm: f64,
    pub converged: bool,
    /// Smallest constraint margin along `xi*`; positive means the path stays
    /// in the interior.
    pub min_interior_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameReport {
    #[serde(rename = "W")]
    pub w: f64,
    pub iterations: usize,
    pub alpha_update_norm: f64,
    pub alpha_star: Vec<f64>,
    pub converged: bool,
    pub min_interior_margin: f64,
}

impl GameSolution {
    pub fn report(&self) -> GameReport {
        GameReport {
            w: self.w,
            iterations: self.iterations,
            alpha_update_norm: self.alpha_update_norm,
            alpha_star: self.alpha_star.values().to_vec(),
            converged: self.converged,
            min_interior_margin: self.min_interior_margin,
        }
    }
}

/// Picard iteration on `alpha`, starting from zero:
/// `alpha_{k+1} = (1 - r) alpha_k + r Lambda(s_i, xi_k(s_i))`.
pub fn solve_coupled(
    spec: &ProblemSpec,
    t: f64,
    x0: &Vector,
    opts: &CoupledOptions,
) -> Result<GameSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol = {}", opts.tol)));
    }
    if !(opts.relaxation > 0.0 && opts.relaxation <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "relaxation = {}",
            opts.relaxation
        )));
    }
    if !spec.omega.contains(x0) {
        return Err(Error::OutsideDomain(x0.iter().cloned().collect()));
    }
    let ropts = StabilizingOptions::for_spec(spec);
    let t_eval = t + spec.grid.t_eval;
    let span = spec.grid.t_eval;
    let solve = |alpha: &AlphaPolicy| -> Result<(RiccatiSolution, Trajectory)> {
        let p = solve_stabilizing(spec, alpha, t, t_eval, &ropts)?;
        let traj = simulate_closed_loop(spec, &p, alpha, t, x0, span)?;
        Ok((p, traj))
    };

    let (mut p, mut traj) = solve(&AlphaPolicy::zero())?;
    let nodes = traj.s.clone();
    let mut values = vec![0.0; nodes.len()];
    let mut alpha = AlphaPolicy::from_samples(nodes.clone(), values.clone(), AlphaTail::Zero)?;
    let mut update = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut next = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            let target = lambda_map(spec, nodes[i], &traj.xi[i])?;
            next.push((1.0 - opts.relaxation) * v + opts.relaxation * target);
        }
        update = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        values = next;
        alpha = AlphaPolicy::from_samples(nodes.clone(), values.clone(), AlphaTail::Zero)?;
        (p, traj) = solve(&alpha)?;
        log::debug!("fixed-point iteration {iterations}: update {update:.3e}");
        if update < opts.tol {
            break;
        }
    }
    let w = value_from_riccati(spec, &p, &alpha, t, x0)?;
    let min_interior_margin = traj.min_margin();
    let solution = GameSolution {
        alpha_star: alpha,
        p_star: p,
        xi_star: traj,
        w,
        iterations,
        alpha_update_norm: update,
        converged: update < opts.tol,
        min_interior_margin,
    };
    if solution.converged {
        Ok(solution)
    } else {
        Err(Error::NoFixedPoint {
            last: Box::new(solution),
        })
    }
}

/// `max_i |alpha*_i - Lambda(s_i, xi*(s_i))|`, the self-consistency defect
/// of a fixed point.
pub fn fixed_point_defect(spec: &ProblemSpec, sol: &GameSolution) -> Result<f64> {
    let mut worst = 0.0_f64;
    for ((s, x), a) in sol
        .xi_star
        .s
        .iter()
        .zip(&sol.xi_star.xi)
        .zip(sol.alpha_star.values())
    {
        worst = worst.max((lambda_map(spec, *s, x)? - a).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scalar;
    use crate::model::{eval_lagrangian, eval_sup_lagrangian, AlphaPenalty, DiffeoMap};
    use crate::numerics::Mat;

    fn v(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    #[test]
    fn lambda_examples() {
        let mut spec = scalar();
        spec.dim_state = 2;
        let x = Vector::from_vec(vec![1.0, 1.0]);
        assert!((lambda_map(&spec, 0.0, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(lambda_map(&spec, 0.0, &Vector::zeros(2)).unwrap(), 0.0);
        let mut cubic = scalar();
        cubic.penalty = AlphaPenalty { c: 1.0, q: 3.0 };
        assert!((lambda_map(&cubic, 0.0, &v(3.0f64.sqrt())).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sup_lagrangian_is_attained() {
        let spec = scalar();
        for k in 0..25 {
            let x = v(-1.0 + k as f64 / 12.0);
            let u = v(0.3 * k as f64 - 2.0);
            let a = lambda_map(&spec, 0.0, &x).unwrap();
            let sup = eval_sup_lagrangian(&spec, 0.0, &x, &u).unwrap();
            assert!((sup - eval_lagrangian(&spec, 0.0, &x, &u, a).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn lipschitz_examples() {
        let spec = scalar();
        let pts: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 / 20.0).collect();
        let pairs: Vec<(Vector, Vector)> = pts.windows(2).map(|w| (v(w[0]), v(w[1]))).collect();
        let est = lambda_lipschitz_estimate(&spec, 0.0, &pairs).unwrap();
        assert!(est <= 1.0 && est > 0.9);
        let same: Vec<(Vector, Vector)> = vec![(v(0.5), v(-0.5))];
        assert_eq!(lambda_lipschitz_estimate(&spec, 0.0, &same).unwrap(), 0.0);
        let mut doubled = spec.clone();
        doubled.h = DiffeoMap::linear(Mat::from_element(1, 1, 2.0)).unwrap();
        let est2 = lambda_lipschitz_estimate(&doubled, 0.0, &pairs).unwrap();
        assert!((est2 - 4.0 * est).abs() < 1e-12);
    }

    #[test]
    fn constant_sweep() {
        let spec = scalar();
        let zero_only = sup_over_constant_alpha(&spec, 0.0, &v(0.5), &[0.0]).unwrap();
        let grid: Vec<f64> = (0..=8).map(|i| 0.25 * i as f64).collect();
        let full = sup_over_constant_alpha(&spec, 0.0, &v(0.5), &grid).unwrap();
        assert!(full.w_lower >= zero_only.w_lower);
        let coarse = sup_over_constant_alpha(&spec, 0.0, &v(0.5), &[0.0, 1.0, 2.0]).unwrap();
        assert!(full.w_lower >= coarse.w_lower);
        assert_eq!(full.entries.len(), 9);
    }

    #[test]
    fn coupled_at_equilibrium() {
        let spec = scalar();
        let sol = solve_coupled(&spec, 0.0, &v(0.0), &CoupledOptions::default()).unwrap();
        assert!(sol.alpha_star.values().iter().all(|a| *a == 0.0));
        assert!(sol.xi_star.xi.iter().all(|x| x[0] == 0.0));
        assert_eq!(sol.w, 0.0);
    }

    #[test]
    fn coupled_small_state() {
        let spec = scalar();
        let x0 = v(0.1);
        let sol = solve_coupled(&spec, 0.0, &x0, &CoupledOptions::default()).unwrap();
        let w0 = (3.0f64.sqrt() - 1.0) / 2.0 * 0.01;
        assert!((sol.w - w0).abs() <= 0.05 * w0);
        assert!(sol.w >= w0 - 1e-12);
        assert!(fixed_point_defect(&spec, &sol).unwrap() <= 2.0 * 1e-6);
        let sweep = sup_over_constant_alpha(&spec, 0.0, &x0, &[0.0, 0.1, 0.5]).unwrap();
        assert!(sol.w >= sweep.w_lower - 1e-6);
    }

    #[test]
    fn no_fixed_point_reports_last_iterate() {
        let spec = scalar();
        let opts = CoupledOptions {
            tol: 1e-14,
            max_iter: 2,
            relaxation: 0.5,
        };
        match solve_coupled(&spec, 0.0, &v(0.8), &opts) {
            Err(Error::NoFixedPoint { last }) => {
                assert_eq!(last.iterations, 2);
                assert!(!last.converged);
            }
            other => panic!("expected NoFixedPoint, got {other:?}"),
        }
    }
}
