//! Brute-force dynamic programming on a state/control/time grid for
//! one- and two-dimensional instances.
//!
//! Backward value iteration with an explicit Euler transition and multilinear
//! interpolation. A transition is infeasible (`+inf`) when the next state
//! leaves the grid box or when any interpolation corner with positive weight
//! is infeasible; grid nodes outside the constraint set start infeasible.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{eval_dynamics, eval_lagrangian, eval_sup_lagrangian, AlphaPolicy, ProblemSpec};
use crate::numerics::Vector;

/// Largest value table (time layers times states) the oracle will build.
pub const MAX_TABLE_ENTRIES: usize = 50_000_000;

/// Interpolation weights below this are treated as zero.
const WEIGHT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum CostMode {
    /// Running cost `l(s, x, u, alpha(s))`.
    Fixed(AlphaPolicy),
    /// Running cost `sup_alpha l`.
    Sup,
    /// Zero running cost; finite values mark viable states.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DPProblem {
    /// Nodes per state axis over the bounding box of the constraint set.
    pub state_resolution: Vec<usize>,
    /// Nodes per control axis over `[-u_max, u_max]`.
    pub control_resolution: usize,
    pub u_max: f64,
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub mode: CostMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTable {
    pub times: Vec<f64>,
    /// Node coordinates per state axis.
    pub axes: Vec<Vec<f64>>,
    /// `values[k][j]`: value at time `times[k]` and flat state index `j`
    /// (first axis fastest).
    pub values: Vec<Vec<f64>>,
    /// Largest `|f| dt / cell` seen; above one the grid is too coarse for the
    /// time step.
    pub cfl_ratio: f64,
}

impl ValueTable {
    pub fn n_states(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn node(&self, j: usize) -> Vector {
        let mut rem = j;
        Vector::from_fn(self.axes.len(), |d, _| {
            let len = self.axes[d].len();
            let k = rem % len;
            rem /= len;
            self.axes[d][k]
        })
    }

    /// Value at the initial time, interpolated at `x`.
    pub fn value_at(&self, x: &Vector) -> f64 {
        interpolate(&self.axes, &self.values[0], x)
    }
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k + 1 == n {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Multilinear interpolation of `table` at `x`; `+inf` outside the box or
/// when a corner with positive weight is `+inf`.
fn interpolate(axes: &[Vec<f64>], table: &[f64], x: &Vector) -> f64 {
    let d = axes.len();
    let mut base = Vec::with_capacity(d);
    let mut frac = Vec::with_capacity(d);
    for (k, ax) in axes.iter().enumerate() {
        let (lo, hi) = (ax[0], ax[ax.len() - 1]);
        let span = hi - lo;
        let slack = 1e-12 * span;
        if !(x[k] >= lo - slack && x[k] <= hi + slack) {
            return f64::INFINITY;
        }
        let cells = ax.len() - 1;
        let pos = ((x[k] - lo) / span * cells as f64).clamp(0.0, cells as f64);
        let i = (pos.floor() as usize).min(cells.saturating_sub(1));
        base.push(i);
        frac.push(pos - i as f64);
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut idx = 0;
        let mut stride = 1;
        for k in 0..d {
            let up = (corner >> k) & 1 == 1;
            let w = if up { frac[k] } else { 1.0 - frac[k] };
            weight *= w;
            let i = if up {
                (base[k] + 1).min(axes[k].len() - 1)
            } else {
                base[k]
            };
            idx += i * stride;
            stride *= axes[k].len();
        }
        if weight <= WEIGHT_EPS {
            continue;
        }
        let v = table[idx];
        if v.is_infinite() {
            return f64::INFINITY;
        }
        acc += weight * v;
    }
    acc
}

fn control_grid(m: usize, res: usize, u_max: f64) -> Vec<Vector> {
    let ax = axis(-u_max, u_max, res);
    let total = res.pow(m as u32);
    (0..total)
        .map(|idx| {
            let mut rem = idx;
            Vector::from_fn(m, |_, _| {
                let k = rem % res;
                rem /= res;
                ax[k]
            })
        })
        .collect()
}

fn validate(dp: &DPProblem, spec: &ProblemSpec) -> Result<()> {
    let n = spec.dim_state;
    if n > 2 {
        return Err(Error::UnsupportedVariant(format!(
            "dynamic programming oracle supports n <= 2, got n = {n}"
        )));
    }
    if dp.state_resolution.len() != n || dp.state_resolution.iter().any(|r| *r < 2) {
        return Err(Error::InvalidGrid(
            "one state resolution >= 2 per axis".into(),
        ));
    }
    if dp.control_resolution < 1 || !(dp.u_max >= 0.0) || !dp.u_max.is_finite() {
        return Err(Error::InvalidGrid("control grid".into()));
    }
    if dp.n_steps == 0 || !(dp.horizon > 0.0) || !dp.horizon.is_finite() {
        return Err(Error::InvalidGrid("time grid".into()));
    }
    let states: usize = dp.state_resolution.iter().product();
    let entries = states.saturating_mul(dp.n_steps + 1);
    let controls = dp.control_resolution.checked_pow(spec.dim_control as u32);
    if entries > MAX_TABLE_ENTRIES || controls.is_none_or(|c| c > 1_000_000) {
        return Err(Error::InvalidGrid(format!(
            "table of {entries} entries exceeds {MAX_TABLE_ENTRIES}"
        )));
    }
    Ok(())
}

/// Value table `V(s_k, x_j)` of the finite-horizon problem with zero terminal
/// value.
pub fn brute_force_value(dp: &DPProblem, spec: &ProblemSpec) -> Result<ValueTable> {
    validate(dp, spec)?;
    let n = spec.dim_state;
    let (lo, hi) = spec.omega.bounds();
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|k| axis(lo[k], hi[k], dp.state_resolution[k]))
        .collect();
    let dt = dp.horizon / dp.n_steps as f64;
    let times: Vec<f64> = (0..=dp.n_steps).map(|k| dp.t0 + k as f64 * dt).collect();
    let controls = control_grid(spec.dim_control, dp.control_resolution, dp.u_max);
    let n_states: usize = dp.state_resolution.iter().product();
    let cell = (0..n)
        .map(|k| (hi[k] - lo[k]) / (dp.state_resolution[k] - 1) as f64)
        .fold(f64::INFINITY, f64::min);

    let probe = ValueTable {
        times: Vec::new(),
        axes: axes.clone(),
        values: Vec::new(),
        cfl_ratio: 0.0,
    };
    let nodes: Vec<Vector> = (0..n_states).map(|j| probe.node(j)).collect();
    let inside: Vec<bool> = nodes.iter().map(|x| spec.omega.contains(x)).collect();

    let terminal: Vec<f64> = inside
        .iter()
        .map(|&i| if i { 0.0 } else { f64::INFINITY })
        .collect();
    let mut values = vec![terminal];
    let mut cfl = 0.0_f64;
    for k in (0..dp.n_steps).rev() {
        let s = times[k];
        let next = values.last().expect("terminal layer");
        let layer: Vec<Result<(f64, f64)>> = (0..n_states)
            .into_par_iter()
            .map(|j| {
                if !inside[j] {
                    return Ok((f64::INFINITY, 0.0));
                }
                let x = &nodes[j];
                let mut best = f64::INFINITY;
                let mut speed = 0.0_f64;
                for u in &controls {
                    let f = eval_dynamics(spec, s, x, u)?;
                    speed = speed.max(f.amax());
                    let stage = match &dp.mode {
                        CostMode::Fixed(alpha) => {
                            eval_lagrangian(spec, s, x, u, alpha.at(s + 0.5 * dt))?
                        }
                        CostMode::Sup => eval_sup_lagrangian(spec, s, x, u)?,
                        CostMode::Zero => 0.0,
                    };
                    let cont = interpolate(&axes, next, &(x + f * dt));
                    if cont.is_finite() {
                        best = best.min(stage * dt + cont);
                    }
                }
                Ok((best, speed))
            })
            .collect();
        let mut out = Vec::with_capacity(n_states);
        for r in layer {
            let (v, speed) = r?;
            cfl = cfl.max(speed * dt / cell);
            out.push(v);
        }
        values.push(out);
    }
    values.reverse();
    if cfl > 1.0 {
        log::warn!("grid too coarse: |f| dt / cell reaches {cfl:.3}");
    }
    Ok(ValueTable {
        times,
        axes,
        values,
        cfl_ratio: cfl,
    })
}

/// Grid states from which some control sequence stays in the constraint set
/// over the horizon. Nodes outside the set are `false`.
pub fn oracle_feasible_set(dp: &DPProblem, spec: &ProblemSpec) -> Result<Vec<bool>> {
    let zero = DPProblem {
        mode: CostMode::Zero,
        ..dp.clone()
    };
    let table = brute_force_value(&zero, spec)?;
    Ok(table.values[0].iter().map(|v| v.is_finite()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintSet;
    use crate::model::tests::scalar;
    use crate::model::{StateWeight, TimeMatrix};
    use crate::numerics::Mat;

    fn dp(
        mode: CostMode,
        res: usize,
        controls: usize,
        u_max: f64,
        horizon: f64,
        steps: usize,
    ) -> DPProblem {
        DPProblem {
            state_resolution: vec![res],
            control_resolution: controls,
            u_max,
            t0: 0.0,
            horizon,
            n_steps: steps,
            mode,
        }
    }

    #[test]
    fn scalar_value_near_riccati() {
        let spec = scalar();
        let table = brute_force_value(
            &dp(
                CostMode::Fixed(AlphaPolicy::zero()),
                401,
                161,
                4.0,
                10.0,
                1000,
            ),
            &spec,
        )
        .unwrap();
        let reference = (3.0f64.sqrt() - 1.0) / 2.0 * 0.25;
        let got = table.value_at(&Vector::from_element(1, 0.5));
        assert!(
            (got - reference).abs() <= 0.03 * reference,
            "{got} vs {reference}"
        );
        assert!(got >= reference * (1.0 - 0.03));
    }

    #[test]
    fn zero_cost_is_zero() {
        let mut spec = scalar();
        spec.state_weight = StateWeight::Constant { value: 0.0 };
        let table = brute_force_value(
            &dp(CostMode::Fixed(AlphaPolicy::zero()), 21, 5, 1.0, 1.0, 50),
            &spec,
        )
        .unwrap();
        assert!(table.values[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn escape_is_infeasible() {
        let mut spec = scalar();
        spec.drift = TimeMatrix::Constant(Mat::from_element(1, 1, 1.0));
        spec.input = TimeMatrix::Constant(Mat::zeros(1, 1));
        let problem = dp(CostMode::Fixed(AlphaPolicy::zero()), 201, 3, 1.0, 2.0, 400);
        let table = brute_force_value(&problem, &spec).unwrap();
        assert!(table.value_at(&Vector::from_element(1, 0.5)).is_infinite());
        let mask = oracle_feasible_set(&problem, &spec).unwrap();
        assert!(mask[100]);
        assert!(mask.iter().enumerate().all(|(j, m)| !m || j == 100));
    }

    #[test]
    fn full_authority_is_viable() {
        let spec = scalar();
        let mut outward = spec.clone();
        outward.drift = TimeMatrix::Constant(Mat::from_element(1, 1, 1.0));
        let mask =
            oracle_feasible_set(&dp(CostMode::Zero, 41, 21, 2.0, 2.0, 100), &outward).unwrap();
        assert!(mask.iter().all(|m| *m));
    }

    #[test]
    fn stationary_ball_is_viable() {
        let mut spec = scalar();
        spec.dim_state = 2;
        spec.drift = TimeMatrix::Constant(Mat::zeros(2, 2));
        spec.input = TimeMatrix::Constant(Mat::zeros(2, 1));
        spec.omega = ConstraintSet::unit_ball(2);
        let problem = DPProblem {
            state_resolution: vec![21, 21],
            control_resolution: 1,
            u_max: 0.0,
            t0: 0.0,
            horizon: 1.0,
            n_steps: 20,
            mode: CostMode::Zero,
        };
        let mask = oracle_feasible_set(&problem, &spec).unwrap();
        let table = brute_force_value(&problem, &spec).unwrap();
        for (j, m) in mask.iter().enumerate() {
            assert_eq!(*m, spec.omega.contains(&table.node(j)));
        }
    }

    #[test]
    fn refinement_reduces_error() {
        let spec = scalar();
        let reference = (3.0f64.sqrt() - 1.0) / 2.0 * 0.25;
        let err = |res: usize, ctrl: usize, steps: usize| {
            let t = brute_force_value(
                &dp(
                    CostMode::Fixed(AlphaPolicy::zero()),
                    res,
                    ctrl,
                    4.0,
                    8.0,
                    steps,
                ),
                &spec,
            )
            .unwrap();
            (t.value_at(&Vector::from_element(1, 0.5)) - reference).abs()
        };
        let coarse = err(51, 21, 200);
        let fine = err(101, 41, 400);
        // halving, with a factor 2 of slack
        assert!(fine <= 2.0 * coarse / 2.0);
        assert!(fine < coarse);
    }

    #[test]
    fn rejects_large_dimension() {
        let mut spec = scalar();
        spec.dim_state = 3;
        let problem = dp(CostMode::Zero, 5, 3, 1.0, 1.0, 5);
        assert!(matches!(
            brute_force_value(&problem, &spec),
            Err(Error::UnsupportedVariant(_))
        ));
    }
}
