//! Dense small-matrix kernels shared by every solver in the crate: uniform
//! time grids, symmetric matrices, classical RK4 stepping for vector and
//! matrix states, Simpson quadrature, central differences and symmetric
//! eigenvalue extraction.
//!
//! Everything here runs on uniform grids with fixed steps so that repeated
//! runs are bit-for-bit reproducible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative slack used when snapping a requested span onto whole steps.
const STEP_SNAP: f64 = 1e-9;

/// Uniform grid `t0 + i * dt`, `i = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidGrid(format!("t0 = {t0}, dt = {dt}")));
        }
        Ok(Self { t0, dt, n_steps })
    }

    /// Grid covering `[t0, t1]` with a step no larger than `max_dt`; the step
    /// is shrunk so that `t1` is hit exactly.
    pub fn spanning(t0: f64, t1: f64, max_dt: f64) -> Result<Self> {
        if !(t1 >= t0) || !(max_dt > 0.0) || !t1.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "span [{t0}, {t1}] with dt = {max_dt}"
            )));
        }
        let n = steps_for(t1 - t0, max_dt);
        if n == 0 {
            return Ok(Self {
                t0,
                dt: max_dt,
                n_steps: 0,
            });
        }
        Self::new(t0, (t1 - t0) / n as f64, n)
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.node(self.n_steps)
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |i| self.node(i))
    }

    /// Interval index `i` with `s` in `[s_i, s_{i+1}]`, clamped to the grid.
    pub fn locate(&self, s: f64) -> usize {
        if self.n_steps == 0 {
            return 0;
        }
        let raw = ((s - self.t0) / self.dt).floor();
        (raw.max(0.0) as usize).min(self.n_steps - 1)
    }

    pub fn contains(&self, s: f64) -> bool {
        let slack = STEP_SNAP * self.dt.max(1.0);
        s >= self.t0 - slack && s <= self.t_end() + slack
    }
}

/// Number of whole steps of size at most `max_dt` covering `span`.
pub fn steps_for(span: f64, max_dt: f64) -> usize {
    let ratio = span.abs() / max_dt;
    if ratio <= STEP_SNAP {
        0
    } else {
        (ratio - STEP_SNAP).ceil().max(1.0) as usize
    }
}

/// Symmetric matrix; every constructor symmetrizes its input.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Mat);

impl SymMatrix {
    pub fn from_matrix(m: Mat) -> Self {
        let mut m = m;
        symmetrize_in_place(&mut m);
        SymMatrix(m)
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(Mat::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Mat::identity(n, n))
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        SymMatrix(Mat::identity(n, n) * c)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_matrix(self) -> Mat {
        self.0
    }

    pub fn quad_form(&self, v: &Vector) -> f64 {
        v.dot(&(&self.0 * v))
    }

    /// Largest absolute eigenvalue, i.e. the spectral norm.
    pub fn spectral_norm(&self) -> f64 {
        let (lo, hi) = eig_sym_extremes(self);
        lo.abs().max(hi.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Row-major upper triangle, the order used in CSV dumps.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }
}

impl std::ops::Sub for &SymMatrix {
    type Output = SymMatrix;
    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &rhs.0)
    }
}

pub fn symmetrize_in_place(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Extreme eigenvalues `(min, max)` of a symmetric matrix.
pub fn eig_sym_extremes(m: &SymMatrix) -> (f64, f64) {
    if m.dim() == 0 {
        return (0.0, 0.0);
    }
    let eig = m.as_matrix().clone().symmetric_eigenvalues();
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Largest eigenvalue of the symmetric part `(M + M^T) / 2`.
pub fn sym_part_max_eig(m: &Mat) -> f64 {
    let sym = SymMatrix::from_matrix(0.5 * (m + m.transpose()));
    eig_sym_extremes(&sym).1
}

/// Spectral abscissa (largest real part of the spectrum) of a square matrix.
pub fn spectral_abscissa(m: &Mat) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn solve_linear(a: &Mat, b: &Vector) -> Option<Vector> {
    a.clone().lu().solve(b)
}

/// One classical RK4 step for a vector state.
pub fn rk4_step<F>(f: &F, t: f64, h: f64, y: &Vector) -> Vector
where
    F: Fn(f64, &Vector) -> Vector,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// One classical RK4 step for a matrix state.
pub fn rk4_step_mat<F>(f: &F, t: f64, h: f64, y: &Mat) -> Mat
where
    F: Fn(f64, &Mat) -> Mat,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Solution of a vector ODE sampled on a uniform grid, with cubic Hermite
/// dense output between nodes.
#[derive(Debug, Clone)]
pub struct SampledPath {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub derivatives: Vec<Vector>,
}

impl SampledPath {
    pub fn last(&self) -> &Vector {
        self.states.last().expect("path has at least one node")
    }

    /// Dense output at `t`; clamps to the end nodes outside the span.
    pub fn eval(&self, t: f64) -> Vector {
        let n = self.times.len();
        if n == 1 {
            return self.states[0].clone();
        }
        let h = self.times[1] - self.times[0];
        let raw = ((t - self.times[0]) / h).floor();
        let i = (raw.max(0.0) as usize).min(n - 2);
        hermite(
            self.times[i],
            h,
            &self.states[i],
            &self.derivatives[i],
            &self.states[i + 1],
            &self.derivatives[i + 1],
            t,
        )
    }
}

/// Cubic Hermite interpolant on `[t_i, t_i + h]` (h may be negative).
pub fn hermite<T>(t_i: f64, h: f64, y0: &T, d0: &T, y1: &T, d1: &T, t: f64) -> T
where
    T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<T, Output = T>,
{
    let tau = ((t - t_i) / h).clamp(0.0, 1.0);
    let tau2 = tau * tau;
    let tau3 = tau2 * tau;
    let h00 = 2.0 * tau3 - 3.0 * tau2 + 1.0;
    let h10 = tau3 - 2.0 * tau2 + tau;
    let h01 = -2.0 * tau3 + 3.0 * tau2;
    let h11 = tau3 - tau2;
    y0.clone() * h00 + d0.clone() * (h10 * h) + y1.clone() * h01 + d1.clone() * (h11 * h)
}

/// Fixed-step RK4 integration of `y' = rhs(t, y)` from `t_start` to `t_end`
/// (either direction), with step magnitude at most `max_dt`.
pub fn integrate_ode<F>(
    rhs: F,
    t_start: f64,
    t_end: f64,
    y0: &Vector,
    max_dt: f64,
) -> Result<SampledPath>
where
    F: Fn(f64, &Vector) -> Vector,
{
    if t_start == t_end {
        return Err(Error::InvalidGrid("t_start equals t_end".into()));
    }
    if !(max_dt > 0.0) {
        return Err(Error::InvalidGrid(format!("dt = {max_dt}")));
    }
    let n = steps_for(t_end - t_start, max_dt).max(1);
    let h = (t_end - t_start) / n as f64;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut derivatives = Vec::with_capacity(n + 1);
    let mut y = y0.clone();
    for i in 0..=n {
        let t = t_start + i as f64 * h;
        let d = rhs(t, &y);
        if !y.iter().chain(d.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { time: t });
        }
        times.push(t);
        states.push(y.clone());
        derivatives.push(d);
        if i < n {
            y = rk4_step(&rhs, t, h, &y);
        }
    }
    Ok(SampledPath {
        times,
        states,
        derivatives,
    })
}

/// Composite Simpson rule over `n` panels of `[a, b]`, each panel using its
/// midpoint; exact on cubics.
pub fn quadrature<F>(f: F, a: f64, b: f64, n: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    let n = n.max(1);
    let h = (b - a) / n as f64;
    let mut acc = 0.0;
    let mut left = f(a);
    for i in 0..n {
        let t = a + i as f64 * h;
        let mid = f(t + 0.5 * h);
        let right = f(if i + 1 == n { b } else { t + h });
        acc += (left + 4.0 * mid + right) * h / 6.0;
        left = right;
    }
    if !acc.is_finite() {
        return Err(Error::NonFiniteState { time: b });
    }
    Ok(acc)
}

/// Simpson rule on equally spaced samples; an odd interval count finishes
/// with the 3/8 rule. Two samples fall back to the trapezoid.
pub fn simpson_samples(values: &[f64], h: f64) -> f64 {
    let n = values.len().saturating_sub(1);
    match n {
        0 => 0.0,
        1 => 0.5 * h * (values[0] + values[1]),
        _ => {
            let (even_end, tail) = if n.is_multiple_of(2) {
                (n, false)
            } else {
                (n - 3, true)
            };
            let mut acc = 0.0;
            let mut i = 0;
            while i < even_end {
                acc += h / 3.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
                i += 2;
            }
            if tail {
                let j = even_end;
                acc += 3.0 * h / 8.0
                    * (values[j] + 3.0 * values[j + 1] + 3.0 * values[j + 2] + values[j + 3]);
            }
            acc
        }
    }
}

/// Central-difference Jacobian of `f` at `x`.
pub fn central_difference_jacobian<F>(f: F, x: &Vector, step: f64) -> Mat
where
    F: Fn(&Vector) -> Vector,
{
    let n = x.len();
    let m = f(x).len();
    let mut jac = Mat::zeros(m, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (f(&xp) - f(&xm)) / (2.0 * step);
        jac.set_column(j, &col);
    }
    jac
}

/// Max-abs entry norm.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
