//! Problem definition: structured dynamics `grad h(x)^{-1} (A(s) h(x) + B(s) u)`,
//! the alpha-parametrized Lagrangian and its marginal function, the
//! diffeomorphism catalog, and hypothesis validation for configs.
//!
//! Every function of time or of alpha is a tagged catalog variant with
//! parameters so that problems serialize to a single JSON document:
//!
//! ```json
//! {"dims": {"state": 1, "control": 1},
//!  "A": {"variant": "constant", "params": {"value": -1}},
//!  "B": {"variant": "constant", "params": {"value": 1}},
//!  "K": {"variant": "constant", "params": {"value": 2}},
//!  "a": {"variant": "linear", "params": {"c": 1}},
//!  "b": {"variant": "power", "params": {"c": 1, "q": 2}},
//!  "h": {"variant": "identity"},
//!  "omega": {"variant": "box", "params": {"lo": [-1], "hi": [1]}},
//!  "grid": {"t0": 0, "dt": 0.01, "t_max": 200}}
//! ```

use serde::Deserialize;
use serde_json::Value;

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::numerics::{solve_linear, Mat, Vector};

/// Largest state or control dimension accepted from a config.
pub const MAX_DIM: usize = 32;
/// Largest number of time steps a config grid may request.
pub const MAX_GRID_STEPS: f64 = 2.0e7;
/// Diagonal of the control weight, `R = R_SCALE * I`.
pub const R_SCALE: f64 = 0.5;

/// `{"variant": ..., "params": {...}}`
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub variant: String,
    #[serde(default)]
    pub params: Value,
}

/// Matrix-valued function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeMatrix {
    Constant(Mat),
    /// `base + amplitude * sin(omega * s)`
    Sinusoid {
        base: Mat,
        amplitude: Mat,
        omega: f64,
    },
}

impl TimeMatrix {
    pub fn at(&self, s: f64) -> Mat {
        match self {
            TimeMatrix::Constant(m) => m.clone(),
            TimeMatrix::Sinusoid {
                base,
                amplitude,
                omega,
            } => base + amplitude * (omega * s).sin(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TimeMatrix::Constant(m) => m.shape(),
            TimeMatrix::Sinusoid { base, .. } => base.shape(),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            TimeMatrix::Constant(_) => true,
            TimeMatrix::Sinusoid {
                amplitude, omega, ..
            } => *omega == 0.0 || amplitude.iter().all(|v| *v == 0.0),
        }
    }

    /// Upper bound on `sup_s ||M(s)||_2` from the triangle inequality.
    pub fn norm_bound(&self) -> f64 {
        match self {
            TimeMatrix::Constant(m) => spectral_norm(m),
            TimeMatrix::Sinusoid {
                base, amplitude, ..
            } => spectral_norm(base) + spectral_norm(amplitude),
        }
    }
}

/// Operator 2-norm.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// `K(s) >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateWeight {
    Constant {
        value: f64,
    },
    /// `value` on `[0, until]`, zero afterwards.
    Window {
        value: f64,
        until: f64,
    },
    /// `value * exp(-rate * s)`
    Exponential {
        value: f64,
        rate: f64,
    },
}

impl StateWeight {
    pub fn at(&self, s: f64) -> f64 {
        match *self {
            StateWeight::Constant { value } => value,
            StateWeight::Window { value, until } => {
                if s <= until {
                    value
                } else {
                    0.0
                }
            }
            StateWeight::Exponential { value, rate } => value * (-rate * s).exp(),
        }
    }

    pub fn is_l1(&self) -> bool {
        self.integral_from_zero().is_some()
    }

    pub fn is_l2(&self) -> bool {
        self.is_l1()
    }

    /// Closed-form `int_0^inf K`, `None` when divergent.
    pub fn integral_from_zero(&self) -> Option<f64> {
        match *self {
            StateWeight::Constant { value } => (value == 0.0).then_some(0.0),
            StateWeight::Window { value, until } => Some(value * until.max(0.0)),
            StateWeight::Exponential { value, rate } => Some(value / rate),
        }
    }

    pub fn max_value(&self) -> f64 {
        match *self {
            StateWeight::Constant { value }
            | StateWeight::Window { value, .. }
            | StateWeight::Exponential { value, .. } => value,
        }
    }
}

/// `a(alpha) = c * alpha^p`, `p >= 1` (linear is `p = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaReward {
    pub c: f64,
    pub p: f64,
}

impl AlphaReward {
    pub fn value(&self, alpha: f64) -> f64 {
        if self.p == 1.0 {
            self.c * alpha
        } else {
            self.c * alpha.powf(self.p)
        }
    }
}

/// `b(alpha) = c * alpha^q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaPenalty {
    pub c: f64,
    pub q: f64,
}

impl AlphaPenalty {
    pub fn value(&self, alpha: f64) -> f64 {
        if self.q == 2.0 {
            self.c * alpha * alpha
        } else {
            self.c * alpha.powf(self.q)
        }
    }
}

/// The state diffeomorphism `h`.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffeoMap {
    Identity,
    Linear {
        matrix: Mat,
        inverse: Mat,
    },
    /// `x_i + beta * x_i^3` componentwise.
    Cubic {
        beta: f64,
    },
}

impl DiffeoMap {
    pub fn linear(matrix: Mat) -> Result<Self> {
        let inverse = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::config("h.params.matrix", "matrix is singular"))?;
        Ok(DiffeoMap::Linear { matrix, inverse })
    }

    pub fn forward(&self, x: &Vector) -> Vector {
        match self {
            DiffeoMap::Identity => x.clone(),
            DiffeoMap::Linear { matrix, .. } => matrix * x,
            DiffeoMap::Cubic { beta } => x.map(|v| v + beta * v * v * v),
        }
    }

    pub fn jacobian(&self, x: &Vector) -> Mat {
        match self {
            DiffeoMap::Identity => Mat::identity(x.len(), x.len()),
            DiffeoMap::Linear { matrix, .. } => matrix.clone(),
            DiffeoMap::Cubic { beta } => Mat::from_diagonal(&x.map(|v| 1.0 + 3.0 * beta * v * v)),
        }
    }

    pub fn jacobian_inverse(&self, x: &Vector) -> Result<Mat> {
        match self {
            DiffeoMap::Identity => Ok(Mat::identity(x.len(), x.len())),
            DiffeoMap::Linear { inverse, .. } => Ok(inverse.clone()),
            DiffeoMap::Cubic { beta } => {
                let d = x.map(|v| 1.0 + 3.0 * beta * v * v);
                if d.iter().any(|v| !(v.abs() > 0.0) || !v.is_finite()) {
                    return Err(Error::SingularJacobian(x.iter().cloned().collect()));
                }
                Ok(Mat::from_diagonal(&d.map(|v| 1.0 / v)))
            }
        }
    }

    /// `grad h(x)^{-1} v` without forming the inverse.
    pub fn apply_jacobian_inverse(&self, x: &Vector, v: &Vector) -> Result<Vector> {
        match self {
            DiffeoMap::Identity => Ok(v.clone()),
            DiffeoMap::Linear { inverse, .. } => Ok(inverse * v),
            DiffeoMap::Cubic { .. } => {
                let jac = self.jacobian(x);
                solve_linear(&jac, v)
                    .ok_or_else(|| Error::SingularJacobian(x.iter().cloned().collect()))
            }
        }
    }

    /// `grad h(x)^{-T} v`.
    pub fn apply_jacobian_inverse_transpose(&self, x: &Vector, v: &Vector) -> Result<Vector> {
        match self {
            DiffeoMap::Identity => Ok(v.clone()),
            DiffeoMap::Linear { inverse, .. } => Ok(inverse.transpose() * v),
            DiffeoMap::Cubic { .. } => self.apply_jacobian_inverse(x, v),
        }
    }

    pub fn inverse(&self, y: &Vector) -> Vector {
        match self {
            DiffeoMap::Identity => y.clone(),
            DiffeoMap::Linear { inverse, .. } => inverse * y,
            DiffeoMap::Cubic { beta } => y.map(|v| invert_odd_cubic(*beta, v)),
        }
    }

    /// `h(0) = 0`, so the origin is an equilibrium of the structured dynamics.
    pub fn is_odd(&self) -> bool {
        true
    }
}

/// Real root of `x + beta x^3 = y` (unique since the map is increasing).
fn invert_odd_cubic(beta: f64, y: f64) -> f64 {
    if beta == 0.0 || y == 0.0 {
        return y;
    }
    // Cardano for x^3 + p x + q = 0 with p = 1/beta, q = -y/beta.
    let p = 1.0 / beta;
    let q = -y / beta;
    let disc = (q * q / 4.0 + p * p * p / 27.0).sqrt();
    let mut x = (-q / 2.0 + disc).cbrt() + (-q / 2.0 - disc).cbrt();
    // Cardano cancels badly for small |y|; a few Newton steps restore accuracy.
    for _ in 0..4 {
        let f = x + beta * x * x * x - y;
        let df = 1.0 + 3.0 * beta * x * x;
        let step = f / df;
        x -= step;
        if step.abs() <= 1e-17 * x.abs().max(1e-300) {
            break;
        }
    }
    x
}

/// Time-grid parameters from the config.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub t0: f64,
    pub dt: f64,
    /// Longest horizon any stabilizing solve may reach.
    pub t_max: f64,
    /// Simulation / evaluation horizon measured from `t0`.
    #[serde(default = "default_t_eval")]
    pub t_eval: f64,
}

fn default_t_eval() -> f64 {
    10.0
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub dim_state: usize,
    pub dim_control: usize,
    /// `A(s)`
    pub drift: TimeMatrix,
    /// `B(s)`
    pub input: TimeMatrix,
    /// Declared `sup_s ||B(s)||_2`.
    pub input_bound: f64,
    /// `K(s)`
    pub state_weight: StateWeight,
    /// `a(alpha)`
    pub reward: AlphaReward,
    /// `b(alpha)`
    pub penalty: AlphaPenalty,
    pub h: DiffeoMap,
    pub omega: ConstraintSet,
    pub grid: GridParams,
}

impl ProblemSpec {
    pub fn a_at(&self, s: f64) -> Mat {
        self.drift.at(s)
    }

    pub fn b_at(&self, s: f64) -> Mat {
        self.input.at(s)
    }

    /// `R^{-1}` is `r_inv_scale() * I`.
    pub fn r_inv_scale(&self) -> f64 {
        1.0 / R_SCALE
    }

    /// Scalar multiplying the identity in `Q(s, alpha)`.
    pub fn q_scale(&self, s: f64, alpha: f64) -> f64 {
        0.5 * self.state_weight.at(s) + self.reward.value(alpha)
    }

    /// Maximizer of `beta -> a(beta) g - b(beta)` over `beta >= 0`; the
    /// smallest one when several exist.
    pub fn alpha_argmax(&self, g: f64) -> Result<f64> {
        let AlphaReward { c: ca, p } = self.reward;
        let AlphaPenalty { c: cb, q } = self.penalty;
        if g <= 0.0 || ca == 0.0 {
            return Ok(0.0);
        }
        if !(cb > 0.0) || !(q > p) {
            return Err(Error::UnboundedSup);
        }
        // Stationarity c_a p beta^{p-1} g = c_b q beta^{q-1}.
        let beta = (ca * p * g / (cb * q)).powf(1.0 / (q - p));
        Ok(beta)
    }

    /// `max_{beta >= 0} a(beta) g - b(beta)`.
    pub fn alpha_gain(&self, g: f64) -> Result<f64> {
        let beta = self.alpha_argmax(g)?;
        Ok((self.reward.value(beta) * g - self.penalty.value(beta)).max(0.0))
    }

    /// Same maximizer by golden-section search on `[0, beta_max]`, where
    /// `beta_max` comes from the growth bound `a(beta) g < b(beta)`.
    pub fn alpha_argmax_numeric(&self, g: f64, tol: f64) -> Result<f64> {
        let AlphaReward { c: ca, p } = self.reward;
        let AlphaPenalty { c: cb, q } = self.penalty;
        if !(cb > 0.0) || !(q > p) {
            if g > 0.0 && ca > 0.0 {
                return Err(Error::UnboundedSup);
            }
            return Ok(0.0);
        }
        let objective = |beta: f64| self.reward.value(beta) * g - self.penalty.value(beta);
        let beta_max = 2.0 * (ca * g.max(0.0) / cb).powf(1.0 / (q - p)) + 1.0;
        let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (0.0, beta_max);
        let mut x1 = hi - inv_phi * (hi - lo);
        let mut x2 = lo + inv_phi * (hi - lo);
        let (mut f1, mut f2) = (objective(x1), objective(x2));
        while hi - lo > tol {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + inv_phi * (hi - lo);
                f2 = objective(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - inv_phi * (hi - lo);
                f1 = objective(x1);
            }
        }
        let best = 0.5 * (lo + hi);
        if objective(0.0) >= objective(best) {
            Ok(0.0)
        } else {
            Ok(best)
        }
    }

    /// Exact `int_0^inf (K/2 + a(alpha))`, i.e. `||C_alpha||_2^2` with
    /// `C_alpha = sqrt(Q(., alpha(.)))` measured per unit direction.
    pub fn weight_l1_norm(&self, alpha: &AlphaPolicy) -> Result<f64> {
        let k = self
            .state_weight
            .integral_from_zero()
            .ok_or_else(|| Error::NotIntegrable("K".into()))?;
        let a = alpha.integral(|v| self.reward.value(v), 0.0, f64::INFINITY)?;
        Ok(0.5 * k + a)
    }

    /// Checks the hypotheses that are testable on samples of the time grid.
    pub fn check_hypotheses(&self) -> Result<HypothesisReport> {
        let samples = sample_times(&self.grid);
        let mut observed_b = 0.0_f64;
        for &s in &samples {
            observed_b = observed_b.max(spectral_norm(&self.b_at(s)));
        }
        if observed_b > self.input_bound * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::DeclaredBoundViolated(format!(
                "declared ||B|| = {} but ||B(s)|| reaches {observed_b}",
                self.input_bound
            )));
        }
        let q_min = samples
            .iter()
            .map(|&s| self.q_scale(s, 0.0))
            .fold(f64::INFINITY, f64::min);
        Ok(HypothesisReport {
            observed_input_norm: observed_b,
            min_state_weight: q_min,
            growth_ok: self.penalty.q > self.reward.p,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub observed_input_norm: f64,
    /// `min_s (K(s)/2 + a(0))` over grid samples.
    pub min_state_weight: f64,
    pub growth_ok: bool,
}

fn sample_times(grid: &GridParams) -> Vec<f64> {
    let n = 2000usize;
    let span = (grid.t_max - grid.t0).max(0.0);
    (0..=n)
        .map(|i| grid.t0 + span * i as f64 / n as f64)
        .collect()
}

/// Behaviour of an alpha policy after its last node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaTail {
    Zero,
    Hold,
}

/// Piecewise-constant outer-player policy: `alpha(s) = values[i]` on
/// `[nodes[i], nodes[i+1])`; zero before the first node; after the last
/// node either zero or `values.last()` depending on `tail`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaPolicy {
    nodes: Vec<f64>,
    values: Vec<f64>,
    tail: AlphaTail,
}

impl AlphaPolicy {
    pub fn zero() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            tail: AlphaTail::Zero,
        }
    }

    /// `c` on `[t0, t1)`, zero elsewhere.
    pub fn constant(c: f64, t0: f64, t1: f64) -> Result<Self> {
        Self::from_samples(vec![t0, t1], vec![c, 0.0], AlphaTail::Zero)
    }

    /// `c` for every `s >= t0`.
    pub fn constant_forever(c: f64, t0: f64) -> Result<Self> {
        Self::from_samples(vec![t0], vec![c], AlphaTail::Hold)
    }

    pub fn from_samples(nodes: Vec<f64>, values: Vec<f64>, tail: AlphaTail) -> Result<Self> {
        if nodes.len() != values.len() {
            return Err(Error::DimensionMismatch {
                what: "alpha policy".into(),
                expected: format!("{} values", nodes.len()),
                found: values.len().to_string(),
            });
        }
        if nodes.is_empty() {
            return Err(Error::InvalidGrid("alpha policy has no nodes".into()));
        }
        if nodes.iter().any(|s| !s.is_finite()) || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid(
                "alpha nodes must be finite and strictly increasing".into(),
            ));
        }
        if let Some(&bad) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeAlpha(bad));
        }
        Ok(Self {
            nodes,
            values,
            tail,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tail(&self) -> AlphaTail {
        self.tail
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn at(&self, s: f64) -> f64 {
        if self.nodes.is_empty() || s < self.nodes[0] {
            return 0.0;
        }
        let last = self.nodes.len() - 1;
        if s >= self.nodes[last] {
            return match self.tail {
                AlphaTail::Zero => 0.0,
                AlphaTail::Hold => self.values[last],
            };
        }
        let i = self.nodes.partition_point(|&n| n <= s) - 1;
        self.values[i]
    }

    /// Exact `int_{t0}^{t1} f(alpha(s)) ds` for `f(0) = 0`; `t1` may be
    /// infinite.
    pub fn integral<F: Fn(f64) -> f64>(&self, f: F, t0: f64, t1: f64) -> Result<f64> {
        if self.nodes.is_empty() || t1 <= t0 {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for i in 0..self.nodes.len() - 1 {
            let lo = self.nodes[i].max(t0);
            let hi = self.nodes[i + 1].min(t1);
            if hi > lo {
                acc += f(self.values[i]) * (hi - lo);
            }
        }
        let last = self.nodes.len() - 1;
        if self.tail == AlphaTail::Hold {
            let lo = self.nodes[last].max(t0);
            if t1 > lo {
                let rate = f(self.values[last]);
                if rate != 0.0 {
                    if t1.is_infinite() {
                        return Err(Error::NotIntegrable(format!(
                            "alpha holds {} forever",
                            self.values[last]
                        )));
                    }
                    acc += rate * (t1 - lo);
                }
            }
        }
        Ok(acc)
    }
}

/// `grad h(x)^{-1} (A(s) h(x) + B(s) u)`.
pub fn eval_dynamics(spec: &ProblemSpec, s: f64, x: &Vector, u: &Vector) -> Result<Vector> {
    let hx = spec.h.forward(x);
    let z = spec.a_at(s) * hx + spec.b_at(s) * u;
    spec.h.apply_jacobian_inverse(x, &z)
}

/// `(K(s)/2 + a(alpha)) |h(x)|^2 + |u|^2 / 2 - b(alpha)`.
pub fn eval_lagrangian(
    spec: &ProblemSpec,
    s: f64,
    x: &Vector,
    u: &Vector,
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::NegativeAlpha(alpha));
    }
    let g = spec.h.forward(x).norm_squared();
    Ok(spec.q_scale(s, alpha) * g + R_SCALE * u.norm_squared() - spec.penalty.value(alpha))
}

/// The marginal function `sup_{alpha >= 0}` of [`eval_lagrangian`].
pub fn eval_sup_lagrangian(spec: &ProblemSpec, s: f64, x: &Vector, u: &Vector) -> Result<f64> {
    let g = spec.h.forward(x).norm_squared();
    Ok(0.5 * spec.state_weight.at(s) * g + R_SCALE * u.norm_squared() + spec.alpha_gain(g)?)
}

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDims {
    state: usize,
    control: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dims: RawDims,
    #[serde(rename = "A")]
    drift: FunctionSpec,
    #[serde(rename = "B")]
    input: FunctionSpec,
    #[serde(rename = "K")]
    state_weight: FunctionSpec,
    #[serde(rename = "a")]
    reward: FunctionSpec,
    #[serde(rename = "b")]
    penalty: FunctionSpec,
    h: FunctionSpec,
    omega: FunctionSpec,
    grid: GridParams,
    #[serde(rename = "R", default)]
    control_weight: Option<Value>,
}

/// Parses and validates a JSON problem document.
pub fn build_problem(config: &str) -> Result<ProblemSpec> {
    let raw: RawConfig = serde_json::from_str(config).map_err(|e| {
        let msg = e.to_string();
        let key = offending_key(&msg).unwrap_or_else(|| "<document>".to_string());
        Error::config(key, msg)
    })?;
    build_from_raw(raw)
}

pub fn build_problem_from_value(config: Value) -> Result<ProblemSpec> {
    let raw: RawConfig = serde_json::from_value(config).map_err(|e| {
        let msg = e.to_string();
        let key = offending_key(&msg).unwrap_or_else(|| "<document>".to_string());
        Error::config(key, msg)
    })?;
    build_from_raw(raw)
}

/// serde reports ``missing field `x` `` / ``unknown field `x` ``; pull out `x`.
fn offending_key(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn build_from_raw(raw: RawConfig) -> Result<ProblemSpec> {
    let n = raw.dims.state;
    let m = raw.dims.control;
    for (key, d) in [("dims.state", n), ("dims.control", m)] {
        if d == 0 || d > MAX_DIM {
            return Err(Error::config(
                key,
                format!("must be in 1..={MAX_DIM}, got {d}"),
            ));
        }
    }
    let grid = raw.grid;
    check_grid(&grid)?;

    let drift = parse_time_matrix("A", &raw.drift, n, n)?;
    let input = parse_time_matrix("B", &raw.input, n, m)?;
    let input_bound = match raw.input.params.get("norm_bound") {
        Some(v) => {
            let b = as_f64("B.params.norm_bound", v)?;
            if b < 0.0 {
                return Err(Error::config("B.params.norm_bound", "must be nonnegative"));
            }
            b
        }
        None => input.norm_bound(),
    };
    let state_weight = parse_state_weight(&raw.state_weight)?;
    let reward = parse_reward(&raw.reward)?;
    let penalty = parse_penalty(&raw.penalty)?;
    if !(penalty.q > reward.p) {
        return Err(Error::GrowthViolation {
            p: reward.p,
            q: penalty.q,
        });
    }
    if let Some(r) = &raw.control_weight {
        check_control_weight(r, m)?;
    }
    let h = parse_diffeo(&raw.h, n)?;
    let omega = ConstraintSet::from_spec("omega", &raw.omega, n)?;

    let spec = ProblemSpec {
        dim_state: n,
        dim_control: m,
        drift,
        input,
        input_bound,
        state_weight,
        reward,
        penalty,
        h,
        omega,
        grid,
    };
    spec.check_hypotheses()?;
    Ok(spec)
}

fn check_grid(grid: &GridParams) -> Result<()> {
    let GridParams {
        t0,
        dt,
        t_max,
        t_eval,
    } = *grid;
    if !t0.is_finite() || !(t0 >= 0.0) {
        return Err(Error::config("grid.t0", "must be finite and nonnegative"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::config("grid.dt", "must be positive"));
    }
    if !(t_max > t0) || !t_max.is_finite() {
        return Err(Error::config("grid.t_max", "must exceed t0"));
    }
    if !(t_eval > 0.0) || !(t0 + t_eval <= t_max) {
        return Err(Error::config(
            "grid.t_eval",
            "must be positive with t0 + t_eval <= t_max",
        ));
    }
    if (t_max - t0) / dt > MAX_GRID_STEPS {
        return Err(Error::config("grid.dt", "too many steps for t_max"));
    }
    Ok(())
}

fn check_control_weight(r: &Value, m: usize) -> Result<()> {
    let mat = parse_matrix("R", r, m, m)?;
    let expected = Mat::identity(m, m) * R_SCALE;
    if (mat - expected).iter().any(|v| v.abs() > 1e-12) {
        return Err(Error::NonconformingWeight(
            "R must be one half of the identity".into(),
        ));
    }
    Ok(())
}

fn params_of<'a>(key: &str, f: &'a FunctionSpec) -> Result<&'a serde_json::Map<String, Value>> {
    f.params
        .as_object()
        .ok_or_else(|| Error::config(format!("{key}.params"), "expected an object"))
}

fn field<'a>(
    key: &str,
    params: &'a serde_json::Map<String, Value>,
    name: &str,
) -> Result<&'a Value> {
    params
        .get(name)
        .ok_or_else(|| Error::config(format!("{key}.params.{name}"), "missing"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    let x = v
        .as_f64()
        .ok_or_else(|| Error::config(key, "expected a number"))?;
    if !x.is_finite() {
        return Err(Error::config(key, "must be finite"));
    }
    Ok(x)
}

fn num(key: &str, params: &serde_json::Map<String, Value>, name: &str) -> Result<f64> {
    as_f64(&format!("{key}.params.{name}"), field(key, params, name)?)
}

/// Accepts a bare number (1x1), a flat array (column vector) or nested rows.
pub fn parse_matrix(key: &str, v: &Value, rows: usize, cols: usize) -> Result<Mat> {
    let data: Vec<Vec<f64>> = match v {
        Value::Number(_) => vec![vec![as_f64(key, v)?]],
        Value::Array(items) if items.iter().all(|x| x.is_number()) => items
            .iter()
            .map(|x| Ok(vec![as_f64(key, x)?]))
            .collect::<Result<_>>()?,
        Value::Array(items) => items
            .iter()
            .map(|row| {
                row.as_array()
                    .ok_or_else(|| Error::config(key, "expected rows of numbers"))?
                    .iter()
                    .map(|x| as_f64(key, x))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?,
        _ => return Err(Error::config(key, "expected a number or an array")),
    };
    let found_rows = data.len();
    let found_cols = data.first().map_or(0, |r| r.len());
    if found_rows != rows || data.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            what: key.to_string(),
            expected: format!("{rows}x{cols}"),
            found: format!("{found_rows}x{found_cols}"),
        });
    }
    Ok(Mat::from_fn(rows, cols, |i, j| data[i][j]))
}

pub fn parse_vector(key: &str, v: &Value, n: usize) -> Result<Vector> {
    let m = parse_matrix(key, v, n, 1)?;
    Ok(m.column(0).into_owned())
}

fn parse_time_matrix(key: &str, f: &FunctionSpec, rows: usize, cols: usize) -> Result<TimeMatrix> {
    let params = params_of(key, f)?;
    match f.variant.as_str() {
        "constant" => Ok(TimeMatrix::Constant(parse_matrix(
            &format!("{key}.params.value"),
            field(key, params, "value")?,
            rows,
            cols,
        )?)),
        "sinusoid" => Ok(TimeMatrix::Sinusoid {
            base: parse_matrix(
                &format!("{key}.params.base"),
                field(key, params, "base")?,
                rows,
                cols,
            )?,
            amplitude: parse_matrix(
                &format!("{key}.params.amplitude"),
                field(key, params, "amplitude")?,
                rows,
                cols,
            )?,
            omega: num(key, params, "omega")?,
        }),
        other => Err(Error::UnknownVariant {
            key: key.into(),
            variant: other.into(),
        }),
    }
}

fn parse_state_weight(f: &FunctionSpec) -> Result<StateWeight> {
    let key = "K";
    let params = params_of(key, f)?;
    let value = num(key, params, "value")?;
    if value < 0.0 {
        return Err(Error::NonPositiveWeight(format!("K value {value} < 0")));
    }
    let weight = match f.variant.as_str() {
        "constant" => StateWeight::Constant { value },
        "window" => {
            let until = num(key, params, "until")?;
            if until < 0.0 {
                return Err(Error::config("K.params.until", "must be nonnegative"));
            }
            StateWeight::Window { value, until }
        }
        "exponential" => {
            let rate = num(key, params, "rate")?;
            if !(rate > 0.0) {
                return Err(Error::config("K.params.rate", "must be positive"));
            }
            StateWeight::Exponential { value, rate }
        }
        other => {
            return Err(Error::UnknownVariant {
                key: key.into(),
                variant: other.into(),
            })
        }
    };
    if let Some(tags) = params.get("integrability") {
        let tags = tags
            .as_array()
            .ok_or_else(|| Error::config("K.params.integrability", "expected an array"))?;
        for tag in tags {
            let ok = match tag.as_str() {
                Some("L1") => weight.is_l1(),
                Some("L2") => weight.is_l2(),
                _ => {
                    return Err(Error::config(
                        "K.params.integrability",
                        format!("unknown tag {tag}"),
                    ))
                }
            };
            if !ok {
                return Err(Error::IntegrabilityMismatch(format!(
                    "K declared {tag} but {weight:?} is not"
                )));
            }
        }
    }
    Ok(weight)
}

fn parse_reward(f: &FunctionSpec) -> Result<AlphaReward> {
    let key = "a";
    let params = params_of(key, f)?;
    let c = num(key, params, "c")?;
    if c < 0.0 {
        return Err(Error::NonPositiveWeight(format!(
            "a is decreasing (c = {c})"
        )));
    }
    match f.variant.as_str() {
        "linear" => Ok(AlphaReward { c, p: 1.0 }),
        "power" => {
            let p = num(key, params, "p")?;
            if !(p >= 1.0) {
                return Err(Error::config("a.params.p", "must be >= 1"));
            }
            Ok(AlphaReward { c, p })
        }
        other => Err(Error::UnknownVariant {
            key: key.into(),
            variant: other.into(),
        }),
    }
}

fn parse_penalty(f: &FunctionSpec) -> Result<AlphaPenalty> {
    let key = "b";
    let params = params_of(key, f)?;
    let c = num(key, params, "c")?;
    if !(c > 0.0) {
        return Err(Error::NonPositiveWeight(format!(
            "b coefficient {c} must be positive"
        )));
    }
    match f.variant.as_str() {
        "linear" => Ok(AlphaPenalty { c, q: 1.0 }),
        "power" => {
            let q = num(key, params, "q")?;
            if !(q >= 1.0) {
                return Err(Error::config("b.params.q", "must be >= 1"));
            }
            Ok(AlphaPenalty { c, q })
        }
        other => Err(Error::UnknownVariant {
            key: key.into(),
            variant: other.into(),
        }),
    }
}

fn parse_diffeo(f: &FunctionSpec, n: usize) -> Result<DiffeoMap> {
    let key = "h";
    match f.variant.as_str() {
        "identity" => Ok(DiffeoMap::Identity),
        "linear" => {
            let params = params_of(key, f)?;
            let matrix = parse_matrix("h.params.matrix", field(key, params, "matrix")?, n, n)?;
            let cond = condition_number(&matrix);
            if !(cond < 1e12) {
                return Err(Error::config(
                    "h.params.matrix",
                    "matrix is singular or ill-conditioned",
                ));
            }
            DiffeoMap::linear(matrix)
        }
        "cubic" => {
            let params = params_of(key, f)?;
            let beta = num(key, params, "beta")?;
            if beta < 0.0 {
                return Err(Error::config("h.params.beta", "must be nonnegative"));
            }
            Ok(DiffeoMap::Cubic { beta })
        }
        other => Err(Error::UnknownVariant {
            key: key.into(),
            variant: other.into(),
        }),
    }
}

fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
