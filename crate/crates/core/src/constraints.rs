//! Constraint-set geometry and inward-pointing verifiers.
//!
//! A [`ConstraintSet`] answers membership, signed-margin and cone queries.
//! Boundary quantifiers ("for all x on the boundary") are discretized by
//! [`sample_boundary`]; every verifier reports its worst sample so a caller
//! can refine locally.
//!
//! Interior-tangent membership is tested through the normal cone: `v` lies in
//! the interior of the tangent cone at `x` iff `<n, v> < 0` for every normal
//! generator `n`. The margin of `v` is `min_n -<n, v>`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{
    eval_dynamics, parse_matrix, parse_vector, AlphaPolicy, FunctionSpec, ProblemSpec,
};
use crate::numerics::{sym_part_max_eig, Mat, SymMatrix, Vector};
use crate::riccati::RiccatiSolution;

/// Smooth boundary functions `g` with `Omega = {g <= 0}`.
#[derive(Debug, Clone, PartialEq)]
pub enum SublevelFn {
    /// `(x - c)^T M (x - c) - 1`, `M` symmetric positive definite.
    Ellipsoid { center: Vector, shape: Mat },
    /// `sum_i |(x_i - c_i) / r_i|^p - 1`, `p >= 2`.
    Lp {
        center: Vector,
        radii: Vector,
        p: f64,
    },
}

impl SublevelFn {
    fn center(&self) -> &Vector {
        match self {
            SublevelFn::Ellipsoid { center, .. } | SublevelFn::Lp { center, .. } => center,
        }
    }

    pub fn value(&self, x: &Vector) -> f64 {
        match self {
            SublevelFn::Ellipsoid { center, shape } => {
                let d = x - center;
                d.dot(&(shape * &d)) - 1.0
            }
            SublevelFn::Lp { center, radii, p } => {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    acc += ((x[i] - center[i]) / radii[i]).abs().powf(*p);
                }
                acc - 1.0
            }
        }
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        match self {
            SublevelFn::Ellipsoid { center, shape } => shape * (x - center) * 2.0,
            SublevelFn::Lp { center, radii, p } => Vector::from_fn(x.len(), |i, _| {
                let z = (x[i] - center[i]) / radii[i];
                p * z.abs().powf(p - 1.0) * z.signum() / radii[i]
            }),
        }
    }

    /// Boundary point on the ray `center + t d`, `|d| = 1`.
    fn radial_boundary(&self, d: &Vector) -> Vector {
        let t = match self {
            SublevelFn::Ellipsoid { shape, .. } => 1.0 / d.dot(&(shape * d)).sqrt(),
            SublevelFn::Lp { radii, p, .. } => {
                let mut acc = 0.0;
                for i in 0..d.len() {
                    acc += (d[i] / radii[i]).abs().powf(*p);
                }
                acc.powf(-1.0 / p)
            }
        };
        self.center() + d * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SetKind {
    Ball {
        center: Vector,
        radius: f64,
    },
    Box {
        lo: Vector,
        hi: Vector,
    },
    /// `{x : <a_i, x> <= c_i}` with unit rows `a_i`; vertices are cached for
    /// `n <= 2`.
    Polytope {
        normals: Vec<Vector>,
        offsets: Vec<f64>,
        vertices: Vec<Vector>,
    },
    Sublevel(SublevelFn),
}

/// Compact constraint set with nonempty interior.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub kind: SetKind,
    pub dim: usize,
    pub bounding_radius: f64,
    /// A strictly interior point.
    pub interior: Vector,
    /// Active-set tolerance, `1e-9 * bounding_radius`.
    pub tol_active: f64,
}

/// Cone information at a point on (or near) the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeQuery {
    pub point: Vector,
    /// Indices of active constraints (faces for box/polytope; `[0]` for smooth sets).
    pub active: Vec<usize>,
    /// Unit outward normal generators of the normal cone.
    pub normals: Vec<Vector>,
}

impl ConeQuery {
    /// `min_n -<n, v>`; positive iff `v` points into the interior of the
    /// tangent cone. Interior points (no active constraint) give `+inf`.
    pub fn margin(&self, v: &Vector) -> f64 {
        self.normals
            .iter()
            .map(|n| -n.dot(v))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct BoundarySample {
    pub density: usize,
    pub points: Vec<ConeQuery>,
}

impl ConstraintSet {
    pub fn ball(center: Vector, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::config("omega.params.radius", "must be positive"));
        }
        let br = center.norm() + radius;
        Self::finish(
            SetKind::Ball {
                center: center.clone(),
                radius,
            },
            center,
            br,
        )
    }

    pub fn unit_ball(n: usize) -> Self {
        Self::ball(Vector::zeros(n), 1.0).expect("unit ball is valid")
    }

    pub fn boxed(lo: Vector, hi: Vector) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                what: "omega box".into(),
                expected: lo.len().to_string(),
                found: hi.len().to_string(),
            });
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(h > l)) {
            return Err(Error::config(
                "omega.params",
                "box needs lo < hi componentwise",
            ));
        }
        let interior = (&lo + &hi) * 0.5;
        let br = lo.abs().sup(&hi.abs()).norm();
        Self::finish(SetKind::Box { lo, hi }, interior, br)
    }

    pub fn polytope(normals: Vec<Vector>, offsets: Vec<f64>) -> Result<Self> {
        let n = normals.first().map_or(0, |a| a.len());
        if normals.len() != offsets.len() || normals.is_empty() {
            return Err(Error::config(
                "omega.params.offsets",
                "need one offset per normal",
            ));
        }
        if n == 0 || n > 2 {
            return Err(Error::UnsupportedVariant(format!(
                "polytope constraint sets are supported for n <= 2, got n = {n}"
            )));
        }
        let mut unit = Vec::with_capacity(normals.len());
        let mut offs = Vec::with_capacity(normals.len());
        for (a, c) in normals.iter().zip(&offsets) {
            let norm = a.norm();
            if !(norm > 0.0) || !norm.is_finite() || a.len() != n {
                return Err(Error::config(
                    "omega.params.normals",
                    "rows must be nonzero and of equal length",
                ));
            }
            unit.push(a / norm);
            offs.push(c / norm);
        }
        if has_recession_direction(&unit) {
            return Err(Error::config("omega", "polytope is unbounded"));
        }
        let vertices = polytope_vertices(&unit, &offs);
        if vertices.len() < n + 1 {
            return Err(Error::config("omega", "polytope has empty interior"));
        }
        let mut centroid = Vector::zeros(n);
        for v in &vertices {
            centroid += v;
        }
        centroid /= vertices.len() as f64;
        let br = vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let kind = SetKind::Polytope {
            normals: unit,
            offsets: offs,
            vertices,
        };
        Self::finish(kind, centroid, br)
    }

    pub fn sublevel(g: SublevelFn) -> Result<Self> {
        let n = g.center().len();
        let br = match &g {
            SublevelFn::Ellipsoid { center, shape } => {
                let sym = SymMatrix::from_matrix(shape.clone());
                let (lo, _) = crate::numerics::eig_sym_extremes(&sym);
                if !(lo > 0.0) || shape != sym.as_matrix() {
                    return Err(Error::config(
                        "omega.params.shape",
                        "must be symmetric positive definite",
                    ));
                }
                center.norm() + 1.0 / lo.sqrt()
            }
            SublevelFn::Lp { center, radii, p } => {
                if !(*p >= 2.0) || !p.is_finite() {
                    return Err(Error::config("omega.params.p", "must be >= 2"));
                }
                if radii.len() != n || radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
                    return Err(Error::config("omega.params.radii", "must be positive"));
                }
                center.norm() + radii.norm()
            }
        };
        let interior = g.center().clone();
        Self::finish(SetKind::Sublevel(g), interior, br)
    }

    fn finish(kind: SetKind, interior: Vector, bounding_radius: f64) -> Result<Self> {
        if !bounding_radius.is_finite() || interior.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("omega", "non-finite geometry"));
        }
        let dim = interior.len();
        let set = Self {
            kind,
            dim,
            bounding_radius,
            interior,
            tol_active: 1e-9 * bounding_radius.max(1e-300),
        };
        if !(set.margin(&set.interior) > set.tol_active) {
            return Err(Error::config(
                "omega",
                "interior witness is not strictly inside",
            ));
        }
        Ok(set)
    }

    pub fn from_spec(key: &str, f: &FunctionSpec, n: usize) -> Result<Self> {
        let params = f
            .params
            .as_object()
            .ok_or_else(|| Error::config(format!("{key}.params"), "expected an object"))?;
        let get = |name: &str| -> Result<&Value> {
            params
                .get(name)
                .ok_or_else(|| Error::config(format!("{key}.params.{name}"), "missing"))
        };
        let vec_of = |name: &str| -> Result<Vector> {
            parse_vector(&format!("{key}.params.{name}"), get(name)?, n)
        };
        let num_of = |name: &str| -> Result<f64> {
            get(name)?
                .as_f64()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::config(format!("{key}.params.{name}"), "expected a number"))
        };
        match f.variant.as_str() {
            "ball" => Self::ball(vec_of("center")?, num_of("radius")?),
            "box" => Self::boxed(vec_of("lo")?, vec_of("hi")?),
            "polytope" => {
                let rows = get("normals")?.as_array().ok_or_else(|| {
                    Error::config(format!("{key}.params.normals"), "expected rows")
                })?;
                let normals = rows
                    .iter()
                    .map(|r| parse_vector(&format!("{key}.params.normals"), r, n))
                    .collect::<Result<Vec<_>>>()?;
                let offsets = get("offsets")?
                    .as_array()
                    .ok_or_else(|| {
                        Error::config(format!("{key}.params.offsets"), "expected an array")
                    })?
                    .iter()
                    .map(|v| {
                        v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| {
                            Error::config(format!("{key}.params.offsets"), "expected numbers")
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::polytope(normals, offsets)
            }
            "sublevel" => {
                let function = get("function")?.as_str().ok_or_else(|| {
                    Error::config(format!("{key}.params.function"), "expected a string")
                })?;
                let center = match params.get("center") {
                    Some(v) => parse_vector(&format!("{key}.params.center"), v, n)?,
                    None => Vector::zeros(n),
                };
                let g = match function {
                    "ellipsoid" => SublevelFn::Ellipsoid {
                        center,
                        shape: parse_matrix(&format!("{key}.params.shape"), get("shape")?, n, n)?,
                    },
                    "lp" => SublevelFn::Lp {
                        center,
                        radii: vec_of("radii")?,
                        p: num_of("p")?,
                    },
                    other => {
                        return Err(Error::UnknownVariant {
                            key: format!("{key}.params.function"),
                            variant: other.into(),
                        })
                    }
                };
                Self::sublevel(g)
            }
            other => Err(Error::UnknownVariant {
                key: key.into(),
                variant: other.into(),
            }),
        }
    }

    /// Signed margin: positive inside, zero on the boundary, negative outside.
    /// Exact distance to the boundary for balls, boxes and interior points of
    /// polytopes; a first-order estimate for sublevel sets.
    pub fn margin(&self, x: &Vector) -> f64 {
        match &self.kind {
            SetKind::Ball { center, radius } => radius - (x - center).norm(),
            SetKind::Box { lo, hi } => {
                let mut inside = f64::INFINITY;
                let mut outside_sq = 0.0;
                for i in 0..x.len() {
                    let below = lo[i] - x[i];
                    let above = x[i] - hi[i];
                    if below > 0.0 {
                        outside_sq += below * below;
                    } else if above > 0.0 {
                        outside_sq += above * above;
                    }
                    inside = inside.min(x[i] - lo[i]).min(hi[i] - x[i]);
                }
                if outside_sq > 0.0 {
                    -outside_sq.sqrt()
                } else {
                    inside
                }
            }
            SetKind::Polytope {
                normals, offsets, ..
            } => normals
                .iter()
                .zip(offsets)
                .map(|(a, c)| c - a.dot(x))
                .fold(f64::INFINITY, f64::min),
            SetKind::Sublevel(g) => {
                let grad = g.gradient(x).norm();
                (-g.value(x) / grad.max(1e-12)).min(self.bounding_radius)
            }
        }
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.margin(x) >= -self.tol_active
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> (Vector, Vector) {
        match &self.kind {
            SetKind::Ball { center, radius } => {
                (center.add_scalar(-radius), center.add_scalar(*radius))
            }
            SetKind::Box { lo, hi } => (lo.clone(), hi.clone()),
            SetKind::Polytope { vertices, .. } => {
                let mut lo = vertices[0].clone();
                let mut hi = vertices[0].clone();
                for v in vertices {
                    lo = lo.inf(v);
                    hi = hi.sup(v);
                }
                (lo, hi)
            }
            SetKind::Sublevel(SublevelFn::Ellipsoid { center, shape }) => {
                let inv = shape
                    .clone()
                    .try_inverse()
                    .expect("validated positive definite");
                let half = Vector::from_fn(center.len(), |i, _| inv[(i, i)].sqrt());
                (center - &half, center + &half)
            }
            SetKind::Sublevel(SublevelFn::Lp { center, radii, .. }) => {
                (center - radii, center + radii)
            }
        }
    }

    /// Active set and unit normal generators at `x`.
    pub fn cone_query(&self, x: &Vector) -> ConeQuery {
        let tol = self.tol_active;
        let mut active = Vec::new();
        let mut normals = Vec::new();
        match &self.kind {
            SetKind::Ball { center, radius } => {
                let d = x - center;
                if d.norm() >= radius - tol {
                    active.push(0);
                    normals.push(d.normalize());
                }
            }
            SetKind::Box { lo, hi } => {
                let n = x.len();
                for i in 0..n {
                    if x[i] <= lo[i] + tol {
                        active.push(2 * i);
                        normals.push(-unit(n, i));
                    }
                    if x[i] >= hi[i] - tol {
                        active.push(2 * i + 1);
                        normals.push(unit(n, i));
                    }
                }
            }
            SetKind::Polytope {
                normals: rows,
                offsets,
                ..
            } => {
                for (i, (a, c)) in rows.iter().zip(offsets).enumerate() {
                    if a.dot(x) >= c - tol {
                        active.push(i);
                        normals.push(a.clone());
                    }
                }
            }
            SetKind::Sublevel(g) => {
                let grad = g.gradient(x);
                if g.value(x) >= -tol * grad.norm() && grad.norm() > 0.0 {
                    active.push(0);
                    normals.push(grad.normalize());
                }
            }
        }
        ConeQuery {
            point: x.clone(),
            active,
            normals,
        }
    }

    /// Rejection sampling of interior points from the bounding box; `unit`
    /// must return independent uniforms on `[0, 1)`.
    pub fn sample_interior<F: FnMut() -> f64>(
        &self,
        mut unit_draw: F,
        count: usize,
    ) -> Vec<Vector> {
        let (lo, hi) = self.bounds();
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count && attempts < 1000 * count.max(1) {
            attempts += 1;
            let x = Vector::from_fn(self.dim, |i, _| lo[i] + (hi[i] - lo[i]) * unit_draw());
            if self.margin(&x) >= 0.0 {
                out.push(x);
            }
        }
        out
    }
}

fn unit(n: usize, i: usize) -> Vector {
    let mut e = Vector::zeros(n);
    e[i] = 1.0;
    e
}

/// A nonzero `d` with `<a_i, d> <= 0` for all rows; exact for `n <= 2`, where
/// extreme rays of the recession cone are orthogonal to some row.
fn has_recession_direction(rows: &[Vector]) -> bool {
    let n = rows[0].len();
    let mut candidates: Vec<Vector> = Vec::new();
    for i in 0..n {
        candidates.push(unit(n, i));
        candidates.push(-unit(n, i));
    }
    if n == 2 {
        for a in rows {
            let perp = Vector::from_vec(vec![-a[1], a[0]]);
            candidates.push(perp.clone());
            candidates.push(-perp);
        }
    }
    candidates
        .iter()
        .any(|d| rows.iter().all(|a| a.dot(d) <= 1e-12))
}

fn polytope_vertices(rows: &[Vector], offsets: &[f64]) -> Vec<Vector> {
    let n = rows[0].len();
    let feasible = |v: &Vector| {
        rows.iter()
            .zip(offsets)
            .all(|(a, c)| a.dot(v) <= c + 1e-9 * (1.0 + c.abs()))
    };
    let mut out: Vec<Vector> = Vec::new();
    let mut push = |v: Vector| {
        if feasible(&v)
            && !out
                .iter()
                .any(|w| (w - &v).norm() <= 1e-12 * (1.0 + v.norm()))
        {
            out.push(v);
        }
    };
    if n == 1 {
        for (a, c) in rows.iter().zip(offsets) {
            push(Vector::from_element(1, c / a[0]));
        }
    } else {
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let m =
                    Mat::from_row_slice(2, 2, &[rows[i][0], rows[i][1], rows[j][0], rows[j][1]]);
                if m.determinant().abs() < 1e-12 {
                    continue;
                }
                if let Some(v) = m
                    .lu()
                    .solve(&Vector::from_vec(vec![offsets[i], offsets[j]]))
                {
                    push(v);
                }
            }
        }
    }
    out
}

/// Largest sample count any sampler will produce.
const MAX_BOUNDARY_POINTS: usize = 1_000_000;

fn push_unique(seen: &mut BTreeSet<Vec<u64>>, pts: &mut Vec<Vector>, x: Vector) {
    let key: Vec<u64> = x.iter().map(|v| (v + 0.0).to_bits()).collect();
    if seen.insert(key) {
        pts.push(x);
    }
}

/// Unit directions: circle for `n = 2`, Fibonacci lattice for `n = 3`.
fn sphere_directions(n: usize, density: usize) -> Result<Vec<Vector>> {
    match n {
        1 => Ok(vec![
            Vector::from_element(1, -1.0),
            Vector::from_element(1, 1.0),
        ]),
        2 => Ok((0..density)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / density as f64;
                Vector::from_vec(vec![th.cos(), th.sin()])
            })
            .collect()),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            Ok((0..density)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / density as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * k as f64;
                    Vector::from_vec(vec![r * th.cos(), r * th.sin(), z])
                })
                .collect())
        }
        _ => Err(Error::UnsupportedVariant(format!(
            "boundary sampling of curved sets in dimension {n}"
        ))),
    }
}

/// Deterministic quasi-uniform sample of the boundary with cone data.
pub fn sample_boundary(omega: &ConstraintSet, density: usize) -> Result<BoundarySample> {
    if density == 0 || density > MAX_BOUNDARY_POINTS {
        return Err(Error::InvalidArgument(format!(
            "density must be in 1..={MAX_BOUNDARY_POINTS}"
        )));
    }
    let n = omega.dim;
    let mut pts: Vec<Vector> = Vec::new();
    let mut seen = BTreeSet::new();
    match &omega.kind {
        SetKind::Ball { center, radius } => {
            for d in sphere_directions(n, density)? {
                pts.push(center + d * *radius);
            }
        }
        SetKind::Sublevel(g) => {
            for d in sphere_directions(n, density)? {
                pts.push(g.radial_boundary(&d));
            }
        }
        SetKind::Box { lo, hi } => {
            let per_axis = if n == 1 {
                1
            } else {
                ((density as f64).powf(1.0 / (n as f64 - 1.0)).ceil() as usize).max(2)
            };
            if (per_axis as f64).powi(n as i32 - 1) * 2.0 * n as f64 > MAX_BOUNDARY_POINTS as f64 {
                return Err(Error::InvalidArgument("box sample too large".into()));
            }
            let coord = |axis: usize, k: usize| -> f64 {
                if per_axis == 1 {
                    lo[axis]
                } else if k + 1 == per_axis {
                    hi[axis]
                } else {
                    lo[axis] + (hi[axis] - lo[axis]) * k as f64 / (per_axis - 1) as f64
                }
            };
            for axis in 0..n {
                for side in [lo[axis], hi[axis]] {
                    let free: Vec<usize> = (0..n).filter(|&j| j != axis).collect();
                    let total = per_axis.pow(free.len() as u32);
                    for idx in 0..total {
                        let mut x = Vector::zeros(n);
                        x[axis] = side;
                        let mut rem = idx;
                        for &j in &free {
                            x[j] = coord(j, rem % per_axis);
                            rem /= per_axis;
                        }
                        push_unique(&mut seen, &mut pts, x);
                    }
                }
            }
        }
        SetKind::Polytope {
            normals,
            offsets,
            vertices,
        } => {
            if n == 1 {
                for v in vertices {
                    push_unique(&mut seen, &mut pts, v.clone());
                }
            } else {
                let per_face = density.max(2);
                for (a, c) in normals.iter().zip(offsets) {
                    let on_face: Vec<&Vector> = vertices
                        .iter()
                        .filter(|v| (a.dot(v) - c).abs() <= 1e-9 * (1.0 + c.abs()))
                        .collect();
                    if on_face.len() < 2 {
                        continue;
                    }
                    let (p0, p1) = (on_face[0], on_face[1]);
                    for k in 0..per_face {
                        let x = if k == 0 {
                            p0.clone()
                        } else if k + 1 == per_face {
                            p1.clone()
                        } else {
                            p0 + (p1 - p0) * (k as f64 / (per_face - 1) as f64)
                        };
                        push_unique(&mut seen, &mut pts, x);
                    }
                }
            }
        }
    }
    let points = pts.into_iter().map(|x| omega.cone_query(&x)).collect();
    Ok(BoundarySample { density, points })
}

/// Best interior-tangent margin of `{f(s, x, u) : |u| <= u_max}` over a
/// control grid with `resolution` points per axis.
pub fn check_base_ipc(
    spec: &ProblemSpec,
    s: f64,
    query: &ConeQuery,
    u_max: f64,
    resolution: usize,
) -> Result<f64> {
    let m = spec.dim_control;
    let res = resolution.max(2);
    let total = res
        .checked_pow(m as u32)
        .filter(|t| *t <= 10_000_000)
        .ok_or_else(|| Error::InvalidArgument("control grid too large".into()))?;
    let mut best = f64::NEG_INFINITY;
    for idx in 0..total {
        let mut rem = idx;
        let u = Vector::from_fn(m, |_, _| {
            let k = rem % res;
            rem /= res;
            -u_max + 2.0 * u_max * k as f64 / (res - 1) as f64
        });
        if u.norm() > u_max * (1.0 + 1e-12) {
            continue;
        }
        let f = eval_dynamics(spec, s, &query.point, &u)?;
        best = best.max(query.margin(&f));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IpcReport {
    pub worst_margin: f64,
    pub witness_s: f64,
    pub witness_x: Vec<f64>,
    pub n_samples: usize,
    pub density: usize,
}

impl IpcReport {
    pub fn holds(&self) -> bool {
        self.worst_margin > 0.0
    }
}

/// Closed-loop matrix `A(s) - B(s) R^{-1} B(s)^T P(s)`.
pub fn closed_loop_matrix(spec: &ProblemSpec, p: &SymMatrix, s: f64) -> Mat {
    let b = spec.b_at(s);
    spec.a_at(s) - &b * b.transpose() * p.as_matrix() * spec.r_inv_scale()
}

/// Worst margin of `grad h(x)^T Gamma(s) h(x)` over time and boundary
/// samples.
pub fn check_ipc_riccati(
    spec: &ProblemSpec,
    p: &RiccatiSolution,
    time_samples: &[f64],
    boundary: &BoundarySample,
) -> Result<IpcReport> {
    let per_time: Vec<(f64, f64, usize)> = time_samples
        .par_iter()
        .map(|&s| -> Result<(f64, f64, usize)> {
            let gamma = closed_loop_matrix(spec, &p.at(s)?, s);
            let mut worst = (f64::INFINITY, s, 0usize);
            for (k, q) in boundary.points.iter().enumerate() {
                let x = &q.point;
                let v = spec.h.jacobian(x).transpose() * (&gamma * spec.h.forward(x));
                let m = q.margin(&v);
                if m < worst.0 {
                    worst = (m, s, k);
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let mut worst = (f64::INFINITY, f64::NAN, 0usize);
    for w in per_time {
        if w.0 < worst.0 {
            worst = w;
        }
    }
    let witness_x = boundary
        .points
        .get(worst.2)
        .map(|q| q.point.iter().cloned().collect())
        .unwrap_or_default();
    Ok(IpcReport {
        worst_margin: worst.0,
        witness_s: worst.1,
        witness_x,
        n_samples: time_samples.len() * boundary.points.len(),
        density: boundary.density,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometricReport {
    pub delta: f64,
    /// Raw inclusion held at every sample and `rho > 0`.
    pub holds: bool,
    pub raw_inclusion: bool,
    /// Largest `|grad h^T h - delta n| / delta` (inclusion needs `< 1`).
    pub worst_ratio: f64,
    pub rho: f64,
    pub theta: f64,
    /// Whether the raw inclusion and the sign of `rho` agree.
    pub consistent: bool,
    pub witness_x: Vec<f64>,
}

/// Checks `h(x) - delta grad h(x)^{-T} n` lies in `delta grad h(x)^{-T}(int B)`
/// at every boundary sample and normal generator, and computes the constants
/// `rho`, `theta` on the rescaled map `sqrt(delta) h`.
pub fn geometric_condition(
    spec: &ProblemSpec,
    delta: f64,
    boundary: &BoundarySample,
) -> Result<GeometricReport> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta = {delta} must be positive"
        )));
    }
    let root = delta.sqrt();
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut witness = Vec::new();
    let mut max_q = f64::NEG_INFINITY;
    let mut theta = 0.0_f64;
    for q in &boundary.points {
        let x = &q.point;
        let hx = spec.h.forward(x);
        let jac_t = spec.h.jacobian(x).transpose();
        for n in &q.normals {
            let ratio = (&jac_t * &hx - n * delta).norm() / delta;
            if ratio > worst_ratio {
                worst_ratio = ratio;
                witness = x.iter().cloned().collect();
            }
            let w = spec.h.apply_jacobian_inverse_transpose(x, n)? / root;
            let h_scaled = &hx * root;
            let prod = w.norm() * (&h_scaled - &w).norm();
            max_q = max_q.max(prod - w.norm_squared());
            theta = theta.max(prod);
        }
    }
    let raw_inclusion = worst_ratio < 1.0;
    let rho = -max_q;
    Ok(GeometricReport {
        delta,
        holds: raw_inclusion && rho > 0.0,
        raw_inclusion,
        worst_ratio,
        rho,
        theta,
        consistent: raw_inclusion == (rho > 0.0),
        witness_x: witness,
    })
}

/// `theta ||B||_inf^2 ||C_alpha||_2^2 / rho`.
pub fn gamma_bar(spec: &ProblemSpec, alpha: &AlphaPolicy, rho: f64, theta: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rho = {rho} must be positive"
        )));
    }
    let c_norm_sq = spec.weight_l1_norm(alpha)?;
    Ok(theta * spec.input_bound * spec.input_bound * c_norm_sq / rho)
}

/// `<A x, x> <= -gamma |x|^2` for all `x`.
pub fn check_negative_definite(a: &Mat, gamma: f64) -> bool {
    sym_part_max_eig(a) <= -gamma
}
