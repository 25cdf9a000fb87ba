//! CSV readers and writers for policies, Riccati solutions, trajectories
//! and value tables. Every file starts with a header naming its columns.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{AlphaPolicy, AlphaTail};
use crate::numerics::Vector;
use crate::oracle::ValueTable;
use crate::riccati::RiccatiSolution;
use crate::synthesis::Trajectory;

/// Longest alpha file accepted, in rows.
pub const MAX_ALPHA_ROWS: usize = 10_000_000;

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut out = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v}").expect("write to string");
    }
    out
}

fn parse_number(text: &str, line: usize) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| {
        Error::config(
            format!("line {line}"),
            format!("`{}` is not a number", text.trim()),
        )
    })?;
    if !v.is_finite() {
        return Err(Error::config(format!("line {line}"), "non-finite number"));
    }
    Ok(v)
}

/// Reads `s,alpha` rows into a policy with a zero tail. A header line and
/// `#` comments are skipped.
pub fn parse_alpha_csv(text: &str) -> Result<AlphaPolicy> {
    let mut nodes = Vec::new();
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if nodes.is_empty()
            && values.is_empty()
            && line.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
        {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(s), Some(a), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::config(
                format!("line {}", i + 1),
                "expected two columns `s,alpha`",
            ));
        };
        nodes.push(parse_number(s, i + 1)?);
        values.push(parse_number(a, i + 1)?);
        if nodes.len() > MAX_ALPHA_ROWS {
            return Err(Error::config("alpha", "too many rows"));
        }
    }
    AlphaPolicy::from_samples(nodes, values, AlphaTail::Zero)
}

pub fn alpha_csv(alpha: &AlphaPolicy) -> String {
    let mut out = String::from("s,alpha\n");
    for (s, a) in alpha.nodes().iter().zip(alpha.values()) {
        writeln!(out, "{s},{a}").expect("write to string");
    }
    out
}

/// `s` then the upper triangle of `P(s)` row by row.
pub fn riccati_csv(sol: &RiccatiSolution) -> String {
    let n = sol.dim();
    let mut header = vec!["s".to_string()];
    for i in 0..n {
        for j in i..n {
            header.push(format!("p_{}_{}", i + 1, j + 1));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for (k, p) in sol.p.iter().enumerate() {
        let s = sol.grid.node(k);
        writeln!(
            out,
            "{}",
            join(std::iter::once(s).chain(p.upper_triangle()))
        )
        .expect("write to string");
    }
    out
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.xi.first().map_or(0, |x| x.len());
    let m = traj.u.first().map_or(0, |u| u.len());
    let mut header = vec!["s".to_string()];
    header.extend((1..=n).map(|i| format!("xi_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    header.extend(["running_cost", "cum_cost", "omega_margin"].map(String::from));
    let mut out = header.join(",");
    out.push('\n');
    for k in 0..traj.len() {
        let row = std::iter::once(traj.s[k])
            .chain(traj.xi[k].iter().copied())
            .chain(traj.u[k].iter().copied())
            .chain([traj.running_cost[k], traj.cum_cost[k], traj.margin[k]]);
        writeln!(out, "{}", join(row)).expect("write to string");
    }
    out
}

pub fn value_table_csv(table: &ValueTable) -> String {
    let n = table.axes.len();
    let mut header = vec!["s".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.push("V".into());
    let mut out = header.join(",");
    out.push('\n');
    let nodes: Vec<Vector> = (0..table.n_states()).map(|j| table.node(j)).collect();
    for (s, layer) in table.times.iter().zip(&table.values) {
        for (x, v) in nodes.iter().zip(layer) {
            let row = std::iter::once(*s).chain(x.iter().copied()).chain([*v]);
            writeln!(out, "{}", join(row)).expect("write to string");
        }
    }
    out
}

/// Comma- or whitespace-separated numbers, optionally in brackets.
pub fn parse_vector_arg(text: &str) -> Result<Vector> {
    let inner = text.trim().trim_start_matches('[').trim_end_matches(']');
    let values = inner
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| parse_number(t, 1))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::config("x0", "empty vector"));
    }
    Ok(Vector::from_vec(values))
}
