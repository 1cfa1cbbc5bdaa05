//! Trajectory CSV and report files.
//!
//! Numbers are written in Rust's shortest round-trip form, so parsing a file
//! back yields bit-identical values.

use std::fs;
use std::path::Path;

use nalgebra::{DVector, Quaternion, UnitQuaternion};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::Trajectory;
use crate::lie::{body_diagonal, GroupElement};

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn trajectory_header(traj: &Trajectory) -> Vec<String> {
    let n = traj.states.first().map_or(0, |s| s.len());
    let m = traj.controls.first().map_or(0, |u| u.len());
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("y{i}")));
    h.extend((1..=m).map(|i| format!("u{i}")));
    if traj.adjoints.is_some() {
        h.extend((1..=n).map(|i| format!("p{i}")));
    }
    if let Some(g) = traj.group.as_ref().and_then(|g| g.first()) {
        for i in 1..=g.quaternions.len() {
            for c in ["w", "x", "y", "z"] {
                h.push(format!("q{i}_{c}"));
            }
            for c in ["x", "y", "z"] {
                h.push(format!("r{i}_{c}"));
            }
        }
        h.extend((1..=g.angles.len()).map(|i| format!("theta{i}")));
    }
    h
}

/// CSV text for a trajectory: `t`, states, controls (the last interval's
/// control is repeated on the final node), adjoints and group columns
/// (quaternion `w,x,y,z`, the body diagonal `Rᵀ(1,1,1)` and angles).
pub fn trajectory_to_csv(traj: &Trajectory) -> Result<String> {
    if traj.controls.is_empty() || traj.states.len() != traj.times.len() {
        return Err(Error::GridMismatch(
            "trajectory has no intervals or inconsistent nodes".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(trajectory_header(traj))?;
    for k in 0..traj.times.len() {
        let mut row = vec![fmt_f64(traj.times[k])];
        row.extend(traj.states[k].iter().map(|v| fmt_f64(*v)));
        row.extend(traj.control_at_node(k).iter().map(|v| fmt_f64(*v)));
        if let Some(p) = &traj.adjoints {
            row.extend(p[k].iter().map(|v| fmt_f64(*v)));
        }
        if let Some(g) = &traj.group {
            let g = &g[k];
            for q in &g.quaternions {
                let c = q.quaternion().coords;
                // nalgebra stores (x, y, z, w)
                row.extend([c[3], c[0], c[1], c[2]].iter().map(|v| fmt_f64(*v)));
                row.extend(body_diagonal(q).iter().map(|v| fmt_f64(*v)));
            }
            row.extend(g.angles.iter().map(|v| fmt_f64(*v)));
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Default)]
struct Layout {
    n: usize,
    m: usize,
    p: usize,
    quats: usize,
    angles: usize,
}

fn expect_sequence(header: &[String], pos: &mut usize, prefix: &str, suffixes: &[&str]) -> usize {
    let mut count = 0;
    loop {
        let idx = count + 1;
        let names: Vec<String> = if suffixes.is_empty() {
            vec![format!("{prefix}{idx}")]
        } else {
            suffixes.iter().map(|s| format!("{prefix}{idx}_{s}")).collect()
        };
        if header.len() < *pos + names.len() || header[*pos..*pos + names.len()] != names[..] {
            return count;
        }
        *pos += names.len();
        count += 1;
    }
}

fn parse_layout(header: &[String]) -> Result<Layout> {
    if header.first().map(String::as_str) != Some("t") {
        return Err(Error::Parse("first column must be `t`".into()));
    }
    let mut pos = 1;
    let mut l = Layout {
        n: expect_sequence(header, &mut pos, "y", &[]),
        m: expect_sequence(header, &mut pos, "u", &[]),
        p: expect_sequence(header, &mut pos, "p", &[]),
        ..Layout::default()
    };
    // each rotation factor has a quaternion block followed by its body diagonal
    loop {
        let idx = l.quats + 1;
        let names: Vec<String> = ["w", "x", "y", "z"]
            .iter()
            .map(|c| format!("q{idx}_{c}"))
            .chain(["x", "y", "z"].iter().map(|c| format!("r{idx}_{c}")))
            .collect();
        if header.len() < pos + 7 || header[pos..pos + 7] != names[..] {
            break;
        }
        pos += 7;
        l.quats += 1;
    }
    l.angles = expect_sequence(header, &mut pos, "theta", &[]);
    if pos != header.len() {
        return Err(Error::Parse(format!("unexpected column `{}`", header[pos])));
    }
    if l.n == 0 || l.m == 0 {
        return Err(Error::Parse(
            "at least one state and one control column required".into(),
        ));
    }
    if l.p != 0 && l.p != l.n {
        return Err(Error::Parse(format!("{} adjoint columns for {} states", l.p, l.n)));
    }
    Ok(l)
}

fn parse_number(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("invalid number `{s}`")))
}

/// Parses CSV produced by [`trajectory_to_csv`]. `cost` is not stored in the
/// file and comes back as NaN; `substeps` comes back as 0.
pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let l = parse_layout(&header)?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut adjoints = Vec::new();
    let mut group = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse("ragged row".into()));
        }
        let v: Vec<f64> = rec.iter().map(parse_number).collect::<Result<_>>()?;
        let mut c = 1;
        let mut take = |k: usize| {
            let out = DVector::from_column_slice(&v[c..c + k]);
            c += k;
            out
        };
        times.push(v[0]);
        states.push(take(l.n));
        controls.push(take(l.m));
        if l.p > 0 {
            adjoints.push(take(l.p));
        }
        let mut quats = Vec::with_capacity(l.quats);
        for _ in 0..l.quats {
            let q = take(4);
            let _diagonal = take(3);
            quats.push(UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])));
        }
        let angles = take(l.angles);
        group.push(GroupElement {
            quaternions: quats,
            angles: angles.iter().copied().collect(),
        });
    }
    if times.len() < 2 {
        return Err(Error::Parse("a trajectory needs at least two nodes".into()));
    }
    controls.pop();
    let has_group = l.quats + l.angles > 0;
    Ok(Trajectory {
        times,
        states,
        controls,
        adjoints: (l.p > 0).then_some(adjoints),
        group: has_group.then_some(group),
        cost: f64::NAN,
        substeps: 0,
    })
}

/// CSV text for named columns of equal length; `None` entries are written
/// as empty cells.
pub fn columns_to_csv(names: &[&str], columns: &[Vec<Option<f64>>]) -> Result<String> {
    let rows = columns.first().map_or(0, Vec::len);
    if names.len() != columns.len() || columns.iter().any(|c| c.len() != rows) {
        return Err(Error::GridMismatch("column lengths differ".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(names)?;
    for k in 0..rows {
        w.write_record(columns.iter().map(|c| c[k].map(fmt_f64).unwrap_or_default()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}
