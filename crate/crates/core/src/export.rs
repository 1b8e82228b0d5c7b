//! CSV serialization and atomic file output.
//!
//! Floats use 17 significant digits so values round-trip exactly. Lines end
//! in LF. Missing values are empty fields.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::engine::Trajectory;
use crate::objectives::GlmObjective;
use crate::oracle::{Expectation, SecondMoment};

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

/// Fixed trajectory columns, followed by one `loss_client_{i}` per client.
pub const TRAJECTORY_COLUMNS: [&str; 6] = [
    "n",
    "t",
    "participants",
    "loss_fed",
    "loss_surrogate",
    "dist_sq",
];

fn trajectory_header(clients: usize) -> String {
    let mut cols: Vec<String> = TRAJECTORY_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend((0..clients).map(|i| format!("loss_client_{i}")));
    cols.join(",")
}

/// `participants` is a 0/1 string with client 0 first.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = trajectory_header(traj.clients);
    out.push('\n');
    for rec in &traj.records {
        let mut mask = vec![b'0'; traj.clients];
        for p in &rec.participants {
            mask[p.client] = b'1';
        }
        let mask = String::from_utf8(mask).expect("ascii mask");
        let m = rec.metrics.as_ref();
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            rec.round,
            fmt_float(rec.time),
            mask,
            opt(m.map(|m| m.loss_fed)),
            opt(m.map(|m| m.loss_surrogate)),
            opt(m.map(|m| m.dist_sq)),
        );
        for i in 0..traj.clients {
            out.push(',');
            out.push_str(&opt(m.map(|m| m.client_losses[i])));
        }
        out.push('\n');
    }
    out
}

/// Oracle predictions for scalar quadratics `½(θ − θ_i*)²` with equal
/// importance, in the trajectory schema. Losses are expectations.
pub fn oracle_csv(
    mean: &Expectation,
    second: &SecondMoment,
    optima: &[f64],
    initial: f64,
) -> String {
    let clients = optima.len();
    let optimum = optima.iter().sum::<f64>() / clients as f64;
    let means = mean.mean(initial);
    let mut out = trajectory_header(clients);
    out.push('\n');
    for (n, (&v, &m)) in second.values.iter().zip(&means).enumerate() {
        // E(θ − θ_i*)² = V + 2(θ* − θ_i*)(E θ − θ*) + (θ* − θ_i*)²
        let client: Vec<f64> = optima
            .iter()
            .map(|o| 0.5 * (v + 2.0 * (optimum - o) * (m - optimum) + (optimum - o).powi(2)))
            .collect();
        let fed = client.iter().sum::<f64>() / clients as f64;
        let _ = write!(
            out,
            "{n},,,{},{},{}",
            fmt_float(fed),
            fmt_float(fed),
            fmt_float(v)
        );
        for c in client {
            out.push(',');
            out.push_str(&fmt_float(c));
        }
        out.push('\n');
    }
    out
}

/// One row per sample: features `x0..`, then the target `y`.
pub fn shard_csv(shard: &GlmObjective) -> String {
    let dim = shard.row(0).len();
    let mut cols: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    cols.push("y".into());
    let mut out = cols.join(",");
    out.push('\n');
    for i in 0..shard.samples() {
        for x in shard.row(i) {
            out.push_str(&fmt_float(*x));
            out.push(',');
        }
        out.push_str(&fmt_float(shard.target(i)));
        out.push('\n');
    }
    out
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
