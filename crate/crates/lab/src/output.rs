//! Atomic file output and the trajectory CSV format.

use std::io::Write;
use std::path::Path;

use esc_core::integrator::Trajectory;

use crate::error::LabResult;

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename, so readers never see a truncated file. `-` means stdout.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> LabResult<()> {
    if path.as_os_str() == "-" {
        let mut out = std::io::stdout().lock();
        out.write_all(bytes)?;
        return Ok(out.flush()?);
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `t,x1,...,xm` header followed by one row per sample.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::from("t");
    for i in 1..=traj.dim {
        s.push_str(&format!(",x{i}"));
    }
    s.push('\n');
    for (t, x) in traj.samples() {
        s.push_str(&fmt_f64(t));
        for v in x {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

/// Parses a CSV produced by [`trajectory_csv`] into `(t, x)` rows.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<(f64, Vec<f64>)>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty trajectory file")?;
    let cols = header.split(',').count();
    if cols < 2 || !header.starts_with("t,") {
        return Err(format!("unexpected header {header:?}"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let vals: Result<Vec<f64>, _> = l.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| format!("row {}: {e}", i + 2))?;
            if vals.len() != cols {
                return Err(format!("row {} has {} columns, expected {cols}", i + 2, vals.len()));
            }
            Ok((vals[0], vals[1..].to_vec()))
        })
        .collect()
}

pub fn json_bytes(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s.into_bytes()
}
