//! TUM trajectory text: `timestamp tx ty tz qx qy qz qw` per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{RigidPose, Vec3};

/// A timestamped pose sequence.
pub type Trajectory = Vec<(f64, RigidPose)>;

/// Formats `v` in plain decimal with nine significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".to_string() } else { v.to_string() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).clamp(0, 20) as usize;
    let s = format!("{v:.decimals$}");
    if s.starts_with("-") && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        // Avoid "-0.000".
        return s[1..].to_string();
    }
    s
}

pub fn format_tum(trajectory: &[(f64, RigidPose)]) -> String {
    let mut out = String::new();
    for (t, p) in trajectory {
        let x = p.translation();
        let q = p.quaternion();
        let fields = [*t, x.x, x.y, x.z, q[0], q[1], q[2], q[3]];
        let line: Vec<String> = fields.iter().map(|v| format_sig9(*v)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Parses TUM text; blank lines and `#` comments are skipped. `path` is only
/// used for error context.
pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::ParseLine {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let qn = (vals[4] * vals[4] + vals[5] * vals[5] + vals[6] * vals[6] + vals[7] * vals[7]).sqrt();
        if qn < 1e-6 {
            return Err(err("zero quaternion".into()));
        }
        let pose = RigidPose::from_quaternion([vals[4], vals[5], vals[6], vals[7]], Vec3::new(vals[1], vals[2], vals[3]));
        out.push((vals[0], pose));
    }
    Ok(out)
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text, path)
}

pub fn write_tum(path: &Path, trajectory: &[(f64, RigidPose)]) -> Result<()> {
    std::fs::write(path, format_tum(trajectory)).map_err(|e| Error::io(path, e))
}
