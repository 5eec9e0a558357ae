use std::fmt::Write as _;
use std::io::Write;

use nalgebra::Matrix6;

use super::{FactorGraph, FactorKind};
use crate::geometry::RigidPose;

fn pose_fields(out: &mut String, p: &RigidPose) {
    let t = p.translation();
    let q = p.quaternion();
    let _ = write!(out, " {} {} {} {} {} {} {}", t.x, t.y, t.z, q[0], q[1], q[2], q[3]);
}

fn info_fields(out: &mut String, info: &Matrix6<f64>) {
    for r in 0..6 {
        for c in r..6 {
            let _ = write!(out, " {}", info[(r, c)]);
        }
    }
}

/// Writes the graph as g2o text: `VERTEX_SE3:QUAT`, `EDGE_SE3:QUAT` and
/// `EDGE_SE3_PRIOR` lines. Information blocks use `[translation; rotation]`
/// order, upper triangle row-major.
pub fn write_g2o<W: Write>(graph: &FactorGraph, mut writer: W) -> std::io::Result<()> {
    let mut out = String::new();
    for (id, pose) in graph.nodes() {
        let _ = write!(out, "VERTEX_SE3:QUAT {id}");
        pose_fields(&mut out, pose);
        out.push('\n');
    }
    for f in graph.factors() {
        match f.kind() {
            FactorKind::Between(i, j) => {
                let _ = write!(out, "EDGE_SE3:QUAT {i} {j}");
            }
            FactorKind::Prior(i) => {
                let _ = write!(out, "EDGE_SE3_PRIOR {i}");
            }
        }
        pose_fields(&mut out, f.measurement());
        info_fields(&mut out, f.information());
        out.push('\n');
    }
    writer.write_all(out.as_bytes())
}
