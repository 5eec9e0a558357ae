//! Trajectory and map error metrics.

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidPose, Vec3};
use crate::io::Trajectory;
use crate::par;
use crate::tsdf::TriangleMesh;

/// Maximum timestamp difference for associating two poses, seconds.
pub const ASSOCIATION_GATE: f64 = 0.05;

/// Pairs `(est index, ref index)` by nearest reference timestamp within
/// `gate`. Returns the pairs and the number of unmatched estimates.
pub fn associate(est: &[(f64, RigidPose)], reference: &[(f64, RigidPose)], gate: f64) -> (Vec<(usize, usize)>, usize) {
    let mut order: Vec<usize> = (0..reference.len()).collect();
    order.sort_by(|&a, &b| reference[a].0.total_cmp(&reference[b].0));
    let times: Vec<f64> = order.iter().map(|&i| reference[i].0).collect();
    let mut pairs = Vec::new();
    for (i, (t, _)) in est.iter().enumerate() {
        let pos = times.partition_point(|x| *x < *t);
        let best = [pos.checked_sub(1), (pos < times.len()).then_some(pos)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()));
        if let Some(j) = best.filter(|&j| (times[j] - t).abs() <= gate) {
            pairs.push((i, order[j]));
        }
    }
    let unmatched = est.len() - pairs.len();
    (pairs, unmatched)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub pose: RigidPose,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.pose.rotation() * p * self.scale + self.pose.translation()
    }
}

/// Least-squares similarity (or rigid motion) mapping `src` onto `dst`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<Similarity> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::InvalidParameter("umeyama needs paired points".into()));
    }
    if n < 3 {
        return Err(Error::Association { matched: n, total: n.max(3) });
    }
    let ms = src.iter().sum::<Vec3>() / n as f64;
    let md = dst.iter().sum::<Vec3>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - ms, d - md);
        cov += b * a.transpose();
        src_cov += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n as f64;
    var_s /= n as f64;
    let mut ev: Vec<f64> = src_cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("source positions are collinear".into()));
    }
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut sv = svd.singular_values;
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
        sv[2] = -sv[2];
    }
    let r = u * s * v_t;
    let scale = if with_scale { sv.sum() / var_s } else { 1.0 };
    let t = md - r * ms * scale;
    Ok(Similarity {
        pose: RigidPose::new(r, t),
        scale,
    })
}

/// Aligns `est` onto `reference` after timestamp association.
pub fn umeyama_align(est: &Trajectory, reference: &Trajectory, with_scale: bool) -> Result<Similarity> {
    let (pairs, _) = associate(est, reference, ASSOCIATION_GATE);
    if pairs.len() < 3 {
        return Err(Error::Association {
            matched: pairs.len(),
            total: est.len(),
        });
    }
    let src: Vec<Vec3> = pairs.iter().map(|&(i, _)| *est[i].1.translation()).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|&(_, j)| *reference[j].1.translation()).collect();
    umeyama(&src, &dst, with_scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreAlign {
    /// Common origin: the first associated pose pair is made to coincide.
    StartFrame,
    /// Rigid least-squares alignment of all positions.
    Umeyama,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryErrorReport {
    pub pre_align: PreAlign,
    pub matched: usize,
    pub unmatched: usize,
    pub std_convention: String,
    pub ape_rms: f64,
    pub ape_std: f64,
    pub ape_mean: f64,
    /// Same statistics after Umeyama alignment; absent for degenerate paths.
    pub ape_rms_align: Option<f64>,
    pub ape_std_align: Option<f64>,
    pub final_yaw_error_deg: f64,
    pub t: Vec<f64>,
    pub ape: Vec<f64>,
    pub e_x: Vec<f64>,
    pub e_y: Vec<f64>,
    pub e_yaw: Vec<f64>,
}

/// Mean, RMS and population standard deviation.
pub fn stats(v: &[f64]) -> (f64, f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    (mean, rms, std)
}

fn wrap_deg(a: f64) -> f64 {
    let mut a = a % 360.0;
    if a > 180.0 {
        a -= 360.0;
    } else if a < -180.0 {
        a += 360.0;
    }
    a
}

struct Series {
    t: Vec<f64>,
    ape: Vec<f64>,
    e_x: Vec<f64>,
    e_y: Vec<f64>,
    e_yaw: Vec<f64>,
}

fn series(est: &Trajectory, reference: &Trajectory, pairs: &[(usize, usize)], align: &RigidPose) -> Series {
    let mut s = Series {
        t: Vec::new(),
        ape: Vec::new(),
        e_x: Vec::new(),
        e_y: Vec::new(),
        e_yaw: Vec::new(),
    };
    for &(i, j) in pairs {
        let e = align.compose(&est[i].1);
        let r = &reference[j].1;
        let d = e.translation() - r.translation();
        s.t.push(reference[j].0);
        s.ape.push(d.norm());
        s.e_x.push(d.x);
        s.e_y.push(d.y);
        // ZYX yaw of the world-frame relative rotation.
        let rel = e.compose(&r.inverse());
        s.e_yaw.push(wrap_deg(rel.yaw().to_degrees()));
    }
    s
}

/// Absolute position error of `est` against `reference`.
pub fn ape(est: &Trajectory, reference: &Trajectory, pre_align: PreAlign) -> Result<TrajectoryErrorReport> {
    let (pairs, unmatched) = associate(est, reference, ASSOCIATION_GATE);
    if pairs.is_empty() {
        return Err(Error::Association {
            matched: 0,
            total: est.len(),
        });
    }
    let umeyama_pose = umeyama_align(est, reference, false).ok().map(|s| s.pose);
    let align = match pre_align {
        PreAlign::StartFrame => {
            let (i, j) = pairs[0];
            reference[j].1.compose(&est[i].1.inverse())
        }
        PreAlign::Umeyama => umeyama_align(est, reference, false)?.pose,
    };
    let s = series(est, reference, &pairs, &align);
    let (mean, rms, std) = stats(&s.ape);
    let (rms_align, std_align) = match umeyama_pose {
        Some(p) => {
            let a = series(est, reference, &pairs, &p);
            let (_, r, sd) = stats(&a.ape);
            (Some(r), Some(sd))
        }
        None => (None, None),
    };
    Ok(TrajectoryErrorReport {
        pre_align,
        matched: pairs.len(),
        unmatched,
        std_convention: "population".into(),
        ape_rms: rms,
        ape_std: std,
        ape_mean: mean,
        ape_rms_align: rms_align,
        ape_std_align: std_align,
        final_yaw_error_deg: *s.e_yaw.last().expect("non-empty"),
        t: s.t,
        ape: s.ape,
        e_x: s.e_x,
        e_y: s.e_y,
        e_yaw: s.e_yaw,
    })
}

impl TrajectoryErrorReport {
    /// Per-timestep CSV: `t,e_x,e_y,e_yaw,ape`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,e_x,e_y,e_yaw,ape\n");
        for i in 0..self.t.len() {
            out.push_str(&format!(
                "{:.6},{:.6e},{:.6e},{:.6e},{:.6e}\n",
                self.t[i], self.e_x[i], self.e_y[i], self.e_yaw[i], self.ape[i]
            ));
        }
        out
    }
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

pub fn point_triangle_distance(p: &Vec3, tri: &[Vec3; 3]) -> f64 {
    (p - closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2])).norm()
}

/// Bounding-volume hierarchy over triangles for exact nearest-triangle
/// queries by branch and bound.
pub struct TriangleBvh<'a> {
    mesh: &'a TriangleMesh,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    /// Leaves hold `order[start..end]`; inner nodes hold child indices.
    start: u32,
    end: u32,
    children: Option<[u32; 2]>,
}

const BVH_LEAF: usize = 4;

impl<'a> TriangleBvh<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = mesh.triangles().iter().map(|t| mesh.corners(t)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|c| (c[0] + c[1] + c[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Self { mesh, nodes, order }
    }

    /// Exact distance from `p` to the nearest triangle.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        if self.nodes.is_empty() {
            return best;
        }
        let mut stack = vec![(box_distance2(p, &self.nodes[0]), 0u32)];
        while let Some((d2, n)) = stack.pop() {
            if d2 >= best * best {
                continue;
            }
            let node = &self.nodes[n as usize];
            match node.children {
                None => {
                    for &ti in &self.order[node.start as usize..node.end as usize] {
                        let tri = self.mesh.corners(&self.mesh.triangles()[ti as usize]);
                        best = best.min(point_triangle_distance(p, &tri));
                    }
                }
                Some([a, b]) => {
                    let da = box_distance2(p, &self.nodes[a as usize]);
                    let db = box_distance2(p, &self.nodes[b as usize]);
                    // Nearer child is popped first.
                    if da <= db {
                        stack.push((db, b));
                        stack.push((da, a));
                    } else {
                        stack.push((da, a));
                        stack.push((db, b));
                    }
                }
            }
        }
        best
    }
}

fn build_node(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<BvhNode>,
) -> u32 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &ti in &order[start..end] {
        for c in &tris[ti as usize] {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
    }
    let id = nodes.len() as u32;
    nodes.push(BvhNode {
        lo,
        hi,
        start: start as u32,
        end: end as u32,
        children: None,
    });
    if end - start > BVH_LEAF {
        let ext = hi - lo;
        let axis = ext.imax();
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |a, b| {
            centroids[*a as usize][axis]
                .total_cmp(&centroids[*b as usize][axis])
                .then(a.cmp(b))
        });
        let a = build_node(tris, centroids, order, start, mid, nodes);
        let b = build_node(tris, centroids, order, mid, end, nodes);
        nodes[id as usize].children = Some([a, b]);
    }
    id
}

fn box_distance2(p: &Vec3, n: &BvhNode) -> f64 {
    let d = (n.lo - p).sup(&Vec3::zeros()).sup(&(p - n.hi));
    d.norm_squared()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapErrorReport {
    pub e_map: f64,
    pub e_std_map: f64,
    pub samples: usize,
}

/// Mean and population std of exact distances from the (aligned) samples
/// to the reference mesh.
pub fn cloud_to_mesh_distance(samples: &[Vec3], reference: &TriangleMesh, align: &RigidPose) -> Result<MapErrorReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("map samples".into()));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference mesh".into()));
    }
    let bvh = TriangleBvh::new(reference);
    let d = par::map(samples, |p| bvh.distance(&align.transform_point(p)));
    let (mean, _, std) = stats(&d);
    Ok(MapErrorReport {
        e_map: mean,
        e_std_map: std,
        samples: samples.len(),
    })
}
