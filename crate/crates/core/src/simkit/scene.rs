//! Analytic scene primitives with exact ray intersection and a reference
//! triangulation of each surface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidPose, Vec3};
use crate::tsdf::TriangleMesh;

/// Hits closer than this to the ray origin are ignored.
const MIN_HIT: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    pub amplitude: f64,
    /// Angular wavenumbers along the local u and v axes, rad/m.
    pub ku: f64,
    pub kv: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite plane; `extent` only bounds its reference mesh.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        #[serde(default = "default_plane_extent")]
        extent: f64,
    },
    /// Axis-aligned box. Seen from inside, its inner walls are hit.
    Box { center: [f64; 3], half_extents: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Surface `w = base + sum(a sin(ku u + kv v + phase))` over a
    /// rectangle of the local `(u, v)` plane, placed by a pose given as a
    /// translation and ZYX Euler angles in degrees.
    Heightfield {
        origin: [f64; 3],
        #[serde(default)]
        yaw_deg: f64,
        #[serde(default)]
        pitch_deg: f64,
        #[serde(default)]
        roll_deg: f64,
        u_range: [f64; 2],
        v_range: [f64; 2],
        #[serde(default)]
        base: f64,
        waves: Vec<Wave>,
        #[serde(default = "default_mesh_step")]
        mesh_step: f64,
    },
}

fn default_plane_extent() -> f64 {
    50.0
}

fn default_mesh_step() -> f64 {
    0.05
}

fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// A primitive prepared for repeated ray casting.
#[derive(Clone, Debug)]
enum Shape {
    Plane { point: Vec3, normal: Vec3 },
    Box { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    Heightfield(HeightfieldShape),
}

#[derive(Clone, Debug)]
struct HeightfieldShape {
    pose: RigidPose,
    inverse: RigidPose,
    u_range: [f64; 2],
    v_range: [f64; 2],
    base: f64,
    waves: Vec<Wave>,
    amp_sum: f64,
    // Bound on |dh/du| + |dh/dv| style slopes, used for safe marching.
    slope_u: f64,
    slope_v: f64,
}

impl HeightfieldShape {
    fn height(&self, u: f64, v: f64) -> f64 {
        self.base
            + self
                .waves
                .iter()
                .map(|w| w.amplitude * (w.ku * u + w.kv * v + w.phase).sin())
                .sum::<f64>()
    }

    /// First crossing of the surface along the ray inside the bounded slab.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let o = self.inverse.transform_point(origin);
        let d = self.inverse.rotate(dir);
        let lo = Vec3::new(self.u_range[0], self.v_range[0], self.base - self.amp_sum);
        let hi = Vec3::new(self.u_range[1], self.v_range[1], self.base + self.amp_sum);
        let (t0, t1) = slab(&o, &d, &lo, &hi)?;
        let g = |t: f64| {
            let p = o + d * t;
            p.z - self.height(p.x, p.y)
        };
        // |dg/dt| <= |d.z| + slope_u |d.x| + slope_v |d.y|.
        let lip = d.z.abs() + self.slope_u * d.x.abs() + self.slope_v * d.y.abs();
        let mut t = t0.max(MIN_HIT);
        let mut gt = g(t);
        if gt == 0.0 {
            return Some(t);
        }
        let min_step = 1e-4;
        while t < t1 {
            let step = (gt.abs() / lip.max(1e-12)).max(min_step);
            let tn = (t + step).min(t1);
            let gn = g(tn);
            if gn == 0.0 {
                return Some(tn);
            }
            if gn.signum() != gt.signum() {
                let (mut a, mut b, mut ga) = (t, tn, gt);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    let gm = g(m);
                    if gm == 0.0 || b - a < 1e-13 {
                        return Some(m);
                    }
                    if gm.signum() == ga.signum() {
                        a = m;
                        ga = gm;
                    } else {
                        b = m;
                    }
                }
                return Some(0.5 * (a + b));
            }
            if tn >= t1 {
                break;
            }
            t = tn;
            gt = gn;
        }
        None
    }

    fn distance_residual(&self, p: &Vec3) -> f64 {
        let q = self.inverse.transform_point(p);
        q.z - self.height(q.x, q.y)
    }
}

/// Ray/AABB entry and exit parameters, if the ray meets the box ahead.
fn slab(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
        } else {
            let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t1 >= t0 && t1 > MIN_HIT).then_some((t0, t1))
}

impl Shape {
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match self {
            Shape::Plane { point, normal } => {
                let den = normal.dot(d);
                if den.abs() < 1e-15 {
                    return None;
                }
                let t = normal.dot(&(point - o)) / den;
                (t > MIN_HIT).then_some(t)
            }
            Shape::Box { min, max } => {
                let (t0, t1) = slab(o, d, min, max)?;
                if t0 > MIN_HIT {
                    Some(t0)
                } else {
                    Some(t1)
                }
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let (t0, t1) = (-b - s, -b + s);
                if t0 > MIN_HIT {
                    Some(t0)
                } else if t1 > MIN_HIT {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Heightfield(h) => h.intersect(o, d),
        }
    }

    /// Unsigned distance-like residual of `p` to the surface (exact for
    /// plane, box faces and sphere; vertical offset for heightfields).
    fn residual(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Plane { point, normal } => normal.dot(&(p - point)).abs(),
            Shape::Box { min, max } => {
                // Distance to the nearest face plane for points on/inside.
                let mut best = f64::INFINITY;
                for a in 0..3 {
                    best = best.min((p[a] - min[a]).abs()).min((p[a] - max[a]).abs());
                }
                let outside = (0..3).any(|a| p[a] < min[a] - 1e-9 || p[a] > max[a] + 1e-9);
                if outside {
                    f64::INFINITY
                } else {
                    best
                }
            }
            Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Shape::Heightfield(h) => h.distance_residual(p).abs(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    primitives: Vec<Primitive>,
    shapes: Vec<Shape>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let shapes = primitives.iter().map(prepare).collect::<Result<Vec<_>>>()?;
        Ok(Self { primitives, shapes })
    }

    pub fn empty() -> Self {
        Self {
            primitives: Vec::new(),
            shapes: Vec::new(),
        }
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    /// Nearest hit distance along the unit direction `dir`.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        self.shapes
            .iter()
            .filter_map(|s| s.intersect(origin, dir))
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Smallest surface residual over all primitives (0 on a surface).
    pub fn surface_residual(&self, p: &Vec3) -> f64 {
        self.shapes
            .iter()
            .map(|s| s.residual(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reference triangulation of every primitive.
    pub fn reference_mesh(&self) -> TriangleMesh {
        let mut mesh = TriangleMesh::default();
        for p in &self.primitives {
            mesh.append(&primitive_mesh(p));
        }
        mesh
    }
}

fn prepare(p: &Primitive) -> Result<Shape> {
    let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
    match p {
        Primitive::Plane { point, normal, .. } => {
            let n = v3(normal);
            if n.norm() < 1e-12 {
                return bad("plane normal must be non-zero");
            }
            Ok(Shape::Plane {
                point: v3(point),
                normal: n.normalize(),
            })
        }
        Primitive::Box { center, half_extents } => {
            let (c, h) = (v3(center), v3(half_extents));
            if h.iter().any(|v| *v <= 0.0) {
                return bad("box half extents must be positive");
            }
            Ok(Shape::Box { min: c - h, max: c + h })
        }
        Primitive::Sphere { center, radius } => {
            if *radius <= 0.0 {
                return bad("sphere radius must be positive");
            }
            Ok(Shape::Sphere {
                center: v3(center),
                radius: *radius,
            })
        }
        Primitive::Heightfield {
            origin,
            yaw_deg,
            pitch_deg,
            roll_deg,
            u_range,
            v_range,
            base,
            waves,
            mesh_step,
        } => {
            if u_range[1] <= u_range[0] || v_range[1] <= v_range[0] || *mesh_step <= 0.0 {
                return bad("heightfield ranges and mesh step must be positive");
            }
            let pose = RigidPose::from_euler_zyx(
                yaw_deg.to_radians(),
                pitch_deg.to_radians(),
                roll_deg.to_radians(),
                v3(origin),
            );
            Ok(Shape::Heightfield(HeightfieldShape {
                inverse: pose.inverse(),
                pose,
                u_range: *u_range,
                v_range: *v_range,
                base: *base,
                amp_sum: waves.iter().map(|w| w.amplitude.abs()).sum(),
                slope_u: waves.iter().map(|w| (w.amplitude * w.ku).abs()).sum(),
                slope_v: waves.iter().map(|w| (w.amplitude * w.kv).abs()).sum(),
                waves: waves.clone(),
            }))
        }
    }
}

fn quad(mesh: &mut Vec<Vec3>, tris: &mut Vec<[u32; 3]>, c: [Vec3; 4]) {
    let o = mesh.len() as u32;
    mesh.extend_from_slice(&c);
    tris.push([o, o + 1, o + 2]);
    tris.push([o, o + 2, o + 3]);
}

fn primitive_mesh(p: &Primitive) -> TriangleMesh {
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    match prepare(p).expect("validated primitive") {
        Shape::Plane { point, normal } => {
            let extent = match p {
                Primitive::Plane { extent, .. } => *extent,
                _ => unreachable!(),
            };
            let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let a = normal.cross(&helper).normalize() * extent;
            let b = normal.cross(&a).normalize() * extent;
            quad(&mut verts, &mut tris, [point - a - b, point + a - b, point + a + b, point - a + b]);
        }
        Shape::Box { min, max } => {
            let c = |x: bool, y: bool, z: bool| {
                Vec3::new(if x { max.x } else { min.x }, if y { max.y } else { min.y }, if z { max.z } else { min.z })
            };
            for &(f, a, b) in &[(0usize, 1usize, 2usize), (1, 2, 0), (2, 0, 1)] {
                for side in [false, true] {
                    let mut pts = [Vec3::zeros(); 4];
                    for (i, (u, v)) in [(false, false), (true, false), (true, true), (false, true)].iter().enumerate() {
                        let mut s = [false; 3];
                        s[f] = side;
                        s[a] = *u;
                        s[b] = *v;
                        pts[i] = c(s[0], s[1], s[2]);
                    }
                    quad(&mut verts, &mut tris, pts);
                }
            }
        }
        Shape::Sphere { center, radius } => {
            let (nu, nv) = (96usize, 48usize);
            for j in 0..=nv {
                let th = std::f64::consts::PI * j as f64 / nv as f64;
                for i in 0..nu {
                    let ph = 2.0 * std::f64::consts::PI * i as f64 / nu as f64;
                    verts.push(center + Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()) * radius);
                }
            }
            for j in 0..nv {
                for i in 0..nu {
                    let a = (j * nu + i) as u32;
                    let b = (j * nu + (i + 1) % nu) as u32;
                    let c = a + nu as u32;
                    let d = b + nu as u32;
                    tris.push([a, c, b]);
                    tris.push([b, c, d]);
                }
            }
        }
        Shape::Heightfield(h) => {
            let step = match p {
                Primitive::Heightfield { mesh_step, .. } => *mesh_step,
                _ => unreachable!(),
            };
            let nu = ((h.u_range[1] - h.u_range[0]) / step).ceil() as usize;
            let nv = ((h.v_range[1] - h.v_range[0]) / step).ceil() as usize;
            for j in 0..=nv {
                let v = h.v_range[0] + (h.v_range[1] - h.v_range[0]) * j as f64 / nv as f64;
                for i in 0..=nu {
                    let u = h.u_range[0] + (h.u_range[1] - h.u_range[0]) * i as f64 / nu as f64;
                    verts.push(h.pose.transform_point(&Vec3::new(u, v, h.height(u, v))));
                }
            }
            let row = (nu + 1) as u32;
            for j in 0..nv as u32 {
                for i in 0..nu as u32 {
                    let a = j * row + i;
                    tris.push([a, a + 1, a + row + 1]);
                    tris.push([a, a + row + 1, a + row]);
                }
            }
        }
    }
    TriangleMesh::new(verts, tris).expect("finite reference mesh")
}
