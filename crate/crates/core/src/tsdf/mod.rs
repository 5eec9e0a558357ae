//! Sparse space-carving TSDF volumes, coarse point-cloud extraction,
//! marching-cubes meshing and the movable-submap global map.
//!
//! Cells are keyed by `floor(x / voxel_size)` and carry their value at the
//! voxel center `(key + 0.5) * voxel_size`.

pub mod global;
mod mesh;
mod tables;

use std::io::{Read, Write};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::VoxelKey;
use crate::geometry::{PointCloud, Vec3};
use crate::par;

pub use global::{reprocess_decision, Contribution, GlobalMapState, ReprocessThresholds, UpdateStats};
pub use mesh::{extract_mesh, TriangleMesh};

/// How a submap field is evaluated at a transformed global voxel center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdfConfig {
    pub voxel_size: f64,
    /// Truncation distance in meters.
    pub truncation: f64,
    /// Weight of a single observation.
    pub weight: f64,
    pub interpolation: Interpolation,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.1,
            truncation: 0.3,
            weight: 1.0,
            interpolation: Interpolation::Trilinear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsdfCell {
    pub d: f64,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    voxel_size: f64,
    truncation: f64,
    cells: FxHashMap<VoxelKey, TsdfCell>,
}

const FILE_MAGIC: &[u8; 8] = b"SSTSDF01";

impl TsdfVolume {
    pub fn new(voxel_size: f64, truncation: f64) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidParameter(format!("voxel size must be positive, got {voxel_size}")));
        }
        if !(truncation > 0.0 && truncation.is_finite()) {
            return Err(Error::InvalidParameter(format!("truncation must be positive, got {truncation}")));
        }
        Ok(Self {
            voxel_size,
            truncation,
            cells: FxHashMap::default(),
        })
    }

    pub fn from_config(cfg: &TsdfConfig) -> Result<Self> {
        Self::new(cfg.voxel_size, cfg.truncation)
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&TsdfCell> {
        self.cells.get(key)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&VoxelKey, &TsdfCell)> {
        self.cells.iter()
    }

    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.cells.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn key_of(&self, p: &Vec3) -> VoxelKey {
        VoxelKey::of(p, self.voxel_size)
    }

    pub fn center(&self, key: &VoxelKey) -> Vec3 {
        key.center(self.voxel_size)
    }

    /// Inserts a cell directly; `d` is clamped to the truncation band and
    /// non-positive weights remove the cell.
    pub fn set(&mut self, key: VoxelKey, d: f64, w: f64) {
        if w > 0.0 {
            self.cells.insert(
                key,
                TsdfCell {
                    d: d.clamp(-self.truncation, self.truncation),
                    w,
                },
            );
        } else {
            self.cells.remove(&key);
        }
    }

    /// Fuses one observation into a cell by weighted running average.
    #[inline]
    pub fn fuse(&mut self, key: VoxelKey, value: f64, weight: f64) {
        let trunc = self.truncation;
        let cell = self.cells.entry(key).or_insert(TsdfCell { d: 0.0, w: 0.0 });
        let w = cell.w + weight;
        cell.d = (cell.d + (value - cell.d) * weight / w).clamp(-trunc, trunc);
        cell.w = w;
    }

    /// Space-carving integration of one frame with unit observation weight.
    pub fn integrate_frame(&mut self, sensor_origin: &Vec3, cloud: &PointCloud) -> Result<()> {
        self.integrate_frame_weighted(sensor_origin, cloud, 1.0)
    }

    /// Every voxel crossed by the ray from `sensor_origin` to each point,
    /// extended by the truncation distance past it, receives the clamped
    /// signed distance `range - projection` of its center.
    pub fn integrate_frame_weighted(&mut self, sensor_origin: &Vec3, cloud: &PointCloud, weight: f64) -> Result<()> {
        if !sensor_origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("sensor origin is not finite".into()));
        }
        if !(weight > 0.0) {
            return Err(Error::InvalidParameter(format!("observation weight must be positive, got {weight}")));
        }
        let (vs, trunc) = (self.voxel_size, self.truncation);
        let visits = par::flat_map_chunks(cloud.points(), 128, |chunk| {
            let mut out = Vec::with_capacity(chunk.len() * 64);
            for p in chunk {
                walk_ray(sensor_origin, p, vs, trunc, &mut out);
            }
            out
        });
        self.cells.reserve(visits.len() / 8);
        for (key, value) in visits {
            self.fuse(key, value, weight);
        }
        Ok(())
    }

    /// Centers of all cells with `|d| < voxel_size / 2`, in key order.
    pub fn coarse_point_cloud(&self) -> PointCloud {
        let half = self.voxel_size * 0.5;
        let mut keys: Vec<VoxelKey> = self
            .cells
            .iter()
            .filter(|(_, c)| c.w > 0.0 && c.d.abs() < half)
            .map(|(k, _)| *k)
            .collect();
        keys.sort_unstable();
        PointCloud::from_finite(keys.iter().map(|k| k.center(self.voxel_size)).collect())
    }

    /// The coarse cells, each moved from its center onto the zero level
    /// along the field gradient (central differences, one-sided where a
    /// neighbor is missing). Cells without any neighbor keep their center.
    /// The shift never exceeds half a voxel.
    pub fn surface_point_cloud(&self) -> PointCloud {
        let half = self.voxel_size * 0.5;
        let mut keys: Vec<VoxelKey> = self
            .cells
            .iter()
            .filter(|(_, c)| c.w > 0.0 && c.d.abs() < half)
            .map(|(k, _)| *k)
            .collect();
        keys.sort_unstable();
        let value = |k: &VoxelKey| self.cells.get(k).filter(|c| c.w > 0.0).map(|c| c.d);
        let points = keys
            .iter()
            .map(|k| {
                let d0 = self.cells[k].d;
                let mut g = Vec3::zeros();
                for axis in 0..3 {
                    let mut step = [0i32; 3];
                    step[axis] = 1;
                    let plus = value(&k.offset(step[0], step[1], step[2]));
                    let minus = value(&k.offset(-step[0], -step[1], -step[2]));
                    g[axis] = match (plus, minus) {
                        (Some(a), Some(b)) => (a - b) / (2.0 * self.voxel_size),
                        (Some(a), None) => (a - d0) / self.voxel_size,
                        (None, Some(b)) => (d0 - b) / self.voxel_size,
                        (None, None) => 0.0,
                    };
                }
                let c = k.center(self.voxel_size);
                let n = g.norm();
                if n > 1e-9 {
                    let shift = (d0 / n).clamp(-half, half);
                    c - g / n * shift
                } else {
                    c
                }
            })
            .collect();
        PointCloud::from_finite(points)
    }

    /// Trilinear interpolation of `(d, w)` at `p`, renormalized over the
    /// corner cells that exist. `None` when no corner with positive
    /// interpolation weight exists.
    pub fn sample_trilinear(&self, p: &Vec3) -> Option<TsdfCell> {
        let (base, frac) = self.lower_corner(p);
        let mut wsum = 0.0;
        let mut d = 0.0;
        let mut w = 0.0;
        for (dx, dy, dz) in CORNERS {
            let Some(cell) = self.cells.get(&base.offset(dx, dy, dz)) else {
                continue;
            };
            let fx = if dx == 1 { frac.x } else { 1.0 - frac.x };
            let fy = if dy == 1 { frac.y } else { 1.0 - frac.y };
            let fz = if dz == 1 { frac.z } else { 1.0 - frac.z };
            let t = fx * fy * fz;
            wsum += t;
            d += t * cell.d;
            w += t * cell.w;
        }
        (wsum > INTERP_EPS).then(|| TsdfCell {
            d: d / wsum,
            w: w / wsum,
        })
    }

    /// Value of the cell containing `p`.
    pub fn sample_nearest(&self, p: &Vec3) -> Option<TsdfCell> {
        self.cells.get(&self.key_of(p)).copied()
    }

    pub fn sample(&self, p: &Vec3, mode: Interpolation) -> Option<TsdfCell> {
        match mode {
            Interpolation::Trilinear => self.sample_trilinear(p),
            Interpolation::Nearest => self.sample_nearest(p),
        }
    }

    /// Key of the interpolation cube containing `p` (the cell whose center
    /// is the cube's lower corner) and the fractional position inside it.
    pub fn lower_corner(&self, p: &Vec3) -> (VoxelKey, Vec3) {
        let y = p / self.voxel_size - Vec3::repeat(0.5);
        let base = y.map(f64::floor);
        (
            VoxelKey([base.x as i32, base.y as i32, base.z as i32]),
            y - base,
        )
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let keys = self.sorted_keys();
        let mut buf = Vec::with_capacity(32 + keys.len() * 28);
        buf.extend_from_slice(FILE_MAGIC);
        buf.extend_from_slice(&self.voxel_size.to_le_bytes());
        buf.extend_from_slice(&self.truncation.to_le_bytes());
        buf.extend_from_slice(&(keys.len() as u64).to_le_bytes());
        for k in keys {
            let c = self.cells[&k];
            for v in k.0 {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&c.d.to_le_bytes());
            buf.extend_from_slice(&c.w.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| IoError::new(ErrorKind::InvalidData, m.to_string());
        if buf.len() < 32 || &buf[..8] != FILE_MAGIC {
            return Err(bad("not a TSDF volume file"));
        }
        let f = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let i = |o: usize| i32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let count = u64::from_le_bytes(buf[24..32].try_into().unwrap()) as usize;
        if buf.len() != 32 + count * 28 {
            return Err(bad("truncated TSDF volume file"));
        }
        let mut vol = TsdfVolume::new(f(8), f(16)).map_err(|e| bad(&e.to_string()))?;
        vol.cells.reserve(count);
        for n in 0..count {
            let o = 32 + n * 28;
            let key = VoxelKey([i(o), i(o + 4), i(o + 8)]);
            vol.cells.insert(key, TsdfCell { d: f(o + 12), w: f(o + 20) });
        }
        Ok(vol)
    }
}

const INTERP_EPS: f64 = 1e-12;

const CORNERS: [(i32, i32, i32); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (0, 1, 0),
    (1, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (0, 1, 1),
    (1, 1, 1),
];

/// Amanatides-Woo traversal from `origin` to `point + truncation * dir`,
/// pushing `(key, clamped signed distance)` for every voxel crossed.
fn walk_ray(origin: &Vec3, point: &Vec3, vs: f64, trunc: f64, out: &mut Vec<(VoxelKey, f64)>) {
    let diff = point - origin;
    let range = diff.norm();
    if !(range > 0.0) {
        return;
    }
    let dir = diff / range;
    let length = range + trunc;
    let mut key = VoxelKey::of(origin, vs);
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((key.0[a] + 1) as f64 * vs - origin[a]) / dir[a];
            t_delta[a] = vs / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (key.0[a] as f64 * vs - origin[a]) / dir[a];
            t_delta[a] = -vs / dir[a];
        }
    }
    loop {
        let c = key.center(vs);
        let s = range - (c - origin).dot(&dir);
        out.push((key, s.clamp(-trunc, trunc)));
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[a] > length {
            break;
        }
        key.0[a] += step[a];
        t_max[a] += t_delta[a];
    }
}
