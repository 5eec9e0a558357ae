//! Global map assembled from rigid submap volumes.
//!
//! Each global cell keeps the running sums `sum(w * d)` and `sum(w)` over
//! the submaps integrated into it, so removing a submap at its old pose and
//! re-adding it at a new one is exact up to floating-point reassociation.
//! A submap is evaluated at a global voxel center `x` through
//! `theta = oP(k) * wP_q(k)^-1`, which maps world coordinates into the
//! submap's odometry-frame volume.

use std::collections::BTreeMap;
use std::sync::Arc;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use super::{Interpolation, TsdfCell, TsdfConfig, TsdfVolume};
use crate::error::{Error, Result};
use crate::features::VoxelKey;
use crate::geometry::{RigidPose, Vec3};
use crate::par;

/// Global cells whose accumulated weight falls below this are removed.
const EMPTY_WEIGHT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprocessThresholds {
    /// Meters.
    pub trans: f64,
    /// Degrees.
    pub rot_deg: f64,
}

impl Default for ReprocessThresholds {
    fn default() -> Self {
        Self {
            trans: 0.01,
            rot_deg: 0.1,
        }
    }
}

/// True iff the relative motion exceeds either threshold (strictly).
pub fn reprocess_decision(old_pose: &RigidPose, new_pose: &RigidPose, th: &ReprocessThresholds) -> bool {
    let (t, r) = old_pose.distance_to(new_pose);
    t > th.trans || r.to_degrees() > th.rot_deg
}

/// Per-voxel `(key, psi = w * d, w)` of one submap at one pose, sorted by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Contribution {
    pub entries: Vec<(VoxelKey, f64, f64)>,
}

impl Contribution {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<(f64, f64)> {
        self.entries
            .binary_search_by(|e| e.0.cmp(key))
            .ok()
            .map(|i| (self.entries[i].1, self.entries[i].2))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub added: usize,
    pub reprocessed: usize,
    pub touched_cells: usize,
    pub removed_cells: usize,
    pub total_cells: usize,
}

#[derive(Clone, Debug)]
struct StoredSubmap {
    volume: Arc<TsdfVolume>,
    odom_pose: RigidPose,
    history: BTreeMap<usize, RigidPose>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Accum {
    psi: f64,
    w: f64,
}

#[derive(Clone, Debug)]
pub struct GlobalMapState {
    voxel_size: f64,
    truncation: f64,
    interpolation: Interpolation,
    field: FxHashMap<VoxelKey, Accum>,
    phi: BTreeMap<usize, usize>,
    submaps: BTreeMap<usize, StoredSubmap>,
}

impl GlobalMapState {
    pub fn new(cfg: &TsdfConfig) -> Result<Self> {
        TsdfVolume::from_config(cfg)?;
        Ok(Self {
            voxel_size: cfg.voxel_size,
            truncation: cfg.truncation,
            interpolation: cfg.interpolation,
            field: FxHashMap::default(),
            phi: BTreeMap::new(),
            submaps: BTreeMap::new(),
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Stores a closed submap volume (odometry frame) and its anchor pose.
    pub fn insert_submap(&mut self, id: usize, volume: Arc<TsdfVolume>, odom_pose: RigidPose) -> Result<()> {
        if self.submaps.contains_key(&id) {
            return Err(Error::InvalidParameter(format!("submap {id} already stored")));
        }
        self.submaps.insert(
            id,
            StoredSubmap {
                volume,
                odom_pose,
                history: BTreeMap::new(),
            },
        );
        Ok(())
    }

    /// Appends `wP_n(id)` to the submap's pose history.
    pub fn record_pose(&mut self, id: usize, n: usize, pose: RigidPose) -> Result<()> {
        let s = self
            .submaps
            .get_mut(&id)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown submap {id}")))?;
        s.history.insert(n, pose);
        Ok(())
    }

    pub fn pose_at(&self, id: usize, n: usize) -> Result<&RigidPose> {
        self.submaps
            .get(&id)
            .and_then(|s| s.history.get(&n))
            .ok_or(Error::MissingPoseIndex { submap: id, index: n })
    }

    pub fn latest_pose(&self, id: usize) -> Option<(usize, &RigidPose)> {
        self.submaps.get(&id)?.history.iter().next_back().map(|(n, p)| (*n, p))
    }

    /// `phi(k)`: the optimization index whose pose was used to integrate `k`.
    pub fn integrated_index(&self, id: usize) -> Option<usize> {
        self.phi.get(&id).copied()
    }

    pub fn integrated(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.phi.iter().map(|(k, n)| (*k, *n))
    }

    pub fn submap_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.submaps.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.field.len()
    }

    pub fn is_empty(&self) -> bool {
        self.field.is_empty()
    }

    pub fn cell(&self, key: &VoxelKey) -> Option<TsdfCell> {
        self.field.get(key).map(|a| self.to_cell(a))
    }

    fn to_cell(&self, a: &Accum) -> TsdfCell {
        TsdfCell {
            d: (a.psi / a.w).clamp(-self.truncation, self.truncation),
            w: a.w,
        }
    }

    /// Current global field as a plain volume (`D = sum(psi) / W`).
    pub fn volume(&self) -> TsdfVolume {
        let mut v = TsdfVolume::new(self.voxel_size, self.truncation).expect("validated at construction");
        for (k, a) in &self.field {
            let c = self.to_cell(a);
            v.set(*k, c.d, c.w);
        }
        v
    }

    /// Evaluates submap `k` at every global voxel center it covers under
    /// pose `wP_q(k)`.
    pub fn submap_contribution(&self, k: usize, q: usize) -> Result<Contribution> {
        let s = self
            .submaps
            .get(&k)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown submap {k}")))?;
        let world_pose = s.history.get(&q).ok_or(Error::MissingPoseIndex { submap: k, index: q })?;
        Ok(contribution(
            &s.volume,
            &s.odom_pose,
            world_pose,
            self.voxel_size,
            self.interpolation,
        ))
    }

    /// Integrates the submaps in `new` and re-integrates those in `moved`
    /// at their pose `n`, then sets `phi(k) = n` for all of them.
    pub fn global_update(&mut self, new: &[usize], moved: &[usize], n: usize) -> Result<UpdateStats> {
        let mut plan: Vec<(usize, Option<usize>)> = Vec::new();
        for &k in new {
            if self.phi.contains_key(&k) {
                return Err(Error::AlreadyIntegrated(k));
            }
            self.pose_at(k, n)?;
            plan.push((k, None));
        }
        for &k in moved {
            let old = *self.phi.get(&k).ok_or(Error::NotIntegrated(k))?;
            self.pose_at(k, n)?;
            self.pose_at(k, old)?;
            if old != n {
                plan.push((k, Some(old)));
            }
        }

        let mut stats = UpdateStats {
            added: new.len(),
            reprocessed: plan.iter().filter(|p| p.1.is_some()).count(),
            ..UpdateStats::default()
        };
        let mut touched: FxHashSet<VoxelKey> = FxHashSet::default();
        for &(k, old) in &plan {
            if let Some(old) = old {
                let c = self.submap_contribution(k, old)?;
                for &(key, psi, w) in &c.entries {
                    let a = self.field.entry(key).or_default();
                    a.psi -= psi;
                    a.w -= w;
                    touched.insert(key);
                }
            }
            let c = self.submap_contribution(k, n)?;
            for &(key, psi, w) in &c.entries {
                let a = self.field.entry(key).or_default();
                a.psi += psi;
                a.w += w;
                touched.insert(key);
            }
        }
        for key in &touched {
            if self.field.get(key).is_some_and(|a| a.w < EMPTY_WEIGHT) {
                self.field.remove(key);
                stats.removed_cells += 1;
            }
        }
        for &(k, _) in &plan {
            self.phi.insert(k, n);
        }
        stats.touched_cells = touched.len();
        stats.total_cells = self.field.len();
        Ok(stats)
    }

    /// Integrated submaps whose pose at `n` differs from their pose at
    /// `phi(k)` by more than the thresholds.
    pub fn moved_submaps(&self, n: usize, th: &ReprocessThresholds) -> Vec<usize> {
        self.phi
            .iter()
            .filter_map(|(&k, &old)| {
                let s = &self.submaps[&k];
                let (a, b) = (s.history.get(&old)?, s.history.get(&n)?);
                reprocess_decision(a, b, th).then_some(k)
            })
            .collect()
    }

    /// Global field rebuilt from scratch from every integrated submap at
    /// its `phi` pose.
    pub fn rebuild(&self) -> Result<TsdfVolume> {
        let mut acc: FxHashMap<VoxelKey, Accum> = FxHashMap::default();
        for (&k, &q) in &self.phi {
            for (key, psi, w) in self.submap_contribution(k, q)?.entries {
                let a = acc.entry(key).or_default();
                a.psi += psi;
                a.w += w;
            }
        }
        let mut v = TsdfVolume::new(self.voxel_size, self.truncation)?;
        for (k, a) in acc {
            if a.w >= EMPTY_WEIGHT {
                v.set(k, a.psi / a.w, a.w);
            }
        }
        Ok(v)
    }
}

/// Global voxel centers `x` covered by `volume` placed at `world_pose`,
/// with the submap field sampled at `theta(x)`.
///
/// Each `x` is owned by exactly one interpolation cube of the submap (the
/// one containing `theta(x)`), so the enumeration runs over candidate cubes
/// and keeps a candidate only when its owner is the cube being visited.
pub fn contribution(
    volume: &TsdfVolume,
    odom_pose: &RigidPose,
    world_pose: &RigidPose,
    global_voxel: f64,
    mode: Interpolation,
) -> Contribution {
    let vs = volume.voxel_size();
    let theta = odom_pose.compose(&world_pose.inverse());
    let to_world = theta.inverse();

    // Cubes that can produce a sample, with their lower corner (in submap
    // coordinates) as a key.
    let cubes: Vec<VoxelKey> = match mode {
        Interpolation::Trilinear => {
            let mut set: FxHashSet<VoxelKey> = FxHashSet::default();
            set.reserve(volume.len() * 2);
            for (k, _) in volume.cells() {
                for dx in -1..=0 {
                    for dy in -1..=0 {
                        for dz in -1..=0 {
                            set.insert(k.offset(dx, dy, dz));
                        }
                    }
                }
            }
            let mut v: Vec<VoxelKey> = set.into_iter().collect();
            v.sort_unstable();
            v
        }
        Interpolation::Nearest => volume.sorted_keys(),
    };
    // Offset of a cube's lower corner from its key, in submap coordinates.
    let corner_shift = match mode {
        Interpolation::Trilinear => 0.5 * vs,
        Interpolation::Nearest => 0.0,
    };

    let mut entries = par::flat_map_chunks(&cubes, 1024, |chunk| {
        let mut out = Vec::new();
        for cube in chunk {
            let lo = Vec3::new(
                cube.0[0] as f64 * vs + corner_shift,
                cube.0[1] as f64 * vs + corner_shift,
                cube.0[2] as f64 * vs + corner_shift,
            );
            let mut min = Vec3::repeat(f64::INFINITY);
            let mut max = Vec3::repeat(f64::NEG_INFINITY);
            for c in 0..8 {
                let corner = lo + Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64) * vs;
                let w = to_world.transform_point(&corner);
                min = min.inf(&w);
                max = max.sup(&w);
            }
            // Global centers (j + 0.5) * g inside [min, max], padded so
            // rounding never drops a center lying on a cube face.
            let pad = Vec3::repeat(1e-9 * global_voxel);
            let (min, max) = (min - pad, max + pad);
            let first = (min / global_voxel).map(|v| (v - 0.5).ceil() as i32);
            let last = (max / global_voxel).map(|v| (v - 0.5).floor() as i32);
            for x in first.x..=last.x {
                for y in first.y..=last.y {
                    for z in first.z..=last.z {
                        let key = VoxelKey([x, y, z]);
                        let p = theta.transform_point(&key.center(global_voxel));
                        let owner = match mode {
                            Interpolation::Trilinear => volume.lower_corner(&p).0,
                            Interpolation::Nearest => volume.key_of(&p),
                        };
                        if owner != *cube {
                            continue;
                        }
                        if let Some(cell) = volume.sample(&p, mode) {
                            out.push((key, cell.w * cell.d, cell.w));
                        }
                    }
                }
            }
        }
        out
    });
    entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    Contribution { entries }
}
