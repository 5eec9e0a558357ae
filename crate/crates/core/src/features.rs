//! Sparse oriented-surface-point representation and voxel occupancy overlap.

use nalgebra::SymmetricEigen;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, RigidPose, Vec3};
use crate::par;

/// Minimum number of neighbours a surface point needs (strictly more than 6).
pub const MIN_SUPPORT: usize = 7;

/// Two smallest eigenvalues both below this fraction of the largest mean the
/// neighbourhood is a line or a point and has no defined normal.
const DEGENERATE_EIGEN_RATIO: f64 = 1e-12;

/// Integer voxel index, `floor(coordinate / resolution)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey(pub [i32; 3]);

impl VoxelKey {
    #[inline]
    pub fn of(p: &Vec3, resolution: f64) -> Self {
        VoxelKey([
            (p.x / resolution).floor() as i32,
            (p.y / resolution).floor() as i32,
            (p.z / resolution).floor() as i32,
        ])
    }

    #[inline]
    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        VoxelKey([self.0[0] + dx, self.0[1] + dy, self.0[2] + dz])
    }

    #[inline]
    pub fn center(&self, resolution: f64) -> Vec3 {
        Vec3::new(
            (self.0[0] as f64 + 0.5) * resolution,
            (self.0[1] as f64 + 0.5) * resolution,
            (self.0[2] as f64 + 0.5) * resolution,
        )
    }

    /// The 27 keys of the 3x3x3 block centred on `self`.
    pub fn neighborhood(&self) -> impl Iterator<Item = VoxelKey> + '_ {
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| self.offset(dx, dy, dz)))
        })
    }
}

/// Hash grid over a slice of points; buckets hold point indices in input order.
pub struct VoxelGrid {
    resolution: f64,
    buckets: FxHashMap<VoxelKey, Vec<u32>>,
}

impl VoxelGrid {
    pub fn build(points: &[Vec3], resolution: f64) -> Self {
        let mut buckets: FxHashMap<VoxelKey, Vec<u32>> = FxHashMap::default();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(VoxelKey::of(p, resolution)).or_default().push(i as u32);
        }
        Self {
            resolution,
            buckets,
        }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn bucket(&self, key: &VoxelKey) -> Option<&[u32]> {
        self.buckets.get(key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.buckets.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Nearest point to `query` strictly within `resolution`, as
    /// `(index, squared distance)`. Exact: anything closer than one voxel
    /// edge lies in the 3x3x3 block.
    pub fn nearest_within(&self, points: &[Vec3], query: &Vec3) -> Option<(usize, f64)> {
        let key = VoxelKey::of(query, self.resolution);
        let mut best: Option<(usize, f64)> = None;
        let mut best_d2 = self.resolution * self.resolution;
        for k in key.neighborhood() {
            if let Some(bucket) = self.buckets.get(&k) {
                for &i in bucket {
                    let d2 = (points[i as usize] - query).norm_squared();
                    if d2 < best_d2 || (d2 == best_d2 && best.is_some_and(|(b, _)| (i as usize) < b)) {
                        best_d2 = d2;
                        best = Some((i as usize, d2));
                    }
                }
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub mean: Vec3,
    /// Unit normal, the eigenvector of the smallest covariance eigenvalue.
    pub normal: Vec3,
    pub support: usize,
}

/// Sparse set of oriented surface points at a fixed resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrientedCloud {
    points: Vec<SurfacePoint>,
    resolution: f64,
}

impl OrientedCloud {
    pub fn new(points: Vec<SurfacePoint>, resolution: f64) -> Self {
        Self { points, resolution }
    }

    pub fn points(&self) -> &[SurfacePoint] {
        &self.points
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn means(&self) -> Vec<Vec3> {
        self.points.iter().map(|s| s.mean).collect()
    }

    /// Means move rigidly, normals rotate.
    pub fn transformed(&self, pose: &RigidPose) -> OrientedCloud {
        OrientedCloud {
            points: self
                .points
                .iter()
                .map(|s| SurfacePoint {
                    mean: pose.transform_point(&s.mean),
                    normal: pose.rotate(&s.normal),
                    support: s.support,
                })
                .collect(),
            resolution: self.resolution,
        }
    }
}

/// Per occupied voxel: gather every point within `resolution` of the voxel's
/// point centroid, and emit (mean, smallest-eigenvector normal) when more
/// than six points qualify. Normals face the cloud's frame origin.
pub fn extract_oriented_surface_points(cloud: &PointCloud, resolution: f64) -> Result<OrientedCloud> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "feature resolution must be positive, got {resolution}"
        )));
    }
    let points = cloud.points();
    if points.is_empty() {
        return Ok(OrientedCloud::new(Vec::new(), resolution));
    }
    let grid = VoxelGrid::build(points, resolution);
    let keys = grid.sorted_keys();
    let r2 = resolution * resolution;

    let surface: Vec<Option<SurfacePoint>> = par::map(&keys, |key| {
        let bucket = grid.bucket(key)?;
        let centroid = bucket.iter().map(|&i| points[i as usize]).sum::<Vec3>() / bucket.len() as f64;

        let mut gathered: Vec<Vec3> = Vec::new();
        for k in key.neighborhood() {
            if let Some(b) = grid.bucket(&k) {
                gathered.extend(
                    b.iter()
                        .map(|&i| points[i as usize])
                        .filter(|p| (p - centroid).norm_squared() <= r2),
                );
            }
        }
        surface_point(&gathered)
    });

    Ok(OrientedCloud::new(surface.into_iter().flatten().collect(), resolution))
}

fn surface_point(gathered: &[Vec3]) -> Option<SurfacePoint> {
    let n = gathered.len();
    if n < MIN_SUPPORT {
        return None;
    }
    let mean = gathered.iter().sum::<Vec3>() / n as f64;
    let mut cov = Mat3::zeros();
    for p in gathered {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= (n - 1) as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if hi <= 0.0 || (lo < DEGENERATE_EIGEN_RATIO * hi && mid < DEGENERATE_EIGEN_RATIO * hi) {
        return None;
    }
    let mut normal: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    normal /= normal.norm();
    if normal.dot(&(-mean)) < 0.0 {
        normal = -normal;
    }
    Some(SurfacePoint {
        mean,
        normal,
        support: n,
    })
}

pub fn occupied_voxels(cloud: &PointCloud, resolution: f64) -> FxHashSet<VoxelKey> {
    cloud.points().iter().map(|p| VoxelKey::of(p, resolution)).collect()
}

/// Keeps only the nearest return per bearing cell of `bin` radians, in the
/// sensor frame. A beam that reports several ranges (multipath echoes) thus
/// contributes its first return only. Input order is preserved.
pub fn first_returns(cloud: &PointCloud, bin: f64) -> Result<PointCloud> {
    if !(bin > 0.0 && bin.is_finite()) {
        return Err(Error::InvalidParameter(format!("bearing bin must be positive, got {bin}")));
    }
    let bearing = |p: &Vec3| {
        let r = p.norm();
        let el = if r > 0.0 { (p.z / r).clamp(-1.0, 1.0).asin() } else { 0.0 };
        ((p.y.atan2(p.x) / bin).floor() as i64, (el / bin).floor() as i64)
    };
    let mut nearest: FxHashMap<(i64, i64), (usize, f64)> = FxHashMap::default();
    for (i, p) in cloud.points().iter().enumerate() {
        let r = p.norm();
        nearest
            .entry(bearing(p))
            .and_modify(|e| {
                if r < e.1 {
                    *e = (i, r);
                }
            })
            .or_insert((i, r));
    }
    let mut keep: Vec<usize> = nearest.into_values().map(|(i, _)| i).collect();
    keep.sort_unstable();
    Ok(PointCloud::from_finite(keep.into_iter().map(|i| cloud.points()[i]).collect()))
}

/// `|occ(query) & occ(other)| / |occ(query)|` at the given resolution.
pub fn occupancy_overlap(query: &PointCloud, other: &PointCloud, resolution: f64) -> Result<f64> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "overlap resolution must be positive, got {resolution}"
        )));
    }
    if query.is_empty() {
        return Err(Error::EmptyQueryCloud);
    }
    let a = occupied_voxels(query, resolution);
    let b = occupied_voxels(other, resolution);
    Ok(overlap_of_sets(&a, &b))
}

pub fn overlap_of_sets(query: &FxHashSet<VoxelKey>, other: &FxHashSet<VoxelKey>) -> f64 {
    if query.is_empty() {
        return 0.0;
    }
    let shared = query.iter().filter(|k| other.contains(k)).count();
    shared as f64 / query.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_returns_drop_echo_on_same_bearing() {
        let d = Vec3::new(1.0, 0.2, -0.1).normalize();
        let other = Vec3::new(1.0, -0.3, 0.0).normalize();
        let cloud = PointCloud::new(vec![d * 4.0, other * 3.0, d * 2.0]).unwrap();
        let out = first_returns(&cloud, 0.25f64.to_radians()).unwrap();
        assert_eq!(out.points(), &[other * 3.0, d * 2.0]);
        assert!(first_returns(&cloud, 0.0).is_err());
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    /// Closed-form eigenvalues of a symmetric 3x3 matrix (trigonometric
    /// cubic solution), ascending.
    fn cubic_eigenvalues(a: &Mat3) -> [f64; 3] {
        let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let q = a.trace() / 3.0;
        let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = (a - Mat3::identity() * q) / p;
        let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        let mut e = [e1, e2, e3];
        e.sort_by(f64::total_cmp);
        e
    }

    /// Null vector of (A - lambda I) from the best cross product of its rows.
    fn eigenvector_for(a: &Mat3, lambda: f64) -> Vec3 {
        let m = a - Mat3::identity() * lambda;
        let rows: Vec<Vec3> = (0..3).map(|i| m.row(i).transpose()).collect();
        let candidates = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
        let best = candidates.iter().max_by(|x, y| x.norm().total_cmp(&y.norm())).unwrap();
        best / best.norm()
    }

    #[test]
    fn planar_patch_gives_vertical_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.random_range(0.05..0.45), rng.random_range(0.05..0.45), 0.0))
            .collect();
        let out = extract_oriented_surface_points(&cloud(pts), 0.5).unwrap();
        assert_eq!(out.len(), 1);
        let n = out.points()[0].normal;
        assert!((n.z.abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn six_points_are_not_enough() {
        let pts: Vec<Vec3> = (0..6)
            .map(|i| Vec3::new(0.1 + 0.05 * i as f64, 0.2 + 0.03 * (i % 3) as f64, 0.01 * (i % 2) as f64))
            .collect();
        let out = extract_oriented_surface_points(&cloud(pts.clone()), 0.5).unwrap();
        assert!(out.is_empty());
        let mut seven = pts;
        seven.push(Vec3::new(0.3, 0.3, 0.02));
        let out = extract_oriented_surface_points(&cloud(seven), 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.points()[0].support, 7);
    }

    #[test]
    fn empty_cloud_is_empty_result() {
        let out = extract_oriented_surface_points(&PointCloud::empty(), 0.5).unwrap();
        assert!(out.is_empty());
        assert!(extract_oriented_surface_points(&PointCloud::empty(), 0.0).is_err());
    }

    #[test]
    fn collinear_points_are_discarded() {
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(0.01 + 0.02 * i as f64, 0.2, 0.2)).collect();
        assert!(extract_oriented_surface_points(&cloud(pts), 0.5).unwrap().is_empty());
    }

    #[test]
    fn gaussian_blob_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let nx = Normal::new(0.0, 0.08).unwrap();
        let nz = Normal::new(0.0, 0.02).unwrap();
        let c = Vec3::new(1.25, -0.75, 2.25);
        let pts: Vec<Vec3> = (0..400)
            .map(|_| c + Vec3::new(nx.sample(&mut rng), 0.6 * nx.sample(&mut rng), nz.sample(&mut rng)))
            .collect();
        let out = extract_oriented_surface_points(&cloud(pts.clone()), 0.5).unwrap();
        let key = VoxelKey::of(&c, 0.5);
        // Locate the surface point of the blob's central voxel and rebuild it.
        let in_voxel: Vec<&Vec3> = pts.iter().filter(|p| VoxelKey::of(p, 0.5) == key).collect();
        let centroid = in_voxel.iter().copied().sum::<Vec3>() / in_voxel.len() as f64;
        let near: Vec<Vec3> = pts.iter().copied().filter(|p| (p - centroid).norm() <= 0.5).collect();
        let mean = near.iter().sum::<Vec3>() / near.len() as f64;
        let mut cov = Mat3::zeros();
        for p in &near {
            cov += (p - mean) * (p - mean).transpose();
        }
        cov /= (near.len() - 1) as f64;
        let lambdas = cubic_eigenvalues(&cov);
        let oracle_normal = eigenvector_for(&cov, lambdas[0]);

        let sp = out
            .points()
            .iter()
            .find(|s| (s.mean - mean).norm() < 1e-9)
            .expect("central voxel surface point");
        assert_eq!(sp.support, near.len());
        assert!(sp.normal.dot(&oracle_normal).abs() > 1.0 - 1e-9);
    }

    #[test]
    fn normals_face_the_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(5.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let out = extract_oriented_surface_points(&cloud(pts), 0.5).unwrap();
        assert!(!out.is_empty());
        for s in out.points() {
            assert!(s.normal.dot(&(-s.mean)) >= 0.0);
            assert!((s.normal.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn overlap_cases() {
        let c = cloud(vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(3.0, 0.0, 0.0)]);
        assert_eq!(occupancy_overlap(&c, &c, 0.5).unwrap(), 1.0);
        let far = cloud(vec![Vec3::new(100.0, 0.0, 0.0)]);
        assert_eq!(occupancy_overlap(&c, &far, 0.5).unwrap(), 0.0);
        assert!(matches!(
            occupancy_overlap(&PointCloud::empty(), &c, 0.5),
            Err(Error::EmptyQueryCloud)
        ));
    }

    #[test]
    fn overlap_of_shifted_grid_is_half() {
        let r = 0.5;
        let grid = |shift: i32| {
            let mut pts = Vec::new();
            for i in 0..10 {
                for j in 0..10 {
                    pts.push(VoxelKey([i + shift, j, 0]).center(r));
                }
            }
            cloud(pts)
        };
        // Enumerated by hand: columns 5..9 are shared, 50 of 100 voxels.
        assert_eq!(occupancy_overlap(&grid(0), &grid(5), r).unwrap(), 0.5);
    }

    /// Signed permutation matrices with +1 determinant: the rotations that
    /// map the voxel lattice onto itself.
    fn lattice_rotations() -> Vec<Mat3> {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::new();
        for p in perms {
            for signs in 0..8 {
                let mut m = Mat3::zeros();
                for row in 0..3 {
                    m[(row, p[row])] = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
                }
                if m.determinant() > 0.0 {
                    out.push(m);
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn extraction_is_equivariant_under_lattice_motions(
            seed in 0u64..1000,
            rot_idx in 0usize..24,
            shift in (-4i32..4, -4i32..4, -4i32..4),
        ) {
            let r = 0.5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..300)
                .map(|_| {
                    let u: f64 = rng.random_range(-1.5..1.5);
                    let v: f64 = rng.random_range(-1.5..1.5);
                    Vec3::new(u, v, 0.3 * u - 0.2 * v + 0.1 * (3.0 * u).sin() + 2.0)
                })
                .collect();
            let c = cloud(pts);
            let pose = RigidPose::new(
                lattice_rotations()[rot_idx],
                Vec3::new(shift.0 as f64, shift.1 as f64, shift.2 as f64) * r,
            );
            let a = extract_oriented_surface_points(&c, r).unwrap().transformed(&pose);
            let b = extract_oriented_surface_points(&c.transformed(&pose), r).unwrap();
            prop_assert_eq!(a.len(), b.len());
            let mut a_pts = a.points().to_vec();
            let mut b_pts = b.points().to_vec();
            let key = |s: &SurfacePoint| VoxelKey::of(&s.mean, 1e-3);
            a_pts.sort_by_key(key);
            b_pts.sort_by_key(key);
            for (x, y) in a_pts.iter().zip(&b_pts) {
                prop_assert!((x.mean - y.mean).norm() < 1e-6);
                prop_assert!(x.normal.dot(&y.normal).abs() > 1.0 - 1e-6);
                prop_assert_eq!(x.support, y.support);
            }
        }

        #[test]
        fn counts_are_ordered(seed in 0u64..1000, n in 1usize..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.3..0.3)))
                .collect();
            let c = cloud(pts);
            let out = extract_oriented_surface_points(&c, 0.5).unwrap();
            let occupied = occupied_voxels(&c, 0.5).len();
            prop_assert!(out.len() <= occupied);
            prop_assert!(occupied <= c.len());
            for s in out.points() {
                prop_assert!(s.support >= MIN_SUPPORT);
            }
        }

        #[test]
        fn overlap_ignores_order_and_duplicates(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec3> = (0..60).map(|_| Vec3::new(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), 0.0)).collect();
            let b: Vec<Vec3> = (0..60).map(|_| Vec3::new(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), 0.0)).collect();
            let base = occupancy_overlap(&cloud(a.clone()), &cloud(b.clone()), 0.5).unwrap();
            let mut a2 = a.clone();
            a2.reverse();
            a2.extend_from_slice(&a[..10]);
            let mut b2 = b.clone();
            b2.rotate_left(17);
            b2.extend_from_slice(&b);
            prop_assert_eq!(base, occupancy_overlap(&cloud(a2), &cloud(b2), 0.5).unwrap());
        }
    }
}
