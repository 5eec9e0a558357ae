use rustc_hash::FxHashMap;

use super::tables::TRI_TABLE;
use super::TsdfVolume;
use crate::error::{Error, Result};
use crate::features::VoxelKey;
use crate::geometry::{RigidPose, Vec3};
use crate::par;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint { index: i });
        }
        let n = vertices.len() as u32;
        if triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::InvalidParameter("triangle index out of range".into()));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: &[u32; 3]) -> [Vec3; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    /// Unnormalized face normal (length is twice the area).
    pub fn face_normal(&self, t: &[u32; 3]) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| 0.5 * self.face_normal(t).norm()).sum()
    }

    pub fn transformed(&self, pose: &RigidPose) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| pose.transform_point(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Appends another mesh, offsetting its indices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
    }
}

const CORNER_OFFSETS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Grid edge identity: lower endpoint key and axis.
type EdgeId = (VoxelKey, u8);

fn edge_id(base: &VoxelKey, edge: usize) -> EdgeId {
    let [a, b] = EDGES[edge];
    let (pa, pb) = (CORNER_OFFSETS[a], CORNER_OFFSETS[b]);
    let lo = [pa[0].min(pb[0]), pa[1].min(pb[1]), pa[2].min(pb[2])];
    let axis = (0..3).find(|&i| pa[i] != pb[i]).expect("edge spans one axis") as u8;
    (base.offset(lo[0], lo[1], lo[2]), axis)
}

/// Marching cubes over cubes whose eight corner cells all exist. Vertices
/// are shared between cubes and interpolated linearly in `d`.
pub fn extract_mesh(volume: &TsdfVolume) -> TriangleMesh {
    let vs = volume.voxel_size();
    let keys = volume.sorted_keys();
    // Per cube: triangles as edge identities plus the vertex position of each.
    let cube_tris: Vec<([EdgeId; 3], [Vec3; 3])> = par::flat_map_chunks(&keys, 512, |chunk| {
        let mut out = Vec::new();
        for base in chunk {
            let mut values = [0.0; 8];
            let mut complete = true;
            for (i, o) in CORNER_OFFSETS.iter().enumerate() {
                match volume.get(&base.offset(o[0], o[1], o[2])) {
                    Some(c) => values[i] = c.d,
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if !complete {
                continue;
            }
            let mut case = 0usize;
            for (i, v) in values.iter().enumerate() {
                if *v < 0.0 {
                    case |= 1 << i;
                }
            }
            if case == 0 || case == 255 {
                continue;
            }
            let vertex = |edge: usize| -> Vec3 {
                let [a, b] = EDGES[edge];
                let pa = base.offset(CORNER_OFFSETS[a][0], CORNER_OFFSETS[a][1], CORNER_OFFSETS[a][2]).center(vs);
                let pb = base.offset(CORNER_OFFSETS[b][0], CORNER_OFFSETS[b][1], CORNER_OFFSETS[b][2]).center(vs);
                let (da, db) = (values[a], values[b]);
                let t = if (da - db).abs() > 1e-15 { da / (da - db) } else { 0.5 };
                pa + (pb - pa) * t.clamp(0.0, 1.0)
            };
            let row = &TRI_TABLE[case];
            for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                let e = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
                out.push((e.map(|x| edge_id(base, x)), e.map(vertex)));
            }
        }
        out
    });

    let mut index: FxHashMap<EdgeId, u32> = FxHashMap::default();
    let mut vertices = Vec::new();
    let mut triangles = Vec::with_capacity(cube_tris.len());
    for (ids, positions) in cube_tris {
        let mut tri = [0u32; 3];
        for k in 0..3 {
            tri[k] = *index.entry(ids[k]).or_insert_with(|| {
                vertices.push(positions[k]);
                (vertices.len() - 1) as u32
            });
        }
        if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
            triangles.push(tri);
        }
    }
    TriangleMesh { vertices, triangles }
}
