//! Minimal PLY support: binary little-endian writing of clouds and meshes,
//! reading of ASCII and binary little-endian files with `x y z` vertices and
//! optional polygon faces.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::tsdf::TriangleMesh;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

fn header(vertices: usize, faces: Option<usize>) -> String {
    let mut h = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {vertices}\nproperty float x\nproperty float y\nproperty float z\n"
    );
    if let Some(f) = faces {
        h.push_str(&format!("element face {f}\nproperty list uchar int vertex_indices\n"));
    }
    h.push_str("end_header\n");
    h
}

/// Encodes points as float32; precision is reduced to single precision.
pub fn encode_cloud(points: &[Vec3]) -> Vec<u8> {
    let mut out = header(points.len(), None).into_bytes();
    out.reserve(points.len() * 12);
    for p in points {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_mesh(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = header(mesh.vertices().len(), Some(mesh.triangles().len())).into_bytes();
    for p in mesh.vertices() {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for t in mesh.triangles() {
        out.push(3);
        for i in t {
            out.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, &encode_cloud(cloud.points()))
}

pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    write_bytes(path, &encode_mesh(mesh))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ply(BufReader::new(file), path)
}

pub fn parse_ply<R: BufRead>(mut reader: R, path: &Path) -> Result<PlyData> {
    let perr = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut elements: Vec<Element> = Vec::new();
    let mut binary = None;
    let mut line = String::new();
    let mut first = true;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(perr("unexpected end of header".into()));
        }
        let l = line.trim();
        if first {
            if l != "ply" {
                return Err(perr("missing ply magic".into()));
            }
            first = false;
            continue;
        }
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(perr(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| perr(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let (c, i) = (
                    Scalar::parse(c).ok_or_else(|| perr(format!("bad type {c}")))?,
                    Scalar::parse(i).ok_or_else(|| perr(format!("bad type {i}")))?,
                );
                elements
                    .last_mut()
                    .ok_or_else(|| perr("property before element".into()))?
                    .props
                    .push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| perr(format!("bad type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| perr("property before element".into()))?
                    .props
                    .push(Property::Scalar(name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => return Err(perr(format!("unrecognized header line {l:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| perr("missing format line".into()))?;
    let mut data = PlyData::default();
    if binary {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let mut take = |s: Scalar| -> Result<f64> {
            let end = pos + s.size();
            if end > bytes.len() {
                return Err(perr("truncated binary body".into()));
            }
            let v = s.decode(&bytes[pos..end]);
            pos = end;
            Ok(v)
        };
        for el in &elements {
            for _ in 0..el.count {
                let mut row = Row::default();
                for p in &el.props {
                    match p {
                        Property::Scalar(name, s) => row.scalar(name, take(*s)?),
                        Property::List(name, c, i) => {
                            let n = take(*c)? as usize;
                            let mut v = Vec::with_capacity(n);
                            for _ in 0..n {
                                v.push(take(*i)?);
                            }
                            row.list(name, v);
                        }
                    }
                }
                row.commit(&el.name, &mut data).map_err(&perr)?;
            }
        }
    } else {
        let mut rest = String::new();
        reader.read_to_string(&mut rest).map_err(|e| Error::io(path, e))?;
        let mut tokens = rest.split_whitespace();
        let mut take = || -> Result<f64> {
            let t = tokens.next().ok_or_else(|| perr("truncated ascii body".into()))?;
            t.parse::<f64>().map_err(|_| perr(format!("bad number {t:?}")))
        };
        for el in &elements {
            for _ in 0..el.count {
                let mut row = Row::default();
                for p in &el.props {
                    match p {
                        Property::Scalar(name, _) => row.scalar(name, take()?),
                        Property::List(name, _, _) => {
                            let n = take()? as usize;
                            let mut v = Vec::with_capacity(n);
                            for _ in 0..n {
                                v.push(take()?);
                            }
                            row.list(name, v);
                        }
                    }
                }
                row.commit(&el.name, &mut data).map_err(&perr)?;
            }
        }
    }
    Ok(data)
}

#[derive(Default)]
struct Row {
    xyz: [Option<f64>; 3],
    indices: Option<Vec<f64>>,
}

impl Row {
    fn scalar(&mut self, name: &str, v: f64) {
        match name {
            "x" => self.xyz[0] = Some(v),
            "y" => self.xyz[1] = Some(v),
            "z" => self.xyz[2] = Some(v),
            _ => {}
        }
    }

    fn list(&mut self, name: &str, v: Vec<f64>) {
        if name == "vertex_indices" || name == "vertex_index" {
            self.indices = Some(v);
        }
    }

    fn commit(self, element: &str, data: &mut PlyData) -> std::result::Result<(), String> {
        match element {
            "vertex" => {
                let [Some(x), Some(y), Some(z)] = self.xyz else {
                    return Err("vertex element lacks x, y, z".into());
                };
                let p = Vec3::new(x, y, z);
                if !p.iter().all(|c| c.is_finite()) {
                    return Err(format!("non-finite vertex {}", data.vertices.len()));
                }
                data.vertices.push(p);
            }
            "face" => {
                let idx = self.indices.ok_or("face element lacks vertex_indices")?;
                // Fan triangulation of polygons.
                for k in 1..idx.len().saturating_sub(1) {
                    data.faces.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                }
            }
            _ => {}
        }
        Ok(())
    }
}

impl PlyData {
    pub fn into_cloud(self) -> Result<PointCloud> {
        PointCloud::new(self.vertices)
    }

    pub fn into_mesh(self) -> Result<TriangleMesh> {
        TriangleMesh::new(self.vertices, self.faces)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_cloud_round_trip() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 1e3)];
        let bytes = encode_cloud(&pts);
        let d = parse_ply(&bytes[..], Path::new("c.ply")).unwrap();
        assert_eq!(d.vertices, pts);
        assert!(d.faces.is_empty());
    }

    #[test]
    fn binary_mesh_round_trip() {
        let m = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let d = parse_ply(&encode_mesh(&m)[..], Path::new("m.ply")).unwrap();
        assert_eq!(d.into_mesh().unwrap(), m);
    }

    #[test]
    fn ascii_with_extra_properties_and_quads() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 4\nproperty double x\nproperty double y\n\
                    property double z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n0 0 0 255\n1 0 0 0\n1 1 0 0\n0 1 0 9\n4 0 1 2 3\n";
        let d = parse_ply(text.as_bytes(), Path::new("a.ply")).unwrap();
        assert_eq!(d.vertices.len(), 4);
        assert_eq!(d.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn truncated_files_are_errors() {
        let mut bytes = encode_cloud(&[Vec3::new(1.0, 2.0, 3.0)]);
        bytes.pop();
        assert!(parse_ply(&bytes[..], Path::new("t.ply")).is_err());
        assert!(parse_ply(&b"plx\n"[..], Path::new("t.ply")).is_err());
    }
}
