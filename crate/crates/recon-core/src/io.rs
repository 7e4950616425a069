//! PLY / OBJ mesh and point-cloud codecs, plus fixed-precision number
//! formatting shared by the text exports.
//!
//! PLY vertices are written as `double x, y, z` so point data round-trips
//! bit-exactly; mesh confidence is `float`, face lists `uchar`/`uint`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::geometry::CameraPose;
use crate::mesh::TriangleMesh;

#[derive(thiserror::Error, Debug)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("malformed OBJ: {0}")]
    Obj(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Formats a real with 17 significant digits (enough to round-trip `f64`).
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{:.16e}", x)
    } else {
        // JSON has no inf/nan; callers only pass finite values, keep output parseable.
        "null".to_string()
    }
}

pub fn write_mesh_ply(path: &Path, mesh: &TriangleMesh, format: PlyFormat) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mesh_ply_to(&mut w, mesh, format)?;
    w.flush()?;
    Ok(())
}

pub fn write_mesh_ply_to<W: Write>(w: &mut W, mesh: &TriangleMesh, format: PlyFormat) -> Result<(), IoError> {
    let has_conf = mesh.confidence.len() == mesh.vertices.len();
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        match format {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        }
    )?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if has_conf {
        writeln!(w, "property float confidence")?;
    }
    writeln!(w, "element face {}", mesh.triangles.len())?;
    writeln!(w, "property list uchar uint vertex_indices")?;
    writeln!(w, "end_header")?;
    match format {
        PlyFormat::Ascii => {
            for (i, v) in mesh.vertices.iter().enumerate() {
                write!(w, "{} {} {}", fmt17(v.x), fmt17(v.y), fmt17(v.z))?;
                if has_conf {
                    write!(w, " {}", mesh.confidence[i])?;
                }
                writeln!(w)?;
            }
            for t in &mesh.triangles {
                writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for (i, v) in mesh.vertices.iter().enumerate() {
                for c in [v.x, v.y, v.z] {
                    w.write_all(&c.to_le_bytes())?;
                }
                if has_conf {
                    w.write_all(&mesh.confidence[i].to_le_bytes())?;
                }
            }
            for t in &mesh.triangles {
                w.write_all(&[3u8])?;
                for i in t {
                    w.write_all(&i.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Writes one `id tx ty tz qw qx qy qz` line per pose (world-to-camera).
pub fn write_pose_line<W: Write>(w: &mut W, id: usize, pose: &CameraPose) -> std::io::Result<()> {
    let q = pose.quaternion();
    let t = pose.translation;
    writeln!(
        w,
        "{id} {} {} {} {} {} {} {}",
        fmt17(t.x),
        fmt17(t.y),
        fmt17(t.z),
        fmt17(q.w),
        fmt17(q.i),
        fmt17(q.j),
        fmt17(q.k)
    )
}

/// Writes points (and optional normals) as a PLY vertex-only file.
pub fn write_cloud_ply(
    path: &Path,
    points: &[Vector3<f64>],
    normals: Option<&[Vector3<f64>]>,
    format: PlyFormat,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        match format {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        }
    )?;
    writeln!(w, "element vertex {}", points.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property double {name}")?;
    }
    if normals.is_some() {
        for name in ["nx", "ny", "nz"] {
            writeln!(w, "property double {name}")?;
        }
    }
    writeln!(w, "end_header")?;
    for (i, p) in points.iter().enumerate() {
        let mut vals = vec![p.x, p.y, p.z];
        if let Some(n) = normals {
            vals.extend_from_slice(&[n[i].x, n[i].y, n[i].z]);
        }
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = vals.iter().map(|v| fmt17(*v)).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in vals {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(s: &str) -> Result<Self, IoError> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(IoError::Ply(format!("unknown scalar type {other}"))),
        })
    }

    fn read_le<R: Read>(self, r: &mut R) -> Result<f64, IoError> {
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let mut b = [0u8; $n];
                r.read_exact(&mut b)?;
                <$t>::from_le_bytes(b) as f64
            }};
        }
        Ok(match self {
            Scalar::I8 => rd!(i8, 1),
            Scalar::U8 => rd!(u8, 1),
            Scalar::I16 => rd!(i16, 2),
            Scalar::U16 => rd!(u16, 2),
            Scalar::I32 => rd!(i32, 4),
            Scalar::U32 => rd!(u32, 4),
            Scalar::F32 => rd!(f32, 4),
            Scalar::F64 => rd!(f64, 8),
        })
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Contents of a PLY file restricted to what this crate uses.
#[derive(Debug, Clone, Default)]
pub struct PlyData {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub confidence: Option<Vec<f32>>,
    pub faces: Vec<[u32; 3]>,
}

pub fn read_ply(path: &Path) -> Result<PlyData, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    read_ply_from(&mut r)
}

pub fn read_ply_from<R: BufRead>(r: &mut R) -> Result<PlyData, IoError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(IoError::Ply("missing magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(IoError::Ply("unterminated header".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", f, _] => return Err(IoError::Ply(format!("unsupported format {f}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| IoError::Ply(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => elements
                .last_mut()
                .ok_or_else(|| IoError::Ply("property before element".into()))?
                .props
                .push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(c)?,
                    item: Scalar::parse(i)?,
                }),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| IoError::Ply("property before element".into()))?
                .props
                .push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty)?,
                }),
            ["end_header"] => break,
            [] => {}
            other => return Err(IoError::Ply(format!("unexpected header line {other:?}"))),
        }
    }
    let format = format.ok_or_else(|| IoError::Ply("missing format".into()))?;
    let mut data = PlyData::default();
    let mut ascii_tokens: Vec<String> = Vec::new();
    let mut ascii_pos = 0usize;
    if format == PlyFormat::Ascii {
        let mut rest = String::new();
        r.read_to_string(&mut rest)?;
        ascii_tokens = rest.split_whitespace().map(str::to_owned).collect();
    }
    let mut next_value = |r: &mut R, ty: Scalar| -> Result<f64, IoError> {
        match format {
            PlyFormat::Ascii => {
                let tok = ascii_tokens
                    .get(ascii_pos)
                    .ok_or_else(|| IoError::Ply("truncated ascii body".into()))?;
                ascii_pos += 1;
                tok.parse::<f64>()
                    .map_err(|_| IoError::Ply(format!("bad number {tok}")))
            }
            PlyFormat::BinaryLittleEndian => ty.read_le(r),
        }
    };
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let names: Vec<&str> = el
            .props
            .iter()
            .map(|p| match p {
                Property::Scalar { name, .. } | Property::List { name, .. } => name.as_str(),
            })
            .collect();
        let has_normals = ["nx", "ny", "nz"].iter().all(|n| names.contains(n));
        let has_conf = names.contains(&"confidence");
        if is_vertex {
            data.points.reserve(el.count);
            if has_normals {
                data.normals = Some(Vec::with_capacity(el.count));
            }
            if has_conf {
                data.confidence = Some(Vec::with_capacity(el.count));
            }
        }
        for _ in 0..el.count {
            let mut xyz = [0.0f64; 3];
            let mut nxyz = [0.0f64; 3];
            for p in &el.props {
                match p {
                    Property::Scalar { name, ty } => {
                        let v = next_value(r, *ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            "nx" => nxyz[0] = v,
                            "ny" => nxyz[1] = v,
                            "nz" => nxyz[2] = v,
                            "confidence" if is_vertex => {
                                if let Some(c) = data.confidence.as_mut() {
                                    c.push(v as f32)
                                }
                            }
                            _ => {}
                        }
                    }
                    Property::List { count, item, .. } => {
                        let n = next_value(r, *count)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(next_value(r, *item)? as u32);
                        }
                        if is_face {
                            // Fan-triangulate polygons.
                            for k in 1..n.saturating_sub(1) {
                                data.faces.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                data.points.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
                if let Some(n) = data.normals.as_mut() {
                    n.push(Vector3::new(nxyz[0], nxyz[1], nxyz[2]));
                }
            }
        }
    }
    Ok(data)
}

pub fn read_mesh_ply(path: &Path) -> Result<TriangleMesh, IoError> {
    let data = read_ply(path)?;
    let n = data.points.len();
    if data.faces.iter().any(|f| f.iter().any(|&i| i as usize >= n)) {
        return Err(IoError::Ply("face index out of range".into()));
    }
    Ok(TriangleMesh {
        confidence: data.confidence.unwrap_or_else(|| vec![1.0; n]),
        vertices: data.points,
        triangles: data.faces,
    })
}

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# {} vertices, {} faces", mesh.vertices.len(), mesh.triangles.len())?;
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", fmt17(v.x), fmt17(v.y), fmt17(v.z))?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh, IoError> {
    let r = BufReader::new(File::open(path)?);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for line in r.lines() {
        let line = line?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<f64> = toks
                    .take(3)
                    .map(|t| t.parse().map_err(|_| IoError::Obj(format!("bad vertex {line}"))))
                    .collect::<Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(IoError::Obj(format!("short vertex {line}")));
                }
                vertices.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = toks
                    .map(|t| {
                        t.split('/')
                            .next()
                            .and_then(|s| s.parse::<u32>().ok())
                            .filter(|&i| i > 0)
                            .map(|i| i - 1)
                            .ok_or_else(|| IoError::Obj(format!("bad face {line}")))
                    })
                    .collect::<Result<_, _>>()?;
                for k in 1..idx.len().saturating_sub(1) {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(TriangleMesh::new(vertices, triangles))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh() -> TriangleMesh {
        let mut m = TriangleMesh::new(
            vec![
                Vector3::new(0.1, 0.2, 0.3),
                Vector3::new(1.0 / 3.0, -2.5e-7, 9.0),
                Vector3::new(-4.0, 5.5, std::f64::consts::PI),
            ],
            vec![[0, 1, 2]],
        );
        m.confidence = vec![0.25, 0.5, 1.0 / 3.0];
        m
    }

    #[test]
    fn ply_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let p = dir.path().join("m.ply");
            write_mesh_ply(&p, &mesh(), fmt).unwrap();
            let back = read_mesh_ply(&p).unwrap();
            assert_eq!(back, mesh());
        }
    }

    #[test]
    fn cloud_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let pts = mesh().vertices;
        let normals = vec![Vector3::new(0.0, 0.0, 1.0); 3];
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let p = dir.path().join("c.ply");
            write_cloud_ply(&p, &pts, Some(&normals), fmt).unwrap();
            let back = read_ply(&p).unwrap();
            for (a, b) in back.points.iter().zip(&pts) {
                for k in 0..3 {
                    assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
            assert_eq!(back.normals.unwrap(), normals);
        }
    }

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        write_obj(&p, &mesh()).unwrap();
        let back = read_obj(&p).unwrap();
        assert_eq!(back.vertices, mesh().vertices);
        assert_eq!(back.triangles, mesh().triangles);
    }

    #[test]
    fn rejects_garbage() {
        let mut r = std::io::Cursor::new(b"not a ply\n".to_vec());
        assert!(read_ply_from(&mut r).is_err());
        let mut r = std::io::Cursor::new(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nend_header\n1\n".to_vec());
        assert!(read_ply_from(&mut r).is_err());
    }

    #[test]
    fn fmt17_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.123456789] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
        }
    }
}
