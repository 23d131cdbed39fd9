//! PLY point clouds and triangle meshes, `ascii 1.0` and
//! `binary_little_endian 1.0`.
//!
//! Reading keeps vertex `x y z` and, when present, the face list
//! `vertex_indices` (or `vertex_index`); everything else is skipped.

use std::path::Path;

use super::atomic_write;
use crate::eval3d::{PointCloud, TriangleMesh};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
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

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar {
        name: String,
        ty: Scalar,
    },
    List {
        name: String,
        count: Scalar,
        item: Scalar,
    },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
    /// Offset of the declaring header line.
    at: usize,
}

impl Element {
    fn scalar(&self, name: &str) -> Option<usize> {
        self.properties
            .iter()
            .position(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
    }
}

/// Vertices and polygon faces read from a PLY file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<Vec<usize>>,
}

impl PlyData {
    pub fn into_cloud(self) -> Result<PointCloud> {
        PointCloud::new(self.vertices)
    }

    /// Polygons are fan-triangulated.
    pub fn into_mesh(self) -> Result<TriangleMesh> {
        let mut tris = Vec::new();
        for f in &self.faces {
            for k in 1..f.len().saturating_sub(1) {
                tris.push([f[0], f[k], f[k + 1]]);
            }
        }
        TriangleMesh::new(self.vertices, tris)
    }
}

struct Header {
    encoding: Encoding,
    elements: Vec<Element>,
    body: usize,
}

fn parse_header(data: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = data[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(pos, "header is not terminated by end_header"))?;
        let raw = &data[pos..pos + end];
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::parse(pos, "header line is not UTF-8"))?
            .trim_end_matches('\r');
        lines.push((line, pos));
        pos += end + 1;
        if line.trim() == "end_header" {
            break;
        }
    }
    let mut it = lines.into_iter();
    match it.next() {
        Some((l, _)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(0, "missing \"ply\" magic line")),
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for (line, at) in it {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] | ["end_header"] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, version] => {
                if *version != "1.0" {
                    return Err(Error::parse(
                        at,
                        format!("unsupported PLY version {version}"),
                    ));
                }
                encoding = Some(match *fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLittleEndian,
                    other => return Err(Error::parse(at, format!("unknown format {other:?}"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(at, format!("bad element count {count:?}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    at,
                });
            }
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(at, "property before any element"))?;
                let ty = |t: &str| {
                    Scalar::from_name(t)
                        .ok_or_else(|| Error::parse(at, format!("unknown type {t:?}")))
                };
                let (count, item) = (ty(count)?, ty(item)?);
                if !count.is_integer() {
                    return Err(Error::parse(at, "list count type must be an integer"));
                }
                el.properties.push(Property::List {
                    name: name.to_string(),
                    count,
                    item,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(at, "property before any element"))?;
                let ty = Scalar::from_name(ty)
                    .ok_or_else(|| Error::parse(at, format!("unknown type {ty:?}")))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => {
                return Err(Error::parse(
                    at,
                    format!("unrecognised header line {line:?}"),
                ))
            }
        }
    }
    let encoding = encoding.ok_or_else(|| Error::parse(0, "missing format line"))?;
    if !elements.iter().any(|e| e.name == "vertex") {
        return Err(Error::parse(0, "missing vertex element"));
    }
    for vertex in elements.iter().filter(|e| e.name == "vertex") {
        for axis in ["x", "y", "z"] {
            if vertex.scalar(axis).is_none() {
                return Err(Error::parse(
                    vertex.at,
                    format!("vertex element has no scalar property {axis:?}"),
                ));
            }
        }
    }
    Ok(Header {
        encoding,
        elements,
        body: pos,
    })
}

/// Reads one property value at a time from either encoding.
trait Values {
    fn value(&mut self, ty: Scalar) -> Result<f64>;
    fn finish(&mut self) -> Result<()>;
    /// Byte offset of the next value within the body.
    fn pos(&self) -> usize;
}

struct Binary<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Values for Binary<'_> {
    fn value(&mut self, ty: Scalar) -> Result<f64> {
        let n = ty.size();
        let bytes = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::parse(self.pos, "binary body truncated"))?;
        self.pos += n;
        Ok(ty.decode(bytes))
    }

    fn pos(&self) -> usize {
        self.pos
    }

    fn finish(&mut self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::parse(self.pos, "trailing bytes after last element"));
        }
        Ok(())
    }
}

struct Ascii<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Ascii<'_> {
    fn token(&mut self) -> Option<(&str, usize)> {
        while self
            .data
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        let start = self.pos;
        while self
            .data
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        (self.pos > start).then(|| {
            (
                std::str::from_utf8(&self.data[start..self.pos]).unwrap_or("\u{fffd}"),
                start,
            )
        })
    }
}

impl Values for Ascii<'_> {
    fn value(&mut self, ty: Scalar) -> Result<f64> {
        let end = self.data.len();
        let (tok, at) = self
            .token()
            .ok_or_else(|| Error::parse(end, "ascii body truncated"))?;
        let bad = || Error::parse(at, format!("invalid value {tok:?}"));
        match ty {
            Scalar::F32 => tok.parse::<f32>().map(f64::from).map_err(|_| bad()),
            Scalar::F64 => tok.parse().map_err(|_| bad()),
            _ => tok.parse::<i64>().map(|v| v as f64).map_err(|_| bad()),
        }
    }

    fn pos(&self) -> usize {
        self.pos
    }

    fn finish(&mut self) -> Result<()> {
        if let Some((_, at)) = self.token() {
            return Err(Error::parse(at, "trailing data after last element"));
        }
        Ok(())
    }
}

fn list_len(v: f64, at: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::parse(at, format!("invalid list length {v}")));
    }
    Ok(v as usize)
}

fn read_body(header: &Header, values: &mut dyn Values) -> Result<PlyData> {
    let mut out = PlyData::default();
    for el in &header.elements {
        let xyz = (el.name == "vertex")
            .then(|| ["x", "y", "z"].map(|a| el.scalar(a).expect("checked in header")));
        let is_face = el.name == "face";
        let face_list = if is_face {
            el.properties.iter().position(|p| {
                matches!(p, Property::List { .. })
                    && matches!(p.name(), "vertex_indices" | "vertex_index")
            })
        } else {
            None
        };
        if el.properties.is_empty() {
            continue;
        }
        for _ in 0..el.count {
            let mut coords = [0.0; 3];
            for (pi, prop) in el.properties.iter().enumerate() {
                match prop {
                    Property::Scalar { ty, .. } => {
                        let v = values.value(*ty)?;
                        if let Some(slot) = xyz.and_then(|ix| ix.iter().position(|&i| i == pi)) {
                            coords[slot] = v;
                        }
                    }
                    Property::List { count, item, .. } => {
                        let at = values.pos();
                        let n = list_len(values.value(*count)?, at)?;
                        let mut items = Vec::new();
                        for _ in 0..n {
                            items.push(values.value(*item)?);
                        }
                        if face_list == Some(pi) {
                            let face = items
                                .into_iter()
                                .map(|v| list_len(v, at))
                                .collect::<Result<Vec<_>>>()?;
                            out.faces.push(face);
                        }
                    }
                }
            }
            if xyz.is_some() {
                out.vertices.push(coords);
            }
        }
    }
    values.finish()?;
    let nv = out.vertices.len();
    if let Some(bad) = out.faces.iter().flatten().find(|&&i| i >= nv) {
        return Err(Error::parse(
            0,
            format!("face references vertex {bad} of {nv}"),
        ));
    }
    Ok(out)
}

pub fn parse(data: &[u8]) -> Result<PlyData> {
    let header = parse_header(data)?;
    let body = &data[header.body..];
    match header.encoding {
        Encoding::BinaryLittleEndian => {
            let mut v = Binary { data: body, pos: 0 };
            read_body(&header, &mut v).map_err(|e| shift(e, header.body))
        }
        Encoding::Ascii => {
            let mut v = Ascii { data: body, pos: 0 };
            read_body(&header, &mut v).map_err(|e| shift(e, header.body))
        }
    }
}

/// Body offsets are relative to the end of the header.
fn shift(e: Error, by: usize) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse {
            offset: offset + by,
            message,
        },
        other => other,
    }
}

/// Vertices as float `x y z`, plus an optional triangle list.
pub fn to_bytes(
    vertices: &[[f64; 3]],
    triangles: Option<&[[usize; 3]]>,
    encoding: Encoding,
) -> Vec<u8> {
    let format = match encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLittleEndian => "binary_little_endian",
    };
    let mut head = format!(
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        vertices.len()
    );
    if let Some(t) = triangles {
        head.push_str(&format!(
            "element face {}\nproperty list uchar int vertex_indices\n",
            t.len()
        ));
    }
    head.push_str("end_header\n");
    let mut out = head.into_bytes();
    match encoding {
        Encoding::Ascii => {
            for p in vertices {
                let line = format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32);
                out.extend_from_slice(line.as_bytes());
            }
            for t in triangles.unwrap_or(&[]) {
                out.extend_from_slice(format!("3 {} {} {}\n", t[0], t[1], t[2]).as_bytes());
            }
        }
        Encoding::BinaryLittleEndian => {
            for p in vertices {
                for x in p {
                    out.extend_from_slice(&(*x as f32).to_le_bytes());
                }
            }
            for t in triangles.unwrap_or(&[]) {
                out.push(3);
                for &i in t {
                    out.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<PlyData> {
    parse(&std::fs::read(path)?)
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud, encoding: Encoding) -> Result<()> {
    atomic_write(path, &to_bytes(cloud.points(), None, encoding))
}

pub fn write_mesh(path: impl AsRef<Path>, mesh: &TriangleMesh, encoding: Encoding) -> Result<()> {
    atomic_write(
        path,
        &to_bytes(mesh.vertices(), Some(mesh.triangles()), encoding),
    )
}
