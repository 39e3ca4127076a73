//! PLY reading (ascii and binary little endian) and writing.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use replaymap_core::{TriMesh, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed PLY: {0}")]
    Malformed(String),
    #[error("unsupported PLY: {0}")]
    Unsupported(String),
}

fn malformed(msg: impl Into<String>) -> PlyError {
    PlyError::Malformed(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
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
    fn parse(name: &str) -> Result<Scalar, PlyError> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(PlyError::Unsupported(format!("scalar type {other}"))),
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

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Vertices, polygon faces (fan-triangulated) and any extra vertex scalars.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Vertex properties other than x, y, z, by name.
    pub vertex_scalars: Vec<(String, Vec<f64>)>,
}

impl PlyData {
    pub fn into_mesh(self) -> TriMesh {
        TriMesh { vertices: self.vertices, triangles: self.faces, scalars: None }
    }
}

pub fn read_ply(path: &Path) -> Result<PlyData, PlyError> {
    read_ply_from(BufReader::new(File::open(path)?))
}

pub fn read_ply_from<R: BufRead>(mut r: R) -> Result<PlyData, PlyError> {
    let (format, elements) = read_header(&mut r)?;
    let mut data = PlyData::default();
    let mut tokens = AsciiTokens { reader: r, line: Vec::new(), pos: 0 };
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let mut xyz_idx = [None; 3];
        let mut extra = Vec::new();
        if is_vertex {
            for (i, p) in el.properties.iter().enumerate() {
                if let Property::Scalar { name, .. } = p {
                    match name.as_str() {
                        "x" => xyz_idx[0] = Some(i),
                        "y" => xyz_idx[1] = Some(i),
                        "z" => xyz_idx[2] = Some(i),
                        _ => extra.push((i, name.clone())),
                    }
                }
            }
            if xyz_idx.iter().any(Option::is_none) {
                return Err(malformed("vertex element lacks x, y or z"));
            }
            data.vertices.reserve(el.count);
            data.vertex_scalars = extra.iter().map(|(_, n)| (n.clone(), Vec::with_capacity(el.count))).collect();
        }
        let mut values = vec![0.0; el.properties.len()];
        let mut list = Vec::new();
        let mut buf = [0u8; 8];
        for row in 0..el.count {
            list.clear();
            for (i, p) in el.properties.iter().enumerate() {
                match p {
                    Property::Scalar { ty, .. } => {
                        values[i] = match format {
                            Format::Ascii => tokens.next_f64()?,
                            Format::BinaryLe => read_scalar(&mut tokens.reader, *ty, &mut buf)?,
                        };
                    }
                    Property::List { name, count, item } => {
                        let n = match format {
                            Format::Ascii => tokens.next_f64()?,
                            Format::BinaryLe => read_scalar(&mut tokens.reader, *count, &mut buf)?,
                        };
                        if !(n >= 0.0) || n.fract() != 0.0 {
                            return Err(malformed(format!("bad list length {n} in {} {row}", el.name)));
                        }
                        let keep = is_face && (name == "vertex_indices" || name == "vertex_index");
                        for _ in 0..n as usize {
                            let v = match format {
                                Format::Ascii => tokens.next_f64()?,
                                Format::BinaryLe => read_scalar(&mut tokens.reader, *item, &mut buf)?,
                            };
                            if keep {
                                list.push(v);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                let [x, y, z] = xyz_idx.map(|i| values[i.expect("checked")]);
                data.vertices.push(Vec3::new(x, y, z));
                for ((i, _), (_, col)) in extra.iter().zip(&mut data.vertex_scalars) {
                    col.push(values[*i]);
                }
            } else if is_face && list.len() >= 3 {
                let idx: Vec<u32> = list
                    .iter()
                    .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as u32) } else { Err(malformed(format!("bad face index {v}"))) })
                    .collect::<Result<_, _>>()?;
                for k in 1..idx.len() - 1 {
                    data.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            if format == Format::Ascii {
                tokens.end_line();
            }
        }
    }
    let n = data.vertices.len() as u32;
    if data.faces.iter().flatten().any(|&i| i >= n) {
        return Err(malformed("face index out of range"));
    }
    Ok(data)
}

fn read_scalar<R: Read>(r: &mut R, ty: Scalar, buf: &mut [u8; 8]) -> Result<f64, PlyError> {
    let b = &mut buf[..ty.size()];
    r.read_exact(b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => malformed("file ends before the declared element data"),
        _ => PlyError::Io(e),
    })?;
    Ok(ty.decode(b))
}

fn read_header<R: BufRead>(r: &mut R) -> Result<(Format, Vec<Element>), PlyError> {
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<(), PlyError> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(malformed("header not terminated by end_header"));
        }
        Ok(())
    };
    next_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(malformed("missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next_line(&mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", other, _] => return Err(PlyError::Unsupported(format!("format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| malformed(format!("bad element count '{count}'")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, name] => elements
                .last_mut()
                .ok_or_else(|| malformed("property before element"))?
                .properties
                .push(Property::List { name: name.to_string(), count: Scalar::parse(count)?, item: Scalar::parse(item)? }),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| malformed("property before element"))?
                .properties
                .push(Property::Scalar { name: name.to_string(), ty: Scalar::parse(ty)? }),
            _ => return Err(malformed(format!("unexpected header line '{}'", line.trim_end()))),
        }
    }
    Ok((format.ok_or_else(|| malformed("missing format line"))?, elements))
}

struct AsciiTokens<R> {
    reader: R,
    line: Vec<u8>,
    pos: usize,
}

impl<R: BufRead> AsciiTokens<R> {
    fn next_f64(&mut self) -> Result<f64, PlyError> {
        loop {
            while self.pos < self.line.len() && self.line[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.line.len() {
                let start = self.pos;
                while self.pos < self.line.len() && !self.line[self.pos].is_ascii_whitespace() {
                    self.pos += 1;
                }
                let tok = std::str::from_utf8(&self.line[start..self.pos]).map_err(|_| malformed("non-UTF-8 token"))?;
                return parse_ascii_number(tok);
            }
            self.line.clear();
            self.pos = 0;
            if self.reader.read_until(b'\n', &mut self.line)? == 0 {
                return Err(malformed("file ends before the declared element data"));
            }
        }
    }

    /// Discards the rest of the current line.
    fn end_line(&mut self) {
        self.pos = self.line.len();
    }
}

fn parse_ascii_number(tok: &str) -> Result<f64, PlyError> {
    match tok.to_ascii_lowercase().as_str() {
        "nan" | "-nan" => Ok(f64::NAN),
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => tok.parse().map_err(|_| malformed(format!("bad number '{tok}'"))),
    }
}

/// Output encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Encoding {
    Ascii,
    #[default]
    BinaryLe,
}

/// Writes vertices as float32 and faces as int32 indices. Per-vertex
/// `mesh.scalars`, if present, are written as a float property `value`.
pub fn write_mesh(path: &Path, mesh: &TriMesh, encoding: Encoding) -> io::Result<()> {
    let scalars = mesh.scalars.as_deref().map(|s| ("value", s));
    write_ply(path, &mesh.vertices, scalars, &mesh.triangles, encoding)
}

/// Writes a point cloud, optionally with one named float property per point.
pub fn write_points(path: &Path, points: &[Vec3], scalar: Option<(&str, &[f64])>, encoding: Encoding) -> io::Result<()> {
    write_ply(path, points, scalar, &[], encoding)
}

fn write_ply(
    path: &Path,
    vertices: &[Vec3],
    scalar: Option<(&str, &[f64])>,
    faces: &[[u32; 3]],
    encoding: Encoding,
) -> io::Result<()> {
    if let Some((_, s)) = scalar {
        assert_eq!(s.len(), vertices.len(), "one scalar per vertex");
    }
    let mut w = BufWriter::new(File::create(path)?);
    let format = match encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLe => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {format} 1.0")?;
    writeln!(w, "element vertex {}\nproperty float x\nproperty float y\nproperty float z", vertices.len())?;
    if let Some((name, _)) = scalar {
        writeln!(w, "property float {name}")?;
    }
    if !faces.is_empty() {
        writeln!(w, "element face {}\nproperty list uchar int vertex_indices", faces.len())?;
    }
    writeln!(w, "end_header")?;
    for (i, v) in vertices.iter().enumerate() {
        let extra = scalar.map(|(_, s)| s[i] as f32);
        match encoding {
            Encoding::Ascii => {
                write!(w, "{} {} {}", v.x as f32, v.y as f32, v.z as f32)?;
                if let Some(e) = extra {
                    write!(w, " {e}")?;
                }
                writeln!(w)?;
            }
            Encoding::BinaryLe => {
                for c in [v.x as f32, v.y as f32, v.z as f32].into_iter().chain(extra) {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
    }
    for f in faces {
        match encoding {
            Encoding::Ascii => writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?,
            Encoding::BinaryLe => {
                w.write_all(&[3u8])?;
                for &i in f {
                    w.write_all(&(i as i32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()
}
