//! XYZ text and PLY point-cloud files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{GeometryError, PointCloud};

/// Parses whitespace-separated `x y z` lines. Blank lines and lines starting
/// with `#` are skipped; extra columns after the third are ignored.
pub fn parse_xyz<R: BufRead>(reader: R) -> Result<PointCloud, GeometryError> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let mut p = [0.0; 3];
        let mut fields = text.split_whitespace();
        for (axis, slot) in p.iter_mut().enumerate() {
            let field = fields.next().ok_or_else(|| GeometryError::Parse {
                line: i + 1,
                message: format!("expected 3 coordinates, found {axis}"),
            })?;
            *slot = field
                .parse::<f64>()
                .map_err(|_| GeometryError::Parse { line: i + 1, message: format!("invalid number {field:?}") })?;
            if !slot.is_finite() {
                return Err(GeometryError::Parse { line: i + 1, message: format!("non-finite coordinate {field:?}") });
            }
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn write_xyz<W: Write>(mut w: W, points: &[[f64; 3]]) -> Result<(), GeometryError> {
    for p in points {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug)]
enum ScalarKind {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarKind {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyHeader {
    format: PlyFormat,
    vertex_count: usize,
    /// Vertex properties in file order.
    properties: Vec<(String, ScalarKind)>,
    /// Header lines consumed, for error messages on the body.
    lines: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> GeometryError {
    GeometryError::Parse { line, message: message.into() }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<PlyHeader, GeometryError> {
    let mut line = String::new();
    let mut n = 0;
    let mut next = |r: &mut R, line: &mut String| -> Result<usize, GeometryError> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(parse_err(n + 1, "unexpected end of PLY header"));
        }
        n += 1;
        Ok(n)
    };
    let at = next(r, &mut line)?;
    if line.trim() != "ply" {
        return Err(parse_err(at, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    loop {
        let at = next(r, &mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLe,
                    other => return Err(parse_err(at, format!("unsupported PLY format {other}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    if vertex_count.is_some() {
                        return Err(parse_err(at, "duplicate vertex element"));
                    }
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| parse_err(at, format!("invalid element count {count:?}")))?,
                    );
                } else if vertex_count.is_none() {
                    return Err(parse_err(at, "vertex element must come first"));
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(parse_err(at, "list properties on vertices are not supported"));
                }
            }
            ["property", kind, name] => {
                if in_vertex {
                    let kind = ScalarKind::parse(kind)
                        .ok_or_else(|| parse_err(at, format!("unknown property type {kind:?}")))?;
                    properties.push((name.to_string(), kind));
                }
            }
            ["end_header"] => break,
            _ => return Err(parse_err(at, format!("unrecognized header line {:?}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| parse_err(n, "missing format line"))?;
    let vertex_count = vertex_count.ok_or_else(|| parse_err(n, "missing vertex element"))?;
    for axis in ["x", "y", "z"] {
        if !properties.iter().any(|(p, _)| p == axis) {
            return Err(parse_err(n, format!("vertex property {axis} missing")));
        }
    }
    Ok(PlyHeader { format, vertex_count, properties, lines: n })
}

/// Reads the `x`, `y`, `z` vertex properties of an ASCII or binary
/// little-endian PLY file. Elements after `vertex` are ignored.
pub fn parse_ply<R: BufRead>(mut reader: R) -> Result<PointCloud, GeometryError> {
    let header = read_header(&mut reader)?;
    let axis_slot: Vec<Option<usize>> = header
        .properties
        .iter()
        .map(|(name, _)| match name.as_str() {
            "x" => Some(0),
            "y" => Some(1),
            "z" => Some(2),
            _ => None,
        })
        .collect();
    let mut points = Vec::with_capacity(header.vertex_count);
    match header.format {
        PlyFormat::BinaryLe => {
            let stride: usize = header.properties.iter().map(|(_, k)| k.size()).sum();
            let mut buf = vec![0u8; stride];
            for v in 0..header.vertex_count {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| GeometryError::Io(format!("PLY body truncated at vertex {v}")))?;
                let mut p = [0.0; 3];
                let mut off = 0;
                for ((_, kind), slot) in header.properties.iter().zip(&axis_slot) {
                    if let Some(a) = slot {
                        p[*a] = kind.decode_le(&buf[off..off + kind.size()]);
                    }
                    off += kind.size();
                }
                points.push(p);
            }
        }
        PlyFormat::Ascii => {
            let mut line = String::new();
            for v in 0..header.vertex_count {
                let at = header.lines + v + 1;
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    return Err(parse_err(at, "PLY body truncated"));
                }
                let words: Vec<&str> = line.split_whitespace().collect();
                if words.len() < header.properties.len() {
                    return Err(parse_err(at, "too few vertex values"));
                }
                let mut p = [0.0; 3];
                for (w, slot) in words.iter().zip(&axis_slot) {
                    if let Some(a) = slot {
                        p[*a] = w.parse().map_err(|_| parse_err(at, format!("invalid number {w:?}")))?;
                    }
                }
                points.push(p);
            }
        }
    }
    PointCloud::new(points)
}

/// Binary little-endian PLY with float32 `x y z`.
pub fn write_ply<W: Write>(mut w: W, points: &[[f64; 3]]) -> Result<(), GeometryError> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )?;
    for p in points {
        for c in p {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn is_ply(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Reads a cloud, choosing PLY for a `.ply` extension and XYZ otherwise.
pub fn read_cloud(path: &Path) -> Result<PointCloud, GeometryError> {
    let file = File::open(path).map_err(|e| GeometryError::Io(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    if is_ply(path) {
        parse_ply(reader)
    } else {
        parse_xyz(reader)
    }
}

pub fn write_cloud(path: &Path, points: &[[f64; 3]]) -> Result<(), GeometryError> {
    let file = File::create(path).map_err(|e| GeometryError::Io(format!("{}: {e}", path.display())))?;
    let w = BufWriter::new(file);
    if is_ply(path) {
        write_ply(w, points)
    } else {
        write_xyz(w, points)
    }
}
