//! Minimal PLY io for colored point clouds.
//!
//! Reads `ascii 1.0` and `binary_little_endian 1.0` files carrying float32
//! x/y/z plus optional red/green/blue (uchar scaled by 255, or float32).
//! Writes binary little-endian with uchar colors. An optional integer `part`
//! property per vertex carries segmentation labels.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, DEFAULT_GRAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    F32,
    F64,
    U8,
    I32,
    U32,
    I16,
    U16,
    I8,
}

impl PropType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "float" | "float32" => PropType::F32,
            "double" | "float64" => PropType::F64,
            "uchar" | "uint8" => PropType::U8,
            "char" | "int8" => PropType::I8,
            "short" | "int16" => PropType::I16,
            "ushort" | "uint16" => PropType::U16,
            "int" | "int32" => PropType::I32,
            "uint" | "uint32" => PropType::U32,
            other => return Err(Error::format(format!("unsupported ply property type '{other}'"))),
        })
    }

    fn size(self) -> usize {
        match self {
            PropType::F64 => 8,
            PropType::F32 | PropType::I32 | PropType::U32 => 4,
            PropType::I16 | PropType::U16 => 2,
            PropType::U8 | PropType::I8 => 1,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            PropType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            PropType::U8 => bytes[0] as f64,
            PropType::I8 => bytes[0] as i8 as f64,
            PropType::I16 => i16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PropType::U16 => u16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PropType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        }
    }
}

#[derive(Debug)]
struct Header {
    format: PlyFormat,
    count: usize,
    props: Vec<(String, PropType)>,
    header_len: usize,
}

fn parse_header(data: &[u8]) -> Result<Header> {
    // The header is ascii text terminated by `end_header\n`; find it so the
    // binary payload offset is exact.
    let needle = b"end_header";
    let pos = data
        .windows(needle.len())
        .position(|w| w == needle)
        .ok_or_else(|| Error::format("ply: missing end_header"))?;
    let after = &data[pos..];
    let nl = after
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("ply: end_header not newline-terminated"))?;
    let header_len = pos + nl + 1;
    let text = std::str::from_utf8(&data[..header_len])
        .map_err(|_| Error::format("ply: header is not utf-8"))?;

    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::format("ply: missing magic line"));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, PropType)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match (tok.next(), tok.next()) {
                    (Some("ascii"), Some("1.0")) => PlyFormat::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => PlyFormat::BinaryLe,
                    (f, v) => {
                        return Err(Error::format(format!(
                            "ply: unsupported format {f:?} {v:?}"
                        )))
                    }
                });
            }
            Some("element") => {
                let name = tok.next().unwrap_or("");
                if name == "vertex" {
                    let c: usize = tok
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::format("ply: bad vertex count"))?;
                    count = Some(c);
                    in_vertex = true;
                } else {
                    if in_vertex && count.is_some() {
                        // Properties after another element don't belong to vertices.
                        in_vertex = false;
                    }
                    if name != "vertex" && count.is_none() {
                        return Err(Error::format(format!(
                            "ply: element '{name}' before vertex element unsupported"
                        )));
                    }
                }
            }
            Some("property") if in_vertex => {
                let ty = tok.next().unwrap_or("");
                if ty == "list" {
                    return Err(Error::format("ply: list properties unsupported on vertices"));
                }
                let ty = PropType::parse(ty)?;
                let name = tok
                    .next()
                    .ok_or_else(|| Error::format("ply: property missing name"))?;
                props.push((name.to_string(), ty));
            }
            Some("comment") | Some("obj_info") | Some("property") | Some("end_header") | None => {}
            Some(other) => {
                return Err(Error::format(format!("ply: unknown header keyword '{other}'")))
            }
        }
    }
    let format = format.ok_or_else(|| Error::format("ply: missing format line"))?;
    let count = count.ok_or_else(|| Error::format("ply: missing vertex element"))?;
    Ok(Header { format, count, props, header_len })
}

/// Parsed contents of a PLY vertex table.
#[derive(Debug, Clone)]
pub struct PlyContents {
    pub cloud: PointCloud,
    /// Per-vertex part labels when the file carries a `part` property.
    pub parts: Option<Vec<u32>>,
}

/// Read a point cloud from a PLY file. The cloud id is the file stem.
pub fn read_ply(path: &Path) -> Result<PlyContents> {
    let data = std::fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".to_string());
    read_ply_bytes(&data, &id)
}

pub fn read_ply_bytes(data: &[u8], id: &str) -> Result<PlyContents> {
    let header = parse_header(data)?;
    let find = |name: &str| header.props.iter().position(|(n, _)| n == name);
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::format("ply: vertex element missing x/y/z")),
    };
    let color_idx = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        (None, None, None) => None,
        _ => return Err(Error::format("ply: partial color properties")),
    };
    let part_idx = find("part");
    if header.count == 0 {
        return Err(Error::format("ply: empty vertex element"));
    }

    let n_props = header.props.len();
    let mut values: Vec<f64> = Vec::with_capacity(header.count * n_props);
    match header.format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&data[header.header_len..])
                .map_err(|_| Error::format("ply: ascii body is not utf-8"))?;
            let mut it = body.split_whitespace();
            for row in 0..header.count {
                for (name, _) in &header.props {
                    let tok = it.next().ok_or_else(|| {
                        Error::format(format!("ply: truncated ascii body at row {row}"))
                    })?;
                    let v: f64 = tok.parse().map_err(|_| {
                        Error::format(format!("ply: bad value '{tok}' for {name} at row {row}"))
                    })?;
                    values.push(v);
                }
            }
        }
        PlyFormat::BinaryLe => {
            let row_size: usize = header.props.iter().map(|(_, t)| t.size()).sum();
            let body = &data[header.header_len..];
            if body.len() < row_size * header.count {
                return Err(Error::format(format!(
                    "ply: binary body holds {} bytes, need {}",
                    body.len(),
                    row_size * header.count
                )));
            }
            for row in 0..header.count {
                let mut off = row * row_size;
                for (_, ty) in &header.props {
                    values.push(ty.read_le(&body[off..]));
                    off += ty.size();
                }
            }
        }
    }

    let mut positions = Vec::with_capacity(header.count * 3);
    let mut colors = Vec::with_capacity(header.count * 3);
    let mut parts = part_idx.map(|_| Vec::with_capacity(header.count));
    for row in 0..header.count {
        let at = |i: usize| values[row * n_props + i];
        positions.extend_from_slice(&[at(xi), at(yi), at(zi)]);
        match color_idx {
            Some((r, g, b)) => {
                for idx in [r, g, b] {
                    let raw = at(idx);
                    let ty = header.props[idx].1;
                    let v = if matches!(ty, PropType::U8) { raw / 255.0 } else { raw };
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::format(format!(
                            "ply: color value {v} outside [0,1] at row {row}"
                        )));
                    }
                    colors.push(v);
                }
            }
            None => colors.extend_from_slice(&[DEFAULT_GRAY; 3]),
        }
        if let (Some(parts), Some(pi)) = (parts.as_mut(), part_idx) {
            let raw = at(pi);
            if raw < 0.0 || raw.fract() != 0.0 {
                return Err(Error::format(format!("ply: part label {raw} at row {row}")));
            }
            parts.push(raw as u32);
        }
    }

    let cloud = PointCloud::new(id, positions, colors)?;
    Ok(PlyContents { cloud, parts })
}

/// Write a point cloud as binary little-endian PLY with uchar colors.
/// When `parts` is given, a per-vertex `uint part` property is appended.
pub fn write_ply(path: &Path, cloud: &PointCloud, parts: Option<&[u32]>) -> Result<()> {
    if let Some(parts) = parts {
        if parts.len() != cloud.len() {
            return Err(Error::shape(format!(
                "ply write: {} part labels for {} points",
                parts.len(),
                cloud.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(64 + cloud.len() * 19);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n",
        cloud.len()
    )?;
    if parts.is_some() {
        write!(out, "property uint part\n")?;
    }
    write!(out, "end_header\n")?;
    for i in 0..cloud.len() {
        for v in cloud.position(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for c in cloud.color(i) {
            out.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        if let Some(parts) = parts {
            out.extend_from_slice(&parts[i].to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Convenience for tests and fixtures: serialize a cloud as ascii PLY.
pub fn write_ply_ascii(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        let c = cloud.color(i);
        writeln!(
            w,
            "{} {} {} {} {} {}",
            p[0] as f32,
            p[1] as f32,
            p[2] as f32,
            (c[0] * 255.0).round() as u8,
            (c[1] * 255.0).round() as u8,
            (c[2] * 255.0).round() as u8
        )?;
    }
    Ok(())
}
