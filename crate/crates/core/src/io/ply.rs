//! Binary little-endian PLY persistence using the property layout common to
//! 3D Gaussian splatting tools, so third-party splat viewers can open the
//! files: per-vertex floats `x y z`, `scale_0..2` (log-scale), `rot_0..3`
//! (quaternion w,x,y,z), `opacity` (pre-sigmoid) and `f_dc_0..2` (color).
//!
//! The background color rides in a `comment gstego_background r g b` header
//! line; files without it load with a black background. The loader accepts
//! any property order and ignores extra scalar properties.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::render::{GaussianPrim, GaussianScene};

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "f_dc_0", "f_dc_1", "f_dc_2",
];

pub fn save_ply(scene: &GaussianScene<f32>, path: &Path) -> Result<()> {
    scene.validate()?;
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!(
        "comment gstego_background {} {} {}\n",
        scene.background[0], scene.background[1], scene.background[2]
    ));
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for name in REQUIRED {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");

    let mut buf = header.into_bytes();
    buf.reserve(scene.len() * REQUIRED.len() * 4);
    for p in &scene.prims {
        let fields = p
            .center
            .iter()
            .chain(p.log_scale.iter())
            .chain(p.rotation.iter())
            .chain(std::iter::once(&p.opacity_logit))
            .chain(p.color.iter());
        for v in fields {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Byte width of one scalar PLY property, or an error for list properties.
fn property_width(ty: &str) -> Result<usize> {
    match ty {
        "char" | "int8" | "uchar" | "uint8" => Ok(1),
        "short" | "int16" | "ushort" | "uint16" => Ok(2),
        "int" | "int32" | "uint" | "uint32" | "float" | "float32" => Ok(4),
        "double" | "float64" => Ok(8),
        "list" => Err(Error::Format("PLY list properties are not supported".into())),
        other => Err(Error::Format(format!("unknown PLY property type '{other}'"))),
    }
}

pub fn load_ply(path: &Path) -> Result<GaussianScene<f32>> {
    let bytes = fs::read(path)?;
    let header_end = find_header_end(&bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("PLY header is not valid UTF-8".into()))?;

    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::Format("not a PLY file (missing 'ply' magic line)".into()));
    }

    let mut format_ok = false;
    let mut background = [0.0f32; 3];
    let mut vertex_count: Option<usize> = None;
    // (name, byte offset into a vertex record) for vertex properties, plus
    // the total record stride.
    let mut offsets: Vec<(String, usize)> = Vec::new();
    let mut type_by_name: Vec<(String, String)> = Vec::new();
    let mut stride = 0usize;
    let mut in_vertex = false;

    for line in lines {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                let kind = words.next().unwrap_or("");
                if kind != "binary_little_endian" {
                    return Err(Error::Format(format!(
                        "unsupported PLY format '{kind}', expected binary_little_endian"
                    )));
                }
                format_ok = true;
            }
            Some("comment") => {
                let rest: Vec<&str> = words.collect();
                if rest.first() == Some(&"gstego_background") && rest.len() == 4 {
                    for (k, w) in rest[1..].iter().enumerate() {
                        background[k] = w
                            .parse::<f32>()
                            .map_err(|_| Error::Format("malformed background comment".into()))?;
                    }
                }
            }
            Some("element") => {
                let name = words.next().unwrap_or("");
                let count: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| Error::Format("malformed element line".into()))?;
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(Error::Format("duplicate vertex element".into()));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                } else {
                    if vertex_count.is_none() {
                        // Data for a leading element would shift the vertex
                        // records by an unknown amount.
                        return Err(Error::Format(format!(
                            "element '{name}' precedes the vertex element"
                        )));
                    }
                    in_vertex = false;
                }
            }
            Some("property") => {
                let ty = words.next().unwrap_or("");
                let width = property_width(ty)?;
                let name = words
                    .next()
                    .ok_or_else(|| Error::Format("property line missing a name".into()))?;
                if in_vertex {
                    offsets.push((name.to_string(), stride));
                    type_by_name.push((name.to_string(), ty.to_string()));
                    stride += width;
                }
            }
            Some("end_header") => break,
            _ => {}
        }
    }

    if !format_ok {
        return Err(Error::Format("PLY header missing format line".into()));
    }
    let count = vertex_count.ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;

    let mut field_offsets = [0usize; 14];
    for (slot, name) in REQUIRED.iter().enumerate() {
        let off = offsets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, o)| *o)
            .ok_or_else(|| Error::Format(format!("PLY missing required property '{name}'")))?;
        let ty = &type_by_name.iter().find(|(n, _)| n == name).unwrap().1;
        if ty != "float" && ty != "float32" {
            return Err(Error::Format(format!(
                "PLY property '{name}' has type '{ty}', expected float"
            )));
        }
        field_offsets[slot] = off;
    }

    let data = &bytes[header_end..];
    let need = count
        .checked_mul(stride)
        .ok_or_else(|| Error::Format("PLY vertex count overflows".into()))?;
    if data.len() < need {
        return Err(Error::Format(format!(
            "PLY payload truncated: need {need} bytes for {count} vertices, have {}",
            data.len()
        )));
    }

    let read_f32 = |rec: &[u8], off: usize| -> f32 {
        f32::from_le_bytes(rec[off..off + 4].try_into().unwrap())
    };

    let mut prims = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &data[i * stride..(i + 1) * stride];
        let f = |slot: usize| read_f32(rec, field_offsets[slot]);
        prims.push(GaussianPrim {
            center: [f(0), f(1), f(2)],
            log_scale: [f(3), f(4), f(5)],
            rotation: [f(6), f(7), f(8), f(9)],
            opacity_logit: f(10),
            color: [f(11), f(12), f(13)],
        });
    }
    let scene = GaussianScene::new(prims, background);
    scene.validate()?;
    Ok(scene)
}

/// Offset of the first payload byte (just past `end_header\n`).
fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"end_header\n";
    let limit = bytes.len().min(64 * 1024);
    bytes[..limit]
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
        .ok_or_else(|| Error::Format("PLY header has no end_header line".into()))
}
