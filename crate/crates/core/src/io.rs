//! Text formats: ASCII STL meshes, XYZ point lists, and timestamped scan frames.
//!
//! XYZ: one point per line, three whitespace- or comma-separated numbers in
//! metres. Blank lines and lines starting with `#` are ignored, except that a
//! scan frame must begin with a `# t=<seconds>` header.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::icp::Triangle;

/// A scan frame: timestamp plus sensor-frame points.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanFile {
    pub t: f64,
    pub points: Vec<Vector3<f64>>,
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_floats<const N: usize>(path: &Path, line_no: usize, fields: &[&str]) -> Result<[f64; N]> {
    if fields.len() != N {
        return Err(Error::parse(
            path,
            line_no,
            format!("expected {N} numbers, found {}", fields.len()),
        ));
    }
    let mut out = [0.0; N];
    for (slot, f) in out.iter_mut().zip(fields) {
        let v: f64 = f
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("not a number: {f:?}")))?;
        if !v.is_finite() {
            return Err(Error::parse(path, line_no, format!("non-finite value {f:?}")));
        }
        *slot = v;
    }
    Ok(out)
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_xyz_lines<'a>(
    path: &Path,
    lines: impl Iterator<Item = (usize, &'a str)>,
) -> Result<Vec<Vector3<f64>>> {
    let mut points = Vec::new();
    for (i, line) in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let [x, y, z] = parse_floats::<3>(path, i + 1, &split_fields(trimmed))?;
        points.push(Vector3::new(x, y, z));
    }
    Ok(points)
}

/// Parses XYZ text. `path` is only used in error messages.
pub fn parse_xyz(path: &Path, text: &str) -> Result<Vec<Vector3<f64>>> {
    parse_xyz_lines(path, text.lines().enumerate())
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vector3<f64>>> {
    parse_xyz(path, &read_to_string(path)?)
}

pub fn format_xyz(points: &[Vector3<f64>]) -> String {
    let mut out = String::with_capacity(points.len() * 48);
    for p in points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn write_xyz(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    write_string(path, &format_xyz(points))
}

pub fn parse_scan(path: &Path, text: &str) -> Result<ScanFile> {
    let mut lines = text.lines().enumerate();
    let t = loop {
        match lines.next() {
            None => return Err(Error::parse(path, 1, "missing `# t=<seconds>` header")),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => {
                let header = l.trim();
                let value = header
                    .strip_prefix('#')
                    .map(str::trim)
                    .and_then(|h| h.strip_prefix("t="))
                    .ok_or_else(|| Error::parse(path, i + 1, "missing `# t=<seconds>` header"))?;
                let [t] = parse_floats::<1>(path, i + 1, &[value.trim()])?;
                break t;
            }
        }
    };
    let points = parse_xyz_lines(path, lines)?;
    Ok(ScanFile { t, points })
}

pub fn read_scan(path: &Path) -> Result<ScanFile> {
    parse_scan(path, &read_to_string(path)?)
}

pub fn format_scan(scan: &ScanFile) -> String {
    format!("# t={}\n{}", scan.t, format_xyz(&scan.points))
}

pub fn write_scan(path: &Path, scan: &ScanFile) -> Result<()> {
    write_string(path, &format_scan(scan))
}

/// Parses an ASCII STL solid.
pub fn parse_stl(path: &Path, text: &str) -> Result<Vec<Triangle>> {
    let mut triangles = Vec::new();
    let mut normal: Option<Vector3<f64>> = None;
    let mut verts: Vec<Vector3<f64>> = Vec::with_capacity(3);
    let mut saw_solid = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let Some(&keyword) = fields.first() else {
            continue;
        };
        match keyword {
            "solid" => saw_solid = true,
            "endsolid" | "outer" | "endloop" => {}
            "facet" => {
                if fields.get(1) != Some(&"normal") {
                    return Err(Error::parse(path, line_no, "expected `facet normal nx ny nz`"));
                }
                let [x, y, z] = parse_floats::<3>(path, line_no, &fields[2..])?;
                normal = Some(Vector3::new(x, y, z));
                verts.clear();
            }
            "vertex" => {
                if normal.is_none() {
                    return Err(Error::parse(path, line_no, "vertex outside a facet"));
                }
                let [x, y, z] = parse_floats::<3>(path, line_no, &fields[1..])?;
                verts.push(Vector3::new(x, y, z));
            }
            "endfacet" => {
                let n = normal
                    .take()
                    .ok_or_else(|| Error::parse(path, line_no, "endfacet without facet"))?;
                if verts.len() != 3 {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("facet has {} vertices, expected 3", verts.len()),
                    ));
                }
                triangles.push(Triangle::new(n, [verts[0], verts[1], verts[2]]));
            }
            other => {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("unexpected keyword {other:?}"),
                ))
            }
        }
    }
    if !saw_solid {
        return Err(Error::parse(path, 1, "not an ASCII STL file (no `solid` line)"));
    }
    if normal.is_some() {
        return Err(Error::parse(path, text.lines().count(), "unterminated facet"));
    }
    Ok(triangles)
}

pub fn read_stl(path: &Path) -> Result<Vec<Triangle>> {
    parse_stl(path, &read_to_string(path)?)
}

pub fn format_stl(name: &str, triangles: &[Triangle]) -> String {
    let mut out = format!("solid {name}\n");
    for t in triangles {
        let n = t.normal;
        let _ = writeln!(out, "  facet normal {} {} {}", n.x, n.y, n.z);
        out.push_str("    outer loop\n");
        for v in &t.vertices {
            let _ = writeln!(out, "      vertex {} {} {}", v.x, v.y, v.z);
        }
        out.push_str("    endloop\n  endfacet\n");
    }
    let _ = writeln!(out, "endsolid {name}");
    out
}

/// True when the file looks like an ASCII STL (by extension or first keyword).
pub fn is_stl(path: &Path, text: &str) -> bool {
    let by_ext = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("stl"));
    by_ext
        || text
            .lines()
            .find(|l| !l.trim().is_empty())
            .is_some_and(|l| l.trim_start().starts_with("solid"))
}
