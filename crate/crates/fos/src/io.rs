//! Readers and writers for meshes (OFF, ASCII PLY), per-vertex fields,
//! momenta, score matrices and sparse matrix dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fos_core::kernels::GaussianKernel;
use fos_core::lddmm::InitialMomenta;
use fos_core::mesh::{TriangleMesh, Vec3};
use fos_core::sparse::TripletMatrix;
use nalgebra::DMatrix;

use crate::error::{CliError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CliError {
    CliError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Non-empty lines with their 1-based numbers; `#` starts a comment.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn numbers<T: std::str::FromStr>(path: &Path, line: usize, text: &str) -> Result<Vec<T>> {
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(path, line, format!("cannot parse `{t}`"))))
        .collect()
}

fn face_from(path: &Path, line: usize, values: &[usize]) -> Result<[usize; 3]> {
    match values {
        [3, a, b, c, ..] => Ok([*a, *b, *c]),
        [k, ..] => Err(parse_err(path, line, format!("only triangles are supported, found a {k}-gon"))),
        [] => Err(parse_err(path, line, "empty face record")),
    }
}

pub fn parse_off(path: &Path, text: &str) -> Result<TriangleMesh> {
    let mut lines = content_lines(text);
    let (ln, head) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let rest = head.strip_prefix("OFF").ok_or_else(|| parse_err(path, ln, "missing OFF header"))?.trim();
    let (ln, counts) = if rest.is_empty() { lines.next().ok_or_else(|| parse_err(path, ln, "missing counts"))? } else { (ln, rest) };
    let counts: Vec<usize> = numbers(path, ln, counts)?;
    if counts.len() < 2 {
        return Err(parse_err(path, ln, "expected vertex and face counts"));
    }
    let mut last = ln;
    let mut vertices = Vec::with_capacity(counts[0]);
    for _ in 0..counts[0] {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(path, last, "truncated vertex list"))?;
        let v: Vec<f64> = numbers(path, ln, l)?;
        if v.len() < 3 {
            return Err(parse_err(path, ln, "vertex needs three coordinates"));
        }
        vertices.push(Vec3::new(v[0], v[1], v[2]));
        last = ln;
    }
    let mut faces = Vec::with_capacity(counts[1]);
    for _ in 0..counts[1] {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(path, last, "truncated face list"))?;
        faces.push(face_from(path, ln, &numbers(path, ln, l)?)?);
        last = ln;
    }
    Ok(TriangleMesh::new(vertices, faces)?)
}

pub fn parse_ply(path: &Path, text: &str) -> Result<TriangleMesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    if lines.next().map(|(_, l)| l) != Some("ply") {
        return Err(parse_err(path, 1, "missing ply magic"));
    }
    let (mut nv, mut nf) = (None, None);
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = "";
    let mut end = 0;
    for (ln, l) in lines.by_ref() {
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(parse_err(path, ln, format!("unsupported PLY format `{fmt}`"))),
            ["format", ..] | ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| parse_err(path, ln, "bad element count"))?;
                current = if *name == "vertex" {
                    nv = Some(count);
                    "vertex"
                } else if *name == "face" {
                    nf = Some(count);
                    "face"
                } else if count == 0 {
                    "other"
                } else {
                    return Err(parse_err(path, ln, format!("unsupported element `{name}`")));
                };
            }
            ["property", .., name] if current == "vertex" => vertex_props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                end = ln;
                break;
            }
            _ => return Err(parse_err(path, ln, format!("unexpected header line `{l}`"))),
        }
    }
    if end == 0 {
        return Err(parse_err(path, 1, "missing end_header"));
    }
    let nv = nv.ok_or_else(|| parse_err(path, end, "no vertex element"))?;
    let nf = nf.unwrap_or(0);
    let pos = |name: &str| vertex_props.iter().position(|p| p == name).ok_or_else(|| parse_err(path, end, format!("missing vertex property `{name}`")));
    let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);
    let mut last = end;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(path, last, "truncated vertex list"))?;
        let v: Vec<f64> = numbers(path, ln, l)?;
        if v.len() < vertex_props.len() {
            return Err(parse_err(path, ln, "vertex record is too short"));
        }
        vertices.push(Vec3::new(v[ix], v[iy], v[iz]));
        last = ln;
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(path, last, "truncated face list"))?;
        faces.push(face_from(path, ln, &numbers(path, ln, l)?)?);
        last = ln;
    }
    Ok(TriangleMesh::new(vertices, faces)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("off") => Ok(Self::Off),
            Some("ply") => Ok(Self::Ply),
            _ => Err(CliError::Validation(format!("{}: mesh files must end in .off or .ply", path.display()))),
        }
    }
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let text = read_text(path)?;
    match MeshFormat::from_path(path)? {
        MeshFormat::Off => parse_off(path, &text),
        MeshFormat::Ply => parse_ply(path, &text),
    }
}

pub fn format_off(mesh: &TriangleMesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertex_count(), mesh.face_count());
    for v in mesh.vertices() {
        writeln!(s, "{:.16e} {:.16e} {:.16e}", v.x, v.y, v.z).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}

pub fn format_ply(mesh: &TriangleMesh) -> String {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", mesh.vertex_count()).unwrap();
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    writeln!(s, "element face {}", mesh.face_count()).unwrap();
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in mesh.vertices() {
        writeln!(s, "{:.16e} {:.16e} {:.16e}", v.x, v.y, v.z).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}

pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let text = match MeshFormat::from_path(path)? {
        MeshFormat::Off => format_off(mesh),
        MeshFormat::Ply => format_ply(mesh),
    };
    write_text(path, &text)
}

fn csv_rows<'a>(path: &'a Path, text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, h)) if h.replace(' ', "") == header => Ok(lines),
        Some((ln, h)) => Err(parse_err(path, ln, format!("expected header `{header}`, found `{h}`"))),
        None => Err(parse_err(path, 1, "empty file")),
    }
}

fn csv_numbers(path: &Path, line: usize, row: &str, width: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = row
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| parse_err(path, line, format!("cannot parse `{}`", t.trim()))))
        .collect::<Result<_>>()?;
    if v.len() != width {
        return Err(parse_err(path, line, format!("expected {width} columns, found {}", v.len())));
    }
    Ok(v)
}

/// Per-vertex values from a `vertex_id,value` CSV; rows may come in any
/// order but every id in `0..n` must appear exactly once.
pub fn read_field(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    let mut values: Vec<Option<f64>> = Vec::new();
    for (ln, row) in csv_rows(path, &text, "vertex_id,value")? {
        let v = csv_numbers(path, ln, row, 2)?;
        if v[0] < 0.0 || v[0].fract() != 0.0 {
            return Err(parse_err(path, ln, "vertex id must be a non-negative integer"));
        }
        if !v[1].is_finite() {
            return Err(parse_err(path, ln, "value is not finite"));
        }
        let id = v[0] as usize;
        if id >= values.len() {
            values.resize(id + 1, None);
        }
        if values[id].replace(v[1]).is_some() {
            return Err(parse_err(path, ln, format!("duplicate vertex id {id}")));
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| CliError::Validation(format!("{}: vertex id {i} is missing", path.display()))))
        .collect()
}

pub fn write_field(path: &Path, values: &[f64]) -> Result<()> {
    let mut s = String::from("vertex_id,value\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(s, "{i},{v:.16e}").unwrap();
    }
    write_text(path, &s)
}

/// Sidecar holding the kernel of a momenta CSV: `m.csv` → `m.kernel.json`.
pub fn kernel_sidecar(path: &Path) -> PathBuf {
    path.with_extension("kernel.json")
}

pub fn write_momenta(path: &Path, m: &InitialMomenta) -> Result<()> {
    let mut s = String::from("k,cx,cy,cz,ax,ay,az\n");
    for (k, (c, a)) in m.control_points.iter().zip(&m.momenta).enumerate() {
        writeln!(s, "{k},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", c.x, c.y, c.z, a.x, a.y, a.z).unwrap();
    }
    write_text(path, &s)?;
    write_text(&kernel_sidecar(path), &serde_json::to_string_pretty(&m.kernel)?)
}

pub fn read_momenta(path: &Path) -> Result<InitialMomenta> {
    let text = read_text(path)?;
    let (mut points, mut momenta) = (Vec::new(), Vec::new());
    for (ln, row) in csv_rows(path, &text, "k,cx,cy,cz,ax,ay,az")? {
        let v = csv_numbers(path, ln, row, 7)?;
        if v[0] != points.len() as f64 {
            return Err(parse_err(path, ln, format!("expected row index {}", points.len())));
        }
        points.push(Vec3::new(v[1], v[2], v[3]));
        momenta.push(Vec3::new(v[4], v[5], v[6]));
    }
    let side = kernel_sidecar(path);
    let kernel: GaussianKernel = serde_json::from_str(&read_text(&side)?).map_err(|e| parse_err(&side, e.line(), e.to_string()))?;
    Ok(InitialMomenta::new(points, momenta, kernel)?)
}

pub fn write_scores(path: &Path, scores: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (1..=scores.ncols()).map(|j| format!("pc{j}")).collect();
    let mut s = header.join(",") + "\n";
    for row in scores.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_scores(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_text(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let k = first.split(',').count();
    let header: Vec<String> = (1..=k).map(|j| format!("pc{j}")).collect();
    let rows: Vec<Vec<f64>> = csv_rows(path, &text, &header.join(","))?.map(|(ln, r)| csv_numbers(path, ln, r, k)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]))
}

/// Coordinate dump, one `i j value` line per stored entry.
pub fn write_triplets(path: &Path, m: &TripletMatrix) -> Result<()> {
    let mut s = String::new();
    for &(i, j, v) in m.entries() {
        writeln!(s, "{i} {j} {v:.16e}").unwrap();
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn off_with_header_counts_and_comments() {
        let text = "OFF 3 1 0\n# a comment\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let m = parse_off(Path::new("t.off"), text).unwrap();
        assert_eq!(m.face_count(), 1);
        assert_eq!(m.boundary_vertices(), vec![0, 1, 2]);
    }

    #[test]
    fn malformed_inputs_are_rejected_with_line_numbers() {
        let p = Path::new("bad.off");
        match parse_off(p, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1\n3 0 1 2\n") {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_off(p, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n4 0 1 2 0\n"), Err(CliError::Parse { .. })));
        assert!(matches!(parse_off(p, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"), Err(CliError::Core(_))));
        assert!(matches!(parse_ply(p, "ply\nformat binary_little_endian 1.0\nend_header\n"), Err(CliError::Parse { .. })));
    }

    #[test]
    fn ply_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9 0 0 0\n9 1 0 0\n9 0 1 0\n3 0 1 2\n";
        let m = parse_ply(Path::new("t.ply"), text).unwrap();
        assert_eq!(m.vertices()[1], Vec3::new(1.0, 0.0, 0.0));
        assert!((m.total_area() - 0.5).abs() < 1e-15);
    }
}
