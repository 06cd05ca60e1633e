//! Mesh, landmark and atomic file output.
//!
//! OBJ input understands `v x y z` and triangular `f i j k` (1-based) lines;
//! every other line is ignored. PLY is ascii 1.0 with a vertex element
//! carrying `x`, `y`, `z` and optionally `quality`, and a face element with a
//! `uchar`-counted index list.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use gpdssm_core::mesh::Landmarks;
use gpdssm_core::{TriMesh, Vec3};

use crate::error::{AppError, Result};

/// A loaded mesh and the number of degenerate faces dropped while loading.
#[derive(Debug, Clone)]
pub struct LoadedMesh {
    pub mesh: TriMesh,
    pub dropped_faces: usize,
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

pub fn load_mesh(path: &Path) -> Result<LoadedMesh> {
    let text = read_text(path)?;
    let ext = extension(path);
    let (vertices, faces, scalar) = match ext.as_str() {
        "obj" => {
            let (v, f) = parse_obj(&text, path)?;
            (v, f, None)
        }
        "ply" => parse_ply(&text, path)?,
        _ => return Err(AppError::validation(format!("{}: unsupported mesh extension", path.display()))),
    };
    let (mesh, dropped) = build(vertices, faces, path)?;
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} degenerate faces", path.display());
    }
    let mesh = match scalar {
        Some(s) => mesh.with_scalar(s)?,
        None => mesh,
    };
    Ok(LoadedMesh { mesh, dropped_faces: dropped })
}

fn build(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, path: &Path) -> Result<(TriMesh, usize)> {
    TriMesh::from_raw_lenient(vertices, faces).map_err(|e| match e {
        gpdssm_core::Error::EmptyInput(_) | gpdssm_core::Error::InvalidMesh(_) => {
            AppError::validation(format!("{}: {e}", path.display()))
        }
        other => other.into(),
    })
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn parse_f64(tok: Option<&str>, path: &Path, line: usize, what: &str) -> Result<f64> {
    let tok = tok.ok_or_else(|| AppError::format(path, line, format!("missing {what}")))?;
    let v: f64 = tok
        .parse()
        .map_err(|_| AppError::format(path, line, format!("invalid {what} `{tok}`")))?;
    if !v.is_finite() {
        return Err(AppError::format(path, line, format!("non-finite {what}")));
    }
    Ok(v)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(toks.next(), path, line, "x coordinate")?;
                let y = parse_f64(toks.next(), path, line, "y coordinate")?;
                let z = parse_f64(toks.next(), path, line, "z coordinate")?;
                vertices.push(Vec3::new(x, y, z));
            }
            Some("f") => {
                let idx: Vec<&str> = toks.collect();
                if idx.len() != 3 {
                    return Err(AppError::format(path, line, format!("expected a triangle, got {} indices", idx.len())));
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(&idx) {
                    let head = tok.split('/').next().unwrap_or("");
                    let k: usize = head
                        .parse()
                        .map_err(|_| AppError::format(path, line, format!("invalid face index `{tok}`")))?;
                    if k == 0 || k > vertices.len() {
                        return Err(AppError::format(path, line, format!("face index {k} out of range")));
                    }
                    *slot = k - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
    list: bool,
}

type PlyParts = (Vec<Vec3>, Vec<[usize; 3]>, Option<Vec<f64>>);

pub fn parse_ply(text: &str, path: &Path) -> Result<PlyParts> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(AppError::format(path, 1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (line, l) = lines.next().ok_or_else(|| AppError::format(path, 0, "unterminated header"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", ..] => return Err(AppError::format(path, line, "only `format ascii 1.0` is supported")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| AppError::format(path, line, format!("invalid element count `{count}`")))?;
                elements.push(PlyElement { name: name.to_string(), count, props: Vec::new(), list: false });
            }
            ["property", "list", _, _, name] => {
                let el = elements.last_mut().ok_or_else(|| AppError::format(path, line, "property before element"))?;
                el.list = true;
                el.props.push(name.to_string());
            }
            ["property", _, name] => {
                let el = elements.last_mut().ok_or_else(|| AppError::format(path, line, "property before element"))?;
                el.props.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(AppError::format(path, line, format!("unrecognised header line `{l}`"))),
        }
    }
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut scalar = None;
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let pos = |n: &str| el.props.iter().position(|p| p == n);
                let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(AppError::format(path, 0, "vertex element lacks x, y, z")),
                };
                let iq = pos("quality");
                let mut q = Vec::new();
                for _ in 0..el.count {
                    let (line, l) = lines.next().ok_or_else(|| AppError::format(path, 0, "truncated vertex list"))?;
                    let toks: Vec<&str> = l.split_whitespace().collect();
                    if toks.len() != el.props.len() {
                        return Err(AppError::format(path, line, "wrong number of vertex properties"));
                    }
                    let get = |i: usize, what: &str| parse_f64(Some(toks[i]), path, line, what);
                    vertices.push(Vec3::new(get(ix, "x")?, get(iy, "y")?, get(iz, "z")?));
                    if let Some(i) = iq {
                        q.push(get(i, "quality")?);
                    }
                }
                if iq.is_some() {
                    scalar = Some(q);
                }
            }
            "face" if el.list => {
                for _ in 0..el.count {
                    let (line, l) = lines.next().ok_or_else(|| AppError::format(path, 0, "truncated face list"))?;
                    let toks: Vec<usize> = l
                        .split_whitespace()
                        .map(|t| t.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| AppError::format(path, line, "invalid face entry"))?;
                    if toks.len() != 4 || toks[0] != 3 {
                        return Err(AppError::format(path, line, "only triangular faces are supported"));
                    }
                    if toks[1..].iter().any(|&k| k >= vertices.len()) {
                        return Err(AppError::format(path, line, "face index out of range"));
                    }
                    faces.push([toks[1], toks[2], toks[3]]);
                }
            }
            _ => {
                for _ in 0..el.count {
                    lines.next().ok_or_else(|| AppError::format(path, 0, format!("truncated `{}` element", el.name)))?;
                }
            }
        }
    }
    Ok((vertices, faces, scalar))
}

pub fn obj_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Ascii PLY; the `quality` property is written only when `with_scalar` is
/// set and the mesh carries a scalar field.
pub fn ply_string(mesh: &TriMesh, with_scalar: bool) -> String {
    let scalar = if with_scalar { mesh.scalar() } else { None };
    let mut s = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.num_vertices());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if scalar.is_some() {
        s.push_str("property float quality\n");
    }
    let _ = writeln!(s, "element face {}", mesh.num_faces());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices().iter().enumerate() {
        match scalar {
            Some(q) => {
                let _ = writeln!(s, "{} {} {} {}", v.x, v.y, v.z, q[i]);
            }
            None => {
                let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
            }
        }
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

/// Mesh text for `path`, format chosen by extension.
pub fn mesh_string(mesh: &TriMesh, path: &Path, with_scalar: bool) -> Result<String> {
    match extension(path).as_str() {
        "ply" => Ok(ply_string(mesh, with_scalar)),
        "obj" if with_scalar => Err(AppError::validation("OBJ output cannot carry a scalar field; use .ply")),
        "obj" => Ok(obj_string(mesh)),
        _ => Err(AppError::validation(format!("{}: unsupported mesh extension", path.display()))),
    }
}

pub fn save_mesh(mesh: &TriMesh, path: &Path, with_scalar: bool) -> Result<()> {
    let mut out = Staged::default();
    out.write(path, mesh_string(mesh, path, with_scalar)?.as_bytes())?;
    out.commit()
}

pub fn load_landmarks(path: &Path) -> Result<Landmarks> {
    let text = read_text(path)?;
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut toks = l.split(',').map(str::trim);
        let x = parse_f64(toks.next(), path, i + 1, "x")?;
        let y = parse_f64(toks.next(), path, i + 1, "y")?;
        let z = parse_f64(toks.next(), path, i + 1, "z")?;
        if toks.next().is_some() {
            return Err(AppError::format(path, i + 1, "expected exactly x,y,z"));
        }
        points.push(Vec3::new(x, y, z));
    }
    Landmarks::new(points).map_err(|e| AppError::validation(format!("{}: {e}", path.display())))
}

pub fn landmarks_string(points: &[Vec3]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.x, p.y, p.z);
    }
    s
}

/// Output files written to temporaries beside their destinations and renamed
/// into place on [`Staged::commit`]. Dropping without committing deletes the
/// temporaries.
#[derive(Default)]
pub struct Staged {
    pending: Vec<(tempfile::TempPath, PathBuf)>,
}

impl Staged {
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        let mut tmp = tempfile::Builder::new()
            .prefix(".staged-")
            .tempfile_in(&dir)
            .map_err(|e| AppError::io(&dir, e))?;
        tmp.write_all(bytes).map_err(|e| AppError::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| AppError::io(path, e))?;
        self.pending.push((tmp.into_temp_path(), path.to_path_buf()));
        Ok(())
    }

    pub fn write_mesh(&mut self, mesh: &TriMesh, path: &Path, with_scalar: bool) -> Result<()> {
        self.write(path, mesh_string(mesh, path, with_scalar)?.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn commit(self) -> Result<()> {
        for (tmp, dst) in self.pending {
            tmp.persist(&dst).map_err(|e| AppError::io(&dst, e.error))?;
        }
        Ok(())
    }
}
