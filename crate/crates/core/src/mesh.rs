//! Triangulated surfaces and the geometric primitives built on them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Faces with an area at or below this value (mm²) are considered degenerate.
pub const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    scalar: Option<Vec<f64>>,
}

impl TriMesh {
    /// Builds a mesh, rejecting out-of-range indices and degenerate faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let (mesh, dropped) = Self::from_raw_lenient(vertices, faces)?;
        if dropped > 0 {
            return Err(Error::InvalidMesh(format!("{dropped} degenerate faces")));
        }
        Ok(mesh)
    }

    /// Builds a mesh, silently dropping faces with repeated vertices or
    /// (near) zero area. Returns the mesh and the number of dropped faces.
    pub fn from_raw_lenient(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<(Self, usize)> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(Error::EmptyInput("mesh"));
        }
        let n = vertices.len();
        let mut kept = Vec::with_capacity(faces.len());
        let mut dropped = 0;
        for (fi, f) in faces.into_iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex out of range ({n} vertices)"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] || triangle_area(&vertices, f) <= MIN_FACE_AREA {
                dropped += 1;
                continue;
            }
            kept.push(f);
        }
        if kept.is_empty() {
            return Err(Error::EmptyInput("mesh has no valid faces"));
        }
        Ok((
            TriMesh {
                vertices,
                faces: kept,
                scalar: None,
            },
            dropped,
        ))
    }

    pub fn with_scalar(mut self, scalar: Vec<f64>) -> Result<Self> {
        if scalar.len() != self.vertices.len() {
            return Err(Error::InvalidParam(format!(
                "scalar field has {} values for {} vertices",
                scalar.len(),
                self.vertices.len()
            )));
        }
        self.scalar = Some(scalar);
        Ok(self)
    }

    /// Same connectivity, new vertex positions. Face areas are not
    /// re-validated: flows of bounded momenta keep faces non-degenerate.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> TriMesh {
        assert_eq!(vertices.len(), self.vertices.len(), "vertex count mismatch");
        TriMesh {
            vertices,
            faces: self.faces.clone(),
            scalar: None,
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn scalar(&self) -> Option<&[f64]> {
        self.scalar.as_deref()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> TriMesh {
        self.with_vertices(self.vertices.iter().map(f).collect())
    }

    /// Reverses the winding of every face.
    pub fn flipped(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
            scalar: self.scalar.clone(),
        }
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.vertices.iter().fold(Vec3::zeros(), |acc, v| acc + v);
        sum / self.vertices.len() as f64
    }

    /// Sub-mesh on the faces selected by `keep`, with vertices re-indexed.
    pub fn submesh(&self, face_ids: &[usize]) -> Result<TriMesh> {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut faces = Vec::with_capacity(face_ids.len());
        let mut scalar = self.scalar.as_ref().map(|_| Vec::new());
        for &fi in face_ids {
            let mut nf = [0usize; 3];
            for (k, &vi) in self.faces[fi].iter().enumerate() {
                if remap[vi] == usize::MAX {
                    remap[vi] = vertices.len();
                    vertices.push(self.vertices[vi]);
                    if let (Some(out), Some(src)) = (scalar.as_mut(), self.scalar.as_ref()) {
                        out.push(src[vi]);
                    }
                }
                nf[k] = remap[vi];
            }
            faces.push(nf);
        }
        if faces.is_empty() {
            return Err(Error::EmptyInput("sub-mesh"));
        }
        Ok(TriMesh {
            vertices,
            faces,
            scalar,
        })
    }
}

pub(crate) fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

fn triangle_area(vertices: &[Vec3], f: [usize; 3]) -> f64 {
    let e1 = vertices[f[1]] - vertices[f[0]];
    let e2 = vertices[f[2]] - vertices[f[0]];
    0.5 * e1.cross(&e2).norm()
}

/// Landmark points, e.g. annotated on the acetabular rim.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    points: Vec<Vec3>,
}

impl Landmarks {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidParam(format!(
                "need at least 3 landmarks, got {}",
                points.len()
            )));
        }
        Ok(Landmarks { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }
}

/// Per-face quantities shared by the varifold embedding.
#[derive(Debug, Clone)]
pub struct FaceGeometry {
    pub centers: Vec<Vec3>,
    /// Half the cross product of the two edge vectors; its norm is the area.
    pub normals: Vec<Vec3>,
    pub areas: Vec<f64>,
}

pub fn face_geometry(mesh: &TriMesh) -> FaceGeometry {
    face_geometry_of(mesh.vertices(), mesh.faces())
}

pub(crate) fn face_geometry_of(vertices: &[Vec3], faces: &[[usize; 3]]) -> FaceGeometry {
    let mut centers = Vec::with_capacity(faces.len());
    let mut normals = Vec::with_capacity(faces.len());
    let mut areas = Vec::with_capacity(faces.len());
    for f in faces {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        centers.push((a + b + c) / 3.0);
        let n = 0.5 * (b - a).cross(&(c - a));
        areas.push(n.norm());
        normals.push(n);
    }
    FaceGeometry {
        centers,
        normals,
        areas,
    }
}

/// Least-squares plane through the landmarks as `(unit normal, offset)`
/// with `normal · x = offset` on the plane. The normal is oriented towards
/// +z (ties broken towards +x).
pub fn fit_plane(landmarks: &Landmarks) -> Result<(Vec3, f64)> {
    fit_plane_points(landmarks.points())
}

pub(crate) fn fit_plane_points(points: &[Vec3]) -> Result<(Vec3, f64)> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, mid, large) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if large <= 0.0 || mid <= 1e-12 * large {
        return Err(Error::RankDeficient("landmarks are collinear"));
    }
    let _ = small;
    let mut normal: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    normal /= normal.norm();
    let flip = if normal.z.abs() > 1e-12 {
        normal.z < 0.0
    } else if normal.x.abs() > 1e-12 {
        normal.x < 0.0
    } else {
        normal.y < 0.0
    };
    if flip {
        normal = -normal;
    }
    Ok((normal, normal.dot(&centroid)))
}

/// Face-adjacency components (faces sharing an edge), largest first.
pub fn connected_components(mesh: &TriMesh) -> Vec<TriMesh> {
    component_face_sets(mesh)
        .iter()
        .map(|ids| mesh.submesh(ids).expect("component is non-empty"))
        .collect()
}

pub(crate) fn component_face_sets(mesh: &TriMesh) -> Vec<Vec<usize>> {
    let nf = mesh.num_faces();
    let mut parent: Vec<usize> = (0..nf).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut edge_owner: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = if a < b { (a, b) } else { (b, a) };
            if let Some(&other) = edge_owner.get(&key) {
                let (ra, rb) = (find(&mut parent, fi), find(&mut parent, other));
                if ra != rb {
                    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                    parent[hi] = lo;
                }
            } else {
                edge_owner.insert(key, fi);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for fi in 0..nf {
        let r = find(&mut parent, fi);
        groups.entry(r).or_default().push(fi);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    // stable: ties keep the order of their first face
    out.sort_by(|a, b| b.len().cmp(&a.len()));
    out
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use proptest::prelude::*;

    fn unit_triangle() -> TriMesh {
        TriMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    pub(crate) fn tetrahedron() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
        )
        .unwrap()
    }

    #[test]
    fn right_triangle_geometry() {
        let g = face_geometry(&unit_triangle());
        assert!((g.areas[0] - 0.5).abs() < 1e-15);
        let n = g.normals[0] / g.areas[0];
        assert!((n.z.abs() - 1.0).abs() < 1e-15);
        assert!(n.x.abs() < 1e-15 && n.y.abs() < 1e-15);
    }

    #[test]
    fn equilateral_area() {
        let s3 = 3f64.sqrt();
        let m = TriMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, s3, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!((face_geometry(&m).areas[0] - s3).abs() < 1e-14);
    }

    #[test]
    fn translation_equivariance() {
        let m = tetrahedron();
        let t = Vec3::new(3.0, -2.0, 7.5);
        let g0 = face_geometry(&m);
        let g1 = face_geometry(&m.map_vertices(|v| v + t));
        for i in 0..m.num_faces() {
            assert!((g0.areas[i] - g1.areas[i]).abs() < 1e-12);
            assert!((g0.normals[i] - g1.normals[i]).norm() < 1e-12);
            assert!((g0.centers[i] + t - g1.centers[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn repeated_vertex_face_dropped() {
        let (m, dropped) = TriMesh::from_raw_lenient(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2], [0, 0, 1]],
        )
        .unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(m.num_faces(), 1);
        assert!(TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y()],
            vec![[0, 0, 1], [0, 1, 2]]
        )
        .is_err());
    }

    #[test]
    fn out_of_range_and_empty_rejected() {
        assert!(matches!(
            TriMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 3]]),
            Err(Error::InvalidMesh(_))
        ));
        assert!(matches!(
            TriMesh::new(vec![], vec![]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn plane_through_z0() {
        let lm = Landmarks::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ])
        .unwrap();
        let (n, d) = fit_plane(&lm).unwrap();
        assert!((n - Vec3::z()).norm() < 1e-12);
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn tilted_plane() {
        // z = 2 + x + y  =>  normal ∝ (-1, -1, 1)
        let pts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (2.0, 3.0), (-1.0, 0.5)]
            .iter()
            .map(|&(x, y)| Vec3::new(x, y, 2.0 + x + y))
            .collect();
        let (n, d) = fit_plane(&Landmarks::new(pts).unwrap()).unwrap();
        let expect = Vec3::new(-1.0, -1.0, 1.0) / 3f64.sqrt();
        assert!((n - expect).norm() < 1e-10);
        assert!((d - 2.0 / 3f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn symmetric_noise_keeps_normal() {
        let delta = 0.05;
        let lm = Landmarks::new(vec![
            Vec3::new(-1.0, -1.0, delta),
            Vec3::new(1.0, -1.0, -delta),
            Vec3::new(1.0, 1.0, delta),
            Vec3::new(-1.0, 1.0, -delta),
            Vec3::new(-1.0, -1.0, -delta),
            Vec3::new(1.0, -1.0, delta),
            Vec3::new(1.0, 1.0, -delta),
            Vec3::new(-1.0, 1.0, delta),
        ])
        .unwrap();
        let (n, _) = fit_plane(&lm).unwrap();
        assert!((n - Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn collinear_landmarks_rejected() {
        let lm = Landmarks::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(2.0, 2.0, 2.0),
        ])
        .unwrap();
        assert!(matches!(fit_plane(&lm), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn components_of_tetrahedron_and_disjoint_triangles() {
        assert_eq!(connected_components(&tetrahedron()).len(), 1);
        let m = TriMesh::new(
            vec![
                Vec3::zeros(),
                Vec3::x(),
                Vec3::y(),
                Vec3::new(5.0, 0.0, 0.0),
                Vec3::new(6.0, 0.0, 0.0),
                Vec3::new(5.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 2);
        assert!(cc.iter().all(|c| c.num_faces() == 1));
    }

    fn random_soup(seed: u64, nv: usize, nf: usize) -> TriMesh {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let verts: Vec<Vec3> = (0..nv)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let faces: Vec<[usize; 3]> = (0..nf)
            .map(|_| [rng.random_range(0..nv), rng.random_range(0..nv), rng.random_range(0..nv)])
            .collect();
        TriMesh::from_raw_lenient(verts, faces).unwrap().0
    }

    proptest! {
        #[test]
        fn components_partition_faces(seed in 0u64..1000) {
            let m = random_soup(seed, 40, 30);
            let sets = component_face_sets(&m);
            let total: usize = sets.iter().map(|s| s.len()).sum();
            prop_assert_eq!(total, m.num_faces());
            let mut seen = vec![false; m.num_faces()];
            for s in &sets {
                for &f in s {
                    prop_assert!(!seen[f]);
                    seen[f] = true;
                }
            }
            for w in sets.windows(2) {
                prop_assert!(w[0].len() >= w[1].len());
            }
        }

        #[test]
        fn areas_rigid_invariant(seed in 0u64..1000, ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, ang in 0.0f64..6.0) {
            let m = random_soup(seed, 20, 15);
            let axis = nalgebra::Unit::new_normalize(Vec3::new(ax, ay, az + 2.0));
            let rot = nalgebra::Rotation3::from_axis_angle(&axis, ang);
            let t = Vec3::new(ax * 10.0, ay, az);
            let g0 = face_geometry(&m);
            let g1 = face_geometry(&m.map_vertices(|v| rot * v + t));
            for i in 0..m.num_faces() {
                prop_assert!((g0.areas[i] - g1.areas[i]).abs() <= 1e-9 * g0.areas[i].max(1e-12));
            }
        }

        #[test]
        fn plane_fit_beats_random_planes(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..12)
                .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)))
                .collect();
            let (n, d) = fit_plane_points(&pts).unwrap();
            let centroid = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
            let resid = |n: &Vec3, d: f64| pts.iter().map(|p| (n.dot(p) - d).powi(2)).sum::<f64>();
            let best = resid(&n, d);
            for _ in 0..100 {
                let mut alt = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if alt.norm() < 1e-6 { continue; }
                alt /= alt.norm();
                prop_assert!(best <= resid(&alt, alt.dot(&centroid)) + 1e-9);
            }
        }
    }
}
