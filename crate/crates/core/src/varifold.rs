//! Unoriented varifold embedding of triangulated surfaces.
//!
//! A mesh is represented by its faces as weighted atoms (center, unit
//! normal, area). The inner product between two meshes is
//!
//! ```text
//! <a, b> = Σ_f Σ_g exp(-|c_f - c_g|² / σ²) (n_f · n_g)² A_f A_g
//! ```
//!
//! and the squared distance is `<a,a> - 2<a,b> + <b,b>`. The squared-cosine
//! orientation kernel makes the metric blind to face winding.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;


use crate::error::{Error, Result};
use crate::mesh::{face_geometry, face_geometry_of, TriMesh, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct VarifoldRepr {
    pub centers: Vec<Vec3>,
    pub unit_normals: Vec<Vec3>,
    pub areas: Vec<f64>,
}

impl VarifoldRepr {
    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarifoldKernel {
    /// Gaussian position bandwidth in mm.
    pub sigma_pos: f64,
}

impl VarifoldKernel {
    pub fn new(sigma_pos: f64) -> Result<Self> {
        if !(sigma_pos > 0.0) || !sigma_pos.is_finite() {
            return Err(Error::InvalidParam(alloc::format!("sigma_pos = {sigma_pos}")));
        }
        Ok(VarifoldKernel { sigma_pos })
    }

    /// Default bandwidth: a quarter of the template's bounding-box diagonal.
    pub fn for_template(template: &TriMesh) -> Self {
        VarifoldKernel {
            sigma_pos: 0.25 * template.bbox_diagonal(),
        }
    }
}

pub fn embed(mesh: &TriMesh) -> VarifoldRepr {
    let g = face_geometry(mesh);
    VarifoldRepr {
        unit_normals: g.normals.iter().zip(&g.areas).map(|(n, a)| n / *a).collect(),
        centers: g.centers,
        areas: g.areas,
    }
}

/// Varifold inner product `<a, b>`.
pub fn inner(a: &VarifoldRepr, b: &VarifoldRepr, k: &VarifoldKernel) -> f64 {
    let inv_s2 = 1.0 / (k.sigma_pos * k.sigma_pos);
    let mut total = 0.0;
    for f in 0..a.len() {
        let (cf, nf, af) = (a.centers[f], a.unit_normals[f], a.areas[f]);
        let mut row = 0.0;
        for g in 0..b.len() {
            let d2 = (cf - b.centers[g]).norm_squared();
            let cos = nf.dot(&b.unit_normals[g]);
            row += (-d2 * inv_s2).exp() * cos * cos * b.areas[g];
        }
        total += af * row;
    }
    total
}

pub fn sq_norm(a: &VarifoldRepr, k: &VarifoldKernel) -> f64 {
    inner(a, a, k)
}

pub fn varifold_sq_dist(a: &VarifoldRepr, b: &VarifoldRepr, k: &VarifoldKernel) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("varifold representation"));
    }
    let d = inner(a, a, k) - 2.0 * inner(a, b, k) + inner(b, b, k);
    Ok(d.max(0.0))
}

/// Squared varifold distance between `a_mesh` and `b` together with its
/// gradient with respect to every vertex of `a_mesh`.
pub fn varifold_sq_dist_grad(a_mesh: &TriMesh, b: &VarifoldRepr, k: &VarifoldKernel) -> Result<(f64, Vec<Vec3>)> {
    let b_norm = sq_norm(b, k);
    sq_dist_grad_vertices(a_mesh.vertices(), a_mesh.faces(), b, b_norm, k)
}

/// Same as [`varifold_sq_dist_grad`] on raw vertex positions, with `<b,b>`
/// supplied by the caller (it does not depend on the moving vertices).
pub(crate) fn sq_dist_grad_vertices(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    b: &VarifoldRepr,
    b_sq_norm: f64,
    k: &VarifoldKernel,
) -> Result<(f64, Vec<Vec3>)> {
    if faces.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("varifold representation"));
    }
    let g = face_geometry_of(vertices, faces);
    let nf = faces.len();
    let inv_s2 = 1.0 / (k.sigma_pos * k.sigma_pos);
    let mut g_center = vec![Vec3::zeros(); nf];
    let mut g_normal = vec![Vec3::zeros(); nf];
    let mut self_term = 0.0;
    let mut cross_term = 0.0;

    // Pair weight in terms of unnormalised normals N (|N| = area):
    //   φ(N_f, N_g) = (N_f·N_g)² / (|N_f| |N_g|)
    //   ∂φ/∂N_f   = 2 (N_f·N_g) N_g / (|N_f||N_g|) − (N_f·N_g)² N_f / (|N_f|³ |N_g|)
    for f in 0..nf {
        let (cf, nfv, af) = (g.centers[f], g.normals[f], g.areas[f]);
        let mut gc = Vec3::zeros();
        let mut gn = Vec3::zeros();
        let mut acc = 0.0;
        for h in 0..nf {
            let dc = cf - g.centers[h];
            let kv = (-dc.norm_squared() * inv_s2).exp();
            let nh = g.normals[h];
            let dot = nfv.dot(&nh);
            let denom = af * g.areas[h];
            let phi = dot * dot / denom;
            acc += kv * phi;
            if h != f {
                gc += dc * (-2.0 * inv_s2 * kv * phi);
            }
            gn += (nh * (2.0 * dot / denom) - nfv * (dot * dot / (denom * af * af))) * kv;
        }
        self_term += acc;
        // symmetric double sum: every pair appears twice
        g_center[f] += gc * 2.0;
        g_normal[f] += gn * 2.0;

        let mut gc = Vec3::zeros();
        let mut gn = Vec3::zeros();
        let mut acc = 0.0;
        for h in 0..b.len() {
            let dc = cf - b.centers[h];
            let kv = (-dc.norm_squared() * inv_s2).exp();
            let nh = b.unit_normals[h] * b.areas[h];
            let dot = nfv.dot(&nh);
            let denom = af * b.areas[h];
            let phi = dot * dot / denom;
            acc += kv * phi;
            gc += dc * (-2.0 * inv_s2 * kv * phi);
            gn += (nh * (2.0 * dot / denom) - nfv * (dot * dot / (denom * af * af))) * kv;
        }
        cross_term += acc;
        g_center[f] -= gc * 2.0;
        g_normal[f] -= gn * 2.0;
    }

    let mut grad = vec![Vec3::zeros(); vertices.len()];
    for (fi, f) in faces.iter().enumerate() {
        let gc = g_center[fi] / 3.0;
        for &v in f {
            grad[v] += gc;
        }
        // N = ½ (e1 × e2), e1 = v1 − v0, e2 = v2 − v0
        let e1 = vertices[f[1]] - vertices[f[0]];
        let e2 = vertices[f[2]] - vertices[f[0]];
        let gn = g_normal[fi] * 0.5;
        let ge1 = e2.cross(&gn);
        let ge2 = gn.cross(&e1);
        grad[f[1]] += ge1;
        grad[f[2]] += ge2;
        grad[f[0]] -= ge1 + ge2;
    }
    let value = self_term - 2.0 * cross_term + b_sq_norm;
    Ok((value, grad))
}
