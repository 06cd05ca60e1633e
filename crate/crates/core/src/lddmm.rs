//! Control-point LDDMM with geodesic shooting, per-shape atlas fitting and
//! PCA on the fitted initial momenta.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::flow::{SpatialKernel, Template};
use crate::linalg::sorted_symmetric_eigen;
use crate::mesh::{TriMesh, Vec3};
use crate::ode::{rk4_backward, rk4_forward, PointSystem, Rk4Run, Stage};
use crate::optim::{Adam, AdamConfig};
use crate::varifold::{embed, sq_dist_grad_vertices, sq_norm, VarifoldKernel};

/// `H = ½ Σ_ij K(x_i, x_j) α_i·α_j`.
pub fn hamiltonian(points: &[Vec3], momenta: &[Vec3], k: &SpatialKernel) -> f64 {
    let mut h = 0.0;
    for (xi, ai) in points.iter().zip(momenta) {
        for (xj, aj) in points.iter().zip(momenta) {
            h += k.eval(xi, xj) * ai.dot(aj);
        }
    }
    0.5 * h
}

/// State layout: `n` positions, `n` momenta, then passive points.
struct Hamiltonian {
    n: usize,
    sigma: f64,
}

impl PointSystem for Hamiltonian {
    type Grad = ();

    fn rhs(&self, _step: usize, _stage: Stage, state: &[Vec3], out: &mut [Vec3]) {
        let n = self.n;
        let (x, rest) = state.split_at(n);
        let (p, y) = rest.split_at(n);
        let inv = 1.0 / (self.sigma * self.sigma);
        let c = 2.0 * inv;
        for i in 0..n {
            let mut dx = Vec3::zeros();
            let mut dp = Vec3::zeros();
            for j in 0..n {
                let d = x[i] - x[j];
                let kv = (-d.norm_squared() * inv).exp();
                dx += p[j] * kv;
                dp += d * (c * kv * p[i].dot(&p[j]));
            }
            out[i] = dx;
            out[n + i] = dp;
        }
        for (v, yv) in y.iter().enumerate() {
            let mut dy = Vec3::zeros();
            for j in 0..n {
                dy += p[j] * (-(yv - x[j]).norm_squared() * inv).exp();
            }
            out[2 * n + v] = dy;
        }
    }

    fn vjp(&self, _step: usize, _stage: Stage, state: &[Vec3], adj_out: &[Vec3], adj_state: &mut [Vec3], _grad: &mut ()) {
        let n = self.n;
        let (x, rest) = state.split_at(n);
        let (p, y) = rest.split_at(n);
        let inv = 1.0 / (self.sigma * self.sigma);
        let c = 2.0 * inv;
        for i in 0..n {
            let lx = adj_out[i];
            let b = adj_out[n + i];
            for j in 0..n {
                let d = x[i] - x[j];
                let kv = (-d.norm_squared() * inv).exp();
                // position equation
                adj_state[n + j] += lx * kv;
                let gx = d * (-c * kv * lx.dot(&p[j]));
                // momentum equation
                let bd = b.dot(&d);
                let w = p[i].dot(&p[j]);
                adj_state[n + i] += p[j] * (c * kv * bd);
                adj_state[n + j] += p[i] * (c * kv * bd);
                let gd = (b * kv - d * (c * kv * bd)) * (c * w);
                adj_state[i] += gx + gd;
                adj_state[j] -= gx + gd;
            }
        }
        for (v, yv) in y.iter().enumerate() {
            let ly = adj_out[2 * n + v];
            if ly == Vec3::zeros() {
                continue;
            }
            for j in 0..n {
                let d = yv - x[j];
                let kv = (-d.norm_squared() * inv).exp();
                adj_state[n + j] += ly * kv;
                let g = d * (-c * kv * ly.dot(&p[j]));
                adj_state[2 * n + v] += g;
                adj_state[j] -= g;
            }
        }
    }
}

/// Positions and momenta at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicTrajectory {
    pub positions: Vec<Vec<Vec3>>,
    pub momenta: Vec<Vec<Vec3>>,
}

impl GeodesicTrajectory {
    pub fn endpoint(&self) -> &[Vec3] {
        self.positions.last().expect("non-empty trajectory")
    }
}

fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

fn shoot_with(points: &[Vec3], alpha0: &[Vec3], extra: &[Vec3], k: &SpatialKernel, steps: usize) -> Result<Rk4Run> {
    if points.len() != alpha0.len() {
        return Err(Error::InvalidParam(format!("{} control points but {} momenta", points.len(), alpha0.len())));
    }
    if steps == 0 {
        return Err(Error::InvalidParam("need at least one integration step".into()));
    }
    let sys = Hamiltonian { n: points.len(), sigma: k.sigma_v };
    let mut init = points.to_vec();
    init.extend_from_slice(alpha0);
    init.extend_from_slice(extra);
    rk4_forward(&sys, &uniform_grid(steps), init)
}

pub fn geodesic_shoot(points: &[Vec3], alpha0: &[Vec3], k: &SpatialKernel, steps: usize) -> Result<GeodesicTrajectory> {
    let n = points.len();
    let run = shoot_with(points, alpha0, &[], k, steps)?;
    Ok(GeodesicTrajectory {
        positions: run.states.iter().map(|s| s[..n].to_vec()).collect(),
        momenta: run.states.iter().map(|s| s[n..2 * n].to_vec()).collect(),
    })
}

/// Template mesh carried along the geodesic from `alpha0`.
pub fn geodesic_deform(template: &Template, alpha0: &[Vec3], k: &SpatialKernel, steps: usize) -> Result<TriMesh> {
    let n = template.num_points();
    let run = shoot_with(template.points(), alpha0, template.mesh().vertices(), k, steps)?;
    Ok(template.mesh().with_vertices(run.last()[2 * n..].to_vec()))
}

/// Per-shape registration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlasConfig {
    /// λ as a multiple of β.
    pub lambda_rel: f64,
    pub lr: f64,
    pub iters: usize,
    pub steps: usize,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self { lambda_rel: 1e-3, lr: 0.1, iters: 150, steps: 10 }
    }
}

/// Fitted atlas: one initial momentum set per training shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasState {
    pub template: Template,
    pub spatial: SpatialKernel,
    pub varifold: VarifoldKernel,
    pub momenta: Vec<Vec<Vec3>>,
    pub beta: f64,
    pub lambda: f64,
    pub steps: usize,
}

/// Objective `β d²(φ(T), S) + λ H(α₀)` and its gradient in `α₀`.
fn registration_objective(
    template: &Template,
    spatial: &SpatialKernel,
    varifold: &VarifoldKernel,
    target: &crate::varifold::VarifoldRepr,
    target_norm: f64,
    beta: f64,
    lambda: f64,
    steps: usize,
    alpha0: &[Vec3],
) -> Result<(f64, Vec<Vec3>)> {
    let n = template.num_points();
    let run = shoot_with(template.points(), alpha0, template.mesh().vertices(), spatial, steps)?;
    let (d2, gv) = sq_dist_grad_vertices(&run.last()[2 * n..], template.mesh().faces(), target, target_norm, varifold)?;
    let mut adj = vec![Vec3::zeros(); 2 * n];
    adj.extend(gv.iter().map(|g| g * beta));
    let sys = Hamiltonian { n, sigma: spatial.sigma_v };
    let back = rk4_backward(&sys, &uniform_grid(steps), &run, adj, &mut ());
    let pts = template.points();
    let mut grad: Vec<Vec3> = back[n..2 * n].to_vec();
    for i in 0..n {
        let mut ka = Vec3::zeros();
        for j in 0..n {
            ka += alpha0[j] * spatial.eval(&pts[i], &pts[j]);
        }
        grad[i] += ka * lambda;
    }
    Ok((beta * d2 + lambda * hamiltonian(pts, alpha0, spatial), grad))
}

/// Registers the template to one shape starting from zero momenta. Returns
/// the fitted momenta and the objective at every iteration.
#[allow(clippy::too_many_arguments)]
pub fn fit_momenta(
    template: &Template,
    spatial: &SpatialKernel,
    varifold: &VarifoldKernel,
    mesh: &TriMesh,
    beta: f64,
    lambda: f64,
    cfg: &AtlasConfig,
) -> Result<(Vec<Vec3>, Vec<f64>)> {
    let n = template.num_points();
    let target = embed(mesh);
    let target_norm = sq_norm(&target, varifold);
    let mut flat = vec![0.0; 3 * n];
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), 3 * n);
    let mut trace = Vec::with_capacity(cfg.iters);
    let unflat = |f: &[f64]| -> Vec<Vec3> { (0..n).map(|i| Vec3::new(f[3 * i], f[3 * i + 1], f[3 * i + 2])).collect() };
    let mut above = 0usize;
    for iter in 0..cfg.iters {
        let alpha = unflat(&flat);
        let (loss, grad) = registration_objective(template, spatial, varifold, &target, target_norm, beta, lambda, cfg.steps, &alpha)?;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { iter, trace });
        }
        // the floor absorbs the first Adam steps when the target is the template itself
        if loss > 10.0 * trace[0] + 0.1 * beta * target_norm {
            above += 1;
            if above >= 50 {
                return Err(Error::TrainingDiverged { iter, trace });
            }
        } else {
            above = 0;
        }
        let g: Vec<f64> = grad.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        adam.step(&mut flat, &g, 1.0);
    }
    Ok((unflat(&flat), trace))
}

/// Fits every training shape independently. The returned trace is the
/// summed objective per iteration.
#[allow(clippy::too_many_arguments)]
pub fn fit_atlas<E: Executor>(
    template: Template,
    spatial: SpatialKernel,
    varifold: VarifoldKernel,
    meshes: &[TriMesh],
    ids: &[alloc::string::String],
    beta: f64,
    cfg: &AtlasConfig,
    exec: &E,
) -> Result<(AtlasState, Vec<f64>)> {
    if meshes.is_empty() {
        return Err(Error::EmptyInput("training shapes"));
    }
    let lambda = cfg.lambda_rel * beta;
    let fits = exec.map(meshes.len(), |i| {
        fit_momenta(&template, &spatial, &varifold, &meshes[i], beta, lambda, cfg).map_err(|e| match ids.get(i) {
            Some(id) => e.for_shape(id.clone()),
            None => e,
        })
    });
    let mut momenta = Vec::with_capacity(meshes.len());
    let mut trace = vec![0.0; cfg.iters];
    for f in fits {
        let (m, t) = f?;
        for (acc, v) in trace.iter_mut().zip(&t) {
            *acc += v;
        }
        momenta.push(m);
    }
    Ok((AtlasState { template, spatial, varifold, momenta, beta, lambda, steps: cfg.steps }, trace))
}

/// PCA basis for flattened momenta, fitted through the Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentaPca {
    pub mean: Vec<f64>,
    /// `3n × k` with orthonormal columns (zero columns for null directions).
    pub components: DMatrix<f64>,
    pub variances: Vec<f64>,
    /// `N × k` training embeddings.
    pub embeddings: DMatrix<f64>,
}

fn flatten(m: &[Vec3]) -> Vec<f64> {
    m.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

pub fn momenta_pca(momenta: &[Vec<Vec3>], k: usize) -> Result<MomentaPca> {
    if k == 0 {
        return Err(Error::InvalidParam("embedding dimension must be positive".into()));
    }
    let n = momenta.len();
    if n < 2 {
        return Err(Error::InvalidParam("PCA needs at least two shapes".into()));
    }
    let dim = 3 * momenta[0].len();
    if momenta.iter().any(|m| 3 * m.len() != dim) {
        return Err(Error::InvalidParam("momentum sets differ in size".into()));
    }
    let k = k.min(n - 1).min(dim);
    let rows: Vec<Vec<f64>> = momenta.iter().map(|m| flatten(m)).collect();
    let mean: Vec<f64> = (0..dim).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, dim, |i, c| rows[i][c] - mean[c]);
    let gram = &x * x.transpose();
    let (values, u) = sorted_symmetric_eigen(&gram);
    let tol = 1e-12 * values.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let mut components = DMatrix::zeros(dim, k);
    let mut embeddings = DMatrix::zeros(n, k);
    let mut variances = vec![0.0; k];
    for c in 0..k {
        if values[c] > tol {
            let s = values[c].sqrt();
            let v = x.transpose() * u.column(c) / s;
            components.set_column(c, &v);
            embeddings.set_column(c, &(u.column(c) * s));
            variances[c] = values[c] / (n - 1) as f64;
        }
    }
    Ok(MomentaPca { mean, components, variances, embeddings })
}

impl MomentaPca {
    pub fn dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn project(&self, momenta: &[Vec3]) -> Vec<f64> {
        let f = flatten(momenta);
        (0..self.dim())
            .map(|c| self.components.column(c).iter().zip(f.iter().zip(&self.mean)).map(|(w, (x, m))| w * (x - m)).sum())
            .collect()
    }

    pub fn unproject(&self, embedding: &[f64]) -> Vec<Vec3> {
        let mut f = self.mean.clone();
        for (c, e) in embedding.iter().enumerate() {
            for (r, v) in f.iter_mut().enumerate() {
                *v += self.components[(r, c)] * e;
            }
        }
        (0..f.len() / 3).map(|i| Vec3::new(f[3 * i], f[3 * i + 1], f[3 * i + 2])).collect()
    }
}
