//! Diffeomorphic flows driven by momenta attached to control points.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mesh::{TriMesh, Vec3};
use crate::ode::{rk4_backward, rk4_forward, PointSystem, Rk4Run, Stage};

/// Gaussian spatial kernel `exp(-|x-y|²/σ_v²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialKernel {
    pub sigma_v: f64,
}

impl SpatialKernel {
    pub fn new(sigma_v: f64) -> Result<Self> {
        if !(sigma_v.is_finite() && sigma_v > 0.0) {
            return Err(Error::InvalidParam(format!("sigma_v must be positive, got {sigma_v}")));
        }
        Ok(Self { sigma_v })
    }

    /// `0.3 ×` the template's bounding-box diagonal.
    pub fn for_template(mesh: &TriMesh) -> Result<Self> {
        Self::new(0.3 * mesh.bbox_diagonal())
    }

    #[inline]
    pub fn eval(&self, x: &Vec3, y: &Vec3) -> f64 {
        (-(x - y).norm_squared() / (self.sigma_v * self.sigma_v)).exp()
    }
}

/// Indices of `n` vertices chosen by farthest-point sampling, starting from
/// the vertex farthest from the centroid. Ties resolve to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], n: usize) -> Vec<usize> {
    if points.is_empty() || n == 0 {
        return Vec::new();
    }
    let n = n.min(points.len());
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64;
    let argmax = |d: &[f64]| {
        let mut best = 0;
        for i in 1..d.len() {
            if d[i] > d[best] {
                best = i;
            }
        }
        best
    };
    let from_centroid: Vec<f64> = points.iter().map(|p| (p - centroid).norm_squared()).collect();
    let first = argmax(&from_centroid);
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < n {
        let next = argmax(&dist);
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    chosen
}

/// Control points plus the mesh they deform.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    points: Vec<Vec3>,
    mesh: TriMesh,
}

impl Template {
    pub fn new(points: Vec<Vec3>, mesh: TriMesh) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("control points"));
        }
        let (lo, hi) = mesh.bounding_box();
        let center = (lo + hi) * 0.5;
        let half = (hi - lo) * 0.75;
        for p in &points {
            let d = (p - center).abs();
            if (0..3).any(|a| d[a] > half[a] + 1e-9 * (1.0 + mesh.bbox_diagonal())) {
                return Err(Error::InvalidParam(format!(
                    "control point {p:?} lies outside 1.5x the mesh bounding box"
                )));
            }
        }
        Ok(Self { points, mesh })
    }

    /// Samples `n` control points on the mesh vertices.
    pub fn from_mesh(mesh: TriMesh, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParam("need at least one control point".into()));
        }
        let idx = farthest_point_sample(mesh.vertices(), n);
        let points = idx.iter().map(|&i| mesh.vertices()[i]).collect();
        Self::new(points, mesh)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }
}

/// Momenta on a time grid over `[0, 1]`, linearly interpolated in between.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPath {
    grid: Vec<f64>,
    alphas: Vec<Vec<Vec3>>,
}

impl MomentumPath {
    pub fn new(grid: Vec<f64>, alphas: Vec<Vec<Vec3>>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::InvalidParam("time grid needs at least two stamps".into()));
        }
        if grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
            return Err(Error::InvalidParam("time grid must start at 0 and end at 1".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParam("time grid must be strictly increasing".into()));
        }
        if alphas.len() != grid.len() {
            return Err(Error::InvalidParam(format!(
                "{} momentum slices for {} time stamps",
                alphas.len(),
                grid.len()
            )));
        }
        let n = alphas[0].len();
        if alphas.iter().any(|a| a.len() != n) {
            return Err(Error::InvalidParam("momentum slices differ in size".into()));
        }
        Ok(Self { grid, alphas })
    }

    /// Uniform grid with `alphas.len() - 1` steps.
    pub fn uniform(alphas: Vec<Vec<Vec3>>) -> Result<Self> {
        let steps = alphas.len().saturating_sub(1).max(1);
        let grid = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        Self::new(grid, alphas)
    }

    pub fn constant(alpha: Vec<Vec3>, steps: usize) -> Result<Self> {
        Self::uniform(vec![alpha; steps.max(1) + 1])
    }

    pub fn zeros(n: usize, steps: usize) -> Self {
        Self::constant(vec![Vec3::zeros(); n], steps).expect("valid uniform grid")
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn alphas(&self) -> &[Vec<Vec3>] {
        &self.alphas
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn num_points(&self) -> usize {
        self.alphas[0].len()
    }
}

/// `Σ_i K(x, x_i) α_i`.
pub fn velocity_at(x: &Vec3, control_pts: &[Vec3], alphas: &[Vec3], k: &SpatialKernel) -> Vec3 {
    control_pts
        .iter()
        .zip(alphas)
        .fold(Vec3::zeros(), |v, (c, a)| v + a * k.eval(x, c))
}

/// Gradient of a flow objective w.r.t. the momenta and the kernel width.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FlowGrad {
    pub alphas: Vec<Vec<Vec3>>,
    pub sigma_v: f64,
}

impl FlowGrad {
    pub fn zeros(slices: usize, n: usize) -> Self {
        Self { alphas: vec![vec![Vec3::zeros(); n]; slices], sigma_v: 0.0 }
    }
}

/// The first `n` state entries are control points; the rest are passive
/// points carried by the same field.
pub(crate) struct ControlFlow<'a> {
    alphas: &'a [Vec<Vec3>],
    mid: Vec<Vec<Vec3>>,
    sigma: f64,
}

impl<'a> ControlFlow<'a> {
    pub fn new(alphas: &'a [Vec<Vec3>], sigma: f64) -> Self {
        let mid = alphas
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a + b) * 0.5).collect())
            .collect();
        Self { alphas, mid, sigma }
    }

    fn slice(&self, step: usize, stage: Stage) -> &[Vec3] {
        match stage {
            Stage::Start => &self.alphas[step],
            Stage::Mid => &self.mid[step],
            Stage::End => &self.alphas[step + 1],
        }
    }
}

impl PointSystem for ControlFlow<'_> {
    type Grad = FlowGrad;

    fn rhs(&self, step: usize, stage: Stage, state: &[Vec3], out: &mut [Vec3]) {
        let alpha = self.slice(step, stage);
        let ctrl = &state[..alpha.len()];
        let inv = 1.0 / (self.sigma * self.sigma);
        for (o, p) in out.iter_mut().zip(state) {
            let mut v = Vec3::zeros();
            for (c, a) in ctrl.iter().zip(alpha) {
                v += a * (-(p - c).norm_squared() * inv).exp();
            }
            *o = v;
        }
    }

    fn vjp(
        &self,
        step: usize,
        stage: Stage,
        state: &[Vec3],
        adj_out: &[Vec3],
        adj_state: &mut [Vec3],
        grad: &mut FlowGrad,
    ) {
        let alpha = self.slice(step, stage);
        let n = alpha.len();
        let inv = 1.0 / (self.sigma * self.sigma);
        let mut d_alpha = vec![Vec3::zeros(); n];
        let mut d_ctrl = vec![Vec3::zeros(); n];
        for (p, (pt, lam)) in state.iter().zip(adj_out).enumerate() {
            if *lam == Vec3::zeros() {
                continue;
            }
            let mut d_pt = Vec3::zeros();
            for j in 0..n {
                let d = pt - state[j];
                let r2 = d.norm_squared();
                let kv = (-r2 * inv).exp();
                d_alpha[j] += lam * kv;
                let s = lam.dot(&alpha[j]) * kv;
                let dk = d * (-2.0 * inv * s);
                d_pt += dk;
                d_ctrl[j] -= dk;
                grad.sigma_v += s * 2.0 * r2 * inv / self.sigma;
            }
            adj_state[p] += d_pt;
        }
        for j in 0..n {
            adj_state[j] += d_ctrl[j];
        }
        match stage {
            Stage::Start => add_into(&mut grad.alphas[step], &d_alpha, 1.0),
            Stage::End => add_into(&mut grad.alphas[step + 1], &d_alpha, 1.0),
            Stage::Mid => {
                add_into(&mut grad.alphas[step], &d_alpha, 0.5);
                add_into(&mut grad.alphas[step + 1], &d_alpha, 0.5);
            }
        }
    }
}

fn add_into(dst: &mut [Vec3], src: &[Vec3], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * w;
    }
}

/// States of every point at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<Vec3>>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[Vec3] {
        self.states.last().expect("trajectory has at least one state")
    }
}

fn check_sizes(n_points: usize, path: &MomentumPath) -> Result<()> {
    if n_points != path.num_points() {
        return Err(Error::InvalidParam(format!(
            "{} control points but momenta for {}",
            n_points,
            path.num_points()
        )));
    }
    Ok(())
}

/// Integrates control points together with `extra` passive points.
pub(crate) fn flow_points(
    control_pts: &[Vec3],
    extra: &[Vec3],
    path: &MomentumPath,
    k: &SpatialKernel,
) -> Result<Rk4Run> {
    check_sizes(control_pts.len(), path)?;
    let sys = ControlFlow::new(&path.alphas, k.sigma_v);
    let mut init = control_pts.to_vec();
    init.extend_from_slice(extra);
    rk4_forward(&sys, &path.grid, init)
}

/// Pulls back `adj_final` (one entry per state point) through a stored
/// [`flow_points`] trajectory.
pub(crate) fn flow_points_backward(
    path: &MomentumPath,
    k: &SpatialKernel,
    run: &Rk4Run,
    adj_final: Vec<Vec3>,
) -> FlowGrad {
    let sys = ControlFlow::new(&path.alphas, k.sigma_v);
    let mut grad = FlowGrad::zeros(path.alphas.len(), path.num_points());
    rk4_backward(&sys, &path.grid, run, adj_final, &mut grad);
    grad
}

pub fn shoot(template_pts: &[Vec3], path: &MomentumPath, k: &SpatialKernel) -> Result<Trajectory> {
    flow_points(template_pts, &[], path, k).map(|run| Trajectory { states: run.states })
}

/// Vector-Jacobian product of the shot endpoint: returns the gradients of
/// `<adj_endpoint, x(1)>` w.r.t. every momentum slice and `sigma_v`.
pub fn shoot_vjp(
    template_pts: &[Vec3],
    path: &MomentumPath,
    k: &SpatialKernel,
    adj_endpoint: &[Vec3],
) -> Result<(Vec<Vec<Vec3>>, f64)> {
    if adj_endpoint.len() != template_pts.len() {
        return Err(Error::InvalidParam("cotangent length differs from point count".into()));
    }
    let run = flow_points(template_pts, &[], path, k)?;
    let g = flow_points_backward(path, k, &run, adj_endpoint.to_vec());
    Ok((g.alphas, g.sigma_v))
}

/// Advects every template vertex along the control-point flow.
pub fn deform_mesh(template: &Template, path: &MomentumPath, k: &SpatialKernel) -> Result<TriMesh> {
    let run = flow_points(&template.points, template.mesh.vertices(), path, k)?;
    let n = template.points.len();
    let end = run.last();
    Ok(template.mesh.with_vertices(end[n..].to_vec()))
}

/// Flows forward to `t = 1`, back to `t = 0`, and reports the largest
/// displacement from the starting positions.
pub fn inverse_flow_check(template_pts: &[Vec3], path: &MomentumPath, k: &SpatialKernel) -> Result<f64> {
    let forward = flow_points(template_pts, &[], path, k)?;
    let rev_grid: Vec<f64> = path.grid.iter().rev().copied().collect();
    let rev_alphas: Vec<Vec<Vec3>> = path.alphas.iter().rev().cloned().collect();
    let sys = ControlFlow::new(&rev_alphas, k.sigma_v);
    let back = rk4_forward(&sys, &rev_grid, forward.last().to_vec())?;
    let end = back.last();
    Ok(template_pts
        .iter()
        .zip(end)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cup::{generate_cup, CupParams};
    use crate::mesh::face_geometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_alphas(rng: &mut ChaCha8Rng, slices: usize, n: usize, mag: f64) -> Vec<Vec<Vec3>> {
        (0..slices)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                        v * (mag * rng.random_range(0.0..1.0) / v.norm().max(1e-12))
                    })
                    .collect()
            })
            .collect()
    }

    fn small_cup() -> Template {
        let params = CupParams { rings: 6, sectors: 12, ..CupParams::default() };
        Template::from_mesh(generate_cup(&params).unwrap(), 16).unwrap()
    }

    #[test]
    fn velocity_values() {
        let k = SpatialKernel::new(2.0).unwrap();
        let c = [Vec3::zeros()];
        assert_eq!(velocity_at(&Vec3::new(0.3, 0.0, 0.0), &c, &[Vec3::zeros()], &k), Vec3::zeros());
        assert_eq!(velocity_at(&Vec3::zeros(), &c, &[Vec3::x()], &k), Vec3::x());
        let v = velocity_at(&Vec3::new(2.0, 0.0, 0.0), &c, &[Vec3::new(1.0, -2.0, 0.5)], &k);
        let e = (-1.0f64).exp();
        assert!((v - Vec3::new(e, -2.0 * e, 0.5 * e)).norm() < 1e-12);
    }

    #[test]
    fn zero_momenta_is_identity() {
        let t = small_cup();
        let k = SpatialKernel::for_template(t.mesh()).unwrap();
        let path = MomentumPath::zeros(t.num_points(), 10);
        assert_eq!(shoot(t.points(), &path, &k).unwrap().endpoint(), t.points());
        assert_eq!(&deform_mesh(&t, &path, &k).unwrap(), t.mesh());
        assert_eq!(inverse_flow_check(t.points(), &path, &k).unwrap(), 0.0);
    }

    #[test]
    fn single_particle_moves_in_a_straight_line() {
        let k = SpatialKernel::new(1.5).unwrap();
        let a = Vec3::new(0.7, -1.2, 2.0);
        let x0 = Vec3::new(1.0, 2.0, 3.0);
        let traj = shoot(&[x0], &MomentumPath::constant(vec![a], 10).unwrap(), &k).unwrap();
        for (i, s) in traj.states.iter().enumerate() {
            assert!((s[0] - (x0 + a * (i as f64 / 10.0))).norm() < 1e-10);
        }
    }

    #[test]
    fn two_particles_match_refined_integration() {
        let k = SpatialKernel::new(1.0).unwrap();
        let pts = [Vec3::zeros(), Vec3::new(0.8, 0.3, 0.0)];
        let a = vec![Vec3::new(1.0, 0.5, 0.0); 2];
        let coarse = shoot(&pts, &MomentumPath::constant(a.clone(), 10).unwrap(), &k).unwrap();
        let fine = shoot(&pts, &MomentumPath::constant(a, 1000).unwrap(), &k).unwrap();
        for (c, f) in coarse.endpoint().iter().zip(fine.endpoint()) {
            assert!((c - f).norm() / f.norm() < 1e-6);
        }
    }

    #[test]
    fn vertices_on_control_points_follow_them() {
        let t = small_cup();
        let k = SpatialKernel::for_template(t.mesh()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let path = MomentumPath::uniform(random_alphas(&mut rng, 11, t.num_points(), 0.3 * k.sigma_v)).unwrap();
        let end = shoot(t.points(), &path, &k).unwrap();
        let mesh = deform_mesh(&t, &path, &k).unwrap();
        let idx = farthest_point_sample(t.mesh().vertices(), t.num_points());
        for (c, &v) in end.endpoint().iter().zip(&idx) {
            assert!((c - mesh.vertices()[v]).norm() < 1e-12);
        }
    }

    #[test]
    fn small_paths_do_not_fold_faces() {
        let t = small_cup();
        let k = SpatialKernel::for_template(t.mesh()).unwrap();
        let before = face_geometry(t.mesh());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let path = MomentumPath::uniform(random_alphas(&mut rng, 11, t.num_points(), 0.1 * k.sigma_v)).unwrap();
            let after = face_geometry(&deform_mesh(&t, &path, &k).unwrap());
            for (n0, (n1, a1)) in before.normals.iter().zip(after.normals.iter().zip(&after.areas)) {
                assert!(*a1 > 0.0);
                assert!(n0.dot(n1) > 0.0);
            }
        }
    }

    fn moderate_path(t: &Template, k: &SpatialKernel, steps: usize) -> MomentumPath {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coarse = random_alphas(&mut rng, 3, t.num_points(), 0.5 * k.sigma_v);
        // same smooth path at any resolution
        let slices = (0..=steps)
            .map(|i| {
                let s = 2.0 * i as f64 / steps as f64;
                let lo = (s.floor() as usize).min(1);
                let w = s - lo as f64;
                coarse[lo].iter().zip(&coarse[lo + 1]).map(|(a, b)| a * (1.0 - w) + b * w).collect()
            })
            .collect();
        MomentumPath::uniform(slices).unwrap()
    }

    #[test]
    fn round_trip_is_small_and_fourth_order() {
        let t = small_cup();
        let k = SpatialKernel::for_template(t.mesh()).unwrap();
        let err10 = inverse_flow_check(t.points(), &moderate_path(&t, &k, 10), &k).unwrap();
        assert!(err10 < 1e-3 * t.mesh().bbox_diagonal(), "{err10}");

        let steps = [4usize, 8, 16, 32];
        let slope = |errs: &[f64]| {
            let xs: Vec<f64> = steps.iter().map(|&s| (s as f64).ln()).collect();
            let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
            let mx = xs.iter().sum::<f64>() / 4.0;
            let my = ys.iter().sum::<f64>() / 4.0;
            -xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
                / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>()
        };

        let reference = shoot(t.points(), &moderate_path(&t, &k, 512), &k).unwrap();
        let forward: Vec<f64> = steps
            .iter()
            .map(|&s| {
                let end = shoot(t.points(), &moderate_path(&t, &k, s), &k).unwrap();
                end.endpoint().iter().zip(reference.endpoint()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
            })
            .collect();
        let p = slope(&forward);
        assert!((3.5..=4.5).contains(&p), "forward slope {p}, errors {forward:?}");

        // leading local errors of the forward and reversed sweeps cancel
        let round: Vec<f64> = steps
            .iter()
            .map(|&s| inverse_flow_check(t.points(), &moderate_path(&t, &k, s), &k).unwrap())
            .collect();
        let q = slope(&round);
        assert!(q >= 3.5, "round-trip slope {q}, errors {round:?}");
    }

    #[test]
    fn split_flow_composes() {
        let t = small_cup();
        let k = SpatialKernel::for_template(t.mesh()).unwrap();
        let path = moderate_path(&t, &k, 10);
        let whole = shoot(t.points(), &path, &k).unwrap();
        let first = {
            let sys = ControlFlow::new(&path.alphas[..=5], k.sigma_v);
            rk4_forward(&sys, &path.grid[..=5], t.points().to_vec()).unwrap()
        };
        let second = {
            let sys = ControlFlow::new(&path.alphas[5..], k.sigma_v);
            rk4_forward(&sys, &path.grid[5..], first.last().to_vec()).unwrap()
        };
        let scale = t.mesh().bbox_diagonal();
        for (x, y) in second.last().iter().zip(whole.endpoint()) {
            assert!((x - y).norm() < 5e-6 * scale);
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let t = small_cup();
        let k = SpatialKernel::for_template(t.mesh()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let path = MomentumPath::uniform(random_alphas(&mut rng, 6, t.num_points(), 0.4 * k.sigma_v)).unwrap();
        let dir = random_alphas(&mut rng, 6, t.num_points(), 1.0);
        let extra: Vec<Vec3> = t.mesh().vertices().iter().step_by(7).copied().collect();
        let weights: Vec<Vec3> = (0..t.num_points() + extra.len())
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let objective = |p: &MomentumPath, k: &SpatialKernel| -> f64 {
            let s = flow_points(t.points(), &extra, p, k).unwrap();
            s.last().iter().zip(&weights).map(|(x, w)| x.dot(w) + 0.01 * x.norm_squared()).sum()
        };
        let states = flow_points(t.points(), &extra, &path, &k).unwrap();
        let adj: Vec<Vec3> = states.last().iter().zip(&weights).map(|(x, w)| w + x * 0.02).collect();
        let g = flow_points_backward(&path, &k, &states, adj);

        let h = 1e-5;
        let shift = |eps: f64| {
            let a = path
                .alphas()
                .iter()
                .zip(&dir)
                .map(|(s, d)| s.iter().zip(d).map(|(x, y)| x + y * eps).collect())
                .collect();
            MomentumPath::uniform(a).unwrap()
        };
        let fd = (objective(&shift(h), &k) - objective(&shift(-h), &k)) / (2.0 * h);
        let analytic: f64 = g.alphas.iter().zip(&dir).flat_map(|(a, d)| a.iter().zip(d).map(|(x, y)| x.dot(y))).sum();
        assert!((fd - analytic).abs() <= 1e-4 * fd.abs().max(1e-8), "fd {fd} vs {analytic}");

        let hs = 1e-5 * k.sigma_v;
        let fd_s = (objective(&path, &SpatialKernel::new(k.sigma_v + hs).unwrap())
            - objective(&path, &SpatialKernel::new(k.sigma_v - hs).unwrap()))
            / (2.0 * hs);
        assert!((fd_s - g.sigma_v).abs() <= 1e-4 * fd_s.abs().max(1e-8), "fd {fd_s} vs {}", g.sigma_v);
    }

    #[test]
    fn template_rejects_distant_control_points() {
        let mesh = small_cup().mesh().clone();
        let far = Vec3::new(1e3, 0.0, 0.0);
        assert!(Template::new(vec![far], mesh.clone()).is_err());
        assert!(Template::new(Vec::new(), mesh).is_err());
    }

    #[test]
    fn path_validation() {
        assert!(MomentumPath::new(vec![0.0, 0.5, 0.5, 1.0], vec![vec![]; 4]).is_err());
        assert!(MomentumPath::new(vec![0.1, 1.0], vec![vec![]; 2]).is_err());
        assert!(MomentumPath::new(vec![0.0, 1.0], vec![vec![]; 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fps_returns_distinct_indices(seed in 0u64..1000, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..30).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let idx = farthest_point_sample(&pts, n);
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), n);
        }
    }
}
