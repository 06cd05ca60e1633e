//! Gaussian-process diffeomorphic shape model: initialisation, the
//! variational objective with its gradient, stochastic training, and
//! latent inference for new shapes.
//!
//! Momenta `α(t, z) ∈ ℝ^{3n}` carry a GP prior over (time, latent) and are
//! read at the integrator grid for each shape's latent `z`. The flow they
//! induce deforms the template, and the varifold distance to the observed
//! shape acts as the (tempered) negative log-likelihood.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::flow::{flow_points, flow_points_backward, MomentumPath, SpatialKernel, Template};
use crate::gp::{
    cholesky_backward, gram, gram_backward, jittered_cholesky, kl_gaussian_diag, kl_whitened_inducing,
    standard_normal_matrix, tril, GaussianDist, GpKernelParams, InducingState, KernelGrad, SideGrad,
};
use crate::linalg::{classical_mds, median};
use crate::mesh::{TriMesh, Vec3};
use crate::optim::{Adam, AdamConfig};
use crate::varifold::{embed, sq_dist_grad_vertices, sq_norm, varifold_sq_dist, VarifoldKernel, VarifoldRepr};

/// Model-construction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub num_inducing: usize,
    pub num_control: usize,
    pub steps: usize,
    /// σ_v as a fraction of the template bounding-box diagonal.
    pub sigma_v_scale: f64,
    /// σ_pos as a fraction of the template bounding-box diagonal.
    pub sigma_pos_scale: f64,
    pub optimize_sigma_v: bool,
    /// β = beta_scale / median d²(S_i, template).
    pub beta_scale: f64,
    /// Initial GP amplitude σ as a fraction of the template diagonal.
    pub gp_sd_scale: f64,
    pub length_t: f64,
    pub length_z: f64,
    /// Initial whitened posterior factor `q_init·I`.
    pub q_init: f64,
    pub latent_sd_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 20,
            num_inducing: 32,
            num_control: 64,
            steps: 10,
            sigma_v_scale: 0.3,
            sigma_pos_scale: 0.25,
            optimize_sigma_v: true,
            beta_scale: 100.0,
            gp_sd_scale: 0.02,
            length_t: 1.0,
            length_z: 1.0,
            q_init: 1.0,
            latent_sd_init: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim as f64),
            ("num_inducing", self.num_inducing as f64),
            ("num_control", self.num_control as f64),
            ("steps", self.steps as f64),
            ("sigma_v_scale", self.sigma_v_scale),
            ("sigma_pos_scale", self.sigma_pos_scale),
            ("beta_scale", self.beta_scale),
            ("gp_sd_scale", self.gp_sd_scale),
            ("length_t", self.length_t),
            ("length_z", self.length_z),
            ("q_init", self.q_init),
            ("latent_sd_init", self.latent_sd_init),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Trained (or initialised) model.
#[derive(Debug, Clone, PartialEq)]
pub struct GpdssmState {
    pub template: Template,
    pub spatial: SpatialKernel,
    pub varifold: VarifoldKernel,
    pub gp: GpKernelParams,
    pub inducing: InducingState,
    pub latents: Vec<GaussianDist>,
    pub beta: f64,
    pub steps: usize,
    pub optimize_sigma_v: bool,
}

/// Training shapes in varifold form.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub ids: Vec<String>,
    pub reprs: Vec<VarifoldRepr>,
    pub sq_norms: Vec<f64>,
}

impl TrainingData {
    pub fn new(ids: Vec<String>, meshes: &[TriMesh], k: &VarifoldKernel) -> Result<Self> {
        if meshes.is_empty() {
            return Err(Error::EmptyInput("training shapes"));
        }
        if ids.len() != meshes.len() {
            return Err(Error::InvalidParam("one id per training mesh is required".into()));
        }
        let reprs: Vec<VarifoldRepr> = meshes.iter().map(embed).collect();
        let sq_norms = reprs.iter().map(|r| sq_norm(r, k)).collect();
        Ok(Self { ids, reprs, sq_norms })
    }

    pub fn len(&self) -> usize {
        self.reprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reprs.is_empty()
    }
}

/// Pairwise squared varifold distances.
pub fn pairwise_sq_dists<E: Executor>(reprs: &[VarifoldRepr], k: &VarifoldKernel, exec: &E) -> Result<DMatrix<f64>> {
    let n = reprs.len();
    let norms: Vec<f64> = exec.map(n, |i| sq_norm(&reprs[i], k));
    let rows: Vec<Vec<f64>> = exec.map(n, |i| {
        (0..n)
            .map(|j| {
                if j <= i {
                    0.0
                } else {
                    (norms[i] - 2.0 * crate::varifold::inner(&reprs[i], &reprs[j], k) + norms[j]).max(0.0)
                }
            })
            .collect()
    });
    Ok(DMatrix::from_fn(n, n, |i, j| if i < j { rows[i][j] } else { rows[j][i] }))
}

/// Index of the medoid under a squared-distance matrix (lowest index wins ties).
pub fn medoid_index(sq_dist: &DMatrix<f64>) -> usize {
    let mut best = 0;
    let mut best_sum = f64::INFINITY;
    for i in 0..sq_dist.nrows() {
        let s: f64 = sq_dist.row(i).iter().sum();
        if s < best_sum {
            best_sum = s;
            best = i;
        }
    }
    best
}

/// Medoid of the training meshes, with control points sampled on it.
pub fn select_template<E: Executor>(
    meshes: &[TriMesh],
    k: &VarifoldKernel,
    num_control: usize,
    exec: &E,
) -> Result<(usize, Template)> {
    if meshes.is_empty() {
        return Err(Error::EmptyInput("training shapes"));
    }
    let reprs: Vec<VarifoldRepr> = meshes.iter().map(embed).collect();
    let idx = medoid_index(&pairwise_sq_dists(&reprs, k, exec)?);
    Ok((idx, Template::from_mesh(meshes[idx].clone(), num_control)?))
}

fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

impl GpdssmState {
    /// Builds the initial model: medoid template, MDS latent means, default
    /// kernels, and β from the median template distance.
    pub fn initialize<E: Executor>(
        ids: Vec<String>,
        meshes: &[TriMesh],
        cfg: &ModelConfig,
        exec: &E,
    ) -> Result<(Self, TrainingData)> {
        cfg.validate()?;
        if meshes.is_empty() {
            return Err(Error::EmptyInput("training shapes"));
        }
        let diags: Vec<f64> = meshes.iter().map(|m| m.bbox_diagonal()).collect();
        let select_kernel = VarifoldKernel::new(cfg.sigma_pos_scale * median(&diags))?;
        let (_, template) = select_template(meshes, &select_kernel, cfg.num_control, exec)?;
        let diag = template.mesh().bbox_diagonal();
        let varifold = VarifoldKernel::new(cfg.sigma_pos_scale * diag)?;
        let spatial = SpatialKernel::new(cfg.sigma_v_scale * diag)?;
        let data = TrainingData::new(ids, meshes, &varifold)?;

        let tmpl_repr = embed(template.mesh());
        let to_template: Vec<f64> = exec
            .map(data.len(), |i| varifold_sq_dist(&data.reprs[i], &tmpl_repr, &varifold))
            .into_iter()
            .collect::<Result<_>>()?;
        let beta_base = median(&to_template);
        let beta = if beta_base > 0.0 { cfg.beta_scale / beta_base } else { cfg.beta_scale };

        let d2 = pairwise_sq_dists(&data.reprs, &varifold, exec)?;
        let coords = classical_mds(&d2, cfg.latent_dim);
        let n = data.len();
        let first_mean = coords.column(0).sum() / n as f64;
        let first_var = coords.column(0).iter().map(|x| (x - first_mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if first_var > 0.0 { 1.0 / first_var.sqrt() } else { 1.0 };
        let latents = (0..n)
            .map(|i| GaussianDist {
                mean: coords.row(i).iter().map(|x| x * scale).collect(),
                sd: vec![cfg.latent_sd_init; cfg.latent_dim],
            })
            .collect();

        let sd = cfg.gp_sd_scale * diag;
        let gp = GpKernelParams::new(sd * sd, cfg.length_t, cfg.length_z)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let inducing = InducingState::initial(cfg.num_inducing, cfg.latent_dim, 3 * template.num_points(), cfg.q_init, &mut rng)?;
        Ok((
            Self { template, spatial, varifold, gp, inducing, latents, beta, steps: cfg.steps, optimize_sigma_v: cfg.optimize_sigma_v },
            data,
        ))
    }

    pub fn latent_dim(&self) -> usize {
        self.inducing.latents.ncols()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn outputs(&self) -> usize {
        3 * self.template.num_points()
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.steps)
    }

    fn layout(&self) -> Layout {
        Layout::new(self.num_inducing(), self.latent_dim(), self.outputs(), self.latents.len())
    }

    /// Flat unconstrained parameter vector (positive quantities in log form).
    pub fn to_params(&self) -> Vec<f64> {
        let l = self.layout();
        let mut p = vec![0.0; l.total];
        p[0] = self.gp.variance.ln();
        p[1] = self.gp.length_t.ln();
        p[2] = self.gp.length_z.ln();
        p[3] = self.spatial.sigma_v.ln();
        p[l.times..l.times + l.m].copy_from_slice(&self.inducing.times);
        for i in 0..l.m {
            for c in 0..l.k {
                p[l.ind_latent(i, c)] = self.inducing.latents[(i, c)];
            }
            for d in 0..l.d {
                p[l.v(i, d)] = self.inducing.q_mean[(i, d)];
            }
            for j in 0..=i {
                let q = self.inducing.q_chol[(i, j)];
                p[l.q(i, j)] = if i == j { q.ln() } else { q };
            }
        }
        for (s, dist) in self.latents.iter().enumerate() {
            for c in 0..l.k {
                p[l.mu(s, c)] = dist.mean[c];
                p[l.rho(s, c)] = dist.sd[c].ln();
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let l = self.layout();
        if p.len() != l.total {
            return Err(Error::InvalidParam(format!("expected {} parameters, got {}", l.total, p.len())));
        }
        self.gp = GpKernelParams::new(p[0].exp(), p[1].exp(), p[2].exp())?;
        self.spatial = SpatialKernel::new(p[3].exp())?;
        self.inducing.times.copy_from_slice(&p[l.times..l.times + l.m]);
        for i in 0..l.m {
            for c in 0..l.k {
                self.inducing.latents[(i, c)] = p[l.ind_latent(i, c)];
            }
            for d in 0..l.d {
                self.inducing.q_mean[(i, d)] = p[l.v(i, d)];
            }
            for j in 0..=i {
                let q = p[l.q(i, j)];
                self.inducing.q_chol[(i, j)] = if i == j { q.exp() } else { q };
            }
        }
        for (s, dist) in self.latents.iter_mut().enumerate() {
            for c in 0..l.k {
                dist.mean[c] = p[l.mu(s, c)];
                dist.sd[c] = p[l.rho(s, c)].exp();
            }
        }
        Ok(())
    }

    /// Posterior-mean momentum path at latent `z`.
    pub fn mean_path(&self, z: &[f64]) -> Result<MomentumPath> {
        let pass = Forward::new(self)?;
        let (_, f) = pass.momenta(self, z, None)?;
        pass.path(&f)
    }

    /// Template deformed by the posterior-mean momenta at `z`.
    pub fn reconstruct(&self, z: &[f64]) -> Result<TriMesh> {
        crate::flow::deform_mesh(&self.template, &self.mean_path(z)?, &self.spatial)
    }
}

/// Offsets into the flat parameter vector:
/// `[log σ², log ℓ_t, log ℓ_z, log σ_v | inducing times (m) | inducing
/// latents (m·k) | whitened means (m·D) | factor lower triangle, row-major,
/// log diagonal | latent means (N·k) | latent log sds (N·k)]`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    m: usize,
    k: usize,
    d: usize,
    times: usize,
    latents: usize,
    v: usize,
    q: usize,
    mu: usize,
    rho: usize,
    total: usize,
}

impl Layout {
    fn new(m: usize, k: usize, d: usize, n: usize) -> Self {
        let times = 4;
        let latents = times + m;
        let v = latents + m * k;
        let q = v + m * d;
        let mu = q + m * (m + 1) / 2;
        let rho = mu + n * k;
        Self { m, k, d, times, latents, v, q, mu, rho, total: rho + n * k }
    }
    fn ind_latent(&self, i: usize, c: usize) -> usize {
        self.latents + i * self.k + c
    }
    fn v(&self, i: usize, d: usize) -> usize {
        self.v + i * self.d + d
    }
    fn q(&self, i: usize, j: usize) -> usize {
        self.q + i * (i + 1) / 2 + j
    }
    fn mu(&self, s: usize, c: usize) -> usize {
        self.mu + s * self.k + c
    }
    fn rho(&self, s: usize, c: usize) -> usize {
        self.rho + s * self.k + c
    }
}

/// Standard-normal draws for one shape's Monte Carlo term.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDraws {
    /// Latent draw, length k.
    pub z: Vec<f64>,
    /// Whitened inducing draw, m × D.
    pub u: DMatrix<f64>,
    /// Conditional residual draw, (steps+1) × D.
    pub f: DMatrix<f64>,
}

impl ShapeDraws {
    pub fn sample<R: Rng + ?Sized>(state: &GpdssmState, rng: &mut R) -> Self {
        let z = (0..state.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let u = standard_normal_matrix(state.num_inducing(), state.outputs(), rng);
        let f = standard_normal_matrix(state.steps + 1, state.outputs(), rng);
        Self { z, u, f }
    }

    pub fn zeros(state: &GpdssmState) -> Self {
        Self {
            z: vec![0.0; state.latent_dim()],
            u: DMatrix::zeros(state.num_inducing(), state.outputs()),
            f: DMatrix::zeros(state.steps + 1, state.outputs()),
        }
    }
}

/// Components of the negative ELBO estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// β·Σ d² over the batch, rescaled to the full dataset.
    pub data: f64,
    /// Σ KL(q(z_i) ‖ N(0, I)) over the batch, rescaled to the full dataset.
    pub kl_z: f64,
    pub kl_u: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.data + self.kl_z + self.kl_u
    }
}

/// Quantities shared by every shape in one evaluation.
struct Forward {
    grid: Vec<f64>,
    lmm: DMatrix<f64>,
    kmm: DMatrix<f64>,
    jitter_mm: f64,
    kqq: DMatrix<f64>,
}

/// Inducing-side intermediates for one latent.
struct Conditioned {
    zq: DMatrix<f64>,
    kqm: DMatrix<f64>,
    /// `B = L⁻¹ K_mq` (m × q); the projection is `Bᵀ`.
    b: DMatrix<f64>,
    uw: DMatrix<f64>,
    residual: Option<(DMatrix<f64>, f64)>,
}

#[derive(Debug, Clone)]
struct ShapeGrad {
    data: f64,
    sq_dist: f64,
    hyper: KernelGrad,
    d_sigma_v: f64,
    d_times: Vec<f64>,
    d_latents: DMatrix<f64>,
    dv: DMatrix<f64>,
    dq: DMatrix<f64>,
    dl: DMatrix<f64>,
    dz: Vec<f64>,
}

impl Forward {
    fn new(state: &GpdssmState) -> Result<Self> {
        let ind = &state.inducing;
        let kmm = gram(&ind.times, &ind.latents, &ind.times, &ind.latents, &state.gp);
        let (lmm, jitter_mm) = jittered_cholesky(&kmm, state.gp.jitter())?;
        let grid = state.grid();
        let zq0 = DMatrix::zeros(grid.len(), state.latent_dim());
        let kqq = gram(&grid, &zq0, &grid, &zq0, &state.gp);
        Ok(Self { grid, lmm, kmm, jitter_mm, kqq })
    }

    /// Momenta at the grid for latent `z`; with `noise` the inducing and
    /// residual draws are applied, otherwise the posterior mean is used.
    fn momenta(&self, state: &GpdssmState, z: &[f64], noise: Option<&ShapeDraws>) -> Result<(Conditioned, DMatrix<f64>)> {
        let ind = &state.inducing;
        let q = self.grid.len();
        let zq = DMatrix::from_fn(q, z.len(), |_, c| z[c]);
        let kqm = gram(&self.grid, &zq, &ind.times, &ind.latents, &state.gp);
        let b = self.lmm.solve_lower_triangular(&kqm.transpose()).expect("non-singular factor");
        let (uw, residual, f) = match noise {
            Some(d) => {
                let uw = &ind.q_mean + &ind.q_chol * &d.u;
                let m = &self.kqq - b.transpose() * &b;
                let (r, jit) = jittered_cholesky(&m, state.gp.jitter())?;
                let f = b.transpose() * &uw + &r * &d.f;
                (uw, Some((r, jit)), f)
            }
            None => {
                let f = b.transpose() * &ind.q_mean;
                (ind.q_mean.clone(), None, f)
            }
        };
        Ok((Conditioned { zq, kqm, b, uw, residual }, f))
    }

    fn path(&self, f: &DMatrix<f64>) -> Result<MomentumPath> {
        let n = f.ncols() / 3;
        let alphas = (0..f.nrows())
            .map(|s| (0..n).map(|j| Vec3::new(f[(s, 3 * j)], f[(s, 3 * j + 1)], f[(s, 3 * j + 2)])).collect())
            .collect();
        MomentumPath::new(self.grid.clone(), alphas)
    }

    /// Data term for one shape and the gradient of `β·d²` w.r.t. every
    /// model quantity, including the latent sample `z`.
    fn shape(
        &self,
        state: &GpdssmState,
        target: &VarifoldRepr,
        target_sq_norm: f64,
        z: &[f64],
        noise: Option<&ShapeDraws>,
    ) -> Result<ShapeGrad> {
        let (c, f) = self.momenta(state, z, noise)?;
        let path = self.path(&f)?;
        let tmpl = &state.template;
        let n = tmpl.num_points();
        let states = flow_points(tmpl.points(), tmpl.mesh().vertices(), &path, &state.spatial)?;
        let end = states.last();
        let (d2, gv) = sq_dist_grad_vertices(&end[n..], tmpl.mesh().faces(), target, target_sq_norm, &state.varifold)?;
        let mut adj = vec![Vec3::zeros(); n];
        adj.extend(gv.iter().map(|g| g * state.beta));
        let fg = flow_points_backward(&path, &state.spatial, &states, adj);

        let q = f.nrows();
        let d_f = DMatrix::from_fn(q, f.ncols(), |s, col| fg.alphas[s][col / 3][col % 3]);
        let ind = &state.inducing;
        let a = c.b.transpose();
        let duw = c.b.clone() * &d_f;
        let mut hyper = KernelGrad::default();
        let mut d_a = &d_f * c.uw.transpose();
        let mut dq = DMatrix::zeros(ind.len(), ind.len());
        if let (Some(d), Some((r, jit))) = (noise, &c.residual) {
            dq = tril(&duw * d.u.transpose());
            let dr = tril(&d_f * d.f.transpose());
            let dm = cholesky_backward(r, &dr);
            hyper.log_variance += jit * dm.trace();
            d_a -= (&dm * &a) * 2.0;
            gram_backward(
                &self.grid,
                &c.zq,
                &self.grid,
                &c.zq,
                &state.gp,
                &self.kqq,
                &dm,
                &mut hyper,
                SideGrad { t: None, z: None },
                SideGrad { t: None, z: None },
            );
        }
        // B = L⁻¹ C with C = K_mq
        let d_b = d_a.transpose();
        let d_c = self.lmm.tr_solve_lower_triangular(&d_b).expect("non-singular factor");
        let dl = -tril(&d_c * c.b.transpose());
        let d_kqm = d_c.transpose();
        let mut d_zq = DMatrix::zeros(q, z.len());
        let mut d_times = vec![0.0; ind.len()];
        let mut d_latents = DMatrix::zeros(ind.len(), z.len());
        gram_backward(
            &self.grid,
            &c.zq,
            &ind.times,
            &ind.latents,
            &state.gp,
            &c.kqm,
            &d_kqm,
            &mut hyper,
            SideGrad { t: None, z: Some(&mut d_zq) },
            SideGrad { t: Some(&mut d_times), z: Some(&mut d_latents) },
        );
        let dz = (0..z.len()).map(|col| d_zq.column(col).sum()).collect();
        Ok(ShapeGrad {
            data: state.beta * d2,
            sq_dist: d2,
            hyper,
            d_sigma_v: fg.sigma_v,
            d_times,
            d_latents,
            dv: duw,
            dq,
            dl,
            dz,
        })
    }
}

/// Negative ELBO over `batch` (indices into `data`) with one draw per
/// batch member, and its gradient in the [`GpdssmState::to_params`] layout.
pub fn elbo<E: Executor>(
    state: &GpdssmState,
    data: &TrainingData,
    batch: &[usize],
    draws: &[ShapeDraws],
    exec: &E,
) -> Result<(ElboTerms, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if draws.len() != batch.len() {
        return Err(Error::InvalidParam("one draw per batch member is required".into()));
    }
    if state.latents.len() != data.len() {
        return Err(Error::InvalidParam("latent count differs from training-set size".into()));
    }
    let fwd = Forward::new(state)?;
    let results = exec.map(batch.len(), |b| {
        let s = batch[b];
        let dist = &state.latents[s];
        let z: Vec<f64> = (0..dist.dim()).map(|c| dist.mean[c] + dist.sd[c] * draws[b].z[c]).collect();
        fwd.shape(state, &data.reprs[s], data.sq_norms[s], &z, Some(&draws[b]))
            .map_err(|e| e.for_shape(data.ids[s].clone()))
    });

    let l = state.layout();
    let scale = data.len() as f64 / batch.len() as f64;
    let mut grad = vec![0.0; l.total];
    let mut hyper = KernelGrad::default();
    let mut d_sigma_v = 0.0;
    let mut dv = DMatrix::zeros(l.m, l.d);
    let mut dq = DMatrix::zeros(l.m, l.m);
    let mut dl = DMatrix::zeros(l.m, l.m);
    let mut d_times = vec![0.0; l.m];
    let mut d_latents = DMatrix::zeros(l.m, l.k);
    let mut terms = ElboTerms { data: 0.0, kl_z: 0.0, kl_u: kl_whitened_inducing(&state.inducing) };
    for (b, r) in results.into_iter().enumerate() {
        let g = r?;
        let s = batch[b];
        let dist = &state.latents[s];
        terms.data += scale * g.data;
        terms.kl_z += scale * kl_gaussian_diag(dist);
        hyper.log_variance += scale * g.hyper.log_variance;
        hyper.log_length_t += scale * g.hyper.log_length_t;
        hyper.log_length_z += scale * g.hyper.log_length_z;
        d_sigma_v += scale * g.d_sigma_v;
        dv += g.dv * scale;
        dq += g.dq * scale;
        dl += g.dl * scale;
        d_latents += g.d_latents * scale;
        for i in 0..l.m {
            d_times[i] += scale * g.d_times[i];
        }
        for c in 0..l.k {
            let sd = dist.sd[c];
            let dz = g.dz[c];
            grad[l.mu(s, c)] += scale * (dz + dist.mean[c]);
            grad[l.rho(s, c)] += scale * (dz * draws[b].z[c] * sd + sd * sd - 1.0);
        }
    }

    let ind = &state.inducing;
    let dkmm = cholesky_backward(&fwd.lmm, &dl);
    hyper.log_variance += fwd.jitter_mm * dkmm.trace();
    let mut d_times2 = vec![0.0; l.m];
    let mut d_latents2 = DMatrix::zeros(l.m, l.k);
    gram_backward(
        &ind.times,
        &ind.latents,
        &ind.times,
        &ind.latents,
        &state.gp,
        &fwd.kmm,
        &dkmm,
        &mut hyper,
        SideGrad { t: Some(&mut d_times), z: Some(&mut d_latents) },
        SideGrad { t: Some(&mut d_times2), z: Some(&mut d_latents2) },
    );
    d_latents += d_latents2;
    dv += &ind.q_mean;
    dq += (&ind.q_chol - DMatrix::from_fn(l.m, l.m, |i, j| if i == j { 1.0 / ind.q_chol[(i, i)] } else { 0.0 })) * l.d as f64;

    grad[0] = hyper.log_variance;
    grad[1] = hyper.log_length_t;
    grad[2] = hyper.log_length_z;
    grad[3] = if state.optimize_sigma_v { d_sigma_v * state.spatial.sigma_v } else { 0.0 };
    for i in 0..l.m {
        grad[l.times + i] = d_times[i] + d_times2[i];
        for c in 0..l.k {
            grad[l.ind_latent(i, c)] = d_latents[(i, c)];
        }
        for d in 0..l.d {
            grad[l.v(i, d)] = dv[(i, d)];
        }
        for j in 0..i {
            grad[l.q(i, j)] = dq[(i, j)];
        }
        grad[l.q(i, i)] = dq[(i, i)] * ind.q_chol[(i, i)];
    }
    Ok((terms, grad))
}

/// Stochastic-optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub iters: usize,
    /// Shapes per step; 0 or anything ≥ N means the full set.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { lr: 0.02, iters: 300, batch_size: 0, seed: 0 }
    }
}

/// Random stream for step `iter`: the same for every executor.
fn step_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rng
}

/// Adam on the negative ELBO. Returns the state after the final step and
/// the loss recorded at every step (before its update).
pub fn fit<E: Executor>(
    mut state: GpdssmState,
    data: &TrainingData,
    cfg: &FitConfig,
    exec: &E,
) -> Result<(GpdssmState, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training shapes"));
    }
    let n = data.len();
    let mut params = state.to_params();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), params.len());
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut above = 0usize;
    for iter in 0..cfg.iters {
        let mut rng = step_rng(cfg.seed, iter);
        let batch: Vec<usize> = if cfg.batch_size == 0 || cfg.batch_size >= n {
            (0..n).collect()
        } else {
            let mut b = index::sample(&mut rng, n, cfg.batch_size).into_vec();
            b.sort_unstable();
            b
        };
        let draws: Vec<ShapeDraws> = batch.iter().map(|_| ShapeDraws::sample(&state, &mut rng)).collect();
        let (terms, grad) = elbo(&state, data, &batch, &draws, exec)?;
        let loss = terms.total();
        trace.push(loss);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { iter, trace });
        }
        if loss > 10.0 * trace[0] {
            above += 1;
            if above >= 50 {
                return Err(Error::TrainingDiverged { iter, trace });
            }
        } else {
            above = 0;
        }
        adam.step(&mut params, &grad, 1.0);
        state.set_params(&params)?;
    }
    Ok((state, trace))
}

/// Settings for fitting `q(z*)` to a new shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub lr: f64,
    pub iters: usize,
    pub sd_init: f64,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { lr: 0.05, iters: 150, sd_init: 0.1, seed: 0 }
    }
}

/// Latent posterior for a new shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub posterior: GaussianDist,
    /// d²(S*, reconstruct(mean)).
    pub energy: f64,
}

/// Reconstructions of every training latent mean, used to seed inference.
pub fn training_reconstructions<E: Executor>(state: &GpdssmState, exec: &E) -> Result<Vec<VarifoldRepr>> {
    exec.map(state.latents.len(), |i| state.reconstruct(&state.latents[i].mean).map(|m| embed(&m)))
        .into_iter()
        .collect()
}

/// Fits `q(z*)` with every model parameter frozen. The data term uses the
/// posterior-mean momenta at each sampled `z*`; `seeds` are reconstructions
/// of the training latents (see [`training_reconstructions`]) and the
/// closest one supplies the starting mean.
pub fn infer_latent(
    state: &GpdssmState,
    mesh: &TriMesh,
    seeds: &[VarifoldRepr],
    cfg: &InferConfig,
) -> Result<Inference> {
    let k = state.latent_dim();
    let target = embed(mesh);
    let target_norm = sq_norm(&target, &state.varifold);
    let mut best = (f64::INFINITY, vec![0.0; k]);
    for (i, r) in seeds.iter().enumerate() {
        let d = varifold_sq_dist(&target, r, &state.varifold)?;
        if d < best.0 {
            best = (d, state.latents[i].mean.clone());
        }
    }
    let fwd = Forward::new(state)?;
    let mut params: Vec<f64> = best.1;
    params.extend(core::iter::repeat_n(cfg.sd_init.ln(), k));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), 2 * k);
    let mut grad = vec![0.0; 2 * k];
    for iter in 0..cfg.iters {
        let mut rng = step_rng(cfg.seed, iter);
        let eps: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..k).map(|c| params[c] + params[k + c].exp() * eps[c]).collect();
        let g = fwd.shape(state, &target, target_norm, &z, None)?;
        for c in 0..k {
            let sd = params[k + c].exp();
            grad[c] = g.dz[c] + params[c];
            grad[k + c] = g.dz[c] * eps[c] * sd + sd * sd - 1.0;
        }
        adam.step(&mut params, &grad, 1.0);
    }
    let posterior = GaussianDist::new(params[..k].to_vec(), params[k..].iter().map(|r| r.exp()).collect())?;
    let g = fwd.shape(state, &target, target_norm, &posterior.mean, None)?;
    Ok(Inference { posterior, energy: g.sq_dist })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cup::{generate_cup, CupParams};
    use crate::exec::Sequential;

    fn cup(depth: f64, seed: u64) -> TriMesh {
        generate_cup(&CupParams {
            rings: 4,
            sectors: 8,
            depth_scale: depth,
            radial_noise_sd: 0.2,
            seed,
            ..CupParams::default()
        })
        .unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig { latent_dim: 2, num_inducing: 5, num_control: 8, steps: 4, ..ModelConfig::default() }
    }

    fn setup(depths: &[f64]) -> (GpdssmState, TrainingData) {
        let meshes: Vec<TriMesh> = depths.iter().enumerate().map(|(i, &d)| cup(d, i as u64)).collect();
        let ids = (0..meshes.len()).map(|i| format!("s{i}")).collect();
        GpdssmState::initialize(ids, &meshes, &small_config(), &Sequential).unwrap()
    }

    #[test]
    fn params_round_trip() {
        let (state, _) = setup(&[0.9, 0.6, 0.7]);
        let p = state.to_params();
        let mut other = state.clone();
        other.set_params(&p).unwrap();
        let q = other.to_params();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn single_mesh_is_its_own_template() {
        let m = cup(0.9, 1);
        let (_, t) = select_template(core::slice::from_ref(&m), &VarifoldKernel::for_template(&m), 5, &Sequential).unwrap();
        assert_eq!(t.mesh(), &m);
    }

    #[test]
    fn zero_draws_at_prior_reduce_to_template_distances() {
        let (mut state, data) = setup(&[0.9, 0.6, 0.75]);
        for l in &mut state.latents {
            l.mean.iter_mut().for_each(|m| *m = 0.0);
            l.sd.iter_mut().for_each(|s| *s = 1.0);
        }
        let draws: Vec<ShapeDraws> = (0..3).map(|_| ShapeDraws::zeros(&state)).collect();
        let (terms, _) = elbo(&state, &data, &[0, 1, 2], &draws, &Sequential).unwrap();
        let t = embed(state.template.mesh());
        let direct: f64 = data.reprs.iter().map(|r| state.beta * varifold_sq_dist(r, &t, &state.varifold).unwrap()).sum();
        assert!((terms.data - direct).abs() <= 1e-6 * direct.max(1.0));
        assert_eq!(terms.kl_z, 0.0);
        assert_eq!(terms.kl_u, 0.0);
        assert!((terms.total() - direct).abs() <= 1e-6 * direct.max(1.0));
    }

    #[test]
    fn duplicated_shape_doubles_its_contribution() {
        let (state, data) = setup(&[0.9, 0.6]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<ShapeDraws> = (0..2).map(|_| ShapeDraws::sample(&state, &mut rng)).collect();
        let (base, _) = elbo(&state, &data, &[0, 1], &draws, &Sequential).unwrap();

        let mut dup_state = state.clone();
        dup_state.latents.push(state.latents[1].clone());
        let mut dup = data.clone();
        dup.ids.push("s1-copy".into());
        dup.reprs.push(data.reprs[1].clone());
        dup.sq_norms.push(data.sq_norms[1]);
        let dup_draws = [draws[0].clone(), draws[1].clone(), draws[1].clone()];
        let (more, _) = elbo(&dup_state, &dup, &[0, 1, 2], &dup_draws, &Sequential).unwrap();

        let (only, _) = elbo(&state, &data, &[1], &draws[1..], &Sequential).unwrap();
        let single = only.data / 2.0;
        assert!((more.data - base.data - single).abs() < 1e-9 * base.data);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut state, data) = setup(&[0.95, 0.55, 0.75]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // move off the symmetric initial point so every block is active
        let mut p = state.to_params();
        for v in p.iter_mut().skip(4) {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        state.set_params(&p).unwrap();
        let batch = [0, 2];
        let draws: Vec<ShapeDraws> = batch.iter().map(|_| ShapeDraws::sample(&state, &mut rng)).collect();
        let (_, grad) = elbo(&state, &data, &batch, &draws, &Sequential).unwrap();
        let f = |p: &[f64]| {
            let mut s = state.clone();
            s.set_params(p).unwrap();
            elbo(&s, &data, &batch, &draws, &Sequential).unwrap().0.total()
        };
        let l = state.layout();
        let mut coords: Vec<usize> = vec![0, 1, 2, 3, l.times + 1, l.ind_latent(2, 1), l.v(3, 5), l.q(2, 2), l.q(3, 1), l.mu(0, 1), l.rho(2, 0)];
        while coords.len() < 20 {
            coords.push(rng.random_range(0..l.total));
        }
        for &i in &coords {
            let h = 1e-5 * (1.0 + p[i].abs());
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-3, "coordinate {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (state, data) = setup(&[0.9, 0.6, 0.8]);
        let cfg = FitConfig { lr: 0.0, iters: 5, batch_size: 0, seed: 3 };
        let (after, trace) = fit(state.clone(), &data, &cfg, &Sequential).unwrap();
        assert_eq!(after.to_params(), state.to_params());
        assert_eq!(trace.len(), 5);
        let (_, again) = fit(state, &data, &cfg, &Sequential).unwrap();
        assert_eq!(trace, again);
    }

    #[test]
    fn far_latent_reconstructs_template() {
        let (mut state, data) = setup(&[0.9, 0.6, 0.8]);
        let (s, _) = fit(state.clone(), &data, &FitConfig { iters: 20, ..FitConfig::default() }, &Sequential).unwrap();
        state = s;
        let far = vec![20.0 * state.gp.length_z + 50.0; state.latent_dim()];
        let rec = state.reconstruct(&far).unwrap();
        let t = embed(state.template.mesh());
        let d = varifold_sq_dist(&embed(&rec), &t, &state.varifold).unwrap();
        assert!(d < 1e-3 * sq_norm(&t, &state.varifold), "{d}");
        assert_eq!(state.reconstruct(&far).unwrap(), rec);
    }
}
