//! Separable Gaussian-process kernels over (time, latent), whitened sparse
//! conditioning on inducing points, and the KL terms of the variational
//! objective.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `σ²·exp(-Δt²/2ℓ_t²)·exp(-|Δz|²/2ℓ_z²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpKernelParams {
    pub variance: f64,
    pub length_t: f64,
    pub length_z: f64,
}

impl GpKernelParams {
    pub fn new(variance: f64, length_t: f64, length_z: f64) -> Result<Self> {
        for (name, v) in [("variance", variance), ("length_t", length_t), ("length_z", length_z)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!("GP kernel {name} must be positive, got {v}")));
            }
        }
        Ok(Self { variance, length_t, length_z })
    }

    pub fn jitter(&self) -> f64 {
        1e-6 * self.variance
    }
}

pub fn kernel_tz(ta: f64, za: &[f64], tb: f64, zb: &[f64], p: &GpKernelParams) -> f64 {
    let dt = ta - tb;
    let dz2: f64 = za.iter().zip(zb).map(|(a, b)| (a - b) * (a - b)).sum();
    p.variance * (-0.5 * dt * dt / (p.length_t * p.length_t) - 0.5 * dz2 / (p.length_z * p.length_z)).exp()
}

/// Gram matrix between two point sets; latent coordinates are matrix rows.
pub fn gram(ta: &[f64], za: &DMatrix<f64>, tb: &[f64], zb: &DMatrix<f64>, p: &GpKernelParams) -> DMatrix<f64> {
    DMatrix::from_fn(ta.len(), tb.len(), |i, j| {
        let dz2 = (za.row(i) - zb.row(j)).norm_squared();
        let dt = ta[i] - tb[j];
        p.variance * (-0.5 * dt * dt / (p.length_t * p.length_t) - 0.5 * dz2 / (p.length_z * p.length_z)).exp()
    })
}

/// Gradient w.r.t. the log kernel hyperparameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct KernelGrad {
    pub log_variance: f64,
    pub log_length_t: f64,
    pub log_length_z: f64,
}

/// Input gradients for one side of a Gram matrix.
pub(crate) struct SideGrad<'a> {
    pub t: Option<&'a mut [f64]>,
    pub z: Option<&'a mut DMatrix<f64>>,
}

/// Backpropagates `dk` through `k = gram(ta, za, tb, zb, p)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gram_backward(
    ta: &[f64],
    za: &DMatrix<f64>,
    tb: &[f64],
    zb: &DMatrix<f64>,
    p: &GpKernelParams,
    k: &DMatrix<f64>,
    dk: &DMatrix<f64>,
    hyper: &mut KernelGrad,
    mut side_a: SideGrad<'_>,
    mut side_b: SideGrad<'_>,
) {
    let ilt2 = 1.0 / (p.length_t * p.length_t);
    let ilz2 = 1.0 / (p.length_z * p.length_z);
    let dim = za.ncols();
    for i in 0..ta.len() {
        for j in 0..tb.len() {
            let w = dk[(i, j)] * k[(i, j)];
            if w == 0.0 {
                continue;
            }
            let dt = ta[i] - tb[j];
            let mut dz2 = 0.0;
            for c in 0..dim {
                let d = za[(i, c)] - zb[(j, c)];
                dz2 += d * d;
            }
            hyper.log_variance += w;
            hyper.log_length_t += w * dt * dt * ilt2;
            hyper.log_length_z += w * dz2 * ilz2;
            let gt = -w * dt * ilt2;
            if let Some(t) = side_a.t.as_deref_mut() {
                t[i] += gt;
            }
            if let Some(t) = side_b.t.as_deref_mut() {
                t[j] -= gt;
            }
            if side_a.z.is_some() || side_b.z.is_some() {
                for c in 0..dim {
                    let gz = -w * (za[(i, c)] - zb[(j, c)]) * ilz2;
                    if let Some(z) = side_a.z.as_deref_mut() {
                        z[(i, c)] += gz;
                    }
                    if let Some(z) = side_b.z.as_deref_mut() {
                        z[(j, c)] -= gz;
                    }
                }
            }
        }
    }
}

/// Cholesky factor of `k + jitter·I`, escalating the jitter ×10 up to twice.
/// Returns the factor and the jitter that succeeded.
pub(crate) fn jittered_cholesky(k: &DMatrix<f64>, base_jitter: f64) -> Result<(DMatrix<f64>, f64)> {
    let mut jitter = base_jitter;
    for _ in 0..3 {
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::Cholesky::new(a) {
            let l = c.unpack();
            if l.iter().all(|v| v.is_finite()) {
                return Ok((l, jitter));
            }
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning { jitter: jitter / 10.0 })
}

/// Symmetric gradient of a loss w.r.t. `A` given its gradient w.r.t.
/// `L = chol(A)`.
pub(crate) fn cholesky_backward(l: &DMatrix<f64>, dl: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.transpose() * dl;
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // S = L⁻ᵀ P L⁻¹
    let x = l.tr_solve_lower_triangular(&p).expect("non-singular factor");
    let st = l.tr_solve_lower_triangular(&x.transpose()).expect("non-singular factor");
    (&st + st.transpose()) * 0.5
}

/// Zeroes the strict upper triangle.
pub(crate) fn tril(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            m[(i, j)] = 0.0;
        }
    }
    m
}

/// Inducing locations and the whitened posterior `q(V) = N(mean, L Lᵀ)`,
/// where `U = chol(K_mm)·V`. The factor is shared across output columns.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingState {
    pub times: Vec<f64>,
    /// `m × k`, one inducing latent per row.
    pub latents: DMatrix<f64>,
    /// `m × D`.
    pub q_mean: DMatrix<f64>,
    /// `m × m`, lower triangular with positive diagonal.
    pub q_chol: DMatrix<f64>,
}

impl InducingState {
    pub fn new(times: Vec<f64>, latents: DMatrix<f64>, q_mean: DMatrix<f64>, q_chol: DMatrix<f64>) -> Result<Self> {
        let m = times.len();
        if m == 0 {
            return Err(Error::EmptyInput("inducing points"));
        }
        if latents.nrows() != m || q_mean.nrows() != m || q_chol.shape() != (m, m) {
            return Err(Error::InvalidParam("inducing state shapes disagree".into()));
        }
        for i in 0..m {
            if !(q_chol[(i, i)] > 0.0) {
                return Err(Error::InvalidParam("inducing factor needs a positive diagonal".into()));
            }
            for j in (i + 1)..m {
                if q_chol[(i, j)] != 0.0 {
                    return Err(Error::InvalidParam("inducing factor must be lower triangular".into()));
                }
            }
        }
        Ok(Self { times, latents, q_mean, q_chol })
    }

    /// Times uniform on `[0, 1]`, latents standard normal, zero mean and
    /// factor `q_init·I`.
    pub fn initial<R: Rng + ?Sized>(m: usize, k: usize, outputs: usize, q_init: f64, rng: &mut R) -> Result<Self> {
        let times = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let latents = DMatrix::from_fn(m, k, |_, _| rng.sample(StandardNormal));
        Self::new(times, latents, DMatrix::zeros(m, outputs), DMatrix::identity(m, m) * q_init)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn outputs(&self) -> usize {
        self.q_mean.ncols()
    }
}

/// Sparse-GP predictive at query points.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    /// `q × D` predictive mean.
    pub mean: DMatrix<f64>,
    /// `q × q` predictive covariance, shared by every output column.
    pub cov: DMatrix<f64>,
    /// `A = K_qm L_mm⁻ᵀ`, mapping whitened inducing values to the queries.
    pub proj: DMatrix<f64>,
}

pub fn conditional_mean_cov(
    times: &[f64],
    latents: &DMatrix<f64>,
    ind: &InducingState,
    p: &GpKernelParams,
) -> Result<Conditional> {
    if latents.nrows() != times.len() || latents.ncols() != ind.latents.ncols() {
        return Err(Error::InvalidParam("query shapes disagree with inducing state".into()));
    }
    let kmm = gram(&ind.times, &ind.latents, &ind.times, &ind.latents, p);
    let (lmm, _) = jittered_cholesky(&kmm, p.jitter())?;
    let kqm = gram(times, latents, &ind.times, &ind.latents, p);
    let proj = lmm
        .solve_lower_triangular(&kqm.transpose())
        .expect("non-singular factor")
        .transpose();
    let mean = &proj * &ind.q_mean;
    let kqq = gram(times, latents, times, latents, p);
    let aq = &proj * &ind.q_chol;
    let mut cov = kqq - &proj * proj.transpose() + &aq * aq.transpose();
    for i in 0..cov.nrows() {
        // rounding can leave tiny negative variances
        if cov[(i, i)] < 0.0 && cov[(i, i)] > -1e-9 * p.variance {
            cov[(i, i)] = 0.0;
        }
    }
    Ok(Conditional { mean, cov, proj })
}

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl GaussianDist {
    pub fn new(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.len() != sd.len() {
            return Err(Error::InvalidParam("mean and sd lengths differ".into()));
        }
        if sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParam("standard deviations must be positive".into()));
        }
        Ok(Self { mean, sd })
    }

    pub fn standard(k: usize) -> Self {
        Self { mean: alloc::vec![0.0; k], sd: alloc::vec![1.0; k] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(q ‖ N(0, I))`.
pub fn kl_gaussian_diag(q: &GaussianDist) -> f64 {
    0.5 * q
        .mean
        .iter()
        .zip(&q.sd)
        .map(|(m, s)| s * s + m * m - 1.0 - 2.0 * s.ln())
        .sum::<f64>()
}

/// `KL(q(V) ‖ N(0, I))` summed over all output columns.
pub fn kl_whitened_inducing(ind: &InducingState) -> f64 {
    let m = ind.len() as f64;
    let d = ind.outputs() as f64;
    let log_det: f64 = (0..ind.len()).map(|i| ind.q_chol[(i, i)].ln()).sum();
    0.5 * ind.q_mean.norm_squared() + d * 0.5 * (ind.q_chol.norm_squared() - m - 2.0 * log_det)
}

/// `mean + sd ⊙ draws`.
pub fn sample_reparam(dist: &GaussianDist, draws: &[f64]) -> Result<Vec<f64>> {
    if draws.len() != dist.dim() {
        return Err(Error::InvalidParam(format!("{} draws for a {}-dimensional distribution", draws.len(), dist.dim())));
    }
    Ok(dist.mean.iter().zip(&dist.sd).zip(draws).map(|((m, s), e)| m + s * e).collect())
}

pub(crate) fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}
