//! Binary classifiers over latent embeddings and radiographic angles.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::median;
use crate::optim::{Adam, AdamConfig};

fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        -(-f).exp().ln_1p()
    } else {
        f - f.exp().ln_1p()
    }
}

fn check_labels(labels: &[bool]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::SingleClass);
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Initial hyperparameters and ascent schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpClassifierConfig {
    pub variance: f64,
    /// Upper bound for the variance during ascent.
    pub max_variance: f64,
    /// `None` uses the median pairwise distance of the inputs.
    pub lengthscale: Option<f64>,
    pub iters: usize,
    pub lr: f64,
}

impl Default for GpClassifierConfig {
    fn default() -> Self {
        Self { variance: 4.0, max_variance: 16.0, lengthscale: None, iters: 50, lr: 0.1 }
    }
}

/// Laplace-approximated GP classifier with a logistic likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct GpClassifier {
    inputs: Vec<Vec<f64>>,
    labels: Vec<bool>,
    variance: f64,
    lengthscale: f64,
    /// `t − π(f̂)` at the mode.
    grad_log_lik: DVector<f64>,
    sqrt_w: DVector<f64>,
    /// Lower factor of `I + W^½ K W^½`.
    chol_b: DMatrix<f64>,
}

struct Mode {
    f: DVector<f64>,
    a: DVector<f64>,
    sqrt_w: DVector<f64>,
    l: DMatrix<f64>,
    log_q: f64,
}

fn kernel_matrix(x: &[Vec<f64>], variance: f64, ls: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let d2 = DMatrix::from_fn(n, n, |i, j| sq_dist(&x[i], &x[j]));
    let k = d2.map(|d| variance * (-0.5 * d / (ls * ls)).exp());
    (k, d2)
}

fn targets(labels: &[bool]) -> DVector<f64> {
    DVector::from_iterator(labels.len(), labels.iter().map(|&l| if l { 1.0 } else { 0.0 }))
}

fn chol_lower(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::<f64, Dyn>::new(m).map(|c| c.l()).ok_or(Error::Conditioning { jitter: 0.0 })
}

/// Newton iterations for the posterior mode.
fn find_mode(k: &DMatrix<f64>, t: &DVector<f64>) -> Result<Mode> {
    let n = t.len();
    let psi = |f: &DVector<f64>, a: &DVector<f64>| -> f64 {
        -0.5 * a.dot(f) + f.iter().zip(t.iter()).map(|(&fi, &ti)| log_sigmoid(if ti > 0.5 { fi } else { -fi })).sum::<f64>()
    };
    let mut f = DVector::zeros(n);
    let mut a = DVector::zeros(n);
    let mut obj = psi(&f, &a);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..100 {
        let pi = f.map(sigmoid);
        let w = pi.map(|p| p * (1.0 - p));
        let sw = w.map(f64::sqrt);
        let b_mat = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]);
        let l = chol_lower(b_mat)?;
        let g = t - &pi;
        let b = w.component_mul(&f) + &g;
        let kb = k * &b;
        let rhs = sw.component_mul(&kb);
        let y = l.solve_lower_triangular(&rhs).expect("triangular");
        let z = l.transpose().solve_upper_triangular(&y).expect("triangular");
        let a_new = b - sw.component_mul(&z);
        // ∇Ψ = ∇log p − K⁻¹f
        grad_norm = (&g - &a).norm();
        if grad_norm < 1e-8 * (1.0 + a.norm() + g.norm()) {
            return finish_mode(k, t, f, obj);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let a_try = &a + (&a_new - &a) * step;
            let f_try = k * &a_try;
            let o = psi(&f_try, &a_try);
            if o >= obj {
                a = a_try;
                f = f_try;
                obj = o;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if grad_norm < 1e-6 * (1.0 + a.norm() + g.norm()) {
                return finish_mode(k, t, f, obj);
            }
            break;
        }
    }
    Err(Error::NewtonNonConvergence { grad_norm })
}

fn finish_mode(k: &DMatrix<f64>, t: &DVector<f64>, f: DVector<f64>, psi: f64) -> Result<Mode> {
    let n = t.len();
    let pi = f.map(sigmoid);
    let sqrt_w = pi.map(|p| (p * (1.0 - p)).sqrt());
    let l = chol_lower(DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |i, j| sqrt_w[i] * k[(i, j)] * sqrt_w[j]))?;
    let a = t - &pi;
    let log_q = psi - l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(Mode { f, a, sqrt_w, l, log_q })
}

/// Approximate log marginal likelihood and its gradient in
/// `(log variance, log lengthscale)`.
fn log_marginal(x: &[Vec<f64>], t: &DVector<f64>, variance: f64, ls: f64) -> Result<(f64, [f64; 2], Mode)> {
    let n = t.len();
    let (k, d2) = kernel_matrix(x, variance, ls);
    let mode = find_mode(&k, t)?;
    let sw = &mode.sqrt_w;
    let l = &mode.l;
    let diag_sw = DMatrix::from_diagonal(sw);
    let lt = l.transpose();
    let r = &diag_sw * lt.solve_upper_triangular(&l.solve_lower_triangular(&diag_sw).expect("tri")).expect("tri");
    let c = l.solve_lower_triangular(&(&diag_sw * &k)).expect("tri");
    let pi = mode.f.map(sigmoid);
    let third = pi.map(|p| -p * (1.0 - p) * (1.0 - 2.0 * p));
    let s2 = DVector::from_fn(n, |i, _| 0.5 * (k[(i, i)] - c.column(i).norm_squared()) * third[i]);
    let dk_dls = DMatrix::from_fn(n, n, |i, j| k[(i, j)] * d2[(i, j)] / (ls * ls));
    let mut grad = [0.0; 2];
    for (g, dk) in grad.iter_mut().zip([&k, &dk_dls]) {
        let s1 = 0.5 * mode.a.dot(&(dk * &mode.a)) - 0.5 * (&r * dk).trace();
        let b = dk * &mode.a;
        let s3 = &b - &k * (&r * &b);
        *g = s1 + s2.dot(&s3);
    }
    Ok((mode.log_q, grad, mode))
}

pub fn fit_gp_classifier(inputs: &[Vec<f64>], labels: &[bool], cfg: &GpClassifierConfig) -> Result<GpClassifier> {
    check_labels(labels)?;
    if inputs.len() != labels.len() {
        return Err(Error::InvalidParam(alloc::format!("{} inputs but {} labels", inputs.len(), labels.len())));
    }
    let dim = inputs[0].len();
    if dim == 0 || inputs.iter().any(|z| z.len() != dim || z.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidParam("inputs must be finite vectors of equal positive length".into()));
    }
    if !(cfg.variance > 0.0 && cfg.max_variance >= cfg.variance) {
        return Err(Error::InvalidParam("classifier variance must be positive and below its cap".into()));
    }
    let ls0 = match cfg.lengthscale {
        Some(l) if l > 0.0 => l,
        Some(_) => return Err(Error::InvalidParam("classifier lengthscale must be positive".into())),
        None => {
            let mut d = Vec::new();
            for i in 0..inputs.len() {
                for j in 0..i {
                    d.push(sq_dist(&inputs[i], &inputs[j]).sqrt());
                }
            }
            let m = median(&d);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let t = targets(labels);
    let (lo, hi) = ([(cfg.variance * 1e-2).ln(), (ls0 * 0.05).ln()], [cfg.max_variance.ln(), (ls0 * 20.0).ln()]);
    let mut theta = vec![cfg.variance.ln(), ls0.ln()];
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), 2);
    for _ in 0..cfg.iters {
        let (_, g, _) = log_marginal(inputs, &t, theta[0].exp(), theta[1].exp())?;
        adam.step(&mut theta, &[-g[0], -g[1]], 1.0);
        for c in 0..2 {
            theta[c] = theta[c].clamp(lo[c], hi[c]);
        }
    }
    let (variance, lengthscale) = (theta[0].exp(), theta[1].exp());
    let (_, _, mode) = log_marginal(inputs, &t, variance, lengthscale)?;
    Ok(GpClassifier {
        inputs: inputs.to_vec(),
        labels: labels.to_vec(),
        variance,
        lengthscale,
        grad_log_lik: mode.a,
        sqrt_w: mode.sqrt_w,
        chol_b: mode.l,
    })
}

impl GpClassifier {
    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// Predictive latent mean and variance at `z`.
    pub fn latent_moments(&self, z: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|x| self.variance * (-0.5 * sq_dist(x, z) / (self.lengthscale * self.lengthscale)).exp()),
        );
        let mean = ks.dot(&self.grad_log_lik);
        let v = self.chol_b.solve_lower_triangular(&self.sqrt_w.component_mul(&ks)).expect("triangular");
        (mean, (self.variance - v.norm_squared()).max(0.0))
    }

    /// Probit-approximated predictive probability of the positive class.
    pub fn predict_proba(&self, z: &[f64]) -> f64 {
        let (m, v) = self.latent_moments(z);
        let kappa = 1.0 / (1.0 + core::f64::consts::PI * v / 8.0).sqrt();
        sigmoid(kappa * m)
    }
}

/// Radiographic angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRecord {
    pub lcea: f64,
    pub ai: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleClass {
    Dysplastic,
    Borderline,
    Control,
}

impl AngleRecord {
    pub fn new(lcea: f64, ai: f64) -> Result<Self> {
        if !(lcea.is_finite() && ai.is_finite()) {
            return Err(Error::InvalidParam("angles must be finite".into()));
        }
        Ok(Self { lcea, ai })
    }

    /// Whether the angles fall inside the clinically plausible band.
    pub fn is_plausible(&self) -> bool {
        self.lcea > -30.0 && self.lcea < 80.0 && self.ai > -20.0 && self.ai < 60.0
    }
}

pub fn angle_rule(rec: &AngleRecord) -> AngleClass {
    if rec.lcea < 20.0 || rec.ai > 15.0 {
        AngleClass::Dysplastic
    } else if rec.lcea > 25.0 {
        AngleClass::Control
    } else {
        AngleClass::Borderline
    }
}

/// Logistic regression on standardised `(lcea, ai)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleScorer {
    mean: [f64; 2],
    scale: [f64; 2],
    /// Intercept then the two feature weights.
    pub coef: [f64; 3],
    /// Set when the unpenalised fit did not exist and the ridge fallback was used.
    pub regularized: bool,
}

const RIDGE_FALLBACK: f64 = 1e-4;

fn irls(x: &[[f64; 2]], y: &[f64], lambda: f64) -> Option<[f64; 3]> {
    let mut w = DVector::<f64>::zeros(3);
    for _ in 0..100 {
        let mut h = DMatrix::<f64>::zeros(3, 3);
        let mut g = DVector::<f64>::zeros(3);
        for (xi, &yi) in x.iter().zip(y) {
            let row = [1.0, xi[0], xi[1]];
            let p = sigmoid(w[0] + w[1] * xi[0] + w[2] * xi[1]);
            let s = p * (1.0 - p);
            for a in 0..3 {
                g[a] += (yi - p) * row[a];
                for b in 0..3 {
                    h[(a, b)] += s * row[a] * row[b];
                }
            }
        }
        for a in 1..3 {
            g[a] -= lambda * w[a];
            h[(a, a)] += lambda;
        }
        let step = Cholesky::new(h)?.solve(&g);
        w += &step;
        if !w.iter().all(|v| v.is_finite()) || w.norm() > 1e8 {
            return None;
        }
        if step.norm() < 1e-10 * (1.0 + w.norm()) {
            return Some([w[0], w[1], w[2]]);
        }
    }
    None
}

pub fn fit_angle_score(records: &[AngleRecord], labels: &[bool]) -> Result<AngleScorer> {
    check_labels(labels)?;
    if records.len() != labels.len() {
        return Err(Error::InvalidParam(alloc::format!("{} records but {} labels", records.len(), labels.len())));
    }
    let n = records.len() as f64;
    let raw: Vec<[f64; 2]> = records.iter().map(|r| [r.lcea, r.ai]).collect();
    let mut mean = [0.0; 2];
    let mut scale = [0.0; 2];
    for c in 0..2 {
        mean[c] = raw.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = raw.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
        scale[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let x: Vec<[f64; 2]> = raw.iter().map(|r| [(r[0] - mean[0]) / scale[0], (r[1] - mean[1]) / scale[1]]).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let (coef, regularized) = match irls(&x, &y, 0.0) {
        Some(c) => (c, false),
        None => (irls(&x, &y, RIDGE_FALLBACK).ok_or(Error::NewtonNonConvergence { grad_norm: f64::NAN })?, true),
    };
    Ok(AngleScorer { mean, scale, coef, regularized })
}

impl AngleScorer {
    pub fn predict_proba(&self, rec: &AngleRecord) -> f64 {
        let a = (rec.lcea - self.mean[0]) / self.scale[0];
        let b = (rec.ai - self.mean[1]) / self.scale[1];
        sigmoid(self.coef[0] + self.coef[1] * a + self.coef[2] * b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn clusters(rng: &mut ChaCha8Rng, per: usize, sep: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let nd = Normal::new(0.0, 0.3).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in [false, true] {
            let cx = if c { sep / 2.0 } else { -sep / 2.0 };
            for _ in 0..per {
                x.push(vec![cx + nd.sample(rng), nd.sample(rng)]);
                y.push(c);
            }
        }
        (x, y)
    }

    fn auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (s1, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
            for (s0, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
                den += 1.0;
                num += if s1 > s0 { 1.0 } else if s1 == s0 { 0.5 } else { 0.0 };
            }
        }
        num / den
    }

    #[test]
    fn marginal_likelihood_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = clusters(&mut rng, 6, 1.0);
        let t = targets(&y);
        let (_, g, _) = log_marginal(&x, &t, 2.0, 0.7).unwrap();
        let h = 1e-5;
        let f = |lv: f64, ll: f64| log_marginal(&x, &t, lv.exp(), ll.exp()).unwrap().0;
        let (lv, ll) = (2.0f64.ln(), 0.7f64.ln());
        let fd = [(f(lv + h, ll) - f(lv - h, ll)) / (2.0 * h), (f(lv, ll + h) - f(lv, ll - h)) / (2.0 * h)];
        for c in 0..2 {
            assert!((fd[c] - g[c]).abs() < 1e-5 * fd[c].abs().max(1e-2), "{fd:?} vs {g:?}");
        }
    }

    #[test]
    fn separable_clusters_are_fitted_confidently() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // cluster gap is about five initial lengthscales
        let (x, y) = clusters(&mut rng, 25, 7.0);
        let clf = fit_gp_classifier(&x, &y, &GpClassifierConfig { lengthscale: Some(1.0), ..Default::default() }).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            let p = clf.predict_proba(xi);
            let correct = if yi { p } else { 1.0 - p };
            assert!(correct > 0.9, "{p} for {yi}");
        }
        let far = clf.predict_proba(&[0.0, 20.0 * clf.lengthscale()]);
        assert!(far > 0.3 && far < 0.7);
        let mut last = 0.0;
        for s in 0..=20 {
            let p = clf.predict_proba(&[-3.5 + 7.0 * s as f64 / 20.0, 0.0]);
            assert!(p >= last - 1e-12);
            last = p;
        }
    }

    #[test]
    fn flipped_labels_mirror_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = clusters(&mut rng, 8, 1.5);
        let flipped: Vec<bool> = y.iter().map(|l| !l).collect();
        let cfg = GpClassifierConfig::default();
        let a = fit_gp_classifier(&x, &y, &cfg).unwrap();
        let b = fit_gp_classifier(&x, &flipped, &cfg).unwrap();
        for _ in 0..20 {
            let q = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            assert!((a.predict_proba(&q) + b.predict_proba(&q) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_pair_is_undecided_at_origin() {
        let clf = fit_gp_classifier(&[vec![-1.0], vec![1.0]], &[false, true], &GpClassifierConfig::default()).unwrap();
        assert!((clf.predict_proba(&[0.0]) - 0.5).abs() < 1e-6);
        assert!(clf.predict_proba(&[1.0]) > 0.5);
    }

    #[test]
    fn classifier_rejects_single_class() {
        assert!(matches!(
            fit_gp_classifier(&[vec![0.0], vec![1.0]], &[true, true], &GpClassifierConfig::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn angle_rule_examples() {
        assert_eq!(angle_rule(&AngleRecord::new(15.7, 19.1).unwrap()), AngleClass::Dysplastic);
        assert_eq!(angle_rule(&AngleRecord::new(30.0, 5.0).unwrap()), AngleClass::Control);
        assert_eq!(angle_rule(&AngleRecord::new(22.0, 12.0).unwrap()), AngleClass::Borderline);
        assert_eq!(angle_rule(&AngleRecord::new(30.0, 16.0).unwrap()), AngleClass::Dysplastic);
        assert!(AngleRecord::new(f64::NAN, 1.0).is_err());
        assert!(!AngleRecord::new(95.0, 1.0).unwrap().is_plausible());
    }

    fn angle_data(rng: &mut ChaCha8Rng, n: usize, informative: bool) -> (Vec<AngleRecord>, Vec<bool>) {
        let nd = Normal::new(0.0, 1.0).unwrap();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let recs = labels
            .iter()
            .map(|&l| {
                let lab = if informative && l { 1.0 } else { 0.0 };
                AngleRecord::new(30.0 - 15.0 * lab + nd.sample(rng), 10.0 + 3.0 * nd.sample(rng)).unwrap()
            })
            .collect();
        (recs, labels)
    }

    #[test]
    fn angle_score_tracks_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (recs, labels) = angle_data(&mut rng, 200, true);
        let s = fit_angle_score(&recs, &labels).unwrap();
        let scores: Vec<f64> = recs.iter().map(|r| s.predict_proba(r)).collect();
        assert!(auc(&scores, &labels) > 0.99);

        let (recs, labels) = angle_data(&mut rng, 200, false);
        let s = fit_angle_score(&recs, &labels).unwrap();
        assert!(!s.regularized);
        let scores: Vec<f64> = recs.iter().map(|r| s.predict_proba(r)).collect();
        let a = auc(&scores, &labels);
        assert!(a > 0.4 && a < 0.6, "{a}");

        let scaled: Vec<AngleRecord> = recs.iter().map(|r| AngleRecord::new(10.0 * r.lcea, 10.0 * r.ai).unwrap()).collect();
        let s2 = fit_angle_score(&scaled, &labels).unwrap();
        for (r, q) in recs.iter().zip(&scaled) {
            assert!((s.predict_proba(r) - s2.predict_proba(q)).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_separation_uses_ridge() {
        let recs: Vec<AngleRecord> = (0..10).map(|i| AngleRecord::new(10.0 + 3.0 * i as f64, 10.0).unwrap()).collect();
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let s = fit_angle_score(&recs, &labels).unwrap();
        assert!(s.regularized);
        assert!(s.predict_proba(&recs[0]) > 0.99);
        assert!(s.predict_proba(&recs[9]) < 0.01);
    }
}
