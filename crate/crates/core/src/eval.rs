//! ROC analysis, confusion metrics, leave-one-out scoring, bootstrap
//! intervals, and the per-vertex statistics behind class-difference maps.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::gpdssm::GpdssmState;
use crate::linalg::sorted_symmetric_eigen;
use crate::mesh::{TriMesh, Vec3};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn require_both(labels: &[bool]) -> Result<()> {
    match class_counts(labels) {
        (0, _) | (_, 0) => Err(Error::SingleClass),
        _ => Ok(()),
    }
}

/// ROC curve through the unique score thresholds, highest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Mann–Whitney AUC with midranks for ties.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidParam("scores and labels differ in length".into()));
    }
    require_both(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let (np, nn) = class_counts(labels);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidParam("scores and labels differ in length".into()));
    }
    require_both(labels)?;
    let (np, nn) = class_counts(labels);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / nn as f64, tp as f64 / np as f64));
    }
    Ok(points)
}

/// Area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    Ok(Roc { points: roc_curve(scores, labels)?, auc: rank_auc(scores, labels)? })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub accuracy: f64,
    /// NaN when there are no positives.
    pub sensitivity: f64,
    /// NaN when there are no negatives.
    pub specificity: f64,
}

/// Scores at or above `threshold` count as positive (dysplastic).
pub fn confusion_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    Confusion {
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
    }
}

/// Held-out scores; `None` for folds skipped because their training part
/// had a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct Loocv {
    pub scores: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

impl Loocv {
    /// Scores and labels of the folds that ran.
    pub fn scored(&self, labels: &[bool]) -> (Vec<f64>, Vec<bool>) {
        self.scores.iter().zip(labels).filter_map(|(s, &l)| s.map(|s| (s, l))).unzip()
    }
}

/// Refits on all-but-one for every sample. `fit_predict(train, held_out)`
/// returns the held-out score.
pub fn loocv_scores<E, F>(labels: &[bool], fit_predict: F, exec: &E) -> Result<Loocv>
where
    E: Executor,
    F: Fn(&[usize], usize) -> Result<f64> + Sync + Send,
{
    let n = labels.len();
    if n < 3 {
        return Err(Error::InvalidParam("leave-one-out needs at least three samples".into()));
    }
    let out = exec.map(n, |i| {
        let train: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let tl: Vec<bool> = train.iter().map(|&j| labels[j]).collect();
        if require_both(&tl).is_err() {
            return Ok(None);
        }
        fit_predict(&train, i).map(Some)
    });
    let mut scores = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    for (i, r) in out.into_iter().enumerate() {
        let s = r?;
        if s.is_none() {
            skipped.push(i);
        }
        scores.push(s);
    }
    Ok(Loocv { scores, skipped })
}

/// Percentile interval with the replicate values it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub replicates: Vec<f64>,
    /// Replicates abandoned after ten single-class redraws.
    pub dropped: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Index resample containing both classes, or `None` after ten tries.
fn resample(labels: &[bool], rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let n = labels.len();
    for _ in 0..=10 {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let pos = idx.iter().filter(|&&i| labels[i]).count();
        if pos > 0 && pos < n {
            return Some(idx);
        }
    }
    None
}

fn interval(mut reps: Vec<f64>, dropped: usize) -> Result<BootstrapCi> {
    let mut sorted: Vec<f64> = reps.iter().copied().filter(|v| !v.is_nan()).collect();
    if sorted.is_empty() {
        return Err(Error::EmptyInput("bootstrap replicates"));
    }
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.025);
    let hi = quantile_sorted(&sorted, 0.975);
    reps.retain(|v| !v.is_nan());
    Ok(BootstrapCi { lo, hi, replicates: reps, dropped })
}

/// 95% percentile bootstrap of `metric` over `(score, label)` pairs.
pub fn bootstrap_ci<E, M>(scores: &[f64], labels: &[bool], metric: M, b: usize, seed: u64, exec: &E) -> Result<BootstrapCi>
where
    E: Executor,
    M: Fn(&[f64], &[bool]) -> f64 + Sync + Send,
{
    if b < 100 {
        return Err(Error::InvalidParam("bootstrap needs at least 100 replicates".into()));
    }
    require_both(labels)?;
    let reps = exec.map(b, |r| {
        let mut rng = replicate_rng(seed, r);
        resample(labels, &mut rng).map(|idx| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            metric(&s, &l)
        })
    });
    let dropped = reps.iter().filter(|r| r.is_none()).count();
    interval(reps.into_iter().flatten().collect(), dropped)
}

/// Paired bootstrap of `metric(a) − metric(b)` with shared resampled indices.
pub fn bootstrap_paired<E, M>(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
    metric: M,
    b: usize,
    seed: u64,
    exec: &E,
) -> Result<BootstrapCi>
where
    E: Executor,
    M: Fn(&[f64], &[bool]) -> f64 + Sync + Send,
{
    if scores_a.len() != scores_b.len() {
        return Err(Error::InvalidParam("paired score vectors differ in length".into()));
    }
    if b < 100 {
        return Err(Error::InvalidParam("bootstrap needs at least 100 replicates".into()));
    }
    require_both(labels)?;
    let reps = exec.map(b, |r| {
        let mut rng = replicate_rng(seed, r);
        resample(labels, &mut rng).map(|idx| {
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let a: Vec<f64> = idx.iter().map(|&i| scores_a[i]).collect();
            let bb: Vec<f64> = idx.iter().map(|&i| scores_b[i]).collect();
            metric(&a, &l) - metric(&bb, &l)
        })
    });
    let dropped = reps.iter().filter(|r| r.is_none()).count();
    interval(reps.into_iter().flatten().collect(), dropped)
}

/// AUC as a bootstrap metric (NaN on single-class input).
pub fn auc_metric(scores: &[f64], labels: &[bool]) -> f64 {
    rank_auc(scores, labels).unwrap_or(f64::NAN)
}

/// Coordinate-wise means of corresponding point sets, `(control, dysplastic)`.
pub fn class_average(sets: &[Vec<Vec3>], labels: &[bool]) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if sets.len() != labels.len() {
        return Err(Error::InvalidParam("point sets and labels differ in length".into()));
    }
    let n = sets.first().map_or(0, |s| s.len());
    if sets.iter().any(|s| s.len() != n) {
        return Err(Error::InvalidParam("point sets differ in cardinality".into()));
    }
    let mean = |want: bool, name: &'static str| -> Result<Vec<Vec3>> {
        let members: Vec<&Vec<Vec3>> = sets.iter().zip(labels).filter(|(_, &l)| l == want).map(|(s, _)| s).collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(name));
        }
        let c = members.len() as f64;
        Ok((0..n).map(|v| members.iter().fold(Vec3::zeros(), |acc, s| acc + s[v]) / c).collect())
    };
    Ok((mean(false, "control")?, mean(true, "dysplastic")?))
}

/// Benjamini–Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * (m as f64 / (rank + 1) as f64));
        adj[i] = running.min(1.0);
    }
    adj
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexStatMap {
    pub statistic: Vec<f64>,
    pub p_raw: Vec<f64>,
    pub p_adjusted: Vec<f64>,
    pub significant: Vec<bool>,
    pub alpha: f64,
}

fn abs_mean_diff(values: &[Vec<f64>], labels: &[bool], v: usize) -> f64 {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (row, &l) in values.iter().zip(labels) {
        if l {
            s1 += row[v];
            n1 += 1;
        } else {
            s0 += row[v];
            n0 += 1;
        }
    }
    (s1 / n1 as f64 - s0 / n0 as f64).abs()
}

/// Per-vertex permutation test of `|mean₁ − mean₀|`. `values[s][v]` is the
/// value of subject `s` at vertex `v`; every permutation relabels all
/// vertices at once.
pub fn permutation_map<E: Executor>(
    values: &[Vec<f64>],
    labels: &[bool],
    n_perm: usize,
    seed: u64,
    alpha: f64,
    exec: &E,
) -> Result<VertexStatMap> {
    if values.len() != labels.len() {
        return Err(Error::InvalidParam("values and labels differ in length".into()));
    }
    let (np, nn) = class_counts(labels);
    if np < 2 || nn < 2 {
        return Err(Error::InvalidParam("each group needs at least two subjects".into()));
    }
    if n_perm == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParam("need n_perm ≥ 1 and α in (0, 1)".into()));
    }
    let nv = values[0].len();
    if values.iter().any(|r| r.len() != nv) {
        return Err(Error::InvalidParam("subjects differ in vertex count".into()));
    }
    let observed: Vec<f64> = (0..nv).map(|v| abs_mean_diff(values, labels, v)).collect();
    let exceed = exec.map(n_perm, |j| {
        let mut rng = replicate_rng(seed, j);
        let mut perm = labels.to_vec();
        perm.shuffle(&mut rng);
        (0..nv)
            .map(|v| abs_mean_diff(values, &perm, v) >= observed[v] * (1.0 - 1e-12))
            .collect::<Vec<bool>>()
    });
    let mut counts = vec![0usize; nv];
    for e in &exceed {
        for (c, &x) in counts.iter_mut().zip(e) {
            *c += x as usize;
        }
    }
    let p_raw: Vec<f64> = counts.iter().map(|&c| (1 + c) as f64 / (1 + n_perm) as f64).collect();
    let p_adjusted = bh_adjust(&p_raw);
    let significant = p_adjusted.iter().map(|&p| p <= alpha).collect();
    Ok(VertexStatMap { statistic: observed, p_raw, p_adjusted, significant, alpha })
}

/// Uncentred PCA of per-vertex residual fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModes {
    /// `3V × r` orthonormal columns.
    pub modes: DMatrix<f64>,
    /// Mean squared projection on each mode.
    pub variances: Vec<f64>,
}

pub fn residual_modes(residuals: &[Vec<Vec3>]) -> Result<ResidualModes> {
    if residuals.is_empty() {
        return Err(Error::EmptyInput("residuals"));
    }
    let nv = residuals[0].len();
    if nv == 0 || residuals.iter().any(|r| r.len() != nv) {
        return Err(Error::InvalidParam("residual fields differ in vertex count".into()));
    }
    let n = residuals.len();
    let x = DMatrix::from_fn(n, 3 * nv, |i, c| residuals[i][c / 3][c % 3]);
    let (values, u) = sorted_symmetric_eigen(&(&x * x.transpose()));
    let tol = 1e-12 * values[0].max(f64::MIN_POSITIVE);
    let r = values.iter().take_while(|&&v| v > tol).count();
    let mut modes = DMatrix::zeros(3 * nv, r);
    for c in 0..r {
        let v = x.transpose() * u.column(c) / values[c].sqrt();
        modes.set_column(c, &v);
    }
    Ok(ResidualModes { modes, variances: values[..r].iter().map(|v| v / n as f64).collect() })
}

impl ResidualModes {
    pub fn mode(&self, c: usize) -> Vec<Vec3> {
        let col = self.modes.column(c);
        (0..col.len() / 3).map(|v| Vec3::new(col[3 * v], col[3 * v + 1], col[3 * v + 2])).collect()
    }
}

/// Top residual mode between controls and their nearest dysplastic
/// neighbour in latent space, with meshes at ±2 sd and a per-vertex
/// magnitude field.
#[derive(Debug, Clone)]
pub struct DysplasticModes {
    pub modes: ResidualModes,
    pub minus: TriMesh,
    pub plus: TriMesh,
    /// Template carrying the per-vertex displacement magnitude at 2 sd.
    pub heat: TriMesh,
}

pub fn dysplastic_mode_pca<E: Executor>(
    state: &GpdssmState,
    latents: &[Vec<f64>],
    labels: &[bool],
    exec: &E,
) -> Result<DysplasticModes> {
    if latents.len() != labels.len() {
        return Err(Error::InvalidParam("latents and labels differ in length".into()));
    }
    let controls: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let dys: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if controls.is_empty() {
        return Err(Error::EmptyClass("control"));
    }
    if dys.is_empty() {
        return Err(Error::EmptyClass("dysplastic"));
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let residuals = exec.map(controls.len(), |c| -> Result<Vec<Vec3>> {
        let zc = &latents[controls[c]];
        let nearest = dys
            .iter()
            .copied()
            .min_by(|&a, &b| sq(&latents[a], zc).total_cmp(&sq(&latents[b], zc)).then(a.cmp(&b)))
            .expect("non-empty");
        let d = state.reconstruct(&latents[nearest])?;
        let c = state.reconstruct(zc)?;
        Ok(d.vertices().iter().zip(c.vertices()).map(|(a, b)| a - b).collect())
    });
    let residuals: Vec<Vec<Vec3>> = residuals.into_iter().collect::<Result<_>>()?;
    let modes = residual_modes(&residuals)?;
    let template = state.template.mesh();
    if modes.variances.is_empty() {
        let zero = template.clone();
        return Ok(DysplasticModes {
            heat: template.clone().with_scalar(vec![0.0; template.num_vertices()])?,
            minus: zero.clone(),
            plus: zero,
            modes,
        });
    }
    let disp: Vec<Vec3> = modes.mode(0).iter().map(|v| v * (2.0 * modes.variances[0].sqrt())).collect();
    let shift = |sign: f64| template.with_vertices(template.vertices().iter().zip(&disp).map(|(p, d)| p + d * sign).collect());
    let heat = template.clone().with_scalar(disp.iter().map(|d| d.norm()).collect())?;
    Ok(DysplasticModes { minus: shift(-1.0), plus: shift(1.0), heat, modes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn auc_examples() {
        let l = [true, true, false, false];
        assert_eq!(rank_auc(&[0.9, 0.8, 0.3, 0.2], &l).unwrap(), 1.0);
        assert_eq!(rank_auc(&[0.9, 0.2, 0.8, 0.3], &l).unwrap(), 0.5);
        assert_eq!(rank_auc(&[0.4; 4], &l).unwrap(), 0.5);
        assert!(matches!(rank_auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        let roc = roc_auc(&[0.4; 4], &l).unwrap();
        assert_eq!(roc.points, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn trapezoid_agrees_with_rank_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.random_range(4..40);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let roc = roc_auc(&scores, &labels).unwrap();
            assert!((trapezoid(&roc.points) - roc.auc).abs() < 1e-10);
            assert!(roc.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        }
    }

    #[test]
    fn confusion_examples() {
        let labels = [true, true, false, false];
        let c = confusion_metrics(&[0.9, 0.8, 0.1, 0.2], &labels, 0.5);
        assert_eq!((c.accuracy, c.sensitivity, c.specificity), (1.0, 1.0, 1.0));
        let c = confusion_metrics(&[0.1; 4], &labels, 0.5);
        assert_eq!((c.accuracy, c.sensitivity, c.specificity), (0.5, 0.0, 1.0));
        // TP=4 FN=1 TN=3 FP=2
        let labels = [true, true, true, true, true, false, false, false, false, false];
        let scores = [0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4, 0.7, 0.9];
        let c = confusion_metrics(&scores, &labels, 0.5);
        assert!((c.sensitivity - 0.8).abs() < 1e-15);
        assert!((c.specificity - 0.6).abs() < 1e-15);
        assert!((c.accuracy - 0.7).abs() < 1e-15);
    }

    #[test]
    fn loocv_fold_count_and_order_invariance() {
        use core::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = [0.0, 1.0, 5.0];
        let labels = [false, true, true];
        let r = loocv_scores(
            &labels,
            |train, i| {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(train.iter().map(|&j| (x[j] - x[i]).abs()).sum())
            },
            &Sequential,
        )
        .unwrap();
        // the fold holding out sample 0 trains on positives only
        assert_eq!(r.skipped, vec![0]);
        assert_eq!(calls.load(Ordering::SeqCst), 2);

        let labels = [false, true, false, true, true];
        let x = [0.3, 2.0, -1.0, 4.0, 3.0];
        fn f(x: &[f64]) -> impl Fn(&[usize], usize) -> Result<f64> + Sync + Send + '_ {
            move |train: &[usize], i: usize| -> Result<f64> { Ok(train.iter().map(|&j| (x[j] - x[i]).powi(2)).sum()) }
        }
        let a = loocv_scores(&labels, f(&x), &Sequential).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let lp: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        let b = loocv_scores(&lp, f(&xp), &Sequential).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a.scores[i], b.scores[k]);
        }
        assert!(loocv_scores(&labels[..2], f(&x), &Sequential).is_err());
    }

    #[test]
    fn bootstrap_contracts() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1, 0.3];
        let labels = [true, true, true, false, false, false];
        let ci = bootstrap_ci(&scores, &labels, auc_metric, 500, 3, &Sequential).unwrap();
        assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
        assert!(bootstrap_ci(&scores, &labels, auc_metric, 50, 3, &Sequential).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nd = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..200 {
            let n = 30;
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let scores: Vec<f64> = labels.iter().map(|&l| nd.sample(&mut rng) + if l { 0.7 } else { 0.0 }).collect();
            let seed = rng.random();
            let ci = bootstrap_ci(&scores, &labels, auc_metric, 200, seed, &Sequential).unwrap();
            let point = auc_metric(&scores, &labels);
            assert!(ci.lo <= point && point <= ci.hi);
            let again = bootstrap_ci(&scores, &labels, auc_metric, 200, seed, &Sequential).unwrap();
            assert_eq!(ci, again);
        }
    }

    #[test]
    fn paired_bootstrap_of_identical_scores_is_zero() {
        let scores = [0.9, 0.4, 0.7, 0.2, 0.6, 0.3];
        let labels = [true, true, true, false, false, false];
        let ci = bootstrap_paired(&scores, &scores, &labels, auc_metric, 200, 1, &Sequential).unwrap();
        assert!(ci.replicates.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn class_average_examples() {
        let a = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.0, -1.0, 0.5)];
        let t = vec![Vec3::new(0.5, 0.5, 0.5), Vec3::new(1.0, 1.0, 1.0)];
        let d = vec![Vec3::new(0.1, 0.2, -0.3), Vec3::new(-0.4, 0.0, 0.2)];
        let plus: Vec<Vec3> = t.iter().zip(&d).map(|(a, b)| a + b).collect();
        let minus: Vec<Vec3> = t.iter().zip(&d).map(|(a, b)| a - b).collect();
        let (c, y) = class_average(&[a.clone(), plus, minus], &[true, false, false]).unwrap();
        assert_eq!(y, a);
        for (p, q) in c.iter().zip(&t) {
            assert!((p - q).norm() < 1e-12);
        }
        assert!(matches!(class_average(&[a], &[true]), Err(Error::EmptyClass("control"))));
    }

    #[test]
    fn bh_hand_example() {
        let adj = bh_adjust(&[0.01, 0.02, 0.03, 0.04]);
        for a in adj {
            assert!((a - 0.04).abs() < 1e-15);
        }
        assert_eq!(bh_adjust(&[0.5, 0.01]), vec![0.5, 0.02]);
    }

    proptest! {
        #[test]
        fn bh_is_monotone_and_dominates(p in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
            let adj = bh_adjust(&p);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            for w in order.windows(2) {
                prop_assert!(adj[w[1]] >= adj[w[0]]);
            }
            for (a, r) in adj.iter().zip(&p) {
                prop_assert!(*a >= *r && *a <= 1.0);
            }
        }
    }

    fn group_values(rng: &mut ChaCha8Rng, n: usize, nv: usize, shift: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let nd = Normal::new(0.0, 1.0).unwrap();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let values = labels
            .iter()
            .map(|&l| (0..nv).map(|v| nd.sample(rng) + if l && v < 3 { shift } else { 0.0 }).collect())
            .collect();
        (values, labels)
    }

    #[test]
    fn permutation_map_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (values, labels) = group_values(&mut rng, 20, 10, 3.0);
        let m = permutation_map(&values, &labels, 199, 4, 0.05, &Sequential).unwrap();
        assert!(m.p_raw.iter().all(|&p| p >= 1.0 / 200.0 && p <= 1.0));
        assert!(m.significant[..3].iter().all(|&s| s));
        for (a, r) in m.p_adjusted.iter().zip(&m.p_raw) {
            assert!(a >= r);
        }
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let f = permutation_map(&values, &flipped, 199, 4, 0.05, &Sequential).unwrap();
        assert_eq!(m.statistic, f.statistic);
        assert_eq!(m.significant, f.significant);
        assert!(permutation_map(&values[..3], &labels[..3], 10, 0, 0.05, &Sequential).is_err());
    }

    #[test]
    fn identical_groups_raise_no_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (values, labels) = group_values(&mut rng, 12, 30, 0.0);
        let m = permutation_map(&values, &labels, 999, 1, 0.05, &Sequential).unwrap();
        assert!(m.significant.iter().all(|&s| !s));
    }

    #[test]
    fn residual_modes_contracts() {
        let r = vec![Vec3::new(1.0, 0.0, 2.0), Vec3::new(0.0, -3.0, 1.0)];
        let m = residual_modes(&vec![r.clone(); 4]).unwrap();
        assert_eq!(m.variances.len(), 1);
        let norm = r.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        let mode = m.mode(0);
        let sign = if mode[0].x > 0.0 { 1.0 } else { -1.0 };
        for (a, b) in mode.iter().zip(&r) {
            assert!((a * sign * norm - b).norm() < 1e-10);
        }
        assert!((m.variances[0] - norm * norm).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fields: Vec<Vec<Vec3>> = (0..6)
            .map(|_| (0..5).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect())
            .collect();
        let m = residual_modes(&fields).unwrap();
        let gram = m.modes.transpose() * &m.modes;
        assert!((gram - DMatrix::identity(m.modes.ncols(), m.modes.ncols())).abs().max() < 1e-8);
    }
}
