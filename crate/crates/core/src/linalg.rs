//! Small dense helpers shared by the embedding and PCA code.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Each eigenvector is signed so that its largest-magnitude
/// entry is positive, which makes the output deterministic.
pub(crate) fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = a.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(a.nrows(), n);
    for (c, &i) in order.iter().enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        let mut pivot = 0;
        for r in 1..v.len() {
            if v[r].abs() > v[pivot].abs() + 1e-12 {
                pivot = r;
            }
        }
        if v[pivot] < 0.0 {
            v = -v;
        }
        vectors.set_column(c, &v);
    }
    (values, vectors)
}

/// Classical multidimensional scaling of a squared-distance matrix into
/// `k` coordinates (rows are points). Dimensions without positive spectrum
/// are zero.
pub(crate) fn classical_mds(sq_dist: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = sq_dist.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| sq_dist.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq_dist[(i, j)] - row_means[i] - row_means[j] + grand));
    let (values, vectors) = sorted_symmetric_eigen(&b);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    DMatrix::from_fn(n, k, |i, c| {
        if c < n && values[c] > 1e-12 * top {
            vectors[(i, c)] * values[c].sqrt()
        } else {
            0.0
        }
    })
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
