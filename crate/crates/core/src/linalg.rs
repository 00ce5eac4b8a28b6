//! Small dense linear-algebra helpers shared by the analysis modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigendecomposition of a symmetric matrix with eigenpairs sorted by
/// descending eigenvalue.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    // Symmetrize first: products like K K^T are only symmetric up to rounding.
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Thin QR orthonormalization of the columns of `m`.
///
/// Returns `None` when the columns are numerically dependent
/// (some `|R_ii|` falls below `1e-10 * max |R_jj|`).
pub fn orthonormalize(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.ncols() == 0 || m.ncols() > m.nrows() {
        return None;
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = (0..r.ncols()).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if scale == 0.0 || (0..r.ncols()).any(|i| r[(i, i)].abs() <= 1e-10 * scale) {
        return None;
    }
    Some(qr.q())
}

/// Largest absolute entry of `AᵀA − I`.
pub fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// `Σ ⊗ I_d` in lag-major layout: entry `((i,a),(j,b))` is `Σ_ij δ_ab`.
pub fn kron_identity(sigma: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    if d == 1 {
        return sigma.clone();
    }
    let n = sigma.nrows();
    DMatrix::from_fn(n * d, n * d, |r, c| {
        if r % d == c % d {
            sigma[(r / d, c / d)]
        } else {
            0.0
        }
    })
}

/// Repeats every entry of `v` `d` times (lag-major lift of a per-lag vector).
pub fn repeat_entries(v: &DVector<f64>, d: usize) -> DVector<f64> {
    DVector::from_fn(v.len() * d, |r, _| v[r / d])
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman: length mismatch");
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, -1.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals.as_slice(), &[5.0, 2.0, -1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_and_monotone_maps() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [10.0, 20.0, 30.0, 400.0];
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = y.iter().rev().copied().collect();
        assert!((spearman(&x, &rev) + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn dependent_columns_rejected() {
        let m = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(orthonormalize(&m).is_none());
    }

    #[test]
    fn kron_layout_is_lag_major() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let k = kron_identity(&s, 2);
        assert_eq!(k[(0, 2)], 0.5);
        assert_eq!(k[(0, 3)], 0.0);
        assert_eq!(k[(1, 3)], 0.5);
    }
}
