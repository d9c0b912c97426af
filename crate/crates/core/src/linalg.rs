//! Dense kernels shared by the matrix-free layers: tridiagonal eigensolver,
//! log-determinants, inertia, pseudo-inverse and pivoted QR.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Which rows of the eigenvector matrix the tridiagonal solver accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenvectorRows {
    None,
    /// Only the first row, which is all Gauss quadrature needs.
    First,
    All,
}

#[derive(Debug, Clone)]
pub struct TridiagEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Tracked rows of the eigenvector matrix, columns matching `values`.
    pub vectors: Matrix,
}

/// Eigen-decomposition of the symmetric tridiagonal matrix with diagonal `diag`
/// and off-diagonal `offdiag` by implicit QL with Wilkinson-type shifts.
pub fn tridiagonal_eigen(
    diag: &[f64],
    offdiag: &[f64],
    rows: EigenvectorRows,
) -> Result<TridiagEigen> {
    let n = diag.len();
    if n == 0 {
        return Ok(TridiagEigen {
            values: Vec::new(),
            vectors: Matrix::zeros(0, 0),
        });
    }
    if offdiag.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            context: "tridiagonal off-diagonal",
            expected: n - 1,
            found: offdiag.len(),
        });
    }
    let mut d = diag.to_vec();
    let mut e = offdiag.to_vec();
    e.push(0.0);
    let tracked = match rows {
        EigenvectorRows::None => 0,
        EigenvectorRows::First => 1,
        EigenvectorRows::All => n,
    };
    let mut z = Matrix::zeros(tracked, n);
    for k in 0..tracked {
        z[(k, k)] = 1.0;
    }

    // Shared sweep budget, as in LAPACK's steqr.
    let max_sweeps = 30 * n.max(1);
    let mut sweeps = 0;
    for l in 0..n {
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > max_sweeps {
                return Err(Error::NotConverged {
                    iterations: sweeps,
                    residual: e[l].abs(),
                    best: Box::new(Vector::from_vec(d)),
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..tracked {
                    let f = z[(k, i + 1)];
                    z[(k, i + 1)] = s * z[(k, i)] + c * f;
                    z[(k, i)] = c * z[(k, i)] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = Matrix::from_fn(tracked, n, |k, j| z[(k, order[j])]);
    Ok(TridiagEigen { values, vectors })
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// `log det M` for symmetric positive definite `M` via Cholesky.
pub fn logdet_spd(m: &Matrix) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("Cholesky of {}x{}", m.nrows(), m.ncols())))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// Counts of positive, negative and (numerically) zero eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

pub fn symmetric_eigenvalues(m: &Matrix) -> Vector {
    if m.nrows() == 0 {
        return Vector::zeros(0);
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

/// Inertia with zero threshold `rel_tol · max|λ|`.
pub fn inertia(eigenvalues: &Vector, rel_tol: f64) -> Inertia {
    let scale = eigenvalues.amax();
    let tol = rel_tol * scale;
    let mut out = Inertia {
        positive: 0,
        negative: 0,
        zero: 0,
    };
    for &l in eigenvalues.iter() {
        if l.abs() <= tol {
            out.zero += 1;
        } else if l > 0.0 {
            out.positive += 1;
        } else {
            out.negative += 1;
        }
    }
    out
}

/// `log |det M|` of a symmetric matrix from its eigenvalues, with the inertia.
/// Fails if any eigenvalue satisfies `|λ| ≤ 1e-14 · max|λ|`.
pub fn logabsdet_symmetric(m: &Matrix) -> Result<(f64, Inertia)> {
    let ev = symmetric_eigenvalues(m);
    let ine = inertia(&ev, 1e-14);
    if ine.zero > 0 {
        return Err(Error::Singular(format!(
            "{} of {} eigenvalues below 1e-14 relative",
            ine.zero,
            ev.len()
        )));
    }
    Ok((ev.iter().map(|l| l.abs().ln()).sum(), ine))
}

/// Pseudo-inverse of a symmetric matrix, discarding eigenvalues with
/// `|λ| ≤ rel_threshold · max|λ|`.
pub fn pinv_symmetric(m: &Matrix, rel_threshold: f64) -> Matrix {
    let n = m.nrows();
    if n == 0 {
        return Matrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let cutoff = rel_threshold * eig.eigenvalues.amax();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let w = if l.abs() > cutoff && l != 0.0 { 1.0 / l } else { 0.0 };
        scaled.column_mut(j).scale_mut(w);
    }
    scaled * eig.eigenvectors.transpose()
}

/// Spectral norm of a symmetric matrix.
pub fn spectral_norm_symmetric(m: &Matrix) -> f64 {
    symmetric_eigenvalues(m).amax()
}

/// `M^p` by repeated squaring.
pub fn matrix_power(m: &Matrix, mut p: u64) -> Matrix {
    assert!(m.is_square(), "matrix_power needs a square matrix");
    let mut result = Matrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while p > 0 {
        if p & 1 == 1 {
            result = &result * &base;
        }
        p >>= 1;
        if p > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Column-pivoted Householder QR; returns the first `k` pivot columns.
/// Ties in the pivot norm go to the lowest original column index.
pub fn cpqr_pivots(m: &Matrix, k: usize) -> Vec<usize> {
    let (rows, cols) = m.shape();
    assert!(k <= cols, "cannot pick {k} pivots from {cols} columns");
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    let steps = k.min(rows);
    for j in 0..steps {
        let mut best = j;
        let mut best_norm = -1.0;
        for c in j..cols {
            let norm = a.view((j, c), (rows - j, 1)).norm_squared();
            if norm > best_norm || (norm == best_norm && perm[c] < perm[best]) {
                best = c;
                best_norm = norm;
            }
        }
        if best != j {
            a.swap_columns(j, best);
            perm.swap(j, best);
        }
        let mut v: Vector = a.view((j, j), (rows - j, 1)).column(0).into_owned();
        let alpha = v.norm();
        if alpha == 0.0 {
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm2 = v.norm_squared();
        for c in j..cols {
            let mut col = a.view_mut((j, c), (rows - j, 1));
            let proj = 2.0 * v.dot(&col.column(0)) / vnorm2;
            col.column_mut(0).axpy(-proj, &v, 1.0);
        }
    }
    if k > steps {
        perm[steps..].sort_unstable();
    }
    perm.truncate(k);
    perm
}

/// Orthonormal basis of the range of `m` (thin QR).
pub fn orthonormalize(m: &Matrix) -> Matrix {
    if m.ncols() == 0 {
        return m.clone();
    }
    m.clone().qr().q()
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vector {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vector::zeros(0);
    }
    let mut s = m.clone().svd(false, false).singular_values;
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    s
}

/// Dense kernel matrix with entries `A[rows[i], cols[j]]`.
pub fn gather(a: &Matrix, rows: &[usize], cols: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_tridiag(d: &[f64], e: &[f64]) -> Matrix {
        let n = d.len();
        Matrix::from_fn(n, n, |i, j| {
            if i == j {
                d[i]
            } else if i + 1 == j {
                e[i]
            } else if j + 1 == i {
                e[j]
            } else {
                0.0
            }
        })
    }

    #[test]
    fn tridiagonal_matches_dense_eigen() {
        let d = [2.0, -1.0, 3.5, 0.25, 4.0];
        let e = [1.0, 0.5, -2.0, 0.75];
        let eig = tridiagonal_eigen(&d, &e, EigenvectorRows::All).unwrap();
        let mut reference: Vec<f64> = symmetric_eigenvalues(&dense_tridiag(&d, &e)).iter().copied().collect();
        reference.sort_by(f64::total_cmp);
        for (a, b) in eig.values.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = dense_tridiag(&d, &e);
        let q = &eig.vectors;
        let lam = Matrix::from_diagonal(&Vector::from_vec(eig.values.clone()));
        assert!((&t * q - q * lam).norm() < 1e-12);
        assert!((q.transpose() * q - Matrix::identity(5, 5)).norm() < 1e-12);
    }

    #[test]
    fn first_row_tracking_agrees_with_full() {
        let d = [1.0, 2.0, 3.0, 4.0];
        let e = [0.3, 0.3, 0.3];
        let full = tridiagonal_eigen(&d, &e, EigenvectorRows::All).unwrap();
        let first = tridiagonal_eigen(&d, &e, EigenvectorRows::First).unwrap();
        assert!((full.vectors.row(0) - first.vectors.row(0)).norm() < 1e-14);
    }

    #[test]
    fn logdet_of_diagonal() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1f64.exp(), 2f64.exp()]));
        assert!((logdet_spd(&m).unwrap() - 3.0).abs() < 1e-14);
        assert!(logdet_spd(&-m).is_err());
    }

    #[test]
    fn singular_symmetric_is_reported() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(logabsdet_symmetric(&m), Err(Error::Singular(_))));
    }

    #[test]
    fn cpqr_orthogonal_columns_pick_largest() {
        let norms = [0.5, 3.0, 1.0, 2.0, 0.1];
        let m = Matrix::from_fn(5, 5, |i, j| if i == j { norms[j] } else { 0.0 });
        assert_eq!(cpqr_pivots(&m, 2), vec![1, 3]);
        assert_eq!(cpqr_pivots(&m, 3), vec![1, 3, 2]);
    }

    #[test]
    fn cpqr_ties_go_to_lowest_index() {
        let m = Matrix::identity(3, 3);
        assert_eq!(cpqr_pivots(&m, 3), vec![0, 1, 2]);
        let wide = Matrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        assert_eq!(cpqr_pivots(&wide, 3), vec![0, 1, 2]);
    }

    #[test]
    fn matrix_power_matches_repeated_product() {
        let m = Matrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.7]);
        let mut r = Matrix::identity(2, 2);
        for _ in 0..13 {
            r = &r * &m;
        }
        assert!((matrix_power(&m, 13) - r).norm() < 1e-14);
    }

    proptest! {
        #[test]
        fn tridiagonal_trace_and_sorting(
            d in proptest::collection::vec(-5.0f64..5.0, 1..12),
            seed in proptest::collection::vec(-2.0f64..2.0, 11),
        ) {
            let e = &seed[..d.len() - 1];
            let eig = tridiagonal_eigen(&d, e, EigenvectorRows::First).unwrap();
            let tr: f64 = d.iter().sum();
            let sum: f64 = eig.values.iter().sum();
            prop_assert!((tr - sum).abs() < 1e-10);
            prop_assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
            // first row of an orthogonal matrix has unit norm
            prop_assert!((eig.vectors.row(0).norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pinv_is_moore_penrose(vals in proptest::collection::vec(0.0f64..3.0, 2..6)) {
            let n = vals.len();
            let b = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) as f64).sin());
            let q = orthonormalize(&b);
            let m = &q * Matrix::from_diagonal(&Vector::from_vec(vals)) * q.transpose();
            let p = pinv_symmetric(&m, 1e-12);
            prop_assert!((&m * &p * &m - &m).norm() < 1e-9 * (1.0 + m.norm()));
        }
    }
}
