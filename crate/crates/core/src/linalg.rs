//! Small dense helpers shared by every module. Matrices here are tiny
//! (n <= 8), so everything works on `DMatrix<f64>` directly.

use nalgebra::{DMatrix, DVector};

/// `[a, b] = ab - ba`.
pub fn commutator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

/// The diagonal part of `m` as a matrix, `π(m)`.
pub fn diag_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&m.diagonal())
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Frobenius norm of the strictly off-diagonal entries.
pub fn off_diagonal_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                acc += m[(i, j)] * m[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// `tr(ab)` without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Replaces `m` with `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted
/// ascending and eigenvectors permuted to match (columns).
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Matrix exponential by scaling and squaring with a truncated Taylor
/// series. After scaling, `‖A/2^s‖₁ <= 1/4`, where the degree-12 remainder
/// is below 1e-17 relative.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    crate::kernel::expm(a)
}

/// `q h qᵀ`, re-symmetrized to remove roundoff asymmetry.
pub fn conjugate(q: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = q * h * q.transpose();
    symmetrize(&mut out);
    out
}

/// Pair generator `e_i e_jᵀ - e_j e_iᵀ`.
pub fn pair_generator(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(i, j)] = 1.0;
    m[(j, i)] = -1.0;
    m
}

/// All index pairs `(i, j)` with `i < j`, row-major.
pub fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push((i, j));
        }
    }
    out
}

/// Permutation matrix with `P e_k = e_{perm[k]}`.
pub fn permutation_matrix(perm: &[usize]) -> DMatrix<f64> {
    let n = perm.len();
    let mut p = DMatrix::zeros(n, n);
    for (k, &to) in perm.iter().enumerate() {
        p[(to, k)] = 1.0;
    }
    p
}

/// Solves the symmetric-definite generalized problem `A x = λ B x`,
/// returning ascending eigenvalues and `B`-orthonormal eigenvectors.
/// Returns `None` when `B` is not positive definite.
pub fn generalized_sym_eigen(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let chol = b.clone().cholesky()?;
    let l = chol.l();
    let l_inv = l.clone().try_inverse()?;
    let mut c = &l_inv * a * l_inv.transpose();
    symmetrize(&mut c);
    let (values, y) = sym_eigen_sorted(&c);
    let x = l_inv.transpose() * y;
    Some((values, x))
}
