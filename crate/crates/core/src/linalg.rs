//! Small dense linear-algebra helpers shared by the oracle, simulator and learner.
//!
//! Everything here works on `nalgebra` dynamic matrices; the problem sizes are
//! desk scale (a handful of states), so clarity wins over blocking or sparsity.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 100_000;

/// Spectral norm `||M||_2` by power iteration on `MᵀM`.
///
/// Iterates until the Rayleigh quotient changes by less than `1e-12`
/// (relative). Falls back to an SVD if the iteration stalls, which only
/// happens for pathological near-degenerate top singular values.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let mtm = m.transpose() * m;
    let n = mtm.nrows();
    // Deterministic start vector with no special alignment.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * (i as f64 + 1.0).sqrt());
    v /= v.norm();
    let mut lambda = 0.0_f64;
    for _ in 0..POWER_MAX_ITER {
        let w = &mtm * &v;
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        if (next - lambda).abs() <= POWER_TOL * next.abs().max(f64::MIN_POSITIVE) {
            return next.max(0.0).sqrt();
        }
        lambda = next;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Largest modulus among the eigenvalues of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Numerical rank with singular values counted above `rel_tol * s_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

/// Symmetric matrix square root `V diag(sqrt(max(λ, 0))) Vᵀ`, valid for PSD input.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Dimension of the symmetric vectorization of an `n x n` matrix.
pub fn svec_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Inverse of [`svec_dim`]; `None` when `d` is not a triangular number.
pub fn svec_order(d: usize) -> Option<usize> {
    let n = ((((8 * d + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (svec_dim(n) == d).then_some(n)
}

/// Symmetric vectorization: upper triangle row by row, off-diagonal entries
/// scaled by `sqrt(2)` so that `svec(M)·svec(N) = tr(MN)` for symmetric `M, N`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(svec_dim(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j {
                m[(i, j)]
            } else {
                std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)])
            };
            k += 1;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = svec_order(v.len()).ok_or_else(|| {
        Error::InvalidArgument(format!("{} is not a symmetric-vectorization length", v.len()))
    })?;
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] / std::f64::consts::SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    Ok(m)
}

/// `svec(v vᵀ)` written directly into `out` without forming the outer product.
pub fn svec_outer_into(v: &[f64], out: &mut [f64]) {
    let n = v.len();
    debug_assert_eq!(out.len(), svec_dim(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = if i == j {
                v[i] * v[i]
            } else {
                std::f64::consts::SQRT_2 * v[i] * v[j]
            };
            k += 1;
        }
    }
}

/// Solves the Stein equation `X = Q + A X B` by vectorization.
///
/// `(I - Bᵀ ⊗ A) vec(X) = vec(Q)`; intended for small problems only.
pub fn solve_stein(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (r, c) = q.shape();
    if a.shape() != (r, r) || b.shape() != (c, c) {
        return Err(Error::Dimension {
            field: "stein",
            expected: format!("A {r}x{r}, B {c}x{c}"),
            found: format!("A {:?}, B {:?}", a.shape(), b.shape()),
        });
    }
    let kron = b.transpose().kronecker(a);
    let lhs = DMatrix::<f64>::identity(r * c, r * c) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("singular Stein system".into()))?;
    Ok(DMatrix::from_column_slice(r, c, sol.as_slice()))
}

/// Solves the discrete Lyapunov equation `X = Q + Lᵀ X L` by Smith doubling.
///
/// Requires `L` to be Schur stable; reports [`Error::Unstable`] otherwise.
pub fn solve_discrete_lyapunov(l: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rho = spectral_radius(l);
    if !(rho < 1.0) {
        return Err(Error::Unstable { spectral_radius: rho });
    }
    let mut x = q.clone();
    let mut ak = l.clone();
    for _ in 0..200 {
        let incr = ak.transpose() * &x * &ak;
        x += &incr;
        ak = &ak * &ak;
        if incr.amax() <= 1e-16 * x.amax().max(f64::MIN_POSITIVE) || ak.amax() == 0.0 {
            return Ok((&x + x.transpose()) * 0.5);
        }
    }
    Err(Error::NotConverged {
        what: "Lyapunov doubling",
        iterations: 200,
        residual: ak.amax(),
    })
}

/// Dense matrix from row-major nested vectors; every row must share a length.
pub fn from_rows(field: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::Dimension {
            field,
            expected: format!("rows of length {ncols}"),
            found: format!("row of length {}", bad.len()),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
