//! Dense numerical kernels: symmetric eigendecomposition, Cholesky,
//! matrix exponential and linear solves.
//!
//! Everything here targets the small dense matrices of this crate
//! (dimension ≤ 40). Algorithms are chosen for symmetry-exactness and
//! predictable accuracy rather than asymptotic speed: cyclic Jacobi for
//! eigenpairs, scaling-and-squaring with a Taylor core for the
//! exponential, partial-pivot LU with an explicit condition estimate for
//! solves. All functions are pure.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition-number ceiling for [`solve`].
pub const SOLVE_COND_LIMIT: f64 = 1e12;

/// Symmetric matrix with exactly mirrored storage.
///
/// `entries(i, j) == entries(j, i)` holds bit-for-bit: constructors write
/// the same value to both triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Symmetrize an arbitrary square matrix as `(m + mᵀ)/2`.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "SymMatrix requires a square matrix");
        let n = m.nrows();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        SymMatrix { m: out }
    }

    /// Build from a function of the unordered index pair.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        SymMatrix { m: out }
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix {
            m: DMatrix::identity(n, n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            m: DMatrix::zeros(n, n),
        }
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diagonal(d: &DVector<f64>) -> Self {
        SymMatrix {
            m: DMatrix::from_diagonal(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.m[idx]
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted ascending and the matching orthonormal
/// eigenvector columns, so `m = V diag(λ) Vᵀ`. Reconstruction error and
/// `VᵀV − I` both stay below `1e-10` relative to `‖m‖_F`.
pub fn sym_eig(m: &SymMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !m.is_finite() {
        return Err(Error::NonFinite {
            context: "sym_eig input",
        });
    }
    let n = m.dim();
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let mut a = m.m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let fro = a.norm().max(f64::MIN_POSITIVE);
    let tol = 1e-15 * fro;
    let max_sweeps = 60;

    let mut sweeps = 0;
    loop {
        let off = off_diag_norm(&a);
        if off <= tol {
            break;
        }
        if sweeps >= max_sweeps {
            return Err(Error::EigNoConvergence { sweeps, off });
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let (c, s) = jacobi_rotation(a[(p, p)], a[(q, q)], apq);
                apply_rotation(&mut a, &mut v, p, q, c, s);
            }
        }
        sweeps += 1;
    }

    // Extract and sort ascending, permuting eigenvectors along.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let eigvals = DVector::from_fn(n, |i, _| a[(order[i], order[i])]);
    let mut eigvecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigvecs.set_column(dst, &v.column(src));
    }
    Ok((eigvals, eigvecs))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &SymMatrix) -> Result<f64> {
    let (vals, _) = sym_eig(m)?;
    Ok(vals[vals.len() - 1])
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    let (vals, _) = sym_eig(m)?;
    Ok(vals[0])
}

fn off_diag_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for p in 0..n {
        for q in 0..n {
            if p != q {
                s += a[(p, q)] * a[(p, q)];
            }
        }
    }
    s.sqrt()
}

fn jacobi_rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta >= 0.0 {
        1.0 / (theta + (1.0 + theta * theta).sqrt())
    } else {
        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

fn apply_rotation(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    // Pin the annihilated pair to keep symmetry exact under roundoff.
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// matrix, so `L Lᵀ = m` with strictly positive diagonal.
///
/// Fails with [`Error::NotPositiveDefinite`] on a non-positive pivot,
/// which is distinct from the [`Error::NonFinite`] rejection of bad input.
pub fn cholesky(m: &SymMatrix) -> Result<DMatrix<f64>> {
    if !m.is_finite() {
        return Err(Error::NonFinite {
            context: "cholesky input",
        });
    }
    let n = m.dim();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Matrix exponential `e^{m·scale}` by scaling-and-squaring with a
/// fixed-order Taylor core.
///
/// The squaring count is chosen so the scaled 1-norm is ≤ 0.5, where the
/// order-24 Taylor truncation is far below f64 roundoff.
pub fn expm(m: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) || !scale.is_finite() {
        return Err(Error::NonFinite {
            context: "expm input",
        });
    }
    assert_eq!(m.nrows(), m.ncols(), "expm requires a square matrix");
    let n = m.nrows();
    let scaled = m * scale;
    let norm = one_norm(&scaled);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let t = &scaled / 2f64.powi(squarings as i32);

    // Order-24 Taylor via Horner: e^T ≈ I + T(I + T/2(I + ... )).
    const ORDER: usize = 24;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut acc = &eye + &t / (ORDER as f64);
    for k in (1..ORDER).rev() {
        acc = &eye + (&t * acc) / (k as f64);
    }
    let mut result = acc;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// LU factorization with partial pivoting.
struct Lu {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
}

fn lu_factor(a: &DMatrix<f64>) -> Option<Lu> {
    let n = a.nrows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_val = lu[(k, k)].abs();
        for i in k + 1..n {
            let v = lu[(i, k)].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = i;
            }
        }
        if pivot_val == 0.0 || !pivot_val.is_finite() {
            return None;
        }
        if pivot_row != k {
            lu.swap_rows(k, pivot_row);
            perm.swap(k, pivot_row);
        }
        let d = lu[(k, k)];
        for i in k + 1..n {
            let f = lu[(i, k)] / d;
            lu[(i, k)] = f;
            for j in k + 1..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
        }
    }
    Some(Lu { lu, perm })
}

impl Lu {
    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.lu.nrows();
        let mut y = DVector::from_fn(n, |i, _| b[self.perm[i]]);
        for i in 0..n {
            for j in 0..i {
                let f = self.lu[(i, j)] * y[j];
                y[i] -= f;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let f = self.lu[(i, j)] * y[j];
                y[i] -= f;
            }
            y[i] /= self.lu[(i, i)];
        }
        y
    }

    fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve_vec(&b.column(j).into_owned());
            x.set_column(j, &col);
        }
        x
    }
}

/// Solve `a · x = b` for a square nonsingular `a`.
///
/// The 1-norm condition number is estimated from the explicit inverse
/// (matrices here are small); estimates at or above [`SOLVE_COND_LIMIT`]
/// are rejected with the estimate attached.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cond = condition_estimate(a)?;
    if cond >= SOLVE_COND_LIMIT {
        return Err(Error::IllConditioned { cond });
    }
    let lu = lu_factor(a).ok_or(Error::IllConditioned { cond: f64::INFINITY })?;
    Ok(lu.solve_mat(b))
}

/// Vector right-hand-side convenience for [`solve`].
pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let x = solve(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()))?;
    Ok(x.column(0).into_owned())
}

/// 1-norm condition estimate `‖a‖₁ · ‖a⁻¹‖₁`.
pub fn condition_estimate(a: &DMatrix<f64>) -> Result<f64> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "solve input",
        });
    }
    assert_eq!(a.nrows(), a.ncols(), "solve requires a square matrix");
    let lu = match lu_factor(a) {
        Some(lu) => lu,
        None => return Ok(f64::INFINITY),
    };
    let n = a.nrows();
    let inv = lu.solve_mat(&DMatrix::identity(n, n));
    Ok(one_norm(a) * one_norm(&inv))
}

/// Inverse of a small square matrix, guarded by the same condition
/// estimate as [`solve`].
pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    solve(a, &DMatrix::identity(n, n))
}
