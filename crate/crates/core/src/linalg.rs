//! Small helpers around cell vectors and faer dense matrices.
//!
//! Cell vectors are plain `Vec<Complex64>`; the inner product carries the
//! quadrature weight `w = |E| / n` so that norms approximate `L^2(E)`.

use faer::{Mat, Side};
use num_complex::Complex64;

use crate::error::{BlochError, Result};

pub type C64 = Complex64;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cis(theta: f64) -> C64 {
    let (s, co) = theta.sin_cos();
    C64::new(co, s)
}

/// Weighted inner product `w * sum conj(u) v`.
pub fn inner(w: f64, u: &[C64], v: &[C64]) -> C64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = C64::new(0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        acc += a.conj() * b;
    }
    acc * w
}

pub fn norm(w: f64, u: &[C64]) -> f64 {
    (w * u.iter().map(|z| z.norm_sqr()).sum::<f64>()).sqrt()
}

pub fn normalize(w: f64, u: &mut [C64]) -> f64 {
    let n = norm(w, u);
    if n > 0.0 {
        let s = 1.0 / n;
        for z in u.iter_mut() {
            *z *= s;
        }
    }
    n
}

/// `y += a x`
pub fn axpy(a: C64, x: &[C64], y: &mut [C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(a: C64, x: &mut [C64]) {
    for z in x.iter_mut() {
        *z *= a;
    }
}

pub fn sub(x: &[C64], y: &[C64]) -> Vec<C64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

pub fn max_abs(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Remove the component along unit vector `psi`.
pub fn project_out(w: f64, psi: &[C64], u: &mut [C64]) {
    let ov = inner(w, psi, u);
    axpy(-ov, psi, u);
}

pub fn mat_vec(m: &Mat<C64>, x: &[C64]) -> Vec<C64> {
    let n = m.nrows();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for j in 0..m.ncols() {
        let xj = x[j];
        if xj == C64::new(0.0, 0.0) {
            continue;
        }
        let col = m.col(j);
        for i in 0..n {
            out[i] += col[i] * xj;
        }
    }
    out
}

/// Eigenvalues (ascending) and eigenvector columns of a Hermitian matrix.
pub fn hermitian_eigen(m: &Mat<C64>) -> Result<(Vec<f64>, Mat<C64>)> {
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| BlochError::EigensolverFailure(format!("dense eigensolver: {e:?}")))?;
    let s = evd.S().column_vector();
    let vals: Vec<f64> = (0..m.nrows()).map(|i| s[i].re).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(BlochError::EigensolverFailure(
            "non-finite eigenvalue".into(),
        ));
    }
    Ok((vals, evd.U().to_owned()))
}

pub fn hermitian_eigenvalues(m: &Mat<C64>) -> Result<Vec<f64>> {
    m.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| BlochError::EigensolverFailure(format!("dense eigensolver: {e:?}")))
}

/// Largest entrywise deviation from Hermiticity.
pub fn hermiticity_defect(m: &Mat<C64>) -> f64 {
    let n = m.nrows();
    let mut d: f64 = 0.0;
    for i in 0..n {
        for j in 0..=i {
            d = d.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    d
}

/// Dense LU factorization with a vector solve.
pub struct DenseLu {
    lu: faer::linalg::solvers::PartialPivLu<C64>,
    n: usize,
}

impl DenseLu {
    pub fn new(m: &Mat<C64>) -> Self {
        DenseLu {
            lu: m.partial_piv_lu(),
            n: m.nrows(),
        }
    }

    pub fn solve(&self, rhs: &[C64]) -> Vec<C64> {
        use faer::linalg::solvers::Solve;
        let mut b = Mat::<C64>::from_fn(self.n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        (0..self.n).map(|i| b[(i, 0)]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_small_hermitian() {
        let m = Mat::<C64>::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) => c(2.0, 0.0),
            (1, 1) => c(2.0, 0.0),
            (0, 1) => c(0.0, 1.0),
            _ => c(0.0, -1.0),
        });
        let (vals, vecs) = hermitian_eigen(&m).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        let v0: Vec<C64> = (0..2).map(|i| vecs[(i, 0)]).collect();
        let mv = mat_vec(&m, &v0);
        for i in 0..2 {
            assert!((mv[i] - v0[i]).norm() < 1e-13);
        }
    }

    #[test]
    fn lu_solves() {
        let m = Mat::<C64>::from_fn(3, 3, |i, j| {
            c(
                (i * 3 + j) as f64 + if i == j { 5.0 } else { 0.0 },
                (i as f64) - (j as f64),
            )
        });
        let x = vec![c(1.0, 0.5), c(-2.0, 0.0), c(0.3, 0.1)];
        let b = mat_vec(&m, &x);
        let y = DenseLu::new(&m).solve(&b);
        for i in 0..3 {
            assert!((x[i] - y[i]).norm() < 1e-12);
        }
    }
}
