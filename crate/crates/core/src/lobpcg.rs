//! Block LOBPCG for the lowest eigenpairs of a Hermitian operator given as a
//! matrix-free `apply`. Used for cell grids too large for dense solves.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BlochError, Result};
use crate::linalg::{self, C64};

#[derive(Clone, Debug)]
pub struct Options {
    /// Absolute residual tolerance `|A x - lambda x|` for unit `x`.
    pub tol: f64,
    pub max_iter: usize,
    /// Extra block vectors beyond the requested count.
    pub guard: usize,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            tol: 1e-8,
            max_iter: 1000,
            guard: 4,
            seed: 7,
        }
    }
}

pub struct Eigs {
    pub values: Vec<f64>,
    /// Euclidean-normalized eigenvectors.
    pub vectors: Vec<Vec<C64>>,
    pub iterations: usize,
}

fn dot(u: &[C64], v: &[C64]) -> C64 {
    linalg::inner(1.0, u, v)
}

/// Orthonormalize `cols` in place (two Gram-Schmidt passes), dropping columns
/// that become numerically dependent.
fn orthonormalize(cols: &mut Vec<Vec<C64>>, keep_first: usize) {
    let mut out: Vec<Vec<C64>> = Vec::with_capacity(cols.len());
    for (idx, mut v) in cols.drain(..).enumerate() {
        let n0 = linalg::norm(1.0, &v);
        if n0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &out {
                let ov = dot(q, &v);
                linalg::axpy(-ov, q, &mut v);
            }
        }
        let n1 = linalg::norm(1.0, &v);
        if idx >= keep_first && n1 < 1e-10 * n0 {
            continue;
        }
        linalg::scale(C64::new(1.0 / n1, 0.0), &mut v);
        out.push(v);
    }
    *cols = out;
}

fn combine(
    basis: &[Vec<C64>],
    coef: &Mat<C64>,
    col: usize,
    rows: std::ops::Range<usize>,
) -> Vec<C64> {
    let n = basis[0].len();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for r in rows {
        linalg::axpy(coef[(r, col)], &basis[r], &mut out);
    }
    out
}

/// Lowest `nev` eigenpairs of the Hermitian operator `apply` on `C^n`.
///
/// `precond(r, lambda)` should approximate `(A - lambda)^{-1}` by a positive
/// operator.
pub fn lowest<A, P>(n: usize, nev: usize, apply: A, precond: P, opts: Options) -> Result<Eigs>
where
    A: Fn(&[C64]) -> Vec<C64>,
    P: Fn(&[C64], f64) -> Vec<C64>,
{
    let nb = (nev + opts.guard).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<Vec<C64>> = (0..nb)
        .map(|_| {
            (0..n)
                .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect()
        })
        .collect();
    orthonormalize(&mut x, nb);
    let mut p: Vec<Vec<C64>> = Vec::new();
    let mut lambda = vec![0.0; nb];
    let mut first = true;

    for it in 0..opts.max_iter {
        let mut basis = x.clone();
        if !first {
            let ax: Vec<Vec<C64>> = x.iter().map(|v| apply(v)).collect();
            let mut w = Vec::with_capacity(nb);
            let mut done = true;
            for i in 0..x.len() {
                let r: Vec<C64> = ax[i]
                    .iter()
                    .zip(&x[i])
                    .map(|(a, b)| a - b * lambda[i])
                    .collect();
                let rn = linalg::norm(1.0, &r);
                if i < nev && rn > opts.tol {
                    done = false;
                }
                if rn > 0.1 * opts.tol {
                    w.push(precond(&r, lambda[i]));
                }
            }
            if done {
                return Ok(Eigs {
                    values: lambda[..nev].to_vec(),
                    vectors: x[..nev].to_vec(),
                    iterations: it,
                });
            }
            basis.extend(w);
            basis.extend(p.iter().cloned());
        }
        orthonormalize(&mut basis, nb);
        let m = basis.len();
        let ab: Vec<Vec<C64>> = basis.iter().map(|v| apply(v)).collect();
        let g = Mat::<C64>::from_fn(m, m, |i, j| {
            let a = dot(&basis[i], &ab[j]);
            let b = dot(&basis[j], &ab[i]).conj();
            (a + b) * 0.5
        });
        let (vals, vecs) = linalg::hermitian_eigen(&g)?;
        let mut new_x = Vec::with_capacity(nb);
        let mut new_p = Vec::with_capacity(nb);
        for c in 0..nb {
            new_x.push(combine(&basis, &vecs, c, 0..m));
            if m > nb {
                new_p.push(combine(&basis, &vecs, c, nb..m));
            }
        }
        lambda.copy_from_slice(&vals[..nb]);
        x = new_x;
        p = new_p;
        first = false;
    }
    Err(BlochError::EigensolverFailure(format!(
        "LOBPCG did not converge in {} iterations (tol {:.2e})",
        opts.max_iter, opts.tol
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_operator() {
        let n = 200;
        let d: Vec<f64> = (0..n)
            .map(|i| 1.0 + i as f64 * 0.5 + ((i * 7) % 5) as f64 * 0.01)
            .collect();
        let apply = |x: &[C64]| x.iter().zip(&d).map(|(v, e)| v * e).collect::<Vec<_>>();
        let precond = |r: &[C64], l: f64| {
            r.iter()
                .zip(&d)
                .map(|(v, e)| v / ((e - l).abs() + 0.5))
                .collect::<Vec<_>>()
        };
        let res = lowest(
            n,
            3,
            apply,
            precond,
            Options {
                tol: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        for i in 0..3 {
            assert!((res.values[i] - sorted[i]).abs() < 1e-10);
        }
    }
}
