//! The physical Hamiltonian `H_eps = (-i d/dx + A(eps x))^2 + V(x) + W(eps x)`
//! on a fine periodic grid in 1D.
//!
//! The box has side `L = 2 pi / eps`, a whole number of unit cells and one
//! period of the slow fields. The stencil matches the fiber operator, with
//! link phases given by the exact line integral of `A(eps x)`.

use crate::config::{Epsilon, ModelSpec, TWO_PI};
use crate::error::{BlochError, Result};
use crate::fiber::stencil;
use crate::linalg::{cis, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalGrid {
    pub eps: f64,
    pub cells: usize,
    /// Points per unit cell.
    pub nx: usize,
    pub cell_length: f64,
    pub h: f64,
    pub len: usize,
}

impl PhysicalGrid {
    pub fn new(spec: &ModelSpec, eps: Epsilon, nx: usize) -> Result<Self> {
        if spec.dim() != 1 {
            return Err(BlochError::NotApplicable("physical grids are one-dimensional".into()));
        }
        let a = spec.lattice.lengths[0];
        let e = eps.value();
        let ratio = TWO_PI / (e * a);
        let cells = ratio.round();
        if (ratio - cells).abs() > 1e-9 * ratio || cells < 1.0 {
            return Err(BlochError::validation(
                "epsilon",
                format!("box 2 pi / eps = {} is not a whole number of cells of length {a}", TWO_PI / e),
            ));
        }
        let cells = cells as usize;
        Ok(PhysicalGrid { eps: e, cells, nx, cell_length: a, h: a / nx as f64, len: cells * nx })
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn y(&self, i: usize) -> f64 {
        self.eps * self.x(i)
    }

    pub fn box_length(&self) -> f64 {
        self.h * self.len as f64
    }

    /// Index within the unit cell.
    pub fn cell_index(&self, i: usize) -> usize {
        i % self.nx
    }

    pub fn inner(&self, u: &[C64], v: &[C64]) -> C64 {
        u.iter().zip(v).map(|(a, b)| a.conj() * b).sum::<C64>() * self.h
    }

    pub fn norm(&self, u: &[C64]) -> f64 {
        self.inner(u, u).re.sqrt()
    }
}

/// Banded Hermitian operator: `(H u)_i = diag_i u_i + sum_r (up[r][i] u_{i+r} + conj(up[r][i-r]) u_{i-r})`.
#[derive(Clone, Debug)]
pub struct PhysicalHamiltonian {
    pub grid: PhysicalGrid,
    pub diag: Vec<f64>,
    /// `up[r - 1][i] = H[i][i + r]` (indices mod `len`).
    pub up: Vec<Vec<C64>>,
}

impl PhysicalHamiltonian {
    pub fn new(spec: &ModelSpec, grid: &PhysicalGrid, order: u8) -> Self {
        let coefs = stencil(order);
        let h2 = grid.h * grid.h;
        let n = grid.len;
        let w = &spec.slow.w;
        let a = &spec.slow.a[0];
        let diag: Vec<f64> = (0..n)
            .map(|i| {
                let x = grid.x(i);
                coefs[0] / h2 + spec.potential.value(&spec.lattice, [x, 0.0]) + w.eval([grid.eps * x, 0.0]).0
            })
            .collect();
        let up = (1..coefs.len())
            .map(|r| {
                let len = r as f64 * grid.h;
                (0..n)
                    .map(|i| cis(a.line_integral(grid.eps, [grid.x(i), 0.0], 0, len)) * (coefs[r] / h2))
                    .collect()
            })
            .collect();
        PhysicalHamiltonian { grid: grid.clone(), diag, up }
    }

    pub fn bandwidth(&self) -> usize {
        self.up.len()
    }

    pub fn apply(&self, u: &[C64]) -> Vec<C64> {
        let n = u.len();
        let mut out: Vec<C64> = self.diag.iter().zip(u).map(|(d, x)| x * d).collect();
        for (r0, row) in self.up.iter().enumerate() {
            let r = r0 + 1;
            for i in 0..n {
                let j = (i + r) % n;
                out[i] += row[i] * u[j];
                out[j] += row[i].conj() * u[i];
            }
        }
        out
    }

    /// Gershgorin bound on the spectral radius.
    pub fn spectral_bound(&self) -> f64 {
        let off: f64 = self.up.iter().map(|row| 2.0 * row[0].norm()).sum();
        self.diag.iter().map(|d| d.abs()).fold(0.0, f64::max) + off
    }

    pub fn energy(&self, u: &[C64]) -> f64 {
        let hu = self.apply(u);
        self.grid.inner(u, &hu).re / self.grid.inner(u, u).re
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiber::FiberModel;
    use crate::linalg;
    use crate::models;

    #[test]
    fn box_must_hold_whole_cells() {
        let spec = models::mathieu(16);
        let g = PhysicalGrid::new(&spec, Epsilon::inverse_of(8), 16).unwrap();
        assert_eq!(g.cells, 8);
        assert_eq!(g.len, 128);
        assert!(PhysicalGrid::new(&spec, Epsilon { num: 2, den: 7 }, 16).is_err());
    }

    #[test]
    fn bloch_waves_reduce_to_the_fiber_operator() {
        // with A, W constant, H_eps exp(ikx) u(x) = exp(ikx) H0(k + A) u
        let mut spec = models::mathieu(16);
        spec.slow.a[0] = crate::config::SlowScalar::constant(0.15);
        let g = PhysicalGrid::new(&spec, Epsilon::inverse_of(4), 16).unwrap();
        let hp = PhysicalHamiltonian::new(&spec, &g, 4);
        let k = 0.25;
        let model = FiberModel::with_grid(&spec, 16, 4);
        let op = model.operator([k + 0.15, 0.0]);
        let pairs = op.solve_bands(1).unwrap();
        let psi = &pairs[0].vector;
        let u: Vec<C64> = (0..g.len).map(|i| linalg::cis(k * g.x(i)) * psi[g.cell_index(i)]).collect();
        let hu = hp.apply(&u);
        let e = pairs[0].energy;
        let err = hu.iter().zip(&u).map(|(a, b)| (a - b * e).norm()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        assert!(hp.spectral_bound() > e);
    }
}
