//! Discretized fiber Hamiltonian `H0(k) = (-i grad + B0/2 (-x2, x1) + k)^2 + V`
//! on one unit cell.
//!
//! The covariant derivative is discretized with link phases: a hop from `x`
//! to `x + d` carries `exp(i int (A0 + k) . dl)`. A hop leaving the cell
//! through the lattice vector `g` lands on `x_g + g` and picks up the
//! magnetic-translation factor `exp(i A0(x_g) . g)`, i.e. the boundary
//! condition `u(x + g) = exp(i A0(x) . g) u(x)`. Every off-diagonal entry is
//! `c * exp(i (theta + k . d))` with a fixed displacement `d`, so the
//! `k`-derivatives of the assembled matrix are exact:
//! `dH/dk_j = i d_j H_entry`, `d2H/dk_j dk_l = -d_j d_l H_entry`.

use std::io::Write;
use std::sync::Arc;

use faer::Mat;

use crate::config::ModelSpec;
use crate::error::{BlochError, Result};
use crate::linalg::{self, cis, C64};
use crate::lobpcg;

/// Dense path is used up to this matrix size, LOBPCG above it.
pub const DENSE_LIMIT: usize = 1500;

/// Uniform grid on the fundamental cell, `x = (s1 h1, s2 h2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid {
    pub dim: usize,
    pub nx: usize,
    pub lengths: [f64; 2],
    pub h: [f64; 2],
    /// Quadrature weight `|E| / n`.
    pub weight: f64,
    pub len: usize,
}

impl CellGrid {
    pub fn new(dim: usize, nx: usize, lengths: [f64; 2]) -> Self {
        let mut h = [0.0; 2];
        for j in 0..dim {
            h[j] = lengths[j] / nx as f64;
        }
        let len = nx.pow(dim as u32);
        let vol: f64 = lengths[..dim].iter().product();
        CellGrid {
            dim,
            nx,
            lengths,
            h,
            weight: vol / len as f64,
            len,
        }
    }

    pub fn coords(&self, s: usize) -> [usize; 2] {
        if self.dim == 1 {
            [s, 0]
        } else {
            [s % self.nx, s / self.nx]
        }
    }

    pub fn index(&self, c: [usize; 2]) -> usize {
        c[0] + self.nx * c[1]
    }

    pub fn point(&self, s: usize) -> [f64; 2] {
        let c = self.coords(s);
        [c[0] as f64 * self.h[0], c[1] as f64 * self.h[1]]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.len).map(|s| self.point(s)).collect()
    }

    pub fn inner(&self, u: &[C64], v: &[C64]) -> C64 {
        linalg::inner(self.weight, u, v)
    }

    pub fn norm(&self, u: &[C64]) -> f64 {
        linalg::norm(self.weight, u)
    }
}

/// Coefficients `c_p` of `-d^2/dx^2 ~ sum_p c_p u(x + p h) / h^2`, `p >= 0`.
pub fn stencil(order: u8) -> &'static [f64] {
    match order {
        2 => &[2.0, -1.0],
        _ => &[2.5, -4.0 / 3.0, 1.0 / 12.0],
    }
}

/// Fourier symbol of the stencil at `q`: equals `q^2 + O(h^order)`.
pub fn stencil_symbol(order: u8, h: f64, q: f64) -> f64 {
    let c = stencil(order);
    let mut s = c[0];
    for (p, cp) in c.iter().enumerate().skip(1) {
        s += 2.0 * cp * (p as f64 * q * h).cos();
    }
    s / (h * h)
}

#[derive(Clone, Debug)]
struct Hop {
    row: usize,
    col: usize,
    coef: f64,
    phase: f64,
    disp: [f64; 2],
}

/// `k`-independent part of the fiber operator.
#[derive(Debug)]
pub struct FiberModel {
    pub grid: CellGrid,
    pub b0: f64,
    pub order: u8,
    diag: Vec<f64>,
    hops: Vec<Hop>,
    /// Gershgorin bound on `|H|`, used to scale tolerances.
    pub scale: f64,
    pub eig_tol: f64,
}

impl FiberModel {
    pub fn new(spec: &ModelSpec) -> Arc<Self> {
        Self::with_grid(spec, spec.disc.nx, spec.disc.stencil_order)
    }

    pub fn with_grid(spec: &ModelSpec, nx: usize, order: u8) -> Arc<Self> {
        let dim = spec.dim();
        let grid = CellGrid::new(dim, nx, spec.lattice.lengths);
        let b0 = spec.magnetic.b0;
        let coefs = stencil(order);
        let a0 = |x: [f64; 2]| [-0.5 * b0 * x[1], 0.5 * b0 * x[0]];

        let mut diag = vec![0.0; grid.len];
        let mut hops = Vec::with_capacity(grid.len * dim * 2 * (coefs.len() - 1));
        for s in 0..grid.len {
            let x = grid.point(s);
            diag[s] = spec.potential.value(&spec.lattice, x);
            let cs = grid.coords(s);
            for j in 0..dim {
                let h = grid.h[j];
                diag[s] += coefs[0] / (h * h);
                for (p, &cp) in coefs.iter().enumerate().skip(1) {
                    for sign in [-1i64, 1] {
                        let step = sign * p as i64;
                        let t = cs[j] as i64 + step;
                        let m = t.div_euclid(nx as i64);
                        let mut ct = cs;
                        ct[j] = t.rem_euclid(nx as i64) as usize;
                        let col = grid.index(ct);
                        let mut d = [0.0; 2];
                        d[j] = step as f64 * h;
                        let mid = [x[0] + 0.5 * d[0], x[1] + 0.5 * d[1]];
                        let am = a0(mid);
                        let mut phase = am[0] * d[0] + am[1] * d[1];
                        if m != 0 {
                            let xg = grid.point(col);
                            let ag = a0(xg);
                            phase += ag[j] * m as f64 * grid.lengths[j];
                        }
                        hops.push(Hop {
                            row: s,
                            col,
                            coef: cp / (h * h),
                            phase,
                            disp: d,
                        });
                    }
                }
            }
        }
        let mut row_sum = diag.iter().map(|v| v.abs()).collect::<Vec<_>>();
        for hp in &hops {
            row_sum[hp.row] += hp.coef.abs();
        }
        let scale = row_sum.iter().cloned().fold(0.0, f64::max);
        Arc::new(FiberModel {
            grid,
            b0,
            order,
            diag,
            hops,
            scale,
            eig_tol: spec.tol.eig_residual,
        })
    }

    pub fn operator(self: &Arc<Self>, k: [f64; 2]) -> FiberOperator {
        let vals = self
            .hops
            .iter()
            .map(|hp| hp.coef * cis(hp.phase + k[0] * hp.disp[0] + k[1] * hp.disp[1]))
            .collect();
        FiberOperator {
            model: Arc::clone(self),
            k,
            vals,
        }
    }
}

/// `H0(k)` at a fixed quasimomentum.
#[derive(Clone, Debug)]
pub struct FiberOperator {
    pub model: Arc<FiberModel>,
    pub k: [f64; 2],
    vals: Vec<C64>,
}

#[derive(Clone, Debug)]
pub struct Eigenpair {
    /// 1-based band index.
    pub band: usize,
    pub energy: f64,
    pub vector: Vec<C64>,
    pub residual: f64,
}

pub fn assemble_fiber_operator(spec: &ModelSpec, k: [f64; 2]) -> FiberOperator {
    FiberModel::new(spec).operator(k)
}

impl FiberOperator {
    pub fn grid(&self) -> &CellGrid {
        &self.model.grid
    }

    pub fn len(&self) -> usize {
        self.model.grid.len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn apply(&self, u: &[C64]) -> Vec<C64> {
        let mut out: Vec<C64> = self.model.diag.iter().zip(u).map(|(d, x)| x * d).collect();
        for (hp, v) in self.model.hops.iter().zip(&self.vals) {
            out[hp.row] += v * u[hp.col];
        }
        out
    }

    /// `(dH/dk_j) u`.
    pub fn apply_dk(&self, j: usize, u: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); u.len()];
        for (hp, v) in self.model.hops.iter().zip(&self.vals) {
            if hp.disp[j] != 0.0 {
                out[hp.row] += C64::new(0.0, hp.disp[j]) * v * u[hp.col];
            }
        }
        out
    }

    /// `(d2H/dk_j dk_l) u`.
    pub fn apply_dkk(&self, j: usize, l: usize, u: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); u.len()];
        for (hp, v) in self.model.hops.iter().zip(&self.vals) {
            let f = hp.disp[j] * hp.disp[l];
            if f != 0.0 {
                out[hp.row] -= v * u[hp.col] * f;
            }
        }
        out
    }

    fn dense_with(&self, diag: bool, factor: impl Fn(&[f64; 2]) -> C64) -> Mat<C64> {
        let n = self.len();
        let mut m = Mat::<C64>::zeros(n, n);
        if diag {
            for (s, d) in self.model.diag.iter().enumerate() {
                m[(s, s)] += C64::new(*d, 0.0);
            }
        }
        for (hp, v) in self.model.hops.iter().zip(&self.vals) {
            m[(hp.row, hp.col)] += v * factor(&hp.disp);
        }
        m
    }

    pub fn dense(&self) -> Mat<C64> {
        self.dense_with(true, |_| C64::new(1.0, 0.0))
    }

    pub fn dense_dk(&self, j: usize) -> Mat<C64> {
        self.dense_with(false, |d| C64::new(0.0, d[j]))
    }

    pub fn dense_dkk(&self, j: usize, l: usize) -> Mat<C64> {
        self.dense_with(false, |d| C64::new(-d[j] * d[l], 0.0))
    }

    /// All eigenpairs from one dense solve (only sensible for small grids).
    pub fn solve_all(&self) -> Result<Vec<Eigenpair>> {
        let (vals, vecs) = linalg::hermitian_eigen(&self.dense())?;
        Ok(self.collect_pairs(&vals, &vecs, vals.len()))
    }

    fn collect_pairs(&self, vals: &[f64], vecs: &Mat<C64>, count: usize) -> Vec<Eigenpair> {
        let w = self.grid().weight;
        let inv = 1.0 / w.sqrt();
        (0..count)
            .map(|b| {
                let vector: Vec<C64> = (0..self.len()).map(|i| vecs[(i, b)] * inv).collect();
                Eigenpair {
                    band: b + 1,
                    energy: vals[b],
                    vector,
                    residual: 0.0,
                }
            })
            .collect()
    }

    /// Lowest `m_max` eigenpairs, ascending, orthonormal in the cell inner product.
    pub fn solve_bands(&self, m_max: usize) -> Result<Vec<Eigenpair>> {
        let n = self.len();
        if m_max == 0 || m_max > n {
            return Err(BlochError::validation(
                "m_max",
                format!("must lie in 1..={n}"),
            ));
        }
        let mut pairs = if n <= DENSE_LIMIT {
            let (vals, vecs) = linalg::hermitian_eigen(&self.dense())?;
            self.collect_pairs(&vals, &vecs, m_max)
        } else {
            let res = lobpcg::lowest(
                n,
                m_max,
                |x: &[C64]| self.apply(x),
                self.preconditioner(),
                lobpcg::Options {
                    tol: 0.1 * self.model.eig_tol * self.model.scale,
                    ..Default::default()
                },
            )?;
            let w = self.grid().weight;
            res.values
                .iter()
                .zip(res.vectors)
                .enumerate()
                .map(|(b, (&e, mut v))| {
                    linalg::normalize(w, &mut v);
                    Eigenpair {
                        band: b + 1,
                        energy: e,
                        vector: v,
                        residual: 0.0,
                    }
                })
                .collect()
        };
        let tol = self.model.eig_tol * self.model.scale;
        for p in pairs.iter_mut() {
            let hv = self.apply(&p.vector);
            let r: Vec<C64> = hv
                .iter()
                .zip(&p.vector)
                .map(|(a, b)| a - b * p.energy)
                .collect();
            p.residual = self.grid().norm(&r);
            if !(p.residual <= tol) {
                return Err(BlochError::EigensolverFailure(format!(
                    "band {} at k = {:?}: residual {:.3e} above {:.3e}",
                    p.band, self.k, p.residual, tol
                )));
            }
        }
        Ok(pairs)
    }

    /// Inverse of the free stencil plus a shift, applied by FFT; ignores the
    /// magnetic phases, which only matters for convergence speed.
    fn preconditioner(&self) -> impl Fn(&[C64], f64) -> Vec<C64> + '_ {
        let grid = self.grid().clone();
        let order = self.model.order;
        let vmin = self
            .model
            .diag
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let kin0: f64 = (0..grid.dim)
            .map(|j| stencil(order)[0] / (grid.h[j] * grid.h[j]))
            .sum();
        let vfloor = (vmin - kin0).abs();
        let planner = std::sync::Mutex::new(rustfft::FftPlanner::<f64>::new());
        move |r: &[C64], shift: f64| {
            let nx = grid.nx;
            let mut planner = planner.lock().unwrap();
            let fwd = planner.plan_fft_forward(nx);
            let inv = planner.plan_fft_inverse(nx);
            let mut buf = r.to_vec();
            fft_axes(&mut buf, &grid, &*fwd);
            for s in 0..grid.len {
                let c = grid.coords(s);
                let mut sym = 0.0;
                for j in 0..grid.dim {
                    let q = std::f64::consts::TAU * wrap_index(c[j], nx) as f64 / grid.lengths[j];
                    sym += stencil_symbol(order, grid.h[j], q);
                }
                let denom = sym + vfloor + shift.abs().max(1.0);
                buf[s] /= denom;
            }
            fft_axes(&mut buf, &grid, &*inv);
            let f = 1.0 / grid.len as f64;
            buf.iter_mut().for_each(|z| *z *= f);
            buf
        }
    }
}

fn wrap_index(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

fn fft_axes(buf: &mut [C64], grid: &CellGrid, fft: &dyn rustfft::Fft<f64>) {
    let nx = grid.nx;
    if grid.dim == 1 {
        fft.process(buf);
        return;
    }
    for row in buf.chunks_mut(nx) {
        fft.process(row);
    }
    let mut col = vec![C64::new(0.0, 0.0); nx];
    for c0 in 0..nx {
        for r in 0..nx {
            col[r] = buf[c0 + nx * r];
        }
        fft.process(&mut col);
        for r in 0..nx {
            buf[c0 + nx * r] = col[r];
        }
    }
}

pub fn solve_bands(op: &FiberOperator, m_max: usize) -> Result<Vec<Eigenpair>> {
    op.solve_bands(m_max)
}

/// Hellmann-Feynman velocity `<Psi, dH/dk Psi>`.
pub fn velocity_expectation(op: &FiberOperator, pair: &Eigenpair) -> [f64; 2] {
    let mut v = [0.0; 2];
    for (j, vj) in v.iter_mut().enumerate().take(op.grid().dim) {
        let hv = op.apply_dk(j, &pair.vector);
        *vj = op.grid().inner(&pair.vector, &hv).re;
    }
    v
}

/// Group indices of eigenvalues closer than `1e-8 * scale`.
pub fn degenerate_clusters(energies: &[f64], scale: f64) -> Vec<Vec<usize>> {
    let thr = 1e-8 * scale.max(1.0);
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, &e) in energies.iter().enumerate() {
        match out.last_mut() {
            Some(cl) if (e - energies[*cl.last().unwrap()]).abs() <= thr => cl.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

/// Write a matrix as `u64 rows, u64 cols` followed by row-major `(re, im)` pairs,
/// all little-endian.
pub fn dump_matrix(mut w: impl Write, m: &Mat<C64>) -> std::io::Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    #[test]
    fn hermitian_for_magnetic_and_periodic_models() {
        for spec in [
            models::mathieu(32),
            models::landau(12),
            models::magnetic_lattice(12, 2.0),
        ] {
            for k in [[0.0, 0.0], [0.37, -1.1], [2.9, 0.4]] {
                let op = assemble_fiber_operator(&spec, k);
                assert!(linalg::hermiticity_defect(&op.dense()) < 1e-12);
                for j in 0..spec.dim() {
                    assert!(linalg::hermiticity_defect(&op.dense_dk(j)) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dk_matches_matrix_derivative() {
        let spec = models::magnetic_lattice(10, 2.0);
        let model = FiberModel::new(&spec);
        let k = [0.3, 0.7];
        let dh = 1e-5;
        for j in 0..2 {
            let mut kp = k;
            let mut km = k;
            kp[j] += dh;
            km[j] -= dh;
            let hp = model.operator(kp).dense();
            let hm = model.operator(km).dense();
            let d = model.operator(k).dense_dk(j);
            let mut err: f64 = 0.0;
            for r in 0..hp.nrows() {
                for c in 0..hp.ncols() {
                    let fd = (hp[(r, c)] - hm[(r, c)]) / (2.0 * dh);
                    err = err.max((fd - d[(r, c)]).norm());
                }
            }
            assert!(err < 1e-6 * model.scale, "err {err}");
        }
    }

    #[test]
    fn free_particle_velocity() {
        let spec = models::free_1d(128);
        let op = assemble_fiber_operator(&spec, [0.2, 0.0]);
        let pairs = op.solve_bands(3).unwrap();
        assert!((pairs[0].energy - 0.04).abs() < 1e-6);
        let v = velocity_expectation(&op, &pairs[0]);
        assert!((v[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn orthonormal_eigenvectors() {
        let spec = models::mathieu(64);
        let op = assemble_fiber_operator(&spec, [0.1, 0.0]);
        let pairs = op.solve_bands(5).unwrap();
        for a in &pairs {
            for b in &pairs {
                let g = op.grid().inner(&a.vector, &b.vector);
                let want = if a.band == b.band { 1.0 } else { 0.0 };
                assert!((g - C64::new(want, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn spectrum_is_dual_periodic() {
        let spec = models::magnetic_lattice(12, 2.0);
        let model = FiberModel::new(&spec);
        let k = [0.4, -0.9];
        let e0 = linalg::hermitian_eigenvalues(&model.operator(k).dense()).unwrap();
        let g = spec.lattice.dual(1);
        let e1 = linalg::hermitian_eigenvalues(&model.operator([k[0] + g[0], k[1] + g[1]]).dense())
            .unwrap();
        for (a, b) in e0.iter().zip(&e1).take(10) {
            assert!((a - b).abs() < 1e-9 * model.scale);
        }
    }

    #[test]
    fn lobpcg_agrees_with_dense() {
        let spec = models::landau(16);
        let op = assemble_fiber_operator(&spec, [0.3, 0.2]);
        let dense = linalg::hermitian_eigenvalues(&op.dense()).unwrap();
        let res = lobpcg::lowest(
            op.len(),
            4,
            |x: &[C64]| op.apply(x),
            op.preconditioner(),
            lobpcg::Options {
                tol: 1e-9 * op.model.scale,
                ..Default::default()
            },
        )
        .unwrap();
        for i in 0..4 {
            assert!(
                (res.values[i] - dense[i]).abs() < 1e-8 * op.model.scale,
                "{} vs {}",
                res.values[i],
                dense[i]
            );
        }
    }

    #[test]
    fn matrix_dump_layout() {
        let m = Mat::<C64>::from_fn(2, 3, |i, j| C64::new(i as f64, j as f64));
        let mut buf = Vec::new();
        dump_matrix(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 16);
        assert_eq!(u64::from_le_bytes(buf[0..8].try_into().unwrap()), 2);
        let re = f64::from_le_bytes(buf[16 + 16 * 4..16 + 16 * 4 + 8].try_into().unwrap());
        assert_eq!(re, 1.0);
    }
}
