//! Reference time evolution of `i d/dt psi = H_eps psi` on the fine periodic
//! grid (1D) by Crank–Nicolson, with band-resolved observables.
//!
//! The cyclic banded system `(I + i dt/2 H) x = b` is solved by a banded LU
//! without pivoting (the Hermitian part of the matrix is the identity) plus a
//! Woodbury correction for the wrap-around corners.

use serde::Serialize;

use crate::config::{Epsilon, TWO_PI};
use crate::error::{BlochError, Result};
use crate::fiber::FiberModel;
use crate::linalg::{cis, C64};
use crate::physical::{PhysicalGrid, PhysicalHamiltonian};
use crate::semiclassics::{
    circular_center, density_flow, normalize, normalized_overlap, section_vector, synthesize_packet, DensityFlow,
    InitialPacket, Orientation, SynthesisOptions,
};
use crate::symbols::SymbolTable;

/// Banded LU without pivoting, half-bandwidth `p`.
#[derive(Clone, Debug)]
struct BandedLu {
    n: usize,
    p: usize,
    /// `a[i * w + (j + p - i)]` for `|i - j| <= p`, `w = 2p + 1`.
    a: Vec<C64>,
}

impl BandedLu {
    fn new(n: usize, p: usize, entry: impl Fn(usize, usize) -> C64) -> Result<Self> {
        let w = 2 * p + 1;
        let mut a = vec![C64::new(0.0, 0.0); n * w];
        for i in 0..n {
            for j in i.saturating_sub(p)..(i + p + 1).min(n) {
                a[i * w + j + p - i] = entry(i, j);
            }
        }
        for kk in 0..n {
            let piv = a[kk * w + p];
            if piv.norm() < 1e-300 {
                return Err(BlochError::SingularSolve("zero pivot in banded LU".into()));
            }
            for i in kk + 1..(kk + p + 1).min(n) {
                let l = a[i * w + kk + p - i] / piv;
                a[i * w + kk + p - i] = l;
                for j in kk + 1..(kk + p + 1).min(n) {
                    let u = a[kk * w + j + p - kk];
                    a[i * w + j + p - i] -= l * u;
                }
            }
        }
        Ok(BandedLu { n, p, a })
    }

    fn solve(&self, b: &mut [C64]) {
        let (n, p, w) = (self.n, self.p, 2 * self.p + 1);
        for i in 0..n {
            let mut s = b[i];
            for j in i.saturating_sub(p)..i {
                s -= self.a[i * w + j + p - i] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..(i + p + 1).min(n) {
                s -= self.a[i * w + j + p - i] * b[j];
            }
            b[i] = s / self.a[i * w + p];
        }
    }
}

/// Gaussian elimination with partial pivoting for the small Woodbury system.
fn small_solve(mut m: Vec<Vec<C64>>, mut b: Vec<C64>) -> Vec<C64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].norm().total_cmp(&m[j][c].norm())).unwrap();
        m.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                let v = m[c][k];
                m[r][k] -= f * v;
            }
            let v = b[c];
            b[r] -= f * v;
        }
    }
    for r in (0..n).rev() {
        let mut s = b[r];
        for k in r + 1..n {
            s -= m[r][k] * b[k];
        }
        b[r] = s / m[r][r];
    }
    b
}

/// One Crank–Nicolson propagator `(I + i dt/2 H)^-1 (I - i dt/2 H)`.
pub struct CrankNicolson {
    pub h: PhysicalHamiltonian,
    pub dt: f64,
    lu: BandedLu,
    rows: Vec<usize>,
    /// Corner rows of the wrap-around part: `(row, col, value)`.
    corners: Vec<(usize, usize, C64)>,
    y: Vec<Vec<C64>>,
    cap: Vec<Vec<C64>>,
}

impl CrankNicolson {
    pub fn new(h: PhysicalHamiltonian, dt: f64) -> Result<Self> {
        let n = h.grid.len;
        let p = h.bandwidth();
        if n < 4 * p + 2 {
            return Err(BlochError::GridResolution("physical grid too small for the stencil".into()));
        }
        let c = C64::new(0.0, 0.5 * dt);
        let entry = |i: usize, j: usize| -> C64 {
            let mut v = C64::new(0.0, 0.0);
            if i == j {
                v += C64::new(1.0, 0.0) + c * h.diag[i];
            }
            if j > i && j - i <= p {
                v += c * h.up[j - i - 1][i];
            }
            if i > j && i - j <= p {
                v += c * h.up[i - j - 1][j].conj();
            }
            v
        };
        let lu = BandedLu::new(n, p, entry)?;
        let mut corners = Vec::new();
        for i in 0..n {
            for r in 1..=p {
                let j = i + r;
                if j >= n {
                    let jj = j - n;
                    corners.push((i, jj, c * h.up[r - 1][i]));
                    corners.push((jj, i, c * h.up[r - 1][i].conj()));
                }
            }
        }
        let mut rows: Vec<usize> = corners.iter().map(|t| t.0).collect();
        rows.sort_unstable();
        rows.dedup();
        // Y = A_band^-1 U with U the unit columns of the corner rows
        let y: Vec<Vec<C64>> = rows
            .iter()
            .map(|&r| {
                let mut e = vec![C64::new(0.0, 0.0); n];
                e[r] = C64::new(1.0, 0.0);
                lu.solve(&mut e);
                e
            })
            .collect();
        // capacitance I + Z^H Y, where Z^H holds the corner rows
        let m = rows.len();
        let mut cap = vec![vec![C64::new(0.0, 0.0); m]; m];
        for (a, &ra) in rows.iter().enumerate() {
            cap[a][a] += C64::new(1.0, 0.0);
            for &(r, col, v) in &corners {
                if r == ra {
                    for (b, yb) in y.iter().enumerate() {
                        cap[a][b] += v * yb[col];
                    }
                }
            }
        }
        Ok(CrankNicolson { h, dt, lu, rows, corners, y, cap })
    }

    fn zh(&self, x: &[C64]) -> Vec<C64> {
        self.rows
            .iter()
            .map(|&ra| self.corners.iter().filter(|t| t.0 == ra).map(|&(_, col, v)| v * x[col]).sum())
            .collect()
    }

    pub fn step(&self, psi: &mut Vec<C64>) {
        let hpsi = self.h.apply(psi);
        let c = C64::new(0.0, 0.5 * self.dt);
        let mut b: Vec<C64> = psi.iter().zip(&hpsi).map(|(u, hu)| u - c * hu).collect();
        self.lu.solve(&mut b);
        let z = self.zh(&b);
        let coef = small_solve(self.cap.clone(), z);
        for (yb, cb) in self.y.iter().zip(&coef) {
            for (bi, yi) in b.iter_mut().zip(yb) {
                *bi -= cb * yi;
            }
        }
        *psi = b;
    }
}

/// Time step satisfying `dt * E_max <= 0.1` that divides `t_end` evenly.
pub fn stable_dt(h: &PhysicalHamiltonian, t_end: f64) -> (f64, usize) {
    let emax = h.spectral_bound();
    let n = (t_end * emax / 0.1).ceil().max(1.0) as usize;
    (t_end / n as f64, n)
}

/// Bloch eigenbasis on the quasimomenta admitted by the box.
pub struct BandBasis {
    pub ks: Vec<f64>,
    /// `vectors[k][band]` on the cell grid.
    pub vectors: Vec<Vec<Vec<C64>>>,
    pub bands: usize,
}

impl BandBasis {
    pub fn new(model: &std::sync::Arc<FiberModel>, grid: &PhysicalGrid, bands: usize) -> Result<Self> {
        if model.grid.nx != grid.nx {
            return Err(BlochError::GridResolution("cell grid and physical grid disagree".into()));
        }
        let dk = TWO_PI / grid.box_length();
        let mut ks = Vec::with_capacity(grid.cells);
        let mut vectors = Vec::with_capacity(grid.cells);
        for j in 0..grid.cells {
            let k = dk * j as f64;
            let pairs = model.operator([k, 0.0]).solve_bands(bands)?;
            ks.push(k);
            vectors.push(pairs.into_iter().map(|p| p.vector).collect());
        }
        Ok(BandBasis { ks, vectors, bands })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BandWeights {
    pub weights: Vec<f64>,
    /// Circular mean quasimomentum of each band component.
    pub mean_k: Vec<f64>,
}

/// Weights of `psi` on the bands of the unperturbed fibers (Bessel: sum <= 1).
pub fn band_projection_population(grid: &PhysicalGrid, basis: &BandBasis, psi: &[C64]) -> BandWeights {
    let nx = grid.nx;
    let cells = grid.cells;
    let total = grid.inner(psi, psi).re;
    let bz = TWO_PI / grid.cell_length;
    let mut weights = vec![0.0; basis.bands];
    let mut zk = vec![C64::new(0.0, 0.0); basis.bands];
    for (j, &k) in basis.ks.iter().enumerate() {
        let mut c = vec![C64::new(0.0, 0.0); nx];
        for (s, cs) in c.iter_mut().enumerate() {
            for m in 0..cells {
                let i = s + m * nx;
                *cs += cis(-k * grid.x(i)) * psi[i];
            }
            *cs /= cells as f64;
        }
        for (b, v) in basis.vectors[j].iter().enumerate() {
            let ov: C64 = v.iter().zip(&c).map(|(a, b)| a.conj() * b).sum::<C64>() * grid.h;
            let wgt = cells as f64 * ov.norm_sqr() / total;
            weights[b] += wgt;
            zk[b] += cis(TWO_PI * k / bz) * wgt;
        }
    }
    let mean_k = zk.iter().map(|z| z.arg() / TWO_PI * bz).collect();
    BandWeights { weights, mean_k }
}

/// `psi0(x) = exp(i phi0(eps x)/eps) f0(eps x) Psi(x, dphi0(eps x) + A(eps x))`, normalized.
pub fn prepare_band_packet(table: &SymbolTable, eps: Epsilon, packet: &InitialPacket) -> Result<(PhysicalGrid, Vec<C64>)> {
    if table.dim() != 1 || table.section.is_none() {
        return Err(BlochError::NotApplicable("band packets need a 1D smooth gauge section".into()));
    }
    let grid = PhysicalGrid::new(&table.spec, eps, table.model.grid.nx)?;
    let r = packet.support();
    if r < 2.0 * grid.eps * grid.cell_length {
        return Err(BlochError::GridResolution("packet narrower than a few unit cells".into()));
    }
    let mut psi = vec![C64::new(0.0, 0.0); grid.len];
    for (i, out) in psi.iter_mut().enumerate() {
        let y = packet.center + (grid.y(i) - packet.center + 0.5 * TWO_PI).rem_euclid(TWO_PI) - 0.5 * TWO_PI;
        let f = packet.amplitude(y);
        if f < 1e-16 {
            continue;
        }
        let kt = packet.dphi(y) + table.spec.slow_fields([y, 0.0], 0).a[0];
        let v = section_vector(table, kt)?;
        *out = cis(packet.phi(y) / grid.eps) * f * v[grid.cell_index(i)];
    }
    normalize(&grid, &mut psi);
    Ok((grid, psi))
}

#[derive(Clone, Debug, Serialize)]
pub struct ObservableRow {
    pub t: f64,
    pub s: f64,
    pub center: f64,
    pub quasimomentum: f64,
    pub band_population: f64,
    /// Argument of the overlap with the predicted packet, where evaluated.
    pub phase: Option<f64>,
    pub energy: f64,
    pub norm: f64,
}

/// Evolve `psi0` to `t_end`, calling `observe(step, t, psi)` every `every` steps
/// and at the end.
pub fn evolve_direct(
    h: PhysicalHamiltonian,
    psi0: &[C64],
    t_end: f64,
    dt: f64,
    every: usize,
    mut observe: impl FnMut(usize, f64, &[C64]) -> Result<()>,
) -> Result<Vec<C64>> {
    let emax = h.spectral_bound();
    if dt * emax > 0.1 + 1e-12 {
        return Err(BlochError::CflViolation { dt_emax: dt * emax });
    }
    let n = (t_end / dt).round() as usize;
    let grid = h.grid.clone();
    let cn = CrankNicolson::new(h, dt)?;
    let n0 = grid.norm(psi0);
    let mut psi = psi0.to_vec();
    observe(0, 0.0, &psi)?;
    for step in 1..=n {
        cn.step(&mut psi);
        if step % every.max(1) == 0 || step == n {
            let nn = grid.norm(&psi);
            if !nn.is_finite() || (nn / n0 - 1.0).abs() > 1e-6 {
                return Err(BlochError::SolverDivergence(format!("norm {nn} at step {step}")));
            }
            observe(step, step as f64 * dt, &psi)?;
        }
    }
    Ok(psi)
}

#[derive(Clone, Copy, Debug)]
pub struct CompareOptions {
    pub samples: usize,
    pub phase_samples: usize,
    pub n_char: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions { samples: 20, phase_samples: 4, n_char: 128 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub eps: f64,
    pub s_end: f64,
    pub dt: f64,
    pub steps: usize,
    pub rows: Vec<ObservableRow>,
    /// `max_s |<y>_direct - <y>_flow(s)|` for each orientation, with the flow
    /// center taken from the transported density.
    pub center_error_forward: f64,
    pub center_error_backward: f64,
    /// `max_s |<y>_direct - y(s)|` for the single central trajectory (includes the
    /// `O(width^2)` spread offset, so it does not vanish with `eps`).
    pub central_track_error: f64,
    /// `|<psi_pred, psi_direct>|` at `s_end` for each orientation; selects the orientation.
    pub fidelity_forward: f64,
    pub fidelity_backward: f64,
    pub orientation: Orientation,
    pub initial_population: f64,
    pub min_population: f64,
    /// `|arg <psi_pred, psi_direct>|` at `s_end` with and without the first-order phase.
    pub phase_error_with_h1: f64,
    pub phase_error_without_h1: f64,
    /// Accumulated first-order (Berry + L.B) phase along the central trajectory.
    pub h1_phase: f64,
    pub norm_drift: f64,
    pub energy_drift: f64,
}

impl ComparisonReport {
    /// Center error for the selected orientation.
    pub fn center_error(&self) -> f64 {
        match self.orientation {
            Orientation::Forward => self.center_error_forward,
            Orientation::Backward => self.center_error_backward,
        }
    }
}

fn wrap_diff(a: f64, b: f64) -> f64 {
    (a - b + 0.5 * TWO_PI).rem_euclid(TWO_PI) - 0.5 * TWO_PI
}

/// Direct evolution of a prepared band packet against the semiclassical predictions.
pub fn compare_dynamics(
    table: &SymbolTable,
    eps: Epsilon,
    s_end: f64,
    packet: &InitialPacket,
    opts: &CompareOptions,
) -> Result<ComparisonReport> {
    let (grid, psi0) = prepare_band_packet(table, eps, packet)?;
    let e = grid.eps;
    let h = PhysicalHamiltonian::new(&table.spec, &grid, table.model.order);
    let t_end = s_end / e;
    let (dt, steps) = stable_dt(&h, t_end);
    let every = (steps / opts.samples.max(1)).max(1);
    let basis = BandBasis::new(&table.model, &grid, table.band + 1)?;

    let flows: Vec<DensityFlow> = [Orientation::Forward, Orientation::Backward]
        .iter()
        .map(|&o| density_flow(table, packet, s_end, o, opts.n_char))
        .collect::<Result<_>>()?;
    let mut central_err: f64 = 0.0;

    let e0 = h.energy(&psi0);
    let n0 = grid.norm(&psi0);
    let mut rows = Vec::new();
    let mut errs = [0.0f64; 2];
    let mut final_psi = Vec::new();
    let phase_every = (opts.samples / opts.phase_samples.max(1)).max(1);
    let mut sample_idx = 0usize;
    let band = table.band;
    let mut energy_drift: f64 = 0.0;
    let mut norm_drift: f64 = 0.0;
    evolve_direct(h.clone(), &psi0, t_end, dt, every, |step, t, psi| {
        let s = t * e;
        let center = circular_center(&grid, psi);
        for (o, fl) in flows.iter().enumerate() {
            errs[o] = errs[o].max(wrap_diff(center, fl.center(table, s)).abs());
        }
        central_err = central_err.max(wrap_diff(center, flows[0].central.at(table, s).y[0]).abs());
        let bw = band_projection_population(&grid, &basis, psi);
        let energy = h.energy(psi);
        energy_drift = energy_drift.max((energy - e0).abs() / (1.0 + e0.abs()));
        let norm = grid.norm(psi);
        norm_drift = norm_drift.max((norm / n0 - 1.0).abs());
        let phase = if sample_idx % phase_every == 0 && step > 0 && step < steps {
            let so = SynthesisOptions { n_char: opts.n_char, ..Default::default() };
            let pred = synthesize_packet(table, packet, s, eps, &so)?;
            Some(normalized_overlap(&grid, &pred.psi, psi).arg())
        } else {
            None
        };
        sample_idx += 1;
        rows.push(ObservableRow {
            t,
            s,
            center,
            quasimomentum: bw.mean_k[band - 1],
            band_population: bw.weights[band - 1],
            phase,
            energy,
            norm,
        });
        if step == steps {
            final_psi = psi.to_vec();
        }
        Ok(())
    })?;

    let so = SynthesisOptions { n_char: opts.n_char, ..Default::default() };
    let with = synthesize_packet(table, packet, s_end, eps, &so)?;
    let without = synthesize_packet(table, packet, s_end, eps, &SynthesisOptions { h1_phase: false, ..so })?;
    let back = synthesize_packet(table, packet, s_end, eps, &SynthesisOptions { orientation: Orientation::Backward, ..so })?;
    let ow = normalized_overlap(&grid, &with.psi, &final_psi);
    let pw = ow.arg();
    let pwo = normalized_overlap(&grid, &without.psi, &final_psi).arg();
    let fidelity = [ow.norm(), normalized_overlap(&grid, &back.psi, &final_psi).norm()];
    if let Some(last) = rows.last_mut() {
        last.phase = Some(pw);
    }
    let end = flows[0].central.end(table);
    let orientation = if fidelity[0] >= fidelity[1] { Orientation::Forward } else { Orientation::Backward };
    let pops: Vec<f64> = rows.iter().map(|r| r.band_population).collect();
    Ok(ComparisonReport {
        eps: e,
        s_end,
        dt,
        steps,
        center_error_forward: errs[0],
        center_error_backward: errs[1],
        central_track_error: central_err,
        fidelity_forward: fidelity[0],
        fidelity_backward: fidelity[1],
        orientation,
        initial_population: pops[0],
        min_population: pops.iter().cloned().fold(f64::INFINITY, f64::min),
        phase_error_with_h1: pw.abs(),
        phase_error_without_h1: pwo.abs(),
        h1_phase: end.berry_phase + end.rw_phase,
        norm_drift,
        energy_drift,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use rustfft::FftPlanner;

    fn free_packet(grid: &PhysicalGrid, x0: f64, k0: f64, w: f64) -> Vec<C64> {
        let l = grid.box_length();
        let mut psi: Vec<C64> = (0..grid.len)
            .map(|i| {
                let d = (grid.x(i) - x0 + 0.5 * l).rem_euclid(l) - 0.5 * l;
                cis(k0 * d) * (-0.5 * d * d / (w * w)).exp()
            })
            .collect();
        normalize(grid, &mut psi);
        psi
    }

    /// Exact propagator of the discrete free operator via its Fourier symbol.
    fn exact_free(grid: &PhysicalGrid, psi: &[C64], t: f64, order: u8) -> Vec<C64> {
        let n = grid.len;
        let mut planner = FftPlanner::new();
        let mut v = psi.to_vec();
        planner.plan_fft_forward(n).process(&mut v);
        for (j, z) in v.iter_mut().enumerate() {
            let jj = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            let q = TWO_PI * jj / grid.box_length();
            *z *= cis(-t * crate::fiber::stencil_symbol(order, grid.h, q)) / n as f64;
        }
        planner.plan_fft_inverse(n).process(&mut v);
        v
    }

    #[test]
    fn banded_solver_inverts_the_cyclic_system() {
        let spec = models::mathieu_driven(16);
        let grid = PhysicalGrid::new(&spec, Epsilon::inverse_of(4), 16).unwrap();
        let h = PhysicalHamiltonian::new(&spec, &grid, 4);
        let cn = CrankNicolson::new(h.clone(), 0.01).unwrap();
        let mut psi = free_packet(&grid, 5.0, 0.3, 3.0);
        let orig = psi.clone();
        cn.step(&mut psi);
        // (I + i dt/2 H) psi_new == (I - i dt/2 H) psi_old
        let c = C64::new(0.0, 0.005);
        let (a, b) = (h.apply(&psi), h.apply(&orig));
        let err = (0..grid.len)
            .map(|i| (psi[i] + c * a[i] - (orig[i] - c * b[i])).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        assert!((grid.norm(&psi) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn free_packet_matches_exact_propagator_with_second_order_time_error() {
        let spec = models::free_1d(16);
        let grid = PhysicalGrid::new(&spec, Epsilon::inverse_of(4), 16).unwrap();
        let h = PhysicalHamiltonian::new(&spec, &grid, 4);
        let psi0 = free_packet(&grid, 12.0, 0.5, 3.0);
        let t = 4.0;
        let exact = exact_free(&grid, &psi0, t, 4);
        let (dt, _) = stable_dt(&h, t);
        let err = |dt: f64| {
            let out = evolve_direct(h.clone(), &psi0, t, dt, 1000, |_, _, _| Ok(())).unwrap();
            let d: Vec<C64> = out.iter().zip(&exact).map(|(a, b)| a - b).collect();
            (grid.norm(&d), circular_center(&grid, &out) - circular_center(&grid, &exact))
        };
        let (e1, c1) = err(dt);
        let (e2, _) = err(dt / 2.0);
        assert!(e1 / e2 > 3.5, "{e1} {e2}");
        assert!(c1.abs() < 1e-6);
    }

    #[test]
    fn bloch_wave_weights() {
        let spec = models::mathieu(16);
        let grid = PhysicalGrid::new(&spec, Epsilon::inverse_of(8), 16).unwrap();
        let model = FiberModel::new(&spec);
        let basis = BandBasis::new(&model, &grid, 3).unwrap();
        let j = 3;
        let k = basis.ks[j];
        let v = &basis.vectors[j][1];
        let psi: Vec<C64> = (0..grid.len).map(|i| cis(k * grid.x(i)) * v[grid.cell_index(i)]).collect();
        let bw = band_projection_population(&grid, &basis, &psi);
        assert!((bw.weights[1] - 1.0).abs() < 1e-9);
        assert!(bw.weights[0] < 1e-12);
        assert!((bw.mean_k[1] - k).abs() < 1e-9);
        let rnd: Vec<C64> = (0..grid.len).map(|i| cis(i as f64 * i as f64 * 0.37)).collect();
        let s: f64 = band_projection_population(&grid, &basis, &rnd).weights.iter().sum();
        assert!(s <= 1.0 + 1e-9);
    }

    #[test]
    fn cfl_is_enforced() {
        let spec = models::mathieu(16);
        let grid = PhysicalGrid::new(&spec, Epsilon::inverse_of(4), 16).unwrap();
        let h = PhysicalHamiltonian::new(&spec, &grid, 4);
        let psi = vec![C64::new(1.0, 0.0); grid.len];
        let r = evolve_direct(h, &psi, 1.0, 0.5, 1, |_, _, _| Ok(()));
        assert!(matches!(r, Err(BlochError::CflViolation { .. })));
    }
}
