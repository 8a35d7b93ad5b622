//! Hamiltonian flows of the effective symbols, phase bookkeeping along
//! trajectories and WKB packet synthesis along characteristics.
//!
//! Orientation `Forward` is `i d/dt psi = H_eps psi` with `s = eps t`: the flow
//! is `y' = dH/dk`, `k' = -dH/dy`, the WKB phase obeys `d phi/ds = k.y' - h0`,
//! and the first-order symbol contributes the phase `beta + sigma L.B` where
//! `beta = int A_berry(kt) . dkt` is taken along the actual path. `Backward`
//! reverses time (`sigma = -1`).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Epsilon, TWO_PI};
use crate::error::{BlochError, Result};
use crate::linalg::{self, cis, C64};
use crate::ode::{self, DenseSolution, OdeOptions};
use crate::physical::PhysicalGrid;
use crate::symbols::{H0Derivs, SymbolTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Peierls,
    Corrected,
}

impl FromStr for Variant {
    type Err = BlochError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peierls" => Ok(Variant::Peierls),
            "corrected" => Ok(Variant::Corrected),
            _ => Err(BlochError::validation("variant", format!("unknown variant '{s}' (peierls|corrected)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Forward,
    Backward,
}

impl Orientation {
    pub fn sign(self) -> f64 {
        match self {
            Orientation::Forward => 1.0,
            Orientation::Backward => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowSettings {
    pub variant: Variant,
    pub orientation: Orientation,
    /// Used by the corrected variant only.
    pub eps: f64,
    pub tol: f64,
    /// Initial Hessian of the phase, `d2 phi0 / dy dy` (Riccati route).
    pub q0: [[f64; 2]; 2],
}

impl FlowSettings {
    pub fn peierls(tol: f64) -> Self {
        FlowSettings {
            variant: Variant::Peierls,
            orientation: Orientation::Forward,
            eps: 0.0,
            tol,
            q0: [[0.0; 2]; 2],
        }
    }

    pub fn corrected(tol: f64, eps: f64) -> Self {
        FlowSettings { variant: Variant::Corrected, eps, ..Self::peierls(tol) }
    }
}

/// Offsets into the flow state vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    d: usize,
}

impl Layout {
    fn y(&self) -> usize {
        0
    }
    fn k(&self) -> usize {
        self.d
    }
    fn kin(&self) -> usize {
        2 * self.d
    }
    fn dynamical(&self) -> usize {
        2 * self.d + 1
    }
    fn berry(&self) -> usize {
        2 * self.d + 2
    }
    fn rw(&self) -> usize {
        2 * self.d + 3
    }
    fn jy(&self) -> usize {
        2 * self.d + 4
    }
    fn jk(&self) -> usize {
        self.jy() + self.d * self.d
    }
    fn q(&self) -> usize {
        self.jk() + self.d * self.d
    }
    fn log_amp(&self) -> usize {
        self.q() + self.d * self.d
    }
    fn len(&self) -> usize {
        self.log_amp() + 1
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrajectorySample {
    pub s: f64,
    pub y: [f64; 2],
    pub k: [f64; 2],
    pub h0: f64,
    /// `int k . dy`.
    pub kinetic: f64,
    /// `int h0 ds`.
    pub dynamical: f64,
    /// `int A_berry(kt) . dkt`.
    pub berry_phase: f64,
    /// `int L3 B3 ds`.
    pub rw_phase: f64,
    /// `det dy/dy0` on the launched Lagrangian manifold.
    pub det_j: f64,
    /// `ln |amplitude / f0|` from the D-term transport (Riccati route).
    pub log_amp_transport: f64,
}

impl TrajectorySample {
    /// `ln |amplitude / f0|` from the Jacobian form `|det J|^(-1/2)`.
    pub fn log_amp_jacobian(&self) -> f64 {
        -0.5 * self.det_j.abs().ln()
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub settings: FlowSettings,
    pub dim: usize,
    pub sol: DenseSolution,
    /// `max |H(s) - H(0)| / (1 + |H(0)|)` over accepted steps, `H` the flow Hamiltonian.
    pub energy_drift: f64,
}

fn h_total(table: &SymbolTable, set: &FlowSettings, y: [f64; 2], k: [f64; 2]) -> Result<(H0Derivs, [f64; 2], [f64; 2], f64)> {
    let h = table.h0_derivs(y, k);
    let mut gy = h.dy;
    let mut gk = h.dk;
    let mut value = h.value;
    if set.variant == Variant::Corrected && set.eps != 0.0 {
        let d = table.dim();
        let step = 1e-6;
        value += set.eps * table.re_h1_fast(y, k)?;
        for j in 0..d {
            let mut yp = y;
            let mut ym = y;
            yp[j] += step;
            ym[j] -= step;
            gy[j] += set.eps * (table.re_h1_fast(yp, k)? - table.re_h1_fast(ym, k)?) / (2.0 * step);
            let mut kp = k;
            let mut km = k;
            kp[j] += step;
            km[j] -= step;
            gk[j] += set.eps * (table.re_h1_fast(y, kp)? - table.re_h1_fast(y, km)?) / (2.0 * step);
        }
    }
    Ok((h, gy, gk, value))
}

fn rhs(table: &SymbolTable, set: &FlowSettings, lay: Layout, z: &[f64]) -> Result<Vec<f64>> {
    let d = lay.d;
    let sg = set.orientation.sign();
    let mut y = [0.0; 2];
    let mut k = [0.0; 2];
    y[..d].copy_from_slice(&z[..d]);
    k[..d].copy_from_slice(&z[d..2 * d]);
    let (h, gy, gk, _) = h_total(table, set, y, k)?;
    let mut out = vec![0.0; lay.len()];
    let mut ydot = [0.0; 2];
    let mut kdot = [0.0; 2];
    for j in 0..d {
        ydot[j] = sg * gk[j];
        kdot[j] = -sg * gy[j];
        out[lay.y() + j] = ydot[j];
        out[lay.k() + j] = kdot[j];
    }
    out[lay.kin()] = (0..d).map(|j| k[j] * ydot[j]).sum();
    out[lay.dynamical()] = h.value;
    let s = table.spec.slow_fields(y, 1);
    let kt = [k[0] + s.a[0], k[1] + s.a[1]];
    let (berry, _) = table.berry(kt);
    let mut bdot = 0.0;
    for l in 0..d {
        let mut ktd = kdot[l];
        for j in 0..d {
            ktd += s.da[j][l] * ydot[j];
        }
        bdot += berry[l] * ktd;
    }
    out[lay.berry()] = bdot;
    out[lay.rw()] = if d == 2 { table.l3_fast(kt)? * s.b } else { 0.0 };

    // variational equations on the launched manifold
    let at = |base: usize, a: usize, b: usize| z[base + a * d + b];
    for a in 0..d {
        for b in 0..d {
            let mut jy = 0.0;
            let mut jk = 0.0;
            for l in 0..d {
                jy += h.dyk[l][a] * at(lay.jy(), l, b) + h.dkk[a][l] * at(lay.jk(), l, b);
                jk -= h.dyy[a][l] * at(lay.jy(), l, b) + h.dyk[a][l] * at(lay.jk(), l, b);
            }
            out[lay.jy() + a * d + b] = sg * jy;
            out[lay.jk() + a * d + b] = sg * jk;
        }
    }
    // Riccati equation for Q = d2 phi / dy dy and the D-term transport
    let q = |a: usize, b: usize| z[lay.q() + a * d + b];
    let mut trace = 0.0;
    for a in 0..d {
        trace += h.dyk[a][a];
        for l in 0..d {
            trace += h.dkk[a][l] * q(l, a);
        }
        for b in 0..d {
            let mut v = h.dyy[a][b];
            for l in 0..d {
                v += h.dyk[a][l] * q(l, b) + q(a, l) * h.dyk[b][l];
                for m in 0..d {
                    v += q(a, l) * h.dkk[l][m] * q(m, b);
                }
            }
            out[lay.q() + a * d + b] = -sg * v;
        }
    }
    out[lay.log_amp()] = -0.5 * sg * trace;
    Ok(out)
}

fn initial_state(lay: Layout, y0: [f64; 2], k0: [f64; 2], q0: [[f64; 2]; 2]) -> Vec<f64> {
    let d = lay.d;
    let mut z = vec![0.0; lay.len()];
    for j in 0..d {
        z[lay.y() + j] = y0[j];
        z[lay.k() + j] = k0[j];
        z[lay.jy() + j * d + j] = 1.0;
        for l in 0..d {
            z[lay.jk() + j * d + l] = q0[j][l];
            z[lay.q() + j * d + l] = q0[j][l];
        }
    }
    z
}

/// Integrate the flow from `(y0, k0)` over `s in [0, s_end]`.
pub fn integrate_flow(table: &SymbolTable, y0: [f64; 2], k0: [f64; 2], s_end: f64, set: &FlowSettings) -> Result<Trajectory> {
    let d = table.dim();
    let lay = Layout { d };
    let z0 = initial_state(lay, y0, k0, set.q0);
    let opts = OdeOptions::with_tol(set.tol);
    let sol = ode::integrate(|_s, z| rhs(table, set, lay, z), 0.0, &z0, s_end, &opts)?;
    let mut traj = Trajectory { settings: *set, dim: d, sol, energy_drift: 0.0 };
    let e0 = traj.hamiltonian_with(table, &z0)?;
    let mut drift: f64 = 0.0;
    for z in &traj.sol.y {
        drift = drift.max((traj.hamiltonian_with(table, z)? - e0).abs() / (1.0 + e0.abs()));
    }
    traj.energy_drift = drift;
    Ok(traj)
}

impl Trajectory {
    fn layout(&self) -> Layout {
        Layout { d: self.dim }
    }

    /// Value of the flow Hamiltonian at a raw state.
    pub fn hamiltonian_with(&self, table: &SymbolTable, z: &[f64]) -> Result<f64> {
        let d = self.dim;
        let mut y = [0.0; 2];
        let mut k = [0.0; 2];
        y[..d].copy_from_slice(&z[..d]);
        k[..d].copy_from_slice(&z[d..2 * d]);
        Ok(h_total(table, &self.settings, y, k)?.3)
    }

    pub fn s_end(&self) -> f64 {
        *self.sol.t.last().unwrap()
    }

    fn sample_from(&self, table: &SymbolTable, s: f64, z: &[f64]) -> TrajectorySample {
        let lay = self.layout();
        let d = self.dim;
        let mut y = [0.0; 2];
        let mut k = [0.0; 2];
        y[..d].copy_from_slice(&z[..d]);
        k[..d].copy_from_slice(&z[d..2 * d]);
        let jy = &z[lay.jy()..lay.jy() + d * d];
        let det_j = if d == 1 { jy[0] } else { jy[0] * jy[3] - jy[1] * jy[2] };
        TrajectorySample {
            s,
            y,
            k,
            h0: table.h0_derivs(y, k).value,
            kinetic: z[lay.kin()],
            dynamical: z[lay.dynamical()],
            berry_phase: z[lay.berry()],
            rw_phase: z[lay.rw()],
            det_j,
            log_amp_transport: z[lay.log_amp()],
        }
    }

    /// State at `s` from the dense output.
    pub fn at(&self, table: &SymbolTable, s: f64) -> TrajectorySample {
        self.sample_from(table, s, &self.sol.eval(s))
    }

    pub fn end(&self, table: &SymbolTable) -> TrajectorySample {
        self.sample_from(table, self.s_end(), self.sol.last())
    }

    /// `n + 1` uniformly spaced samples.
    pub fn samples(&self, table: &SymbolTable, n: usize) -> Vec<TrajectorySample> {
        let se = self.s_end();
        (0..=n).map(|i| self.at(table, se * i as f64 / n as f64)).collect()
    }

    /// Re-integrate on the accepted step sequence with every step halved and
    /// return the largest `(y, k)` difference at the end point.
    pub fn step_halving_defect(&self, table: &SymbolTable) -> Result<f64> {
        let lay = self.layout();
        let set = self.settings;
        let grid = ode::halved(&self.sol.t);
        let z0 = &self.sol.y[0];
        let out = ode::integrate_on_grid(|_s, z| rhs(table, &set, lay, z), &grid, z0)?;
        let a = out.last().unwrap();
        let b = self.sol.last();
        Ok((0..2 * self.dim).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max))
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PhaseReport {
    /// `int h0 ds / eps`.
    pub dynamical: f64,
    /// `int k . dy / eps`.
    pub kinetic: f64,
    pub berry: f64,
    pub rw: f64,
}

pub fn accumulate_phases(table: &SymbolTable, traj: &Trajectory, eps: f64) -> PhaseReport {
    let e = traj.end(table);
    PhaseReport {
        dynamical: e.dynamical / eps,
        kinetic: e.kinetic / eps,
        berry: e.berry_phase,
        rw: e.rw_phase,
    }
}

/// Initial WKB data on the `y` chart: `phi0 = k0 (y - c) + chirp (y - c)^2 / 2`,
/// `f0 = exp(-(y - c)^2 / (2 width^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialPacket {
    pub center: f64,
    pub k0: f64,
    pub chirp: f64,
    pub width: f64,
}

impl InitialPacket {
    pub fn phi(&self, y: f64) -> f64 {
        let u = y - self.center;
        self.k0 * u + 0.5 * self.chirp * u * u
    }

    pub fn dphi(&self, y: f64) -> f64 {
        self.k0 + self.chirp * (y - self.center)
    }

    pub fn amplitude(&self, y: f64) -> f64 {
        let u = (y - self.center) / self.width;
        (-0.5 * u * u).exp()
    }

    /// Half-width of the region where `f0 >= 1e-16`, capped at half the box.
    pub fn support(&self) -> f64 {
        (self.width * (2.0 * 16.0 * 10f64.ln()).sqrt()).min(0.5 * TWO_PI)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SynthesisOptions {
    pub n_char: usize,
    pub h1_phase: bool,
    pub orientation: Orientation,
    pub tol: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions { n_char: 256, h1_phase: true, orientation: Orientation::Forward, tol: 1e-10 }
    }
}

/// Endpoint of one characteristic.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Characteristic {
    pub y0: f64,
    pub end: TrajectorySample,
}

impl Characteristic {
    /// `phi` carried along the characteristic.
    pub fn phase(&self, p: &InitialPacket, sign: f64) -> f64 {
        p.phi(self.y0) + self.end.kinetic - sign * self.end.dynamical
    }
}

#[derive(Clone, Debug)]
pub struct PacketField {
    pub grid: PhysicalGrid,
    pub s: f64,
    pub psi: Vec<C64>,
    pub fan: Vec<Characteristic>,
    pub min_det: f64,
}

impl PacketField {
    pub fn x(&self) -> Vec<f64> {
        (0..self.grid.len).map(|i| self.grid.x(i)).collect()
    }
}

fn require_1d_section(table: &SymbolTable) -> Result<()> {
    if table.dim() != 1 {
        return Err(BlochError::NotApplicable("packet synthesis is implemented in 1D".into()));
    }
    if table.section.is_none() {
        return Err(BlochError::NotApplicable("packet synthesis needs a smooth gauge section".into()));
    }
    Ok(())
}

/// Launch one characteristic from `y0` on the Lagrangian manifold `k = dphi0`.
pub fn characteristic(table: &SymbolTable, p: &InitialPacket, y0: f64, s: f64, opts: &SynthesisOptions) -> Result<Characteristic> {
    let set = FlowSettings {
        orientation: opts.orientation,
        q0: [[p.chirp, 0.0], [0.0, 0.0]],
        ..FlowSettings::peierls(opts.tol)
    };
    let tr = integrate_flow(table, [y0, 0.0], [p.dphi(y0), 0.0], s, &set)?;
    Ok(Characteristic { y0, end: tr.end(table) })
}

/// Fan of characteristics launched uniformly over the packet support.
pub fn characteristic_fan(table: &SymbolTable, p: &InitialPacket, s: f64, opts: &SynthesisOptions) -> Result<Vec<Characteristic>> {
    use rayon::prelude::*;
    let r = p.support();
    let n = opts.n_char.max(2);
    (0..n)
        .into_par_iter()
        .map(|i| characteristic(table, p, p.center - r + 2.0 * r * i as f64 / (n - 1) as f64, s, opts))
        .collect()
}

/// Fan of full trajectories carrying the density `|f0(y0)|^2`; its circular
/// mean is the flow's prediction for the packet center.
pub struct DensityFlow {
    pub trajectories: Vec<Trajectory>,
    pub weights: Vec<f64>,
    pub central: Trajectory,
}

pub fn density_flow(table: &SymbolTable, p: &InitialPacket, s_end: f64, orientation: Orientation, n_char: usize) -> Result<DensityFlow> {
    use rayon::prelude::*;
    let r = p.support();
    let n = n_char.max(2);
    let launch = |y0: f64| {
        let set = FlowSettings { orientation, q0: [[p.chirp, 0.0], [0.0, 0.0]], ..FlowSettings::peierls(1e-10) };
        integrate_flow(table, [y0, 0.0], [p.dphi(y0), 0.0], s_end, &set)
    };
    let y0s: Vec<f64> = (0..n).map(|i| p.center - r + 2.0 * r * i as f64 / (n - 1) as f64).collect();
    let trajectories = y0s.par_iter().map(|&y0| launch(y0)).collect::<Result<Vec<_>>>()?;
    let weights = y0s.iter().map(|&y0| p.amplitude(y0).powi(2)).collect();
    Ok(DensityFlow { trajectories, weights, central: launch(p.center)? })
}

impl DensityFlow {
    pub fn center(&self, table: &SymbolTable, s: f64) -> f64 {
        let z: C64 = self
            .trajectories
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| cis(t.at(table, s).y[0]) * *w)
            .sum();
        z.arg().rem_euclid(TWO_PI)
    }
}

/// Find the characteristic that reaches `y` at time `s` (Newton on `y0` with `dy/dy0 = det J`).
fn shoot(table: &SymbolTable, p: &InitialPacket, y: f64, guess: f64, s: f64, opts: &SynthesisOptions) -> Result<Characteristic> {
    let mut y0 = guess;
    let mut c = characteristic(table, p, y0, s, opts)?;
    for _ in 0..12 {
        let r = c.end.y[0] - y;
        if r.abs() < 1e-12 {
            break;
        }
        y0 -= r / c.end.det_j;
        c = characteristic(table, p, y0, s, opts)?;
    }
    Ok(c)
}

/// Band eigenvector at `k`, phase-aligned with the smooth section, on the cell grid.
pub fn section_vector(table: &SymbolTable, k: f64) -> Result<Vec<C64>> {
    let sec = table.section.as_ref().expect("checked by caller");
    Ok(sec.eigenvector([k, 0.0])?.2)
}

/// WKB packet `exp(i phi/eps) f Psi(x, dphi + A)` at time `s` on the fine physical grid.
pub fn synthesize_packet(table: &SymbolTable, p: &InitialPacket, s: f64, eps: Epsilon, opts: &SynthesisOptions) -> Result<PacketField> {
    require_1d_section(table)?;
    let grid = PhysicalGrid::new(&table.spec, eps, table.model.grid.nx)?;
    let e = grid.eps;
    let sign = opts.orientation.sign();
    let fan = characteristic_fan(table, p, s, opts)?;
    let min_det = fan.iter().map(|c| c.end.det_j).fold(f64::INFINITY, f64::min);
    if min_det < table.spec.tol.caustic {
        return Err(BlochError::CausticReached { s, det: min_det });
    }
    let ys: Vec<f64> = fan.iter().map(|c| c.end.y[0]).collect();
    let (lo, hi) = (ys[0], *ys.last().unwrap());
    let mid = 0.5 * (lo + hi);
    let cell = |i: usize| grid.cell_index(i);
    let mut psi = vec![C64::new(0.0, 0.0); grid.len];
    for (i, out) in psi.iter_mut().enumerate() {
        let yt = mid + (grid.y(i) - mid + 0.5 * TWO_PI).rem_euclid(TWO_PI) - 0.5 * TWO_PI;
        if yt < lo || yt > hi {
            continue;
        }
        let j = ys.partition_point(|&v| v < yt).clamp(1, ys.len() - 1);
        let t = (yt - ys[j - 1]) / (ys[j] - ys[j - 1]);
        let guess = fan[j - 1].y0 + t * (fan[j].y0 - fan[j - 1].y0);
        let c = shoot(table, p, yt, guess, s, opts)?;
        let f0 = p.amplitude(c.y0);
        if f0 < 1e-16 {
            continue;
        }
        let mut phase = c.phase(p, sign) / e;
        if opts.h1_phase {
            phase += c.end.berry_phase + sign * c.end.rw_phase;
        }
        let amp = f0 / c.end.det_j.abs().sqrt();
        let kt = c.end.k[0] + table.spec.slow_fields(c.end.y, 0).a[0];
        let v = section_vector(table, kt)?;
        *out = cis(phase) * amp * v[cell(i)];
    }
    Ok(PacketField { grid, s, psi, fan, min_det })
}

/// Hamilton–Jacobi residual `|d phi/ds + sigma h0(y, dphi/dy)|` at `y`, time `s`,
/// with `d phi/ds` from a fourth-order central difference of the synthesized phase.
pub fn hj_residual(table: &SymbolTable, p: &InitialPacket, y: f64, s: f64, opts: &SynthesisOptions) -> Result<f64> {
    let sign = opts.orientation.sign();
    let c = shoot(table, p, y, y, s, opts)?;
    let dl = 1e-3;
    let mut v = [0.0; 4];
    for (n, off) in [-2.0, -1.0, 1.0, 2.0].iter().enumerate() {
        let cc = shoot(table, p, y, c.y0, s + off * dl, opts)?;
        v[n] = cc.phase(p, sign);
    }
    let dphi_ds = (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * dl);
    let h0 = table.h0_derivs([y, 0.0], c.end.k).value;
    Ok((dphi_ds + sign * h0).abs())
}

/// Largest disagreement between the Jacobian form and the D-term transport of
/// `ln |f|` over the fan.
pub fn amplitude_route_defect(fan: &[Characteristic]) -> f64 {
    fan.iter()
        .map(|c| (c.end.log_amp_jacobian() - c.end.log_amp_transport).abs())
        .fold(0.0, f64::max)
}

/// Normalized overlap `<a, b> / (|a| |b|)` on the physical grid.
pub fn normalized_overlap(grid: &PhysicalGrid, a: &[C64], b: &[C64]) -> C64 {
    grid.inner(a, b) / (grid.norm(a) * grid.norm(b))
}

/// Circular mean of `y = eps x` weighted by `|psi|^2`.
pub fn circular_center(grid: &PhysicalGrid, psi: &[C64]) -> f64 {
    let mut z = C64::new(0.0, 0.0);
    for (i, v) in psi.iter().enumerate() {
        z += cis(grid.y(i)) * v.norm_sqr();
    }
    z.arg().rem_euclid(TWO_PI)
}

/// `psi` on the fine grid from the band eigenvector at each point; shared by tests.
pub fn normalize(grid: &PhysicalGrid, psi: &mut [C64]) {
    let n = grid.norm(psi);
    linalg::scale(C64::new(1.0 / n, 0.0), psi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{build_band_atlas, fix_smooth_gauge};
    use crate::models;
    use std::sync::Arc;

    fn table(spec: &crate::config::ModelSpec) -> SymbolTable {
        let atlas = build_band_atlas(spec).unwrap();
        SymbolTable::new(Arc::new(fix_smooth_gauge(&atlas).unwrap()))
    }

    #[test]
    fn free_flow_is_straight() {
        let t = table(&models::mathieu(16));
        let k0 = 0.3;
        let tr = integrate_flow(&t, [1.0, 0.0], [k0, 0.0], 2.0, &FlowSettings::peierls(1e-10)).unwrap();
        let e = tr.end(&t);
        let v = t.energy([k0, 0.0]).1[0];
        assert!((e.y[0] - (1.0 + 2.0 * v)).abs() < 1e-9);
        assert!((e.k[0] - k0).abs() < 1e-12);
        assert!(e.berry_phase.abs() < 1e-12 && e.rw_phase == 0.0);
    }

    #[test]
    fn conserves_energy_and_halves_cleanly() {
        let t = table(&models::mathieu_w(16));
        let tr = integrate_flow(&t, [0.4, 0.0], [0.1, 0.0], 10.0, &FlowSettings::peierls(1e-10)).unwrap();
        assert!(tr.energy_drift < 1e-8, "drift {}", tr.energy_drift);
        assert!(tr.step_halving_defect(&t).unwrap() < 1e-8);
    }

    #[test]
    fn amplitude_routes_agree() {
        let t = table(&models::mathieu_w(16));
        let p = InitialPacket { center: 1.5, k0: 0.1, chirp: 0.2, width: 0.5 };
        let opts = SynthesisOptions { n_char: 16, ..Default::default() };
        let fan = characteristic_fan(&t, &p, 1.0, &opts).unwrap();
        assert!(amplitude_route_defect(&fan) < 1e-6);
        assert!(hj_residual(&t, &p, 1.6, 0.7, &opts).unwrap() < 1e-6);
    }
}
