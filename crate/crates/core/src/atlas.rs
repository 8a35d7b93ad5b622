//! Band sampling over the Brillouin zone, the isolated-band audit, bundle
//! diagnostics (Chern integer, Zak phase) and a smooth periodic gauge.
//!
//! Convention: eigenvectors of the discrete fiber operator satisfy
//! `Psi(x, k + G) = exp(-i G.x) Psi(x, k)` up to a phase, so the periodic
//! object is `U(x, k) = exp(i k.x) Psi(x, k)`. The gauge section stores `U` on
//! the nodes and interpolates it trigonometrically; an off-grid eigenvector
//! is the exact eigenvector with its phase aligned to that interpolant.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GaugeTwist, ModelSpec};
use crate::error::{BlochError, Result};
use crate::fiber::{CellGrid, Eigenpair, FiberModel, FiberOperator};
use crate::interp::PeriodicInterp;
use crate::linalg::{self, cis, DenseLu, C64};

#[derive(Clone, Debug, PartialEq)]
pub enum AuditStatus {
    Passed,
    AssumptionAViolated {
        margin: f64,
        threshold: f64,
        worst_k: [f64; 2],
    },
}

pub struct BandAtlas {
    pub spec: ModelSpec,
    pub model: Arc<FiberModel>,
    pub dim: usize,
    pub nk: usize,
    pub band: usize,
    pub nodes: Vec<[f64; 2]>,
    /// Energies of bands `1..=band+1` per node.
    pub energies: Vec<Vec<f64>>,
    /// Band-`m` eigenvectors as returned by the solver (arbitrary phases).
    pub vectors: Vec<Vec<C64>>,
    /// Smallest distance to the neighbouring bands over the grid.
    pub margin: f64,
    pub status: AuditStatus,
    pub energy_interp: PeriodicInterp,
}

/// Node coordinates and the multiplier that carries a vector across a seam.
struct Seams {
    dim: usize,
    nk: usize,
    /// `exp(-i e*_j . x)` per axis.
    shift: [Vec<C64>; 2],
}

impl Seams {
    fn new(grid: &CellGrid, lengths: [f64; 2], nk: usize) -> Self {
        let pts = grid.points();
        let mk = |j: usize| -> Vec<C64> {
            if j >= grid.dim {
                return Vec::new();
            }
            let g = TAU / lengths[j];
            pts.iter().map(|x| cis(-g * x[j])).collect()
        };
        Seams {
            dim: grid.dim,
            nk,
            shift: [mk(0), mk(1)],
        }
    }

    fn coords(&self, idx: usize) -> [usize; 2] {
        [idx % self.nk, idx / self.nk]
    }

    fn index(&self, c: [usize; 2]) -> usize {
        c[0] + self.nk * c[1]
    }

    /// Neighbour along `axis` with the seam factor applied when wrapping.
    fn next<'a>(
        &self,
        vecs: &'a [Vec<C64>],
        idx: usize,
        axis: usize,
    ) -> std::borrow::Cow<'a, [C64]> {
        let mut c = self.coords(idx);
        c[axis] += 1;
        if c[axis] == self.nk {
            c[axis] = 0;
            let v = &vecs[self.index(c)];
            let out: Vec<C64> = v
                .iter()
                .zip(&self.shift[axis])
                .map(|(a, b)| a * b)
                .collect();
            std::borrow::Cow::Owned(out)
        } else {
            std::borrow::Cow::Borrowed(&vecs[self.index(c)])
        }
    }

    fn link(&self, w: f64, vecs: &[Vec<C64>], idx: usize, axis: usize) -> C64 {
        let nb = self.next(vecs, idx, axis);
        linalg::inner(w, &vecs[idx], &nb)
    }

    fn count(&self) -> usize {
        self.nk.pow(self.dim as u32)
    }
}

fn node_k(spec: &ModelSpec, nk: usize, idx: usize) -> [f64; 2] {
    let c = [idx % nk, idx / nk];
    let mut k = [0.0; 2];
    for j in 0..spec.dim() {
        k[j] = c[j] as f64 / nk as f64 * TAU / spec.lattice.lengths[j];
    }
    k
}

/// Sample bands `1..=m+1` on the `n_k^d` grid and audit the isolation of band `m`.
pub fn build_band_atlas(spec: &ModelSpec) -> Result<BandAtlas> {
    let model = FiberModel::new(spec);
    build_band_atlas_with(spec, model)
}

pub fn build_band_atlas_with(spec: &ModelSpec, model: Arc<FiberModel>) -> Result<BandAtlas> {
    let dim = spec.dim();
    let nk = spec.disc.nk;
    let m = spec.band;
    let count = nk.pow(dim as u32);
    let nodes: Vec<[f64; 2]> = (0..count).map(|i| node_k(spec, nk, i)).collect();
    let solved: Vec<Vec<Eigenpair>> = nodes
        .par_iter()
        .map(|&k| model.operator(k).solve_bands(m + 1))
        .collect::<Result<_>>()?;

    let mut energies = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    let mut margin = f64::INFINITY;
    let mut worst_k = [0.0; 2];
    for (pairs, k) in solved.into_iter().zip(&nodes) {
        let e: Vec<f64> = pairs.iter().map(|p| p.energy).collect();
        let mut gap = e[m] - e[m - 1];
        if m >= 2 {
            gap = gap.min(e[m - 1] - e[m - 2]);
        }
        if gap < margin {
            margin = gap;
            worst_k = *k;
        }
        vectors.push(pairs.into_iter().nth(m - 1).unwrap().vector);
        energies.push(e);
    }
    let threshold = spec.tol.gap;
    let status = if margin >= threshold {
        AuditStatus::Passed
    } else {
        AuditStatus::AssumptionAViolated {
            margin,
            threshold,
            worst_k,
        }
    };
    let band_e: Vec<f64> = energies.iter().map(|e| e[m - 1]).collect();
    let energy_interp = PeriodicInterp::from_real(dim, nk, spec.lattice.lengths, &band_e);
    Ok(BandAtlas {
        spec: spec.clone(),
        model,
        dim,
        nk,
        band: m,
        nodes,
        energies,
        vectors,
        margin,
        status,
        energy_interp,
    })
}

impl BandAtlas {
    pub fn grid(&self) -> &CellGrid {
        &self.model.grid
    }

    pub fn passed(&self) -> bool {
        self.status == AuditStatus::Passed
    }

    fn require_isolated(&self) -> Result<()> {
        match self.status {
            AuditStatus::Passed => Ok(()),
            AuditStatus::AssumptionAViolated {
                margin, threshold, ..
            } => Err(BlochError::AssumptionAViolated { margin, threshold }),
        }
    }

    fn seams(&self) -> Seams {
        Seams::new(self.grid(), self.spec.lattice.lengths, self.nk)
    }

    pub fn band_energies(&self) -> Vec<f64> {
        self.energies.iter().map(|e| e[self.band - 1]).collect()
    }

    /// Cache document keyed by the spec hash.
    pub fn cache(&self) -> AtlasCache {
        AtlasCache {
            spec_hash: self.spec.hash(),
            nk: self.nk,
            band: self.band,
            margin: self.margin,
            nodes: self.nodes.clone(),
            energies: self.energies.clone(),
            vectors: self
                .vectors
                .iter()
                .map(|v| v.iter().flat_map(|z| [z.re, z.im]).collect())
                .collect(),
        }
    }
}

/// JSON cache layout: node list, energies of bands `1..=m+1`, and band-`m`
/// vectors as interleaved `(re, im)` pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtlasCache {
    pub spec_hash: String,
    pub nk: usize,
    pub band: usize,
    pub margin: f64,
    pub nodes: Vec<[f64; 2]>,
    pub energies: Vec<Vec<f64>>,
    pub vectors: Vec<Vec<f64>>,
}

/// Chern integer from plaquette link variables of an arbitrary-phase section.
pub fn chern_from_vectors(
    grid: &CellGrid,
    lengths: [f64; 2],
    nk: usize,
    vecs: &[Vec<C64>],
) -> (i64, Vec<f64>) {
    let s = Seams::new(grid, lengths, nk);
    let w = grid.weight;
    let mut total = 0.0;
    let mut curv = Vec::with_capacity(vecs.len());
    for idx in 0..s.count() {
        let c = s.coords(idx);
        let right = s.index([(c[0] + 1) % nk, c[1]]);
        let u1 = s.link(w, vecs, idx, 0);
        let u2 = s.link(w, vecs, idx, 1);
        // links from the shifted corners, carrying seam factors consistently
        let v_right = s.next(vecs, idx, 0).into_owned();
        let v_up = s.next(vecs, idx, 1).into_owned();
        let v_diag = {
            let mut v = s.next(vecs, right, 1).into_owned();
            if c[0] + 1 == nk {
                for (z, f) in v.iter_mut().zip(&s.shift[0]) {
                    *z *= f;
                }
            }
            v
        };
        let u2r = linalg::inner(w, &v_right, &v_diag);
        let u1u = linalg::inner(w, &v_up, &v_diag);
        let f = (u1 * u2r * u1u.conj() * u2.conj()).arg();
        curv.push(f);
        total += f;
    }
    ((total / TAU).round() as i64, curv)
}

pub fn chern_number(atlas: &BandAtlas) -> Result<i64> {
    if atlas.dim != 2 {
        return Err(BlochError::NotApplicable(
            "Chern number needs a two-dimensional lattice".into(),
        ));
    }
    atlas.require_isolated()?;
    Ok(chern_from_vectors(
        atlas.grid(),
        atlas.spec.lattice.lengths,
        atlas.nk,
        &atlas.vectors,
    )
    .0)
}

/// Berry phase `-arg prod <Psi_j, Psi_{j+1}>` around the zone, in `[0, 2 pi)`.
pub fn zak_from_vectors(grid: &CellGrid, length: f64, vecs: &[Vec<C64>]) -> f64 {
    let s = Seams::new(grid, [length, 1.0], vecs.len());
    let mut w = C64::new(1.0, 0.0);
    for idx in 0..vecs.len() {
        let l = s.link(grid.weight, vecs, idx, 0);
        w *= l / l.norm();
    }
    (-w.arg()).rem_euclid(TAU)
}

pub fn zak_phase(atlas: &BandAtlas) -> Result<f64> {
    if atlas.dim != 1 {
        return Err(BlochError::NotApplicable(
            "Zak phase is defined for one-dimensional lattices".into(),
        ));
    }
    atlas.require_isolated()?;
    Ok(zak_from_vectors(
        atlas.grid(),
        atlas.spec.lattice.lengths[0],
        &atlas.vectors,
    ))
}

/// Distance of an angle to the nearest element of `{0, pi}`.
pub fn distance_to_quantized(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    p.min((p - PI).abs()).min(TAU - p)
}

/// Band energy, gradient and Hessian from the periodic interpolant.
pub fn interpolate_band(atlas: &BandAtlas, k: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    atlas.energy_interp.eval_real_d2(k)
}

/// Smooth periodic gauge for band `m` plus everything needed to evaluate the
/// band frame at arbitrary `k`.
pub struct GaugeSection {
    pub spec: ModelSpec,
    pub model: Arc<FiberModel>,
    pub dim: usize,
    pub nk: usize,
    pub band: usize,
    pub nodes: Vec<[f64; 2]>,
    /// Gauge-fixed eigenvectors on the nodes.
    pub vectors: Vec<Vec<C64>>,
    /// Berry connection `i <Psi, d_k Psi>` on the nodes.
    pub berry: Vec<[f64; 2]>,
    pub energy_interp: PeriodicInterp,
    u_interp: PeriodicInterp,
    berry_interp: PeriodicInterp,
    points: Vec<[f64; 2]>,
}

fn apply_phase(v: &mut [C64], theta: f64) {
    let z = cis(theta);
    v.iter_mut().for_each(|x| *x *= z);
}

/// Parallel transport along one line of nodes, then spread the closing
/// mismatch linearly so that every link has the same phase. Returns the
/// closing phase.
fn transport_line(
    s: &Seams,
    w: f64,
    vecs: &mut [Vec<C64>],
    line: &[usize],
    axis: usize,
) -> Result<f64> {
    for t in 1..line.len() {
        let z = linalg::inner(w, &vecs[line[t - 1]], &vecs[line[t]]);
        if z.norm() < 0.5 {
            return Err(BlochError::GridResolution(format!(
                "neighbouring eigenvectors overlap only {:.3}; increase n_k",
                z.norm()
            )));
        }
        apply_phase(&mut vecs[line[t]], -z.arg());
    }
    let last = *line.last().unwrap();
    let z = s.link(w, vecs, last, axis);
    Ok(z.arg())
}

pub fn fix_smooth_gauge(atlas: &BandAtlas) -> Result<GaugeSection> {
    if let AuditStatus::AssumptionAViolated {
        margin,
        threshold,
        worst_k,
    } = atlas.status
    {
        return Err(BlochError::GapTooSmall {
            k: worst_k,
            gap: margin,
            threshold,
        });
    }
    if atlas.dim == 2 {
        let c = chern_number(atlas)?;
        if c != 0 {
            return Err(BlochError::AssumptionBViolated { chern: c });
        }
    }
    let s = atlas.seams();
    let nk = atlas.nk;
    let w = atlas.grid().weight;
    let mut vecs = atlas.vectors.clone();
    if atlas.dim == 1 {
        let line: Vec<usize> = (0..nk).collect();
        let lam = transport_line(&s, w, &mut vecs, &line, 0)?;
        for (t, &i) in line.iter().enumerate() {
            apply_phase(&mut vecs[i], lam * t as f64 / nk as f64);
        }
    } else {
        let col: Vec<usize> = (0..nk).map(|i2| s.index([0, i2])).collect();
        let lam2 = transport_line(&s, w, &mut vecs, &col, 1)?;
        for (t, &i) in col.iter().enumerate() {
            apply_phase(&mut vecs[i], lam2 * t as f64 / nk as f64);
        }
        let mut prev: Option<f64> = None;
        for i2 in 0..nk {
            let row: Vec<usize> = (0..nk).map(|i1| s.index([i1, i2])).collect();
            let mut lam = transport_line(&s, w, &mut vecs, &row, 0)?;
            if let Some(p) = prev {
                lam = p + (lam - p + PI).rem_euclid(TAU) - PI;
            }
            prev = Some(lam);
            for (t, &i) in row.iter().enumerate() {
                apply_phase(&mut vecs[i], lam * t as f64 / nk as f64);
            }
        }
    }
    GaugeSection::from_vectors(atlas, vecs, &atlas.spec.twist.clone())
}

impl GaugeSection {
    /// Build the section from gauge-fixed node vectors, applying an extra twist.
    pub fn from_vectors(
        atlas: &BandAtlas,
        mut vecs: Vec<Vec<C64>>,
        twist: &GaugeTwist,
    ) -> Result<Self> {
        let lat = &atlas.spec.lattice;
        if !twist.is_trivial() {
            for (v, k) in vecs.iter_mut().zip(&atlas.nodes) {
                apply_phase(v, twist.eval(lat, *k).0);
            }
        }
        let points = atlas.grid().points();
        let u: Vec<Vec<C64>> = vecs
            .iter()
            .zip(&atlas.nodes)
            .map(|(v, k)| {
                v.iter()
                    .zip(&points)
                    .map(|(z, x)| z * cis(k[0] * x[0] + k[1] * x[1]))
                    .collect()
            })
            .collect();
        let u_interp = PeriodicInterp::new(atlas.dim, atlas.nk, lat.lengths, &u);
        let mut sec = GaugeSection {
            spec: atlas.spec.clone(),
            model: Arc::clone(&atlas.model),
            dim: atlas.dim,
            nk: atlas.nk,
            band: atlas.band,
            nodes: atlas.nodes.clone(),
            vectors: vecs,
            berry: Vec::new(),
            energy_interp: atlas.energy_interp.clone(),
            u_interp,
            berry_interp: PeriodicInterp::from_real(1, 1, [1.0, 1.0], &[0.0]),
            points,
        };
        let berry: Vec<[f64; 2]> = (0..sec.nodes.len())
            .map(|i| sec.berry_from_interp(sec.nodes[i], &sec.vectors[i]))
            .collect();
        let samples: Vec<Vec<C64>> = berry
            .iter()
            .map(|b| vec![C64::new(b[0], 0.0), C64::new(b[1], 0.0)])
            .collect();
        sec.berry_interp = PeriodicInterp::new(sec.dim, sec.nk, lat.lengths, &samples);
        sec.berry = berry;
        Ok(sec)
    }

    pub fn grid(&self) -> &CellGrid {
        &self.model.grid
    }

    /// `exp(-i k.x) U_interp(k)`: the smooth gauge field itself (not an exact eigenvector off-grid).
    pub fn psi_interp(&self, k: [f64; 2]) -> Vec<C64> {
        let u = self.u_interp.eval(k);
        u.iter()
            .zip(&self.points)
            .map(|(z, x)| z * cis(-(k[0] * x[0] + k[1] * x[1])))
            .collect()
    }

    fn berry_from_interp(&self, k: [f64; 2], psi: &[C64]) -> [f64; 2] {
        let (u, du) = self.u_interp.eval_grad(k);
        let w = self.grid().weight;
        let mut psi_i = Vec::with_capacity(u.len());
        let mut out = [0.0; 2];
        for (z, x) in u.iter().zip(&self.points) {
            psi_i.push(z * cis(-(k[0] * x[0] + k[1] * x[1])));
        }
        let alpha = linalg::inner(w, psi, &psi_i).norm();
        for j in 0..self.dim {
            let d: Vec<C64> = u
                .iter()
                .zip(&du[j])
                .zip(&self.points)
                .map(|((z, dz), x)| {
                    (dz - C64::new(0.0, x[j]) * z) * cis(-(k[0] * x[0] + k[1] * x[1]))
                })
                .collect();
            out[j] = -linalg::inner(w, psi, &d).im / alpha;
        }
        out
    }

    /// Berry connection and its Jacobian `d[j][l] = d A_j / d k_l` from the interpolant.
    pub fn berry(&self, k: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        let (v, g) = self.berry_interp.eval_grad(k);
        let mut a = [0.0; 2];
        let mut d = [[0.0; 2]; 2];
        for j in 0..self.dim {
            a[j] = v[j].re;
            for l in 0..self.dim {
                d[j][l] = g[l][j].re;
            }
        }
        (a, d)
    }

    pub fn energy(&self, k: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        self.energy_interp.eval_real_d2(k)
    }

    /// Exact eigenvector at `k`, phase-aligned with the smooth section.
    pub fn eigenvector(&self, k: [f64; 2]) -> Result<(FiberOperator, Vec<Eigenpair>, Vec<C64>)> {
        let op = self.model.operator(k);
        let pairs = op.solve_bands(self.band + 1)?;
        let mut psi = pairs[self.band - 1].vector.clone();
        let z = linalg::inner(self.grid().weight, &psi, &self.psi_interp(k));
        apply_phase(&mut psi, z.arg());
        Ok((op, pairs, psi))
    }

    /// Local band data at `k`: exact eigenpair, velocities, reduced resolvent
    /// and full eigenvector derivatives.
    pub fn frame(&self, k: [f64; 2]) -> Result<BandFrame> {
        let (op, pairs, psi) = self.eigenvector(k)?;
        let (berry, dberry) = self.berry(k);
        band_frame(&self.spec, self.band, op, pairs, psi, berry, dberry)
    }

    /// `max || Psi(k + e*_j) - exp(-i e*_j.x) Psi(k) ||` over the given points.
    pub fn seam_residual(&self, ks: &[[f64; 2]]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        let w = self.grid().weight;
        for &k in ks {
            let (_, _, a) = self.eigenvector(k)?;
            for j in 0..self.dim {
                let g = TAU / self.spec.lattice.lengths[j];
                let mut k2 = k;
                k2[j] += g;
                let (_, _, b) = self.eigenvector(k2)?;
                let diff: Vec<C64> = b
                    .iter()
                    .zip(&a)
                    .zip(&self.points)
                    .map(|((bb, aa), x)| bb - aa * cis(-g * x[j]))
                    .collect();
                worst = worst.max(linalg::norm(w, &diff));
            }
        }
        Ok(worst)
    }

    /// Largest `|arg <Psi(k_i), Psi(k_i + step)>|` over all nearest-neighbour links.
    pub fn max_link_angle(&self) -> f64 {
        let s = Seams::new(self.grid(), self.spec.lattice.lengths, self.nk);
        let mut worst: f64 = 0.0;
        for idx in 0..s.count() {
            for axis in 0..self.dim {
                worst = worst.max(
                    s.link(self.grid().weight, &self.vectors, idx, axis)
                        .arg()
                        .abs(),
                );
            }
        }
        worst
    }

    /// Plaquette curvature (2D) per node, zeros in 1D.
    pub fn plaquette_curvature(&self) -> Vec<f64> {
        if self.dim == 1 {
            return vec![0.0; self.nodes.len()];
        }
        chern_from_vectors(
            self.grid(),
            self.spec.lattice.lengths,
            self.nk,
            &self.vectors,
        )
        .1
    }
}

/// Solver for `(H0(k) - E_m(k)) x = r` on the complement of `Psi`, realized as
/// an LU of the regular matrix `H - E + sigma |Psi><Psi|`.
pub struct ReducedResolvent {
    lu: DenseLu,
    op_apply: FiberOperator,
    energy: f64,
    psi: Vec<C64>,
    weight: f64,
    tol: f64,
}

impl ReducedResolvent {
    pub fn new(op: &FiberOperator, energy: f64, psi: &[C64], gap: f64, tol: f64) -> Result<Self> {
        let w = op.grid().weight;
        let mut m = op.dense();
        let n = m.nrows();
        let sigma = gap.max(1e-12);
        for i in 0..n {
            m[(i, i)] -= C64::new(energy, 0.0);
            for j in 0..n {
                m[(i, j)] += psi[i] * psi[j].conj() * (sigma * w);
            }
        }
        Ok(ReducedResolvent {
            lu: DenseLu::new(&m),
            op_apply: op.clone(),
            energy,
            psi: psi.to_vec(),
            weight: w,
            tol,
        })
    }

    pub fn psi(&self) -> &[C64] {
        &self.psi
    }

    /// `M x` with `M = H0 - E`.
    pub fn apply_m(&self, x: &[C64]) -> Vec<C64> {
        let mut y = self.op_apply.apply(x);
        linalg::axpy(C64::new(-self.energy, 0.0), x, &mut y);
        y
    }

    /// Unique solution orthogonal to `Psi`; the right side must be orthogonal to `Psi`.
    pub fn solve(&self, rhs: &[C64]) -> Result<Vec<C64>> {
        let ov = linalg::inner(self.weight, &self.psi, rhs).norm();
        let scale = linalg::norm(self.weight, rhs).max(1.0);
        if ov > self.tol * scale {
            return Err(BlochError::NonOrthogonalRhs { overlap: ov });
        }
        let mut x = self.lu.solve(rhs);
        if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(BlochError::SingularSolve("non-finite solution".into()));
        }
        linalg::project_out(self.weight, &self.psi, &mut x);
        Ok(x)
    }
}

pub fn fredholm_solve(rr: &ReducedResolvent, rhs: &[C64]) -> Result<Vec<C64>> {
    rr.solve(rhs)
}

/// Everything known about band `m` at one quasimomentum.
pub struct BandFrame {
    pub k: [f64; 2],
    pub energy: f64,
    pub lower: Option<f64>,
    pub upper: f64,
    pub gap: f64,
    /// Hellmann-Feynman velocity.
    pub grad: [f64; 2],
    /// Exact discrete Hessian of the band energy.
    pub hess: [[f64; 2]; 2],
    pub psi: Vec<C64>,
    /// `(dH/dk_j) Psi`.
    pub hpsi: [Vec<C64>; 2],
    pub berry: [f64; 2],
    /// `dberry[j][l] = d A_j / d k_l`.
    pub dberry: [[f64; 2]; 2],
    /// Full derivatives `d Psi / d k_j`.
    pub dpsi: [Vec<C64>; 2],
    /// Complement parts of `dpsi`.
    pub normal: [Vec<C64>; 2],
    pub op: FiberOperator,
    pub resolvent: ReducedResolvent,
    pub pairs: Vec<Eigenpair>,
}

/// Band frame from an exact eigenpair set at `k`, with the Berry connection
/// (and its `k`-Jacobian) of the gauge `psi` belongs to.
pub fn band_frame(
    spec: &ModelSpec,
    band: usize,
    op: FiberOperator,
    pairs: Vec<Eigenpair>,
    psi: Vec<C64>,
    berry: [f64; 2],
    dberry: [[f64; 2]; 2],
) -> Result<BandFrame> {
    let k = op.k;
    let dim = spec.dim();
    let m = band;
    let energy = pairs[m - 1].energy;
    let upper = pairs[m].energy;
    let lower = if m >= 2 {
        Some(pairs[m - 2].energy)
    } else {
        None
    };
    let gap = (upper - energy).min(lower.map_or(f64::INFINITY, |l| energy - l));
    if gap < spec.tol.gap {
        return Err(BlochError::GapTooSmall {
            k,
            gap,
            threshold: spec.tol.gap,
        });
    }
    let w = op.grid().weight;
    let resolvent = ReducedResolvent::new(&op, energy, &psi, gap, spec.tol.fredholm)?;
    let mut grad = [0.0; 2];
    let mut hpsi: [Vec<C64>; 2] = [Vec::new(), Vec::new()];
    for j in 0..dim {
        hpsi[j] = op.apply_dk(j, &psi);
        grad[j] = linalg::inner(w, &psi, &hpsi[j]).re;
    }
    let mut dpsi: [Vec<C64>; 2] = [Vec::new(), Vec::new()];
    let mut normal: [Vec<C64>; 2] = [Vec::new(), Vec::new()];
    for j in 0..dim {
        let mut rhs = hpsi[j].clone();
        linalg::axpy(C64::new(-grad[j], 0.0), &psi, &mut rhs);
        linalg::project_out(w, &psi, &mut rhs);
        let mut n = resolvent.solve(&rhs)?;
        linalg::scale(C64::new(-1.0, 0.0), &mut n);
        let mut d = n.clone();
        linalg::axpy(C64::new(0.0, -berry[j]), &psi, &mut d);
        normal[j] = n;
        dpsi[j] = d;
    }
    // exact discrete Hessian: <Psi, H_jl Psi> + 2 Re <H_j Psi, d_l Psi>
    let mut hess = [[0.0; 2]; 2];
    for j in 0..dim {
        for l in 0..dim {
            let hjl = op.apply_dkk(j, l, &psi);
            hess[j][l] =
                linalg::inner(w, &psi, &hjl).re + 2.0 * linalg::inner(w, &hpsi[j], &normal[l]).re;
        }
    }
    Ok(BandFrame {
        k,
        energy,
        lower,
        upper,
        gap,
        grad,
        hess,
        psi,
        hpsi,
        berry,
        dberry,
        dpsi,
        normal,
        op,
        resolvent,
        pairs,
    })
}

/// Frame at `k` in the local parallel-transport gauge (`A_berry = 0` at `k`).
/// Needs no global section, so it also works for bands with nonzero Chern number.
pub fn local_frame(
    spec: &ModelSpec,
    model: &Arc<FiberModel>,
    band: usize,
    k: [f64; 2],
) -> Result<BandFrame> {
    let op = model.operator(k);
    let pairs = op.solve_bands(band + 1)?;
    let psi = pairs[band - 1].vector.clone();
    band_frame(spec, band, op, pairs, psi, [0.0; 2], [[0.0; 2]; 2])
}

/// Eigenvector derivatives at `k` in the smooth gauge.
pub fn dk_eigenvector(section: &GaugeSection, k: [f64; 2]) -> Result<Vec<Vec<C64>>> {
    let f = section.frame(k)?;
    Ok(f.dpsi[..section.dim].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    #[test]
    fn free_particle_flags_band_touching() {
        let atlas = build_band_atlas(&models::free_1d(32)).unwrap();
        assert!(matches!(
            atlas.status,
            AuditStatus::AssumptionAViolated { .. }
        ));
        assert!(matches!(
            fix_smooth_gauge(&atlas),
            Err(BlochError::GapTooSmall { .. })
        ));
    }

    #[test]
    fn mathieu_gauge_is_smooth_and_periodic() {
        let mut spec = models::mathieu(32);
        spec.disc.nk = 16;
        let atlas = build_band_atlas(&spec).unwrap();
        assert!(atlas.passed());
        let sec = fix_smooth_gauge(&atlas).unwrap();
        assert!(sec.max_link_angle() < PI / 8.0);
        assert!(sec.seam_residual(&[[0.0, 0.0], [0.123, 0.0]]).unwrap() < 1e-8);
        let zak = zak_phase(&atlas).unwrap();
        assert!(distance_to_quantized(zak) < 1e-6);
    }

    #[test]
    fn dpsi_matches_finite_difference() {
        let mut spec = models::mathieu(32);
        spec.disc.nk = 16;
        let atlas = build_band_atlas(&spec).unwrap();
        let sec = fix_smooth_gauge(&atlas).unwrap();
        let k = [0.17, 0.0];
        let f = sec.frame(k).unwrap();
        let h = 1e-4;
        let (_, _, p) = sec.eigenvector([k[0] + h, 0.0]).unwrap();
        let (_, _, m) = sec.eigenvector([k[0] - h, 0.0]).unwrap();
        let fd: Vec<C64> = p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let err = linalg::norm(sec.grid().weight, &linalg::sub(&fd, &f.dpsi[0]));
        assert!(err < 1e-5, "err {err}");
        let w = sec.grid().weight;
        assert!(linalg::inner(w, &f.psi, &f.dpsi[0]).re.abs() < 1e-8);
        assert!(linalg::inner(w, &f.psi, &f.normal[0]).norm() < 1e-10);
    }

    #[test]
    fn fredholm_contract() {
        let spec = models::mathieu(32);
        let atlas = build_band_atlas(&spec).unwrap();
        let sec = fix_smooth_gauge(&atlas).unwrap();
        let f = sec.frame([0.3, 0.0]).unwrap();
        let zero = vec![C64::new(0.0, 0.0); f.psi.len()];
        assert!(fredholm_solve(&f.resolvent, &zero)
            .unwrap()
            .iter()
            .all(|z| z.norm() == 0.0));
        assert!(matches!(
            fredholm_solve(&f.resolvent, &f.psi),
            Err(BlochError::NonOrthogonalRhs { .. })
        ));
    }
}
