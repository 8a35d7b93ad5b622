//! Effective-Hamiltonian symbols: the Peierls symbol `h0`, the first-order
//! correction `h1`, the correctors `F0`, `F1` and the normalizer `a1`.
//!
//! With `kt = k + A(y)` and `H_j`, `H_jl` the exact `k`-derivatives of the
//! discrete fiber operator, the order-`eps` part of the two-scale operator is
//!
//! `H1 = -i sum_j H_j(kt) d/dy_j - (i/2) sum_jl (dA_l/dy_j) H_jl(kt)`,
//!
//! which reduces to `-2i (p + kt).d_y - i div A` in the continuum.
//!
//! `h1` is evaluated twice: from the solvability condition
//! (`<F0, i dF0/dk . dh0/dy + H1 F0>`) and from the explicit form
//! `(1/2i) d_y . d_k E - L.B - i <Psi, dPsi/ds>` along the `h0` flow. The two
//! must agree; a mismatch is reported as an error.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::atlas::{local_frame, BandAtlas, BandFrame, GaugeSection};
use crate::fiber::FiberModel;
use crate::interp::PeriodicInterp;
use crate::config::{ModelSpec, SlowFieldValues};
use crate::error::{BlochError, Result};
use crate::linalg::{self, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum H1Route {
    InnerProduct,
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSpacePoint {
    pub y: [f64; 2],
    pub k: [f64; 2],
    pub kt: [f64; 2],
}

impl PhaseSpacePoint {
    pub fn new(spec: &ModelSpec, y: [f64; 2], k: [f64; 2]) -> Self {
        let a = spec.slow_fields(y, 0).a;
        PhaseSpacePoint {
            y,
            k,
            kt: [k[0] + a[0], k[1] + a[1]],
        }
    }
}

/// All symbols at one phase-space point.
#[derive(Clone, Debug)]
pub struct SymbolPoint {
    pub point: PhaseSpacePoint,
    pub slow: SlowFieldValues,
    /// `E_m(kt) + W(y)` with the exact discrete band energy.
    pub h0: f64,
    pub dh0_dy: [f64; 2],
    /// `h1` from the solvability condition (normative).
    pub h1: C64,
    /// `h1` from the explicit formula.
    pub h1_explicit: C64,
    /// `(1/2i) d_y . d_k E_m(k + A(y))`.
    pub divergence: C64,
    pub l3: f64,
    pub b3: f64,
    /// `-i <Psi, dPsi/ds>` along the `h0` flow (real).
    pub berry_term: f64,
    /// `d kt / ds` along the `h0` flow.
    pub kt_dot: [f64; 2],
    pub a1: f64,
    pub f0: Vec<C64>,
    /// Complement part of `F1`; the full corrector is `f1_perp + a1 F0`.
    pub f1_perp: Vec<C64>,
    /// `|<F0, rhs>|` of the order-`eps` equation after subtracting `h1`.
    pub solvability: f64,
    /// `|| M F1 - rhs ||` (direct substitution).
    pub substitution: f64,
}

impl SymbolPoint {
    pub fn f1(&self, with_a1: bool) -> Vec<C64> {
        let mut f = self.f1_perp.clone();
        if with_a1 {
            linalg::axpy(C64::new(self.a1, 0.0), &self.f0, &mut f);
        }
        f
    }
}

fn key(y: [f64; 2], k: [f64; 2]) -> [i64; 4] {
    let r = |v: f64| (v * 1e12).round() as i64;
    [r(y[0]), r(y[1]), r(k[0]), r(k[1])]
}

/// Symbol evaluator with a memo cache keyed by `(y, k)` rounded to `1e-12`.
///
/// With a smooth section the correctors live in that global gauge. Without one
/// (bands with nonzero Chern number) every point uses its own local
/// parallel-transport gauge: `h0`, `h1` and `L` are still well defined, while
/// `a1` and phases of `F0`, `F1` are then only meaningful pointwise.
pub struct SymbolTable {
    pub section: Option<Arc<GaugeSection>>,
    pub model: Arc<FiberModel>,
    pub band: usize,
    pub spec: ModelSpec,
    pub nk: usize,
    pub nodes: Vec<[f64; 2]>,
    energy_interp: PeriodicInterp,
    l3_interp: OnceLock<PeriodicInterp>,
    pub check_routes: bool,
    cache: Mutex<HashMap<[i64; 4], Arc<SymbolPoint>>>,
}

impl SymbolTable {
    pub fn new(section: Arc<GaugeSection>) -> Self {
        SymbolTable {
            model: Arc::clone(&section.model),
            band: section.band,
            spec: section.spec.clone(),
            energy_interp: section.energy_interp.clone(),
            nk: section.nk,
            nodes: section.nodes.clone(),
            l3_interp: OnceLock::new(),
            section: Some(section),
            check_routes: true,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Table in local gauges; needs only a band atlas with a passed gap audit.
    pub fn local(atlas: &BandAtlas) -> Self {
        SymbolTable {
            section: None,
            model: Arc::clone(&atlas.model),
            band: atlas.band,
            spec: atlas.spec.clone(),
            energy_interp: atlas.energy_interp.clone(),
            nk: atlas.nk,
            nodes: atlas.nodes.clone(),
            l3_interp: OnceLock::new(),
            check_routes: true,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn energy(&self, k: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        self.energy_interp.eval_real_d2(k)
    }

    /// `L3(k)` from a trigonometric interpolant over the atlas nodes
    /// (zero in 1D). Built on first use.
    pub fn l3_fast(&self, kt: [f64; 2]) -> Result<f64> {
        if self.dim() == 1 {
            return Ok(0.0);
        }
        if self.l3_interp.get().is_none() {
            let vals: Result<Vec<f64>> = self
                .nodes
                .par_iter()
                .map(|&k| Ok(angular_momentum(&local_frame(&self.spec, &self.model, self.band, k)?)))
                .collect();
            let it = PeriodicInterp::from_real(2, self.nk, self.spec.lattice.lengths, &vals?);
            let _ = self.l3_interp.set(it);
        }
        Ok(self.l3_interp.get().unwrap().eval_real_d2(kt).0)
    }

    /// Berry connection of the smooth section (zero in local gauges).
    pub fn berry(&self, k: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        match &self.section {
            Some(s) => s.berry(k),
            None => ([0.0; 2], [[0.0; 2]; 2]),
        }
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn point(&self, y: [f64; 2], k: [f64; 2]) -> PhaseSpacePoint {
        PhaseSpacePoint::new(&self.spec, y, k)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    /// Peierls symbol from the band interpolant: value, `d/dy`, `d/dk`,
    /// and second derivatives `(d2/dy dy, d2/dy dk, d2/dk dk)`.
    pub fn h0_derivs(&self, y: [f64; 2], k: [f64; 2]) -> H0Derivs {
        let d = self.dim();
        let s = self.spec.slow_fields(y, 2);
        let kt = [k[0] + s.a[0], k[1] + s.a[1]];
        let (e, g, h) = self.energy(kt);
        let mut out = H0Derivs {
            value: e + s.w,
            ..Default::default()
        };
        for j in 0..d {
            out.dk[j] = g[j];
            out.dy[j] = s.dw[j];
            for n in 0..d {
                out.dy[j] += g[n] * s.da[j][n];
            }
            for l in 0..d {
                out.dkk[j][l] = h[j][l];
                // d2/dy_j dk_l = sum_n H_ln dA_n/dy_j
                let mut v = 0.0;
                for n in 0..d {
                    v += h[l][n] * s.da[j][n];
                }
                out.dyk[j][l] = v;
                // d2/dy_j dy_l
                let mut w = s.d2w[j][l];
                for n in 0..d {
                    w += g[n] * s.d2a[j][l][n];
                    for q in 0..d {
                        w += h[n][q] * s.da[j][n] * s.da[l][q];
                    }
                }
                out.dyy[j][l] = w;
            }
        }
        out
    }

    pub fn h0(&self, p: &PhaseSpacePoint) -> f64 {
        self.energy(p.kt).0 + self.spec.slow_fields(p.y, 0).w
    }

    pub fn eval(&self, y: [f64; 2], k: [f64; 2]) -> Result<Arc<SymbolPoint>> {
        let key = key(y, k);
        if let Some(p) = self.cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(self.compute(y, k)?);
        self.cache.lock().unwrap().insert(key, Arc::clone(&p));
        Ok(p)
    }

    pub fn frame(&self, p: &PhaseSpacePoint) -> Result<BandFrame> {
        match &self.section {
            Some(s) => s.frame(p.kt),
            None => local_frame(&self.spec, &self.model, self.band, p.kt),
        }
    }

    fn compute(&self, y: [f64; 2], k: [f64; 2]) -> Result<SymbolPoint> {
        let p = self.point(y, k);
        let f = self.frame(&p)?;
        let s = self.spec.slow_fields(y, 2);
        let sp = evaluate_symbols(self.dim(), &p, &f, &s, self.spec.tol.fredholm)?;
        if self.check_routes {
            let tol = self.spec.tol.route * (1.0 + sp.h1.norm());
            if (sp.h1 - sp.h1_explicit).norm() > tol {
                return Err(BlochError::RouteMismatch {
                    y,
                    k,
                    inner: sp.h1,
                    explicit: sp.h1_explicit,
                });
            }
        }
        Ok(sp)
    }

    pub fn h1(&self, p: &PhaseSpacePoint, route: H1Route) -> Result<C64> {
        let sp = self.eval(p.y, p.k)?;
        Ok(match route {
            H1Route::InnerProduct => sp.h1,
            H1Route::Explicit => sp.h1_explicit,
        })
    }

    pub fn angular_momentum_l(&self, p: &PhaseSpacePoint) -> Result<[f64; 3]> {
        if self.dim() == 1 {
            return Ok([0.0; 3]);
        }
        let f = self.frame(p)?;
        Ok([0.0, 0.0, angular_momentum(&f)])
    }

    pub fn f0(&self, p: &PhaseSpacePoint) -> Result<Vec<C64>> {
        Ok(self.eval(p.y, p.k)?.f0.clone())
    }

    pub fn f1(&self, p: &PhaseSpacePoint) -> Result<Vec<C64>> {
        Ok(self.eval(p.y, p.k)?.f1(true))
    }

    pub fn a1(&self, p: &PhaseSpacePoint) -> Result<f64> {
        Ok(self.eval(p.y, p.k)?.a1)
    }

    /// Real part of `h1` along the flow, `-L.B - A_berry . dkt/ds`, from
    /// interpolants only (no eigensolve). Used by the corrected flow.
    pub fn re_h1_fast(&self, y: [f64; 2], k: [f64; 2]) -> Result<f64> {
        let d = self.dim();
        let s = self.spec.slow_fields(y, 1);
        let kt = [k[0] + s.a[0], k[1] + s.a[1]];
        let l3 = self.l3_fast(kt)?;
        let (_, g, _) = self.energy(kt);
        let (berry, _) = self.berry(kt);
        let ktd = kt_dot(d, &g, &s);
        let mut v = -l3 * s.b;
        for l in 0..d {
            v -= berry[l] * ktd[l];
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct H0Derivs {
    pub value: f64,
    pub dy: [f64; 2],
    pub dk: [f64; 2],
    pub dyy: [[f64; 2]; 2],
    /// `dyk[j][l] = d2 h0 / dy_j dk_l`.
    pub dyk: [[f64; 2]; 2],
    pub dkk: [[f64; 2]; 2],
}

/// `d kt / ds = sum_j E_j (dA_l/dy_j - dA_j/dy_l) - dW/dy_l` along the `h0` flow.
pub fn kt_dot(d: usize, grad: &[f64; 2], s: &SlowFieldValues) -> [f64; 2] {
    let mut out = [0.0; 2];
    for l in 0..d {
        let mut v = -s.dw[l];
        for j in 0..d {
            v += grad[j] * (s.da[j][l] - s.da[l][j]);
        }
        out[l] = v;
    }
    out
}

/// `L3 = Im <M dPsi/dk1, dPsi/dk2>` from the complement parts.
pub fn angular_momentum(f: &BandFrame) -> f64 {
    if f.normal[1].is_empty() {
        return 0.0;
    }
    let w = f.op.grid().weight;
    let m1 = f.resolvent.apply_m(&f.normal[0]);
    linalg::inner(w, &m1, &f.normal[1]).im
}

/// `H1 F0` for `F0(y, k) = Psi(k + A(y))`.
fn apply_h1_tilde(
    d: usize,
    f: &BandFrame,
    s: &SlowFieldValues,
    v: &[C64],
    dv: &[Vec<C64>; 2],
) -> Vec<C64> {
    let n = v.len();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for j in 0..d {
        // d/dy_j F0 = sum_l dPsi/dk_l dA_l/dy_j
        let mut dy = vec![C64::new(0.0, 0.0); n];
        for l in 0..d {
            linalg::axpy(C64::new(s.da[j][l], 0.0), &dv[l], &mut dy);
        }
        let hj = f.op.apply_dk(j, &dy);
        linalg::axpy(C64::new(0.0, -1.0), &hj, &mut out);
        for l in 0..d {
            if s.da[j][l] != 0.0 {
                let hjl = f.op.apply_dkk(j, l, v);
                linalg::axpy(C64::new(0.0, -0.5 * s.da[j][l]), &hjl, &mut out);
            }
        }
    }
    out
}

/// Evaluate every symbol at one point from a band frame at `kt`.
pub fn evaluate_symbols(
    d: usize,
    p: &PhaseSpacePoint,
    f: &BandFrame,
    s: &SlowFieldValues,
    fredholm_tol: f64,
) -> Result<SymbolPoint> {
    let w = f.op.grid().weight;
    let psi = &f.psi;
    let g = f.grad;

    let mut dh0 = [0.0; 2];
    for l in 0..d {
        dh0[l] = s.dw[l];
        for n in 0..d {
            dh0[l] += g[n] * s.da[l][n];
        }
    }
    let h0 = f.energy + s.w;

    // inner-product route
    let h1f0 = apply_h1_tilde(d, f, s, psi, &f.dpsi);
    let mut h1 = linalg::inner(w, psi, &h1f0);
    for l in 0..d {
        h1 += C64::new(0.0, 1.0) * linalg::inner(w, psi, &f.dpsi[l]) * dh0[l];
    }

    // explicit route
    let mut div = 0.0;
    for j in 0..d {
        for l in 0..d {
            div += f.hess[j][l] * s.da[j][l];
        }
    }
    let divergence = C64::new(0.0, -0.5 * div);
    let l3 = if d == 2 { angular_momentum(f) } else { 0.0 };
    let b3 = s.b;
    let ktd = kt_dot(d, &g, s);
    let mut psidot = C64::new(0.0, 0.0);
    for l in 0..d {
        psidot += linalg::inner(w, psi, &f.dpsi[l]) * ktd[l];
    }
    let berry_term = (C64::new(0.0, -1.0) * psidot).re;
    let h1_explicit = divergence - l3 * b3 + C64::new(0.0, -1.0) * psidot;

    // F1
    let mut rhs = vec![C64::new(0.0, 0.0); psi.len()];
    for l in 0..d {
        linalg::axpy(C64::new(0.0, -dh0[l]), &f.dpsi[l], &mut rhs);
    }
    linalg::axpy(h1, psi, &mut rhs);
    linalg::axpy(C64::new(-1.0, 0.0), &h1f0, &mut rhs);
    let solvability = linalg::inner(w, psi, &rhs).norm();
    if solvability > fredholm_tol * linalg::norm(w, &rhs).max(1.0) {
        return Err(BlochError::NonOrthogonalRhs {
            overlap: solvability,
        });
    }
    let f1_perp = f.resolvent.solve(&rhs)?;
    let mut r = f.resolvent.apply_m(&f1_perp);
    for (a, b) in r.iter_mut().zip(&rhs) {
        *a -= b;
    }
    let substitution = linalg::norm(w, &r);

    let mut s1 = 0.0;
    for j in 0..d {
        for l in 0..d {
            s1 += s.da[j][l] * f.dberry[j][l];
        }
    }
    let a1 = -0.5 * s1;

    Ok(SymbolPoint {
        point: *p,
        slow: *s,
        h0,
        dh0_dy: dh0,
        h1,
        h1_explicit,
        divergence,
        l3,
        b3,
        berry_term,
        kt_dot: ktd,
        a1,
        f0: psi.clone(),
        f1_perp,
        solvability,
        substitution,
    })
}

/// Sum-over-states value of `L3` from a complete set of eigenpairs at `k`.
pub fn l3_sum_over_states(f: &BandFrame, all: &[crate::fiber::Eigenpair], band: usize) -> f64 {
    let w = f.op.grid().weight;
    let em = all[band - 1].energy;
    let mut acc = C64::new(0.0, 0.0);
    for (n, pn) in all.iter().enumerate() {
        if n == band - 1 {
            continue;
        }
        let a = linalg::inner(w, &f.hpsi[0], &pn.vector);
        let b = linalg::inner(w, &pn.vector, &f.hpsi[1]);
        acc += a * b / (pn.energy - em);
    }
    acc.im
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{build_band_atlas, fix_smooth_gauge};
    use crate::models;

    fn table(spec: &ModelSpec) -> SymbolTable {
        let atlas = build_band_atlas(spec).unwrap();
        SymbolTable::new(Arc::new(fix_smooth_gauge(&atlas).unwrap()))
    }

    #[test]
    fn vanishing_slow_fields_give_zero_correction() {
        let t = table(&models::mathieu(32));
        let sp = t.eval([0.3, 0.0], [0.2, 0.0]).unwrap();
        assert!(sp.h1.norm() < 1e-10);
        assert!(sp.a1.abs() < 1e-12);
        assert!(linalg::max_abs(&sp.f1(true)) < 1e-9);
        let w = t.model.grid.weight;
        assert!((linalg::norm(w, &sp.f0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn routes_agree_with_slow_fields() {
        let t = table(&models::mathieu_driven(32));
        for (y, k) in [(0.3, 0.1), (1.7, -0.4), (4.0, 0.45)] {
            let sp = t.eval([y, 0.0], [k, 0.0]).unwrap();
            assert!((sp.h1 - sp.h1_explicit).norm() < 1e-8 * (1.0 + sp.h1.norm()));
            assert!(sp.solvability < 1e-10);
            assert!(sp.substitution < 1e-7);
            // real part is the Berry term in 1D; imaginary part is the divergence term
            assert!((sp.h1.re - sp.berry_term).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_a_has_real_h1() {
        let mut spec = models::mathieu(32);
        spec.slow.a[0] = crate::config::SlowScalar::constant(0.3);
        let t = table(&spec);
        let sp = t.eval([1.0, 0.0], [0.1, 0.0]).unwrap();
        assert!(sp.h1.im.abs() < 1e-8);
        let p = t.point([1.0, 0.0], [0.1, 0.0]);
        let e = t.energy([0.4, 0.0]).0;
        assert!((t.h0(&p) - e).abs() < 1e-12);
    }

    #[test]
    fn routes_agree_in_two_dimensions() {
        use crate::config::SlowScalar;
        let mut spec = models::square_well(12, 20.0);
        spec.slow.a[0] = SlowScalar::cosine(0.0, 0.1, [0, 1]);
        spec.slow.a[1] = SlowScalar::cosine(0.05, 0.1, [1, 0]);
        spec.slow.w = SlowScalar::cosine(0.0, 0.2, [1, 1]);
        let t = table(&spec);
        let sp = t.eval([0.4, 1.1], [0.7, -1.2]).unwrap();
        assert!(sp.b3.abs() > 1e-3);
        assert!((sp.h1 - sp.h1_explicit).norm() < 1e-7 * (1.0 + sp.h1.norm()));
        let p = sp.point;
        let f = t.frame(&p).unwrap();
        let all = f.op.solve_all().unwrap();
        let l = l3_sum_over_states(&f, &all, 1);
        assert!((l - sp.l3).abs() < 1e-7 * (1.0 + l.abs()));
    }

    #[test]
    fn local_gauges_in_a_magnetic_band() {
        use crate::config::SlowScalar;
        let mut spec = models::magnetic_lattice(12, 2.0);
        spec.slow.a[0] = SlowScalar::cosine(0.0, 0.2, [0, 1]);
        spec.slow.w = SlowScalar::cosine(0.0, 0.3, [1, 0]);
        let atlas = build_band_atlas(&spec).unwrap();
        let t = SymbolTable::local(&atlas);
        let sp = t.eval([0.9, 2.0], [1.3, 0.4]).unwrap();
        assert!(sp.b3.abs() > 1e-3 && sp.l3.abs() > 1e-6);
        assert!((sp.h1 - sp.h1_explicit).norm() < 1e-7 * (1.0 + sp.h1.norm()));
        // local and smooth gauges give the same gauge-invariant symbols
        let s = SymbolTable::new(Arc::new(fix_smooth_gauge(&atlas).unwrap()));
        let sg = s.eval([0.9, 2.0], [1.3, 0.4]).unwrap();
        assert!((sg.l3 - sp.l3).abs() < 1e-8);
        assert!((sg.h0 - sp.h0).abs() < 1e-10);
    }

    #[test]
    fn h0_derivatives_match_finite_differences() {
        let t = table(&models::mathieu_driven(32));
        let (y, k) = ([0.8, 0.0], [0.3, 0.0]);
        let d = t.h0_derivs(y, k);
        let h = 1e-5;
        let f = |yy: f64, kk: f64| t.h0_derivs([yy, 0.0], [kk, 0.0]).value;
        assert!(((f(y[0] + h, k[0]) - f(y[0] - h, k[0])) / (2.0 * h) - d.dy[0]).abs() < 1e-7);
        assert!(((f(y[0], k[0] + h) - f(y[0], k[0] - h)) / (2.0 * h) - d.dk[0]).abs() < 1e-7);
        let g = |yy: f64, kk: f64| t.h0_derivs([yy, 0.0], [kk, 0.0]).dy[0];
        assert!(((g(y[0] + h, k[0]) - g(y[0] - h, k[0])) / (2.0 * h) - d.dyy[0][0]).abs() < 1e-6);
        assert!(((g(y[0], k[0] + h) - g(y[0], k[0] - h)) / (2.0 * h) - d.dyk[0][0]).abs() < 1e-6);
    }
}
