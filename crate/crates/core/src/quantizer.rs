//! Standard quantization of symbols on a periodic slow box, the operators
//! `P_N = Op(F0 + eps F1)` and `H_eff = Op(h0 + eps h1)`, and the residuals of
//! the effective theory as functions of `eps`.
//!
//! The slow variable lives on `[0, 2 pi)` with `n` grid points, and
//! `Op(G) u (y) = sum_xi exp(i y xi) G(y, eps xi) u^(xi)`. Two-scale fields are
//! stored on (slow grid) x (cell grid); their physical trace `w(x) = U(x, eps x)`
//! lives on the fine grid of [`PhysicalGrid`]. One-dimensional models only.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::config::{Epsilon, TWO_PI};
use crate::error::{BlochError, Result};
use crate::linalg::{cis, C64};
use crate::physical::{PhysicalGrid, PhysicalHamiltonian};
use crate::symbols::{SymbolPoint, SymbolTable};

/// Relative size below which Fourier modes of a test function are dropped.
pub const MODE_CUTOFF: f64 = 1e-15;

/// Signed frequency of FFT slot `j` on an `n`-point grid.
pub fn frequency(j: usize, n: usize) -> i64 {
    if j < n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

fn slot(xi: i64, n: usize) -> usize {
    xi.rem_euclid(n as i64) as usize
}

/// Complex values on the uniform grid `y_i = 2 pi i / n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowFunction {
    pub values: Vec<C64>,
}

impl SlowFunction {
    pub fn from_fn(n: usize, f: impl Fn(f64) -> C64) -> Self {
        SlowFunction { values: (0..n).map(|i| f(Self::node(n, i))).collect() }
    }

    /// Gaussian of the given width centred at `center`, summed over periods.
    pub fn gaussian(n: usize, center: f64, width: f64) -> Self {
        Self::from_fn(n, |y| {
            let s: f64 = (-6..=6)
                .map(|m| {
                    let d = y - center + m as f64 * TWO_PI;
                    (-0.5 * d * d / (width * width)).exp()
                })
                .sum();
            C64::new(s, 0.0)
        })
    }

    pub fn node(n: usize, i: usize) -> f64 {
        TWO_PI * i as f64 / n as f64
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn y(&self, i: usize) -> f64 {
        Self::node(self.len(), i)
    }

    /// `u^(xi) = (1/n) sum_i u(y_i) exp(-i y_i xi)` in FFT order.
    pub fn spectrum(&self) -> Vec<C64> {
        let n = self.len();
        let mut buf = self.values.clone();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let s = 1.0 / n as f64;
        buf.iter_mut().for_each(|c| *c *= s);
        buf
    }

    pub fn from_spectrum(coef: &[C64]) -> Self {
        let mut buf = coef.to_vec();
        FftPlanner::new().plan_fft_inverse(coef.len()).process(&mut buf);
        SlowFunction { values: buf }
    }

    /// `L2` norm with weight `2 pi / n`.
    pub fn norm(&self) -> f64 {
        let dy = TWO_PI / self.len() as f64;
        (self.values.iter().map(|c| c.norm_sqr()).sum::<f64>() * dy).sqrt()
    }

    pub fn inner(&self, other: &SlowFunction) -> C64 {
        let dy = TWO_PI / self.len() as f64;
        self.values.iter().zip(&other.values).map(|(a, b)| a.conj() * b).sum::<C64>() * dy
    }

    pub fn sub(&self, other: &SlowFunction) -> SlowFunction {
        SlowFunction { values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect() }
    }

    /// Frequencies carrying more than `cutoff` times the largest coefficient.
    pub fn active_modes(&self, cutoff: f64) -> Vec<i64> {
        let spec = self.spectrum();
        let top = spec.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let n = self.len();
        let mut modes: Vec<i64> = (0..n).filter(|&j| spec[j].norm() > cutoff * top).map(|j| frequency(j, n)).collect();
        modes.sort_unstable();
        modes
    }
}

/// Standard quantization of a scalar symbol by direct quadrature.
///
/// Returns [`BlochError::AliasWarning`] when `eps * xi_max` exceeds `k_limit`.
pub fn apply_symbol<H>(h: H, eps: f64, u: &SlowFunction, k_limit: f64) -> Result<SlowFunction>
where
    H: Fn(f64, f64) -> C64 + Sync,
{
    let n = u.len();
    let k_max = eps * (n / 2) as f64;
    if k_max > k_limit {
        return Err(BlochError::AliasWarning { k_max, limit: k_limit });
    }
    let spec = u.spectrum();
    let modes: Vec<usize> = (0..n).filter(|&j| spec[j] != C64::new(0.0, 0.0)).collect();
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = u.y(i);
            modes
                .iter()
                .map(|&j| {
                    let xi = frequency(j, n) as f64;
                    cis(y * xi) * h(y, eps * xi) * spec[j]
                })
                .sum()
        })
        .collect();
    Ok(SlowFunction { values })
}

/// Field on (slow grid) x (unit-cell grid), stored row-major in `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoScaleFunction {
    pub ny: usize,
    pub nx: usize,
    /// Cell quadrature weight.
    pub weight: f64,
    pub values: Vec<C64>,
}

impl TwoScaleFunction {
    pub fn row(&self, i: usize) -> &[C64] {
        &self.values[i * self.nx..(i + 1) * self.nx]
    }

    /// Product `u(y) g(x)`.
    pub fn product(u: &SlowFunction, g: &[C64], weight: f64) -> Self {
        let values = u.values.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
        TwoScaleFunction { ny: u.len(), nx: g.len(), weight, values }
    }

    pub fn norm(&self) -> f64 {
        let dy = TWO_PI / self.ny as f64;
        (self.values.iter().map(|c| c.norm_sqr()).sum::<f64>() * dy * self.weight).sqrt()
    }

    pub fn inner(&self, other: &TwoScaleFunction) -> C64 {
        let dy = TWO_PI / self.ny as f64;
        self.values.iter().zip(&other.values).map(|(a, b)| a.conj() * b).sum::<C64>() * dy * self.weight
    }

    pub fn sub(&self, other: &TwoScaleFunction) -> TwoScaleFunction {
        TwoScaleFunction {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            ..self.clone()
        }
    }
}

/// Order and normalization of the corrector `F0 + eps F1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Corrector {
    /// `N` in `{0, 1}`.
    pub order: u8,
    /// Include the normalization `a1 F0` in `F1`.
    pub with_a1: bool,
}

impl Corrector {
    pub fn new(order: u8) -> Self {
        Corrector { order, with_a1: true }
    }

    pub fn without_a1(order: u8) -> Self {
        Corrector { order, with_a1: false }
    }
}

/// Quantizer bound to a symbol table, a value of `eps` and a slow grid.
pub struct Quantizer<'a> {
    pub table: &'a SymbolTable,
    pub epsilon: Epsilon,
    pub eps: f64,
    pub ny: usize,
    points: std::sync::Mutex<HashMap<(usize, i64), Arc<SymbolPoint>>>,
}

impl<'a> Quantizer<'a> {
    pub fn new(table: &'a SymbolTable, epsilon: Epsilon, ny: usize) -> Result<Self> {
        let eps = epsilon.value();
        if table.dim() != 1 {
            return Err(BlochError::NotApplicable("quantization is implemented in one dimension".into()));
        }
        let h = table.model.grid.h[0];
        let k_max = eps * (ny / 2) as f64;
        if k_max * h >= 0.5 * PI {
            return Err(BlochError::GridResolution(format!(
                "Bloch factor exp(ikx) with k = {k_max} is not resolved by cell spacing {h}"
            )));
        }
        Ok(Quantizer { table, epsilon, eps, ny, points: Default::default() })
    }

    pub fn y(&self, i: usize) -> f64 {
        SlowFunction::node(self.ny, i)
    }

    fn all_modes(&self) -> Vec<i64> {
        (0..self.ny).map(|j| frequency(j, self.ny)).collect()
    }

    /// Symbol points at `(y_i, eps xi)` for every slow node and the given modes.
    fn points(&self, modes: &[i64]) -> Result<HashMap<(usize, i64), Arc<SymbolPoint>>> {
        let missing: Vec<(usize, i64)> = {
            let cache = self.points.lock().unwrap();
            modes
                .iter()
                .flat_map(|&xi| (0..self.ny).map(move |i| (i, xi)))
                .filter(|key| !cache.contains_key(key))
                .collect()
        };
        let fresh: Vec<((usize, i64), Arc<SymbolPoint>)> = missing
            .par_iter()
            .map(|&(i, xi)| Ok(((i, xi), self.table.eval([self.y(i), 0.0], [self.eps * xi as f64, 0.0])?)))
            .collect::<Result<_>>()?;
        let mut cache = self.points.lock().unwrap();
        cache.extend(fresh);
        Ok(modes
            .iter()
            .flat_map(|&xi| (0..self.ny).map(move |i| (i, xi)))
            .map(|key| (key, cache[&key].clone()))
            .collect())
    }

    fn cell_symbol(&self, p: &SymbolPoint, c: Corrector) -> Vec<C64> {
        match c.order {
            0 => p.f0.clone(),
            _ => p.f0.iter().zip(p.f1(c.with_a1)).map(|(a, b)| a + b * self.eps).collect(),
        }
    }

    fn effective_symbol(&self, p: &SymbolPoint, order: u8) -> C64 {
        match order {
            0 => C64::new(p.h0, 0.0),
            _ => p.h1 * self.eps + p.h0,
        }
    }

    fn check(&self, u: &SlowFunction, c: Corrector) -> Result<()> {
        if c.order > 1 {
            return Err(BlochError::NotApplicable(format!("corrector order {} (only 0 and 1)", c.order)));
        }
        if u.len() != self.ny {
            return Err(BlochError::validation("u", format!("expected {} slow nodes, got {}", self.ny, u.len())));
        }
        Ok(())
    }

    /// `H_eff^N u` with `H_eff^0 = h0` and `H_eff^1 = h0 + eps h1`.
    pub fn apply_heff(&self, order: u8, u: &SlowFunction) -> Result<SlowFunction> {
        self.check(u, Corrector::new(order))?;
        let spec = u.spectrum();
        let modes = u.active_modes(MODE_CUTOFF);
        let pts = self.points(&modes)?;
        let values = (0..self.ny)
            .map(|i| {
                let y = self.y(i);
                modes
                    .iter()
                    .map(|&xi| cis(y * xi as f64) * self.effective_symbol(&pts[&(i, xi)], order) * spec[slot(xi, self.ny)])
                    .sum()
            })
            .collect();
        Ok(SlowFunction { values })
    }

    /// Two-scale field `Op(F0 + eps F1) u`.
    pub fn apply_p(&self, c: Corrector, u: &SlowFunction) -> Result<TwoScaleFunction> {
        self.check(u, c)?;
        let spec = u.spectrum();
        let modes = u.active_modes(MODE_CUTOFF);
        let pts = self.points(&modes)?;
        let grid = &self.table.model.grid;
        let mut values = vec![C64::new(0.0, 0.0); self.ny * grid.len];
        for i in 0..self.ny {
            let row = &mut values[i * grid.len..(i + 1) * grid.len];
            for &xi in &modes {
                let a = cis(self.y(i) * xi as f64) * spec[slot(xi, self.ny)];
                for (r, f) in row.iter_mut().zip(self.cell_symbol(&pts[&(i, xi)], c)) {
                    *r += f * a;
                }
            }
        }
        Ok(TwoScaleFunction { ny: self.ny, nx: grid.len, weight: grid.weight, values })
    }

    /// Adjoint of [`Self::apply_p`] in the discrete `L2(cell x box)` pairing.
    pub fn adjoint_p(&self, c: Corrector, v: &TwoScaleFunction) -> Result<SlowFunction> {
        let modes = self.all_modes();
        let pts = self.points(&modes)?;
        let mut coef = vec![C64::new(0.0, 0.0); self.ny];
        for &xi in &modes {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..self.ny {
                let f = self.cell_symbol(&pts[&(i, xi)], c);
                let pair: C64 = f.iter().zip(v.row(i)).map(|(a, b)| a.conj() * b).sum::<C64>() * v.weight;
                acc += cis(-self.y(i) * xi as f64) * pair;
            }
            coef[slot(xi, self.ny)] = acc / self.ny as f64;
        }
        Ok(SlowFunction::from_spectrum(&coef))
    }

    /// Physical trace `w(x) = (Op(F0 + eps F1) u)(x, eps x)` on the fine grid.
    ///
    /// The cell symbol is interpolated trigonometrically in `y` from the slow nodes.
    pub fn trace(&self, c: Corrector, u: &SlowFunction, grid: &PhysicalGrid) -> Result<Vec<C64>> {
        self.check(u, c)?;
        let nx = self.table.model.grid.len;
        if grid.nx != nx || (grid.eps - self.eps).abs() > 1e-15 {
            return Err(BlochError::validation("grid", "physical grid does not match the cell grid and eps".to_string()));
        }
        let spec = u.spectrum();
        let modes = u.active_modes(MODE_CUTOFF);
        let pts = self.points(&modes)?;
        let n = self.ny as i64;
        let fft = FftPlanner::new().plan_fft_forward(self.ny);
        // d[j][s]: coefficient of exp(i j y) at cell point s
        let mut d: BTreeMap<i64, Vec<C64>> = BTreeMap::new();
        let mut col = vec![C64::new(0.0, 0.0); self.ny];
        for &xi in &modes {
            let syms: Vec<Vec<C64>> = (0..self.ny).map(|i| self.cell_symbol(&pts[&(i, xi)], c)).collect();
            let uh = spec[slot(xi, self.ny)];
            for s in 0..nx {
                for i in 0..self.ny {
                    col[i] = syms[i][s];
                }
                fft.process(&mut col);
                for (jm, cm) in col.iter().enumerate() {
                    let m = frequency(jm, self.ny);
                    let a = cm * uh / n as f64;
                    if m == -n / 2 {
                        // split the Nyquist mode evenly between +-n/2
                        d.entry(xi + m).or_insert_with(|| vec![C64::new(0.0, 0.0); nx])[s] += a * 0.5;
                        d.entry(xi - m).or_insert_with(|| vec![C64::new(0.0, 0.0); nx])[s] += a * 0.5;
                    } else {
                        d.entry(xi + m).or_insert_with(|| vec![C64::new(0.0, 0.0); nx])[s] += a;
                    }
                }
            }
        }
        let d: Vec<(i64, Vec<C64>)> = d.into_iter().collect();
        Ok((0..grid.len)
            .into_par_iter()
            .map(|p| {
                let y = grid.y(p);
                let s = grid.cell_index(p);
                d.iter().map(|(j, v)| v[s] * cis(*j as f64 * y)).sum()
            })
            .collect())
    }

    /// `sqrt(eps |E|)`: the physical-to-slow norm ratio of a traced Bloch packet.
    fn trace_scale(&self) -> f64 {
        (self.eps * self.table.spec.lattice.cell_volume()).sqrt()
    }

    /// `||H_eps tr(P_N u) - tr(P_N H_eff^N u)|| / ||u||`.
    pub fn intertwining_residual(&self, c: Corrector, u: &SlowFunction) -> Result<f64> {
        let grid = PhysicalGrid::new(&self.table.spec, self.epsilon, self.table.model.grid.len)?;
        let ham = PhysicalHamiltonian::new(&self.table.spec, &grid, self.table.model.order);
        let w = self.trace(c, u, &grid)?;
        let hw = ham.apply(&w);
        let heff = self.apply_heff(c.order, u)?;
        let rhs = self.trace(c, &heff, &grid)?;
        let r: Vec<C64> = hw.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        Ok(grid.norm(&r) * self.trace_scale() / u.norm())
    }

    /// `||P_N^* P_N u - u|| / ||u||`.
    pub fn isometry_defect(&self, c: Corrector, u: &SlowFunction) -> Result<f64> {
        let v = self.apply_p(c, u)?;
        let back = self.adjoint_p(c, &v)?;
        Ok(back.sub(u).norm() / u.norm())
    }

    /// `Pi_N v = P_N P_N^* v`.
    pub fn apply_pi(&self, c: Corrector, v: &TwoScaleFunction) -> Result<TwoScaleFunction> {
        let w = self.adjoint_p(c, v)?;
        self.apply_p(c, &w)
    }

    /// `||Pi_N^2 v - Pi_N v|| / ||v||`.
    pub fn projection_defect(&self, c: Corrector, v: &TwoScaleFunction) -> Result<f64> {
        let p1 = self.apply_pi(c, v)?;
        let p2 = self.apply_pi(c, &p1)?;
        Ok(p2.sub(&p1).norm() / v.norm())
    }
}

/// Smooth, non-eigen cell profile used as the generic two-scale test direction.
pub fn test_cell_profile(table: &SymbolTable) -> Vec<C64> {
    let grid = &table.model.grid;
    let a = grid.lengths[0];
    let mut g: Vec<C64> = (0..grid.len)
        .map(|s| {
            let x = TWO_PI * grid.point(s)[0] / a;
            C64::new(1.0 + 0.5 * x.cos(), 0.3 * (2.0 * x).sin())
        })
        .collect();
    crate::linalg::normalize(grid.weight, &mut g);
    g
}

/// WKB phase `phi` with its first two derivatives.
pub trait SlowPhase: Sync {
    fn eval(&self, y: f64) -> (f64, f64, f64);
}

/// `phi(y) = amplitude sin(y)`.
#[derive(Clone, Copy, Debug)]
pub struct SinePhase(pub f64);

impl SlowPhase for SinePhase {
    fn eval(&self, y: f64) -> (f64, f64, f64) {
        let (s, c) = y.sin_cos();
        (self.0 * s, self.0 * c, -self.0 * s)
    }
}

/// Remainder of the first-order symbol expansion for `h0` acting on WKB data:
/// `exp(-i phi/eps) h0(y, eps D)(exp(i phi/eps) f)` against
/// `h0(y, phi') f + eps [-i dk h0 f' - (i/2) dkk h0 phi'' f]`, relative to `||f||`.
pub fn symbol_expansion_remainder(table: &SymbolTable, eps: f64, phase: &dyn SlowPhase, f: &SlowFunction) -> Result<f64> {
    let n = f.len();
    let g = SlowFunction {
        values: f.values.iter().enumerate().map(|(i, v)| v * cis(phase.eval(f.y(i)).0 / eps)).collect(),
    };
    let limit = PI / table.model.grid.h[0];
    let lhs = apply_symbol(|y, k| C64::new(table.h0_derivs([y, 0.0], [k, 0.0]).value, 0.0), eps, &g, limit)?;
    let fh = f.spectrum();
    let df = SlowFunction::from_spectrum(
        &(0..n).map(|j| fh[j] * C64::new(0.0, frequency(j, n) as f64)).collect::<Vec<_>>(),
    );
    let i_unit = C64::new(0.0, 1.0);
    let diff: Vec<C64> = (0..n)
        .map(|i| {
            let y = f.y(i);
            let (phi, dphi, ddphi) = phase.eval(y);
            let d = table.h0_derivs([y, 0.0], [dphi, 0.0]);
            let model = f.values[i] * d.value
                + (-i_unit * d.dk[0] * df.values[i] - i_unit * 0.5 * d.dkk[0][0] * ddphi * f.values[i]) * eps;
            lhs.values[i] * cis(-phi / eps) - model
        })
        .collect();
    Ok(SlowFunction { values: diff }.norm() / f.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{build_band_atlas, fix_smooth_gauge};
    use crate::models;
    use proptest::prelude::*;

    fn table(spec: crate::ModelSpec) -> SymbolTable {
        let atlas = build_band_atlas(&spec).unwrap();
        SymbolTable::new(Arc::new(fix_smooth_gauge(&atlas).unwrap()))
    }

    fn max_diff(a: &SlowFunction, b: &SlowFunction) -> f64 {
        a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn scalar_quantization_basics() {
        let u = SlowFunction::gaussian(64, 2.0, 0.7);
        let one = apply_symbol(|_, _| C64::new(1.0, 0.0), 0.125, &u, 10.0).unwrap();
        assert!(max_diff(&one, &u) < 1e-12);
        let w = apply_symbol(|y, _| C64::new(0.3 * y.cos(), 0.0), 0.125, &u, 10.0).unwrap();
        let direct = SlowFunction::from_fn(64, |y| C64::new(0.3 * y.cos(), 0.0) * u.values[(y / TWO_PI * 64.0).round() as usize % 64]);
        assert!(max_diff(&w, &direct) < 1e-12);
        // h = k gives -i eps u'
        let eps = 0.125;
        let dk = apply_symbol(|_, k| C64::new(k, 0.0), eps, &u, 10.0).unwrap();
        let exact = SlowFunction::from_fn(64, |y| {
            let s: f64 = (-6..=6)
                .map(|m| {
                    let d = y - 2.0 + m as f64 * TWO_PI;
                    -d / 0.49 * (-0.5 * d * d / 0.49).exp()
                })
                .sum();
            C64::new(0.0, -eps * s)
        });
        assert!(max_diff(&dk, &exact) < 1e-10, "{}", max_diff(&dk, &exact));
        assert!(matches!(apply_symbol(|_, k| C64::new(k, 0.0), 1.0, &u, 10.0), Err(BlochError::AliasWarning { .. })));
    }

    proptest! {
        #[test]
        fn fft_round_trip(vals in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 32)) {
            let u = SlowFunction { values: vals.iter().map(|&(a, b)| C64::new(a, b)).collect() };
            let back = SlowFunction::from_spectrum(&u.spectrum());
            prop_assert!(max_diff(&u, &back) < 1e-12);
        }

        #[test]
        fn y_independent_symbols_are_fourier_multipliers(c in 0.1f64..2.0, e in 1usize..4) {
            let eps = 1.0 / (8 * e) as f64;
            let u = SlowFunction::gaussian(32, 1.0, 0.8);
            let got = apply_symbol(|_, k| C64::new((c * k).cos(), 0.0), eps, &u, 10.0).unwrap();
            let spec = u.spectrum();
            let mult: Vec<C64> = (0..32).map(|j| spec[j] * (c * eps * frequency(j, 32) as f64).cos()).collect();
            prop_assert!(max_diff(&got, &SlowFunction::from_spectrum(&mult)) < 1e-10);
        }
    }

    #[test]
    fn free_particle_intertwines_exactly() {
        // bands touch at the zone edge, so use local gauges on interior k only
        let atlas = build_band_atlas(&models::free_1d(16)).unwrap();
        let t = SymbolTable::local(&atlas);
        let q = Quantizer::new(&t, Epsilon::inverse_of(16), 16).unwrap();
        let u = SlowFunction::gaussian(16, PI, 1.5);
        assert!(u.active_modes(MODE_CUTOFF).iter().all(|xi| xi.abs() < 8));
        for order in [0, 1] {
            let r = q.intertwining_residual(Corrector::new(order), &u).unwrap();
            assert!(r < 1e-8, "order {order}: {r}");
        }
    }

    #[test]
    fn corrector_is_linear_and_pi_is_hermitian() {
        let t = table(models::mathieu_w(16));
        let q = Quantizer::new(&t, Epsilon::inverse_of(8), 32).unwrap();
        let c = Corrector::new(1);
        let u = SlowFunction::gaussian(32, 2.0, 1.0);
        let v = SlowFunction::gaussian(32, 4.0, 0.8);
        let sum = SlowFunction { values: u.values.iter().zip(&v.values).map(|(a, b)| a + b).collect() };
        let (pu, pv, ps) = (q.apply_p(c, &u).unwrap(), q.apply_p(c, &v).unwrap(), q.apply_p(c, &sum).unwrap());
        let lin = ps.values.iter().zip(pu.values.iter().zip(&pv.values)).map(|(s, (a, b))| (s - a - b).norm()).fold(0.0, f64::max);
        assert!(lin < 1e-12, "{lin}");
        let g = test_cell_profile(&t);
        let a = TwoScaleFunction::product(&u, &g, t.model.grid.weight);
        let b = TwoScaleFunction::product(&v, &g, t.model.grid.weight);
        let lhs = q.apply_pi(c, &a).unwrap().inner(&b);
        let rhs = a.inner(&q.apply_pi(c, &b).unwrap());
        assert!((lhs - rhs).norm() < 1e-10, "{}", (lhs - rhs).norm());
    }

    #[test]
    fn trace_of_a_y_independent_corrector_is_a_bloch_superposition() {
        let t = table(models::mathieu(16));
        let eps = 0.125;
        let q = Quantizer::new(&t, Epsilon::inverse_of(8), 32).unwrap();
        let u = SlowFunction::gaussian(32, PI, 1.0);
        let grid = PhysicalGrid::new(&t.spec, Epsilon::inverse_of(8), 16).unwrap();
        let w = q.trace(Corrector::new(0), &u, &grid).unwrap();
        let spec = u.spectrum();
        let mut err: f64 = 0.0;
        for p in (0..grid.len).step_by(7) {
            let mut v = C64::new(0.0, 0.0);
            for j in 0..32 {
                let xi = frequency(j, 32) as f64;
                let f0 = &t.eval([0.0, 0.0], [eps * xi, 0.0]).unwrap().f0;
                v += cis(eps * xi * grid.x(p)) * f0[grid.cell_index(p)] * spec[j];
            }
            err = err.max((v - w[p]).norm());
        }
        assert!(err < 1e-10, "{err}");
    }
}
