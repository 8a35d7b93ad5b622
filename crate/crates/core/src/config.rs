//! Crystal model: lattice, periodic potential, constant magnetic field and
//! the slowly varying fields `A(y)`, `W(y)`.
//!
//! Units are fixed to `h = 2m = e = 1` everywhere. Periodic potentials and
//! slow fields are finite Fourier series, so values and derivatives of every
//! order are available in closed form.
//!
//! Configuration files are TOML. Every key except `band`, `lattice.basis`
//! and `potential` has a default; [`ModelSpec::to_toml`] writes the fully
//! resolved document back out, so defaults show up in every run manifest.
//!
//! ```toml
//! band = 1
//! [lattice]
//! basis = [[6.283185307179586]]      # one vector per dimension, axis aligned
//! [magnetic]
//! b0 = 0.0                            # or flux_index = nu, B0*|E| = 4*pi*nu
//! [potential]
//! constant = 0.0
//! modes = [{ index = [1], cos = 2.0, sin = 0.0 }]   # V = sum cos(G.x) + sin(G.x), G = index . e*
//! [slow_fields]
//! a = [{ constant = 0.2, modes = [{ wavevector = [1], cos = 0.1, sin = 0.0 }] }]
//! w = { constant = 0.0, modes = [{ wavevector = [1], cos = 0.3, sin = 0.0 }] }
//! [discretization]
//! nx = 64             # default 64 (1D) / 24 (2D)
//! nk = 32             # default 32 (1D) / 8 (2D)
//! stencil_order = 4   # 2 or 4
//! [tolerances]        # all optional
//! gap = 2.5e-4        # default 1e-3 * (|e*|min / 2)^2
//! eig_residual = 1e-10
//! route = 1e-4
//! fredholm = 1e-8
//! ode = 1e-10
//! caustic = 1e-3
//! [scan]
//! epsilons = ["1/8", "1/16", "1/32", "1/64"]
//! [gauge]             # optional extra smooth gauge phase chi(k) = sum cos(k.R) + sin(k.R)
//! twist = [{ index = [1], cos = 0.0, sin = 0.4 }]
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BlochError, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// Axis-aligned Bravais lattice in one or two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub dim: usize,
    /// Lengths `a_j` of the basis vectors `e_j = a_j * unit_j`.
    pub lengths: [f64; 2],
}

impl LatticeSpec {
    pub fn new(lengths: &[f64]) -> Result<Self> {
        let dim = lengths.len();
        if !(1..=2).contains(&dim) {
            return Err(BlochError::validation(
                "lattice.basis",
                "dimension must be 1 or 2",
            ));
        }
        let mut l = [1.0; 2];
        for (j, &a) in lengths.iter().enumerate() {
            if !(a.is_finite() && a > 0.0) {
                return Err(BlochError::validation(
                    "lattice.basis",
                    "basis lengths must be positive",
                ));
            }
            l[j] = a;
        }
        Ok(LatticeSpec { dim, lengths: l })
    }

    pub fn basis(&self, j: usize) -> [f64; 2] {
        let mut e = [0.0; 2];
        e[j] = self.lengths[j];
        e
    }

    /// Dual basis with `e*_j . e_k = 2 pi delta_jk`.
    pub fn dual(&self, j: usize) -> [f64; 2] {
        let mut e = [0.0; 2];
        e[j] = TWO_PI / self.lengths[j];
        e
    }

    pub fn cell_volume(&self) -> f64 {
        self.lengths[..self.dim].iter().product()
    }

    pub fn dual_volume(&self) -> f64 {
        (0..self.dim).map(|j| TWO_PI / self.lengths[j]).product()
    }

    /// Reduce `k` into the fundamental dual cell `E*`.
    pub fn reduce_k(&self, k: [f64; 2]) -> [f64; 2] {
        let mut out = k;
        for j in 0..self.dim {
            let b = TWO_PI / self.lengths[j];
            let t = (k[j] / b).rem_euclid(1.0);
            out[j] = t * b;
        }
        out
    }

    /// Kinetic energy `(|e*|min / 2)^2` at the zone boundary; the natural band-energy scale.
    pub fn energy_scale(&self) -> f64 {
        let bmin = (0..self.dim)
            .map(|j| TWO_PI / self.lengths[j])
            .fold(f64::INFINITY, f64::min);
        0.25 * bmin * bmin
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagneticSpec {
    /// Field strength along the third axis.
    pub b0: f64,
    /// `B0 |E| = 4 pi nu`.
    pub flux_index: i64,
}

/// Return the flux index `nu` with `B0 |E| = 4 pi nu`.
pub fn check_flux_admissibility(lattice: &LatticeSpec, b0: f64) -> Result<i64> {
    if lattice.dim == 1 {
        if b0 != 0.0 {
            return Err(BlochError::validation(
                "magnetic.b0",
                "one-dimensional models carry no magnetic field",
            ));
        }
        return Ok(0);
    }
    let ratio = b0 * lattice.cell_volume() / (4.0 * PI);
    let nu = ratio.round();
    if (ratio - nu).abs() > 1e-10 {
        return Err(BlochError::FluxNotAdmissible { ratio });
    }
    Ok(nu as i64)
}

/// One term `cos_coef * cos(G.x) + sin_coef * sin(G.x)` with `G = sum index_j e*_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub index: [i32; 2],
    pub cos: f64,
    pub sin: f64,
}

/// Lattice-periodic real potential.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub constant: f64,
    pub modes: Vec<FourierMode>,
}

impl PotentialSpec {
    pub fn value(&self, lattice: &LatticeSpec, x: [f64; 2]) -> f64 {
        let mut v = self.constant;
        for m in &self.modes {
            let mut phase = 0.0;
            for j in 0..lattice.dim {
                phase += m.index[j] as f64 * TWO_PI / lattice.lengths[j] * x[j];
            }
            v += m.cos * phase.cos() + m.sin * phase.sin();
        }
        v
    }

    /// Complex Fourier coefficients `c(G)`; reality means `c(-G) = conj c(G)`.
    pub fn coefficients(&self) -> Vec<([i32; 2], num_complex::Complex64)> {
        let mut out = Vec::new();
        for m in &self.modes {
            let c = num_complex::Complex64::new(m.cos / 2.0, -m.sin / 2.0);
            out.push((m.index, c));
            out.push(([-m.index[0], -m.index[1]], c.conj()));
        }
        out
    }
}

/// Scalar slow field `f(y) = constant + sum cos(n.y) + sin(n.y)`, 2 pi periodic in each `y_j`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlowScalar {
    pub constant: f64,
    pub modes: Vec<SlowMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlowMode {
    pub wavevector: [i32; 2],
    pub cos: f64,
    pub sin: f64,
}

impl SlowScalar {
    pub fn constant(c: f64) -> Self {
        SlowScalar {
            constant: c,
            modes: Vec::new(),
        }
    }

    pub fn cosine(constant: f64, amplitude: f64, wavevector: [i32; 2]) -> Self {
        SlowScalar {
            constant,
            modes: vec![SlowMode {
                wavevector,
                cos: amplitude,
                sin: 0.0,
            }],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.modes.iter().all(|m| m.cos == 0.0 && m.sin == 0.0)
    }

    /// Value, gradient and Hessian at `y`.
    pub fn eval(&self, y: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let mut v = self.constant;
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        for m in &self.modes {
            let n = [m.wavevector[0] as f64, m.wavevector[1] as f64];
            let p = n[0] * y[0] + n[1] * y[1];
            let (s, c) = p.sin_cos();
            v += m.cos * c + m.sin * s;
            let d1 = -m.cos * s + m.sin * c;
            let d2 = -m.cos * c - m.sin * s;
            for i in 0..2 {
                g[i] += d1 * n[i];
                for j in 0..2 {
                    h[i][j] += d2 * n[i] * n[j];
                }
            }
        }
        (v, g, h)
    }

    /// Exact line integral of `f(eps x)` along `x0 + t * unit_axis`, `t` in `[0, len]`.
    pub fn line_integral(&self, eps: f64, x0: [f64; 2], axis: usize, len: f64) -> f64 {
        let mut acc = self.constant * len;
        for m in &self.modes {
            let n = [m.wavevector[0] as f64, m.wavevector[1] as f64];
            let p0 = eps * (n[0] * x0[0] + n[1] * x0[1]);
            let rate = eps * n[axis];
            if rate == 0.0 {
                acc += len * (m.cos * p0.cos() + m.sin * p0.sin());
            } else {
                let p1 = p0 + rate * len;
                acc += (m.cos * (p1.sin() - p0.sin()) - m.sin * (p1.cos() - p0.cos())) / rate;
            }
        }
        acc
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlowFieldSpec {
    /// Components `A_1, A_2` of the slow vector potential.
    pub a: [SlowScalar; 2],
    pub w: SlowScalar,
}

/// Values and derivatives of the slow fields at one point.
///
/// Index convention: `da[j][l] = d A_l / d y_j`, `d2a[i][j][l] = d^2 A_l / dy_i dy_j`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlowFieldValues {
    pub a: [f64; 2],
    pub da: [[f64; 2]; 2],
    pub d2a: [[[f64; 2]; 2]; 2],
    pub w: f64,
    pub dw: [f64; 2],
    pub d2w: [[f64; 2]; 2],
    /// Third component of `B = curl A`.
    pub b: f64,
}

pub fn eval_slow_fields(
    spec: &SlowFieldSpec,
    dim: usize,
    y: [f64; 2],
    order: u8,
) -> SlowFieldValues {
    let mut out = SlowFieldValues::default();
    for l in 0..dim {
        let (v, g, h) = spec.a[l].eval(y);
        out.a[l] = v;
        if order >= 1 {
            for j in 0..dim {
                out.da[j][l] = g[j];
            }
        }
        if order >= 2 {
            for i in 0..dim {
                for j in 0..dim {
                    out.d2a[i][j][l] = h[i][j];
                }
            }
        }
    }
    let (w, gw, hw) = spec.w.eval(y);
    out.w = w;
    if order >= 1 {
        for j in 0..dim {
            out.dw[j] = gw[j];
        }
        if dim == 2 {
            out.b = out.da[0][1] - out.da[1][0];
        }
    }
    if order >= 2 {
        for i in 0..dim {
            for j in 0..dim {
                out.d2w[i][j] = hw[i][j];
            }
        }
    }
    out
}

/// Exact rational `num/den`, used for scan parameters so boxes stay commensurate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Epsilon {
    pub num: u32,
    pub den: u32,
}

impl Epsilon {
    pub fn inverse_of(den: u32) -> Self {
        Epsilon { num: 1, den }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Epsilon {
    type Err = BlochError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || BlochError::Parse(format!("epsilon `{s}` is not a rational p/q"));
        let (p, q) = s.trim().split_once('/').ok_or_else(bad)?;
        let num: u32 = p.trim().parse().map_err(|_| bad())?;
        let den: u32 = q.trim().parse().map_err(|_| bad())?;
        if num == 0 || den == 0 || 2 * num > den {
            return Err(BlochError::validation(
                "scan.epsilons",
                format!("{s} not in (0, 1/2]"),
            ));
        }
        Ok(Epsilon { num, den })
    }
}

impl TryFrom<String> for Epsilon {
    type Error = BlochError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Epsilon> for String {
    fn from(e: Epsilon) -> String {
        e.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub nx: usize,
    pub nk: usize,
    pub stencil_order: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Minimal admissible distance to the neighbouring bands.
    pub gap: f64,
    pub eig_residual: f64,
    pub route: f64,
    pub fredholm: f64,
    pub ode: f64,
    pub caustic: f64,
}

impl Tolerances {
    pub fn defaults(lattice: &LatticeSpec) -> Self {
        Tolerances {
            gap: 1e-3 * lattice.energy_scale(),
            eig_residual: 1e-10,
            route: 1e-4,
            fredholm: 1e-8,
            ode: 1e-10,
            caustic: 1e-3,
        }
    }
}

/// Extra smooth gauge phase `chi(k) = sum cos(k.R) + sin(k.R)` applied on top of
/// the parallel-transport gauge.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaugeTwist {
    pub modes: Vec<FourierMode>,
}

impl GaugeTwist {
    pub fn is_trivial(&self) -> bool {
        self.modes.iter().all(|m| m.cos == 0.0 && m.sin == 0.0)
    }

    /// `chi(k)` and its gradient.
    pub fn eval(&self, lattice: &LatticeSpec, k: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let mut v = 0.0;
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        for m in &self.modes {
            let mut r = [0.0; 2];
            for j in 0..lattice.dim {
                r[j] = m.index[j] as f64 * lattice.lengths[j];
            }
            let p = k[0] * r[0] + k[1] * r[1];
            let (s, c) = p.sin_cos();
            v += m.cos * c + m.sin * s;
            let d1 = -m.cos * s + m.sin * c;
            let d2 = -m.cos * c - m.sin * s;
            for i in 0..2 {
                g[i] += d1 * r[i];
                for j in 0..2 {
                    h[i][j] += d2 * r[i] * r[j];
                }
            }
        }
        (v, g, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub lattice: LatticeSpec,
    pub magnetic: MagneticSpec,
    pub potential: PotentialSpec,
    pub slow: SlowFieldSpec,
    /// Band index `m >= 1`.
    pub band: usize,
    pub disc: Discretization,
    pub tol: Tolerances,
    pub epsilons: Vec<Epsilon>,
    pub twist: GaugeTwist,
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        self.lattice.dim
    }

    pub fn slow_fields(&self, y: [f64; 2], order: u8) -> SlowFieldValues {
        eval_slow_fields(&self.slow, self.dim(), y, order)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let nu = check_flux_admissibility(&self.lattice, self.magnetic.b0)?;
        if nu != self.magnetic.flux_index {
            return Err(BlochError::validation(
                "magnetic.flux_index",
                "inconsistent with b0",
            ));
        }
        if self.band < 1 {
            return Err(BlochError::validation("band", "band index starts at 1"));
        }
        if self.disc.nx < 8 {
            return Err(BlochError::validation("discretization.nx", "must be >= 8"));
        }
        if self.disc.nk < 8 {
            return Err(BlochError::validation("discretization.nk", "must be >= 8"));
        }
        if self.disc.stencil_order != 2 && self.disc.stencil_order != 4 {
            return Err(BlochError::validation(
                "discretization.stencil_order",
                "must be 2 or 4",
            ));
        }
        if !(self.tol.gap > 0.0) {
            return Err(BlochError::validation("tolerances.gap", "must be positive"));
        }
        for e in &self.epsilons {
            if !(e.value() > 0.0 && e.value() <= 0.5) {
                return Err(BlochError::validation(
                    "scan.epsilons",
                    "epsilon must lie in (0, 1/2]",
                ));
            }
        }
        let check_modes = |field: &str, modes: &[FourierMode]| -> Result<()> {
            for m in modes {
                if d == 1 && m.index[1] != 0 {
                    return Err(BlochError::validation(
                        field,
                        "index has more components than the dimension",
                    ));
                }
                if !(m.cos.is_finite() && m.sin.is_finite()) {
                    return Err(BlochError::validation(field, "non-finite coefficient"));
                }
            }
            Ok(())
        };
        check_modes("potential.modes", &self.potential.modes)?;
        check_modes("gauge.twist", &self.twist.modes)?;
        for (l, comp) in self.slow.a.iter().enumerate() {
            if l >= d && !comp.is_zero() {
                return Err(BlochError::validation(
                    "slow_fields.a",
                    "too many vector components",
                ));
            }
        }
        for s in self.slow.a.iter().chain(std::iter::once(&self.slow.w)) {
            for m in &s.modes {
                if d == 1 && m.wavevector[1] != 0 {
                    return Err(BlochError::validation(
                        "slow_fields",
                        "wavevector has more components than the dimension",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        let file = ConfigFile::from_spec(self);
        toml::to_string(&file).expect("config serializes")
    }

    pub fn with_band(&self, band: usize) -> Self {
        let mut s = self.clone();
        s.band = band;
        s
    }
}

/// Parse and validate a TOML configuration, filling defaults.
pub fn load_spec(text: &str) -> Result<ModelSpec> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| BlochError::Parse(e.to_string()))?;
    file.into_spec()
}

pub fn load_spec_file(path: &std::path::Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)?;
    load_spec(&text)
}

// ---- on-disk schema ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    band: usize,
    lattice: LatticeFile,
    #[serde(default)]
    magnetic: MagneticFile,
    potential: PotentialFile,
    #[serde(default)]
    slow_fields: SlowFile,
    #[serde(default)]
    discretization: DiscFile,
    #[serde(default)]
    tolerances: TolFile,
    #[serde(default)]
    scan: ScanFile,
    #[serde(default)]
    gauge: GaugeFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatticeFile {
    basis: Vec<Vec<f64>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MagneticFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    b0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flux_index: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeFile {
    index: Vec<i32>,
    #[serde(default)]
    cos: f64,
    #[serde(default)]
    sin: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialFile {
    #[serde(default)]
    constant: f64,
    #[serde(default)]
    modes: Vec<ModeFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlowModeFile {
    wavevector: Vec<i32>,
    #[serde(default)]
    cos: f64,
    #[serde(default)]
    sin: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlowScalarFile {
    #[serde(default)]
    constant: f64,
    #[serde(default)]
    modes: Vec<SlowModeFile>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlowFile {
    #[serde(default)]
    a: Vec<SlowScalarFile>,
    #[serde(default)]
    w: SlowScalarFile,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    nx: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nk: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stencil_order: Option<u8>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TolFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eig_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    route: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fredholm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ode: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    caustic: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilons: Option<Vec<Epsilon>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaugeFile {
    #[serde(default)]
    twist: Vec<ModeFile>,
}

fn index2(field: &str, v: &[i32], dim: usize) -> Result<[i32; 2]> {
    if v.len() != dim {
        return Err(BlochError::validation(
            field,
            format!("expected {dim} integer components"),
        ));
    }
    let mut out = [0; 2];
    out[..dim].copy_from_slice(v);
    Ok(out)
}

fn default_epsilons() -> Vec<Epsilon> {
    [8, 16, 32, 64]
        .iter()
        .map(|&d| Epsilon::inverse_of(d))
        .collect()
}

impl ConfigFile {
    fn into_spec(self) -> Result<ModelSpec> {
        let dim = self.lattice.basis.len();
        if !(1..=2).contains(&dim) {
            return Err(BlochError::validation(
                "lattice.basis",
                "dimension must be 1 or 2",
            ));
        }
        let mut lengths = Vec::with_capacity(dim);
        for (j, v) in self.lattice.basis.iter().enumerate() {
            if v.len() != dim {
                return Err(BlochError::validation(
                    "lattice.basis",
                    "each basis vector needs `dimension` components",
                ));
            }
            for (i, &c) in v.iter().enumerate() {
                if i != j && c != 0.0 {
                    return Err(BlochError::validation(
                        "lattice.basis",
                        "only axis-aligned (rectangular) lattices are supported",
                    ));
                }
            }
            lengths.push(v[j]);
        }
        let lattice = LatticeSpec::new(&lengths)?;

        let b0 = match (self.magnetic.b0, self.magnetic.flux_index) {
            (Some(b), _) => b,
            (None, Some(nu)) => 4.0 * PI * nu as f64 / lattice.cell_volume(),
            (None, None) => 0.0,
        };
        let flux_index = check_flux_admissibility(&lattice, b0)?;
        if let Some(nu) = self.magnetic.flux_index {
            if nu != flux_index {
                return Err(BlochError::validation(
                    "magnetic.flux_index",
                    "inconsistent with b0",
                ));
            }
        }

        let modes = |field: &str, list: Vec<ModeFile>| -> Result<Vec<FourierMode>> {
            list.into_iter()
                .map(|m| {
                    Ok(FourierMode {
                        index: index2(field, &m.index, dim)?,
                        cos: m.cos,
                        sin: m.sin,
                    })
                })
                .collect()
        };
        let potential = PotentialSpec {
            constant: self.potential.constant,
            modes: modes("potential.modes", self.potential.modes)?,
        };
        let slow_scalar = |field: &str, s: SlowScalarFile| -> Result<SlowScalar> {
            Ok(SlowScalar {
                constant: s.constant,
                modes: s
                    .modes
                    .into_iter()
                    .map(|m| {
                        Ok(SlowMode {
                            wavevector: index2(field, &m.wavevector, dim)?,
                            cos: m.cos,
                            sin: m.sin,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        };
        if self.slow_fields.a.len() > dim {
            return Err(BlochError::validation(
                "slow_fields.a",
                "more components than the dimension",
            ));
        }
        let mut a = [SlowScalar::default(), SlowScalar::default()];
        for (l, comp) in self.slow_fields.a.into_iter().enumerate() {
            a[l] = slow_scalar("slow_fields.a", comp)?;
        }
        let slow = SlowFieldSpec {
            a,
            w: slow_scalar("slow_fields.w", self.slow_fields.w)?,
        };
        let disc = Discretization {
            nx: self
                .discretization
                .nx
                .unwrap_or(if dim == 1 { 64 } else { 24 }),
            nk: self
                .discretization
                .nk
                .unwrap_or(if dim == 1 { 32 } else { 8 }),
            stencil_order: self.discretization.stencil_order.unwrap_or(4),
        };
        let def = Tolerances::defaults(&lattice);
        let t = self.tolerances;
        let tol = Tolerances {
            gap: t.gap.unwrap_or(def.gap),
            eig_residual: t.eig_residual.unwrap_or(def.eig_residual),
            route: t.route.unwrap_or(def.route),
            fredholm: t.fredholm.unwrap_or(def.fredholm),
            ode: t.ode.unwrap_or(def.ode),
            caustic: t.caustic.unwrap_or(def.caustic),
        };
        let spec = ModelSpec {
            lattice,
            magnetic: MagneticSpec { b0, flux_index },
            potential,
            slow,
            band: self.band,
            disc,
            tol,
            epsilons: self.scan.epsilons.unwrap_or_else(default_epsilons),
            twist: GaugeTwist {
                modes: modes("gauge.twist", self.gauge.twist)?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    fn from_spec(spec: &ModelSpec) -> Self {
        let d = spec.dim();
        let mode_file = |m: &FourierMode| ModeFile {
            index: m.index[..d].to_vec(),
            cos: m.cos,
            sin: m.sin,
        };
        let slow_file = |s: &SlowScalar| SlowScalarFile {
            constant: s.constant,
            modes: s
                .modes
                .iter()
                .map(|m| SlowModeFile {
                    wavevector: m.wavevector[..d].to_vec(),
                    cos: m.cos,
                    sin: m.sin,
                })
                .collect(),
        };
        ConfigFile {
            band: spec.band,
            lattice: LatticeFile {
                basis: (0..d)
                    .map(|j| spec.lattice.basis(j)[..d].to_vec())
                    .collect(),
            },
            magnetic: MagneticFile {
                b0: Some(spec.magnetic.b0),
                flux_index: Some(spec.magnetic.flux_index),
            },
            potential: PotentialFile {
                constant: spec.potential.constant,
                modes: spec.potential.modes.iter().map(mode_file).collect(),
            },
            slow_fields: SlowFile {
                a: spec.slow.a[..d].iter().map(slow_file).collect(),
                w: slow_file(&spec.slow.w),
            },
            discretization: DiscFile {
                nx: Some(spec.disc.nx),
                nk: Some(spec.disc.nk),
                stencil_order: Some(spec.disc.stencil_order),
            },
            tolerances: TolFile {
                gap: Some(spec.tol.gap),
                eig_residual: Some(spec.tol.eig_residual),
                route: Some(spec.tol.route),
                fredholm: Some(spec.tol.fredholm),
                ode: Some(spec.tol.ode),
                caustic: Some(spec.tol.caustic),
            },
            scan: ScanFile {
                epsilons: Some(spec.epsilons.clone()),
            },
            gauge: GaugeFile {
                twist: spec.twist.modes.iter().map(mode_file).collect(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_1D: &str = r#"
        band = 1
        [lattice]
        basis = [[6.283185307179586]]
        [potential]
        modes = [{ index = [1], cos = 2.0 }]
    "#;

    #[test]
    fn minimal_1d_fills_defaults() {
        let spec = load_spec(MINIMAL_1D).unwrap();
        assert_eq!(spec.dim(), 1);
        assert_eq!(spec.magnetic.b0, 0.0);
        assert_eq!(spec.magnetic.flux_index, 0);
        assert_eq!(spec.disc.nx, 64);
        assert_eq!(spec.disc.stencil_order, 4);
        assert!((spec.tol.gap - 2.5e-4).abs() < 1e-15);
        assert_eq!(spec.epsilons.len(), 4);
        // defaults are echoed when serialized
        let text = spec.to_toml();
        assert!(text.contains("eig_residual"));
        assert!(text.contains("1/64"));
    }

    #[test]
    fn dual_basis_identity() {
        let lat = LatticeSpec::new(&[1.3, 0.7]).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                let e = lat.basis(k);
                let d = lat.dual(j);
                let dot = e[0] * d[0] + e[1] * d[1];
                let want = if j == k { TWO_PI } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        assert!(lat.cell_volume() > 0.0);
    }

    #[test]
    fn flux_condition() {
        let lat = LatticeSpec::new(&[1.0, 1.0]).unwrap();
        assert_eq!(check_flux_admissibility(&lat, 4.0 * PI).unwrap(), 1);
        assert_eq!(check_flux_admissibility(&lat, 0.0).unwrap(), 0);
        assert!(matches!(
            check_flux_admissibility(&lat, 6.0 * PI),
            Err(BlochError::FluxNotAdmissible { .. })
        ));
        let text = r#"
            band = 1
            [lattice]
            basis = [[1.0, 0.0], [0.0, 1.0]]
            [magnetic]
            b0 = 6.283185307179586
            [potential]
        "#;
        assert!(matches!(
            load_spec(text),
            Err(BlochError::FluxNotAdmissible { .. })
        ));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(load_spec("band = "), Err(BlochError::Parse(_))));
        let text = MINIMAL_1D.replace("band = 1", "band = 1\n[discretization]\nnx = 4");
        match load_spec(&text) {
            Err(BlochError::Validation { field, .. }) => assert_eq!(field, "discretization.nx"),
            other => panic!("unexpected {other:?}"),
        }
        let skew = r#"
            band = 1
            [lattice]
            basis = [[1.0, 0.2], [0.0, 1.0]]
            [potential]
        "#;
        assert!(matches!(
            load_spec(skew),
            Err(BlochError::Validation { .. })
        ));
    }

    #[test]
    fn epsilon_parsing() {
        let e: Epsilon = "1/32".parse().unwrap();
        assert_eq!(e.value(), 1.0 / 32.0);
        assert!("3/4".parse::<Epsilon>().is_err());
        assert!("0.1".parse::<Epsilon>().is_err());
    }

    #[test]
    fn slow_field_values() {
        let spec = SlowFieldSpec::default();
        let v = eval_slow_fields(&spec, 2, [0.3, -1.2], 2);
        assert_eq!(v, SlowFieldValues::default());

        let spec = SlowFieldSpec {
            a: Default::default(),
            w: SlowScalar::cosine(0.0, 1.0, [1, 0]),
        };
        let v = eval_slow_fields(&spec, 1, [0.0, 0.0], 2);
        assert_eq!(v.w, 1.0);
        assert_eq!(v.dw[0], 0.0);
        assert_eq!(v.d2w[0][0], -1.0);
    }

    #[test]
    fn line_integral_matches_quadrature() {
        let s = SlowScalar {
            constant: 0.2,
            modes: vec![
                SlowMode {
                    wavevector: [1, 2],
                    cos: 0.1,
                    sin: -0.3,
                },
                SlowMode {
                    wavevector: [0, 1],
                    cos: 0.5,
                    sin: 0.0,
                },
            ],
        };
        let eps = 0.05;
        let x0 = [1.3, -0.4];
        for axis in 0..2 {
            let len = 0.7;
            let n = 2000;
            let mut acc = 0.0;
            for i in 0..n {
                let t = (i as f64 + 0.5) * len / n as f64;
                let mut x = x0;
                x[axis] += t;
                acc += s.eval([eps * x[0], eps * x[1]]).0 * len / n as f64;
            }
            assert!((acc - s.line_integral(eps, x0, axis, len)).abs() < 1e-8);
        }
    }
}
