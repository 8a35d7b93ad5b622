//! Browser bindings: a Mathieu crystal `V = v cos x` driven by the slow fields
//! `W = w cos y` and `A = a cos y`, with band structure, effective symbols and
//! Peierls trajectories exposed to JavaScript.

use std::sync::Arc;

use wasm_bindgen::prelude::*;

use blochfx::atlas::{build_band_atlas, fix_smooth_gauge, zak_phase};
use blochfx::config::{FourierMode, SlowScalar};
use blochfx::fiber::FiberModel;
use blochfx::semiclassics::{integrate_flow, FlowSettings};
use blochfx::symbols::SymbolTable;
use blochfx::{models, BlochError, ModelSpec};

const NX: usize = 32;
const BANDS: usize = 3;

fn spec(v: f64, w: f64, a: f64) -> ModelSpec {
    let mut s = models::mathieu(NX);
    s.potential.modes = vec![FourierMode { index: [1, 0], cos: v, sin: 0.0 }];
    s.slow.w = SlowScalar::cosine(0.0, w, [1, 0]);
    s.slow.a[0] = SlowScalar::cosine(0.0, a, [1, 0]);
    s
}

#[wasm_bindgen]
pub struct Demo {
    spec: ModelSpec,
    table: SymbolTable,
    zak: f64,
}

impl Demo {
    pub fn try_new(v: f64, w: f64, a: f64) -> Result<Demo, String> {
        let spec = spec(v, w, a);
        spec.validate().map_err(|e| e.to_string())?;
        let atlas = build_band_atlas(&spec).map_err(|e| e.to_string())?;
        let zak = zak_phase(&atlas).map_err(|e| e.to_string())?;
        let section = fix_smooth_gauge(&atlas).map_err(|e| e.to_string())?;
        Ok(Demo { spec, table: SymbolTable::new(Arc::new(section)), zak })
    }

    pub fn try_bands(&self, nk: usize) -> Result<Vec<f64>, String> {
        let model = FiberModel::new(&self.spec);
        let mut out = Vec::with_capacity(nk * (BANDS + 1));
        for i in 0..=nk {
            let k = -0.5 + i as f64 / nk as f64;
            let pairs = model.operator([k, 0.0]).solve_bands(BANDS).map_err(|e| e.to_string())?;
            out.push(k);
            out.extend(pairs.iter().map(|p| p.energy));
        }
        Ok(out)
    }

    pub fn try_symbols(&self, y: f64, k: f64) -> Result<String, String> {
        let p = self.table.eval([y, 0.0], [k, 0.0]).map_err(|e| e.to_string())?;
        let doc = serde_json::json!({
            "h0": p.h0,
            "re_h1": p.h1.re,
            "im_h1": p.h1.im,
            "berry_term": p.berry_term,
            "a1": p.a1,
            "kt": p.point.kt[0],
            "route_gap": (p.h1 - p.h1_explicit).norm(),
            "zak": self.zak,
        });
        Ok(doc.to_string())
    }

    /// Stops short of the end point if the amplitude transport hits a caustic.
    pub fn try_trajectory(&self, y0: f64, k0: f64, s_end: f64, n: usize) -> Result<Vec<f64>, String> {
        let set = FlowSettings::peierls(1e-9);
        let mut end = s_end;
        let tr = loop {
            match integrate_flow(&self.table, [y0, 0.0], [k0, 0.0], end, &set) {
                Ok(tr) => break tr,
                Err(BlochError::StepFailure { s, .. }) if s > 0.0 && s < end => end = 0.98 * s,
                Err(e) => return Err(e.to_string()),
            }
        };
        Ok(tr
            .samples(&self.table, n.max(2))
            .iter()
            .flat_map(|p| [p.s, p.y[0], p.k[0], p.h0, p.berry_phase])
            .collect())
    }
}

#[wasm_bindgen]
impl Demo {
    /// Build the band atlas and smooth gauge for `V = v cos x`, `W = w cos y`, `A = a cos y`.
    #[wasm_bindgen(constructor)]
    pub fn new(v: f64, w: f64, a: f64) -> Result<Demo, JsError> {
        Demo::try_new(v, w, a).map_err(|e| JsError::new(&e))
    }

    /// Rows `[k, E1, E2, E3]` for `nk + 1` points across the zone.
    pub fn bands(&self, nk: usize) -> Result<Vec<f64>, JsError> {
        self.try_bands(nk).map_err(|e| JsError::new(&e))
    }

    /// JSON object with `h0`, `h1` and related quantities at `(y, k)`.
    pub fn symbols(&self, y: f64, k: f64) -> Result<String, JsError> {
        self.try_symbols(y, k).map_err(|e| JsError::new(&e))
    }

    /// Rows `[s, y, k, h0, berry_phase]` of the Peierls flow.
    pub fn trajectory(&self, y0: f64, k0: f64, s_end: f64, n: usize) -> Result<Vec<f64>, JsError> {
        self.try_trajectory(y0, k0, s_end, n).map_err(|e| JsError::new(&e))
    }
}
