//! CSV writers for run artifacts and the JSON run manifest.
//!
//! Every CSV has a header row; numbers are written with full round-trip
//! precision so repeated runs reproduce files bitwise.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atlas::{chern_from_vectors, BandAtlas, GaugeSection};
use crate::config::ModelSpec;
use crate::direct::ObservableRow;
use crate::error::{BlochError, Result};
use crate::fit::PowerFit;
use crate::semiclassics::{PacketField, TrajectorySample};
use crate::symbols::SymbolPoint;

/// Thin wrapper over a CSV writer with a fixed header.
pub struct Table {
    w: csv::Writer<File>,
    width: usize,
}

impl Table {
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        Ok(Table { w, width: header.len() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.width);
        Ok(self.w.write_record(fields)?)
    }

    pub fn numbers(&mut self, values: &[f64]) -> Result<()> {
        let f: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.row(&f)
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn axes(prefix: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![prefix.to_string()]
    } else {
        (1..=dim).map(|j| format!("{prefix}{j}")).collect()
    }
}

fn header(parts: &[Vec<String>]) -> Vec<String> {
    parts.concat()
}

fn names(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// `bands.csv`: k components, band index, energy for bands `1..=m+1`.
pub fn write_bands(path: &Path, atlas: &BandAtlas) -> Result<()> {
    let d = atlas.dim;
    let mut t = Table::create(path, &header(&[axes("k", d), names(&["band_index", "energy"])]))?;
    for (k, es) in atlas.nodes.iter().zip(&atlas.energies) {
        for (b, e) in es.iter().enumerate() {
            let mut row: Vec<String> = k[..d].iter().map(|v| v.to_string()).collect();
            row.push((b + 1).to_string());
            row.push(e.to_string());
            t.row(&row)?;
        }
    }
    t.finish()
}

/// `geometry.csv`: k nodes, Berry connection, plaquette curvature.
pub fn write_geometry(path: &Path, atlas: &BandAtlas, section: Option<&GaugeSection>) -> Result<()> {
    let d = atlas.dim;
    let mut t = Table::create(path, &header(&[axes("k", d), axes("berry", d), names(&["curvature"])]))?;
    let curv = if d == 1 {
        vec![0.0; atlas.nodes.len()]
    } else {
        chern_from_vectors(atlas.grid(), atlas.spec.lattice.lengths, atlas.nk, &atlas.vectors).1
    };
    for (i, k) in atlas.nodes.iter().enumerate() {
        let mut v: Vec<f64> = k[..d].to_vec();
        match section {
            Some(s) => v.extend_from_slice(&s.berry[i][..d]),
            None => v.extend(std::iter::repeat_n(f64::NAN, d)),
        }
        v.push(curv[i]);
        t.numbers(&v)?;
    }
    t.finish()
}

/// `symbols.csv`: y, k, h0, re_h1, im_h1, L3, B3, a1.
pub fn write_symbols(path: &Path, dim: usize, points: &[impl AsRef<SymbolPoint>]) -> Result<()> {
    let mut t = Table::create(
        path,
        &header(&[axes("y", dim), axes("k", dim), names(&["h0", "re_h1", "im_h1", "L3", "B3", "a1"])]),
    )?;
    for p in points {
        let p = p.as_ref();
        let mut v: Vec<f64> = p.point.y[..dim].to_vec();
        v.extend_from_slice(&p.point.k[..dim]);
        v.extend([p.h0, p.h1.re, p.h1.im, p.l3, p.b3, p.a1]);
        t.numbers(&v)?;
    }
    t.finish()
}

/// One measured residual of a scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub epsilon: String,
    pub order: u8,
    pub kind: String,
    pub value: f64,
}

/// `residual.csv`: epsilon, order, kind, value.
pub fn write_residuals(path: &Path, rows: &[ResidualRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_residuals(path: &Path) -> Result<Vec<ResidualRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(BlochError::from)).collect()
}

/// `traj.csv`: s, y, k, h0, berry_phase, rw_phase, det_J.
pub fn write_trajectory(path: &Path, dim: usize, samples: &[TrajectorySample]) -> Result<()> {
    let mut t = Table::create(
        path,
        &header(&[names(&["s"]), axes("y", dim), axes("k", dim), names(&["h0", "berry_phase", "rw_phase", "det_J"])]),
    )?;
    for p in samples {
        let mut v = vec![p.s];
        v.extend_from_slice(&p.y[..dim]);
        v.extend_from_slice(&p.k[..dim]);
        v.extend([p.h0, p.berry_phase, p.rw_phase, p.det_j]);
        t.numbers(&v)?;
    }
    t.finish()
}

/// `packet.csv`: x, re_psi, im_psi.
pub fn write_packet(path: &Path, packet: &PacketField) -> Result<()> {
    let mut t = Table::create(path, &names(&["x", "re_psi", "im_psi"]))?;
    for (x, z) in packet.x().iter().zip(&packet.psi) {
        t.numbers(&[*x, z.re, z.im])?;
    }
    t.finish()
}

/// `observables.csv`: t, s, center, quasimomentum, band_population, phase, energy.
pub fn write_observables(path: &Path, rows: &[ObservableRow]) -> Result<()> {
    let mut t = Table::create(
        path,
        &names(&["t", "s", "center", "quasimomentum", "band_population", "phase", "energy"]),
    )?;
    for r in rows {
        let phase = r.phase.map(|p| p.to_string()).unwrap_or_default();
        t.row(&[
            r.t.to_string(),
            r.s.to_string(),
            r.center.to_string(),
            r.quasimomentum.to_string(),
            r.band_population.to_string(),
            phase,
            r.energy.to_string(),
        ])?;
    }
    t.finish()
}

/// Provenance record written next to every set of outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub spec_hash: String,
    pub spec: ModelSpec,
    pub seed: u64,
    pub threads: usize,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub fits: BTreeMap<String, PowerFit>,
    pub values: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, spec: &ModelSpec, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: crate::VERSION.to_string(),
            spec_hash: spec.hash(),
            spec: spec.clone(),
            seed,
            threads: rayon::current_num_threads(),
            parameters: BTreeMap::new(),
            fits: BTreeMap::new(),
            values: BTreeMap::new(),
            outputs: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.parameters.insert(key.to_string(), v);
    }

    pub fn output(&mut self, path: &Path) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.push(name);
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    fn scratch(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("blochfx-out-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn residual_rows_round_trip() {
        let dir = scratch("res");
        let rows = vec![
            ResidualRow { epsilon: "1/8".into(), order: 1, kind: "intertwining".into(), value: 0.1 + 0.2 },
            ResidualRow { epsilon: "1/16".into(), order: 0, kind: "isometry".into(), value: 1.234e-17 },
        ];
        let p = dir.join("residual.csv");
        write_residuals(&p, &rows).unwrap();
        assert_eq!(read_residuals(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epsilon,order,kind,value\n"));
    }

    #[test]
    fn manifest_round_trip_and_bands_header() {
        let dir = scratch("man");
        let spec = models::mathieu(16);
        let atlas = crate::atlas::build_band_atlas(&spec).unwrap();
        let p = dir.join("bands.csv");
        write_bands(&p, &atlas).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next(), Some("k,band_index,energy"));
        assert_eq!(text.lines().count(), 1 + atlas.nodes.len() * atlas.energies[0].len());
        let mut m = RunManifest::new("bands", &spec, 7);
        m.param("nk", 32);
        m.output(&p);
        let path = m.write(&dir).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
    }
}
