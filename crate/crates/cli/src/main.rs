//! Command-line runner: builds band atlases, effective symbols, residual scans,
//! semiclassical trajectories and direct-solver comparisons, writing CSV files
//! and a JSON manifest into the output directory.
//!
//! Exit codes: 0 success, 1 bad input (flags, config, validation), 2 numerical
//! failure.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use blochfx::atlas::{self, build_band_atlas, fix_smooth_gauge, BandAtlas};
use blochfx::config::{load_spec_file, Epsilon, ModelSpec};
use blochfx::direct::{compare_dynamics, CompareOptions};
use blochfx::fit::fit_power_law;
use blochfx::output::{self, ResidualRow, RunManifest};
use blochfx::quantizer::{test_cell_profile, Corrector, Quantizer, SlowFunction, TwoScaleFunction};
use blochfx::semiclassics::{integrate_flow, synthesize_packet, FlowSettings, InitialPacket, SynthesisOptions, Variant};
use blochfx::symbols::SymbolTable;
use blochfx::{models, validation, BlochError};

#[derive(Parser, Debug)]
#[command(name = "blochfx", version, about = "Effective dynamics of slowly perturbed Bloch electrons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML model configuration; a built-in preset is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in model used without --config.
    #[arg(long, global = true, value_enum, default_value_t = Preset::MathieuW)]
    preset: Preset,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    band: Option<usize>,
    #[arg(long, global = true)]
    nk: Option<usize>,
    #[arg(long, global = true)]
    nx: Option<usize>,
    /// Comma-separated list of exact rationals, e.g. 1/8,1/16.
    #[arg(long, global = true, value_delimiter = ',')]
    epsilon: Option<Vec<Epsilon>>,
    /// Corrector order N (0 or 1); both when omitted.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(0..=1))]
    order: Option<u8>,
    #[arg(long, global = true, default_value = "peierls")]
    variant: Variant,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Band energies on the k-grid.
    Bands,
    /// Bands, smooth gauge, Berry connection and topological diagnostics.
    Atlas,
    /// Effective symbols h0, h1, L3, B3, a1 on phase-space points.
    Effective,
    /// Intertwining, isometry and projection residuals over the epsilon list.
    Residual,
    /// Semiclassical trajectory and, in 1D, the synthesized wave packet.
    Dynamics {
        #[arg(long, default_value_t = 0.5 * PI)]
        y0: f64,
        #[arg(long, default_value_t = 0.0)]
        k0: f64,
        #[arg(long, default_value_t = 10.0)]
        s_end: f64,
        #[arg(long, default_value_t = 0.5)]
        width: f64,
        /// Slow time of the synthesized packet (1D); caustics end the synthesis.
        #[arg(long, default_value_t = 1.0)]
        packet_at: f64,
    },
    /// Direct Schrödinger evolution against the effective dynamics (1D).
    Compare {
        #[arg(long, default_value_t = 0.5 * PI)]
        y0: f64,
        #[arg(long, default_value_t = 0.0)]
        k0: f64,
        #[arg(long, default_value_t = 1.0)]
        s_end: f64,
        #[arg(long, default_value_t = 0.5)]
        width: f64,
    },
    /// Run the acceptance criteria and print PASS/FAIL per criterion.
    Validate {
        /// Run only this criterion (1-11).
        #[arg(long)]
        criterion: Option<u8>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Free,
    Mathieu,
    MathieuW,
    MathieuDriven,
    MathieuTwisted,
    Landau,
    Magnetic,
    SquareWell,
}

impl Preset {
    fn spec(self) -> ModelSpec {
        match self {
            Preset::Free => models::free_1d(64),
            Preset::Mathieu => models::mathieu(32),
            Preset::MathieuW => models::mathieu_w(32),
            Preset::MathieuDriven => models::mathieu_driven(32),
            Preset::MathieuTwisted => models::mathieu_twisted(32),
            Preset::Landau => models::landau(24),
            Preset::Magnetic => validation::magnetic_route_model(),
            Preset::SquareWell => models::square_well(12, 20.0),
        }
    }
}

/// Error tagged with the pipeline stage that produced it.
struct Failure {
    stage: &'static str,
    error: BlochError,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for blochfx::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("BLOCHFX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error in stage `{}`: {}", f.stage, f.error);
            ExitCode::from(if f.error.is_input_error() { 1 } else { 2 })
        }
    }
}

fn resolve_spec(cli: &Cli) -> blochfx::Result<ModelSpec> {
    let mut spec = match &cli.config {
        Some(p) => load_spec_file(p)?,
        None => cli.preset.spec(),
    };
    if let Some(b) = cli.band {
        spec.band = b;
    }
    if let Some(n) = cli.nk {
        spec.disc.nk = n;
    }
    if let Some(n) = cli.nx {
        spec.disc.nx = n;
    }
    if let Some(e) = &cli.epsilon {
        spec.epsilons = e.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Bands => "bands",
        Command::Atlas => "atlas",
        Command::Effective => "effective",
        Command::Residual => "residual",
        Command::Dynamics { .. } => "dynamics",
        Command::Compare { .. } => "compare",
        Command::Validate { .. } => "validate",
    }
}

fn run(cli: &Cli) -> Result<ExitCode, Failure> {
    let t0 = Instant::now();
    let spec = resolve_spec(cli).stage("config")?;
    std::fs::create_dir_all(&cli.out).map_err(BlochError::from).stage("output")?;
    let mut m = RunManifest::new(command_name(&cli.command), &spec, cli.seed);
    m.param("band", spec.band);
    m.param("nk", spec.disc.nk);
    m.param("nx", spec.disc.nx);
    m.param("epsilons", &spec.epsilons);
    let mut code = ExitCode::SUCCESS;
    match &cli.command {
        Command::Bands => bands(cli, &spec, &mut m)?,
        Command::Atlas => atlas_cmd(cli, &spec, &mut m)?,
        Command::Effective => effective(cli, &spec, &mut m)?,
        Command::Residual => residual(cli, &spec, &mut m)?,
        Command::Dynamics { y0, k0, s_end, width, packet_at } => {
            let p = InitialPacket { center: *y0, k0: *k0, chirp: 0.0, width: *width };
            dynamics(cli, &spec, &p, *s_end, *packet_at, &mut m)?
        }
        Command::Compare { y0, k0, s_end, width } => {
            let p = InitialPacket { center: *y0, k0: *k0, chirp: 0.0, width: *width };
            compare(cli, &spec, &p, *s_end, &mut m)?
        }
        Command::Validate { criterion } => {
            if !validate(cli, *criterion, &mut m)? {
                code = ExitCode::from(2);
            }
        }
    }
    m.wall_time_s = t0.elapsed().as_secs_f64();
    m.write(&cli.out).stage("output")?;
    Ok(code)
}

fn write(m: &mut RunManifest, path: &Path, res: blochfx::Result<()>) -> Result<(), Failure> {
    res.stage("output")?;
    m.output(path);
    Ok(())
}

fn table_for(atlas: &BandAtlas) -> blochfx::Result<SymbolTable> {
    match fix_smooth_gauge(atlas) {
        Ok(sec) => Ok(SymbolTable::new(Arc::new(sec))),
        Err(BlochError::AssumptionBViolated { .. }) => Ok(SymbolTable::local(atlas)),
        Err(e) => Err(e),
    }
}

fn bands(cli: &Cli, spec: &ModelSpec, m: &mut RunManifest) -> Result<(), Failure> {
    let atlas = build_band_atlas(spec).stage("atlas")?;
    let p = cli.out.join("bands.csv");
    write(m, &p, output::write_bands(&p, &atlas))?;
    m.values.insert("gap_margin".into(), atlas.margin);
    m.values.insert("isolated".into(), if atlas.passed() { 1.0 } else { 0.0 });
    if !atlas.passed() {
        eprintln!("note: band {} is not isolated (margin {:.3e})", spec.band, atlas.margin);
    }
    Ok(())
}

fn atlas_cmd(cli: &Cli, spec: &ModelSpec, m: &mut RunManifest) -> Result<(), Failure> {
    let atlas = build_band_atlas(spec).stage("atlas")?;
    let p = cli.out.join("bands.csv");
    write(m, &p, output::write_bands(&p, &atlas))?;
    m.values.insert("gap_margin".into(), atlas.margin);
    if atlas.dim == 2 {
        let c = atlas::chern_number(&atlas).stage("chern")?;
        m.values.insert("chern".into(), c as f64);
    } else {
        let z = atlas::zak_phase(&atlas).stage("zak")?;
        m.values.insert("zak_phase".into(), z);
    }
    let section = fix_smooth_gauge(&atlas).stage("gauge")?;
    let probes: Vec<[f64; 2]> = validation::random_points(spec, 8, cli.seed).into_iter().map(|p| p.1).collect();
    m.values.insert("seam_residual".into(), section.seam_residual(&probes).stage("gauge")?);
    m.values.insert("max_link_angle".into(), section.max_link_angle());
    let g = cli.out.join("geometry.csv");
    write(m, &g, output::write_geometry(&g, &atlas, Some(&section)))?;
    let c = cli.out.join("atlas.json");
    let text = serde_json::to_string(&atlas.cache()).map_err(BlochError::from);
    write(m, &c, text.and_then(|t| Ok(std::fs::write(&c, t)?)))?;
    Ok(())
}

fn effective(cli: &Cli, spec: &ModelSpec, m: &mut RunManifest) -> Result<(), Failure> {
    let atlas = build_band_atlas(spec).stage("atlas")?;
    let table = table_for(&atlas).stage("gauge")?;
    let pts: Vec<([f64; 2], [f64; 2])> = if spec.dim() == 1 {
        let half = PI / spec.lattice.lengths[0];
        let ny = 16;
        let nk = spec.disc.nk;
        (0..ny)
            .flat_map(|i| {
                (0..nk).map(move |j| {
                    let y = 2.0 * PI * i as f64 / ny as f64;
                    ([y, 0.0], [-half + 2.0 * half * j as f64 / nk as f64, 0.0])
                })
            })
            .collect()
    } else {
        validation::random_points(spec, 50, cli.seed)
    };
    let evals = pts
        .iter()
        .map(|(y, k)| table.eval(*y, *k))
        .collect::<blochfx::Result<Vec<_>>>()
        .stage("symbols")?;
    let gap = evals.iter().map(|p| (p.h1 - p.h1_explicit).norm() / (1.0 + p.h1.norm())).fold(0.0, f64::max);
    let solv = evals.iter().map(|p| p.solvability).fold(0.0, f64::max);
    m.values.insert("max_route_gap".into(), gap);
    m.values.insert("max_solvability".into(), solv);
    m.param("points", pts.len());
    m.param("gauge", if table.section.is_some() { "smooth" } else { "local" });
    let p = cli.out.join("symbols.csv");
    write(m, &p, output::write_symbols(&p, spec.dim(), &evals))?;
    Ok(())
}

fn residual(cli: &Cli, spec: &ModelSpec, m: &mut RunManifest) -> Result<(), Failure> {
    let atlas = build_band_atlas(spec).stage("atlas")?;
    let table = SymbolTable::new(Arc::new(fix_smooth_gauge(&atlas).stage("gauge")?));
    let ny = validation::SCAN_NY;
    let u = SlowFunction::gaussian(ny, PI, 1.0);
    let v = TwoScaleFunction::product(&u, &test_cell_profile(&table), table.model.grid.weight);
    let orders: Vec<u8> = cli.order.map(|o| vec![o]).unwrap_or_else(|| vec![0, 1]);
    let mut rows = Vec::new();
    for &e in &spec.epsilons {
        let q = Quantizer::new(&table, e, ny).stage("quantizer")?;
        for &n in &orders {
            let mut push = |kind: &str, val: blochfx::Result<f64>| -> Result<(), Failure> {
                rows.push(ResidualRow { epsilon: e.to_string(), order: n, kind: kind.into(), value: val.stage("residual")? });
                Ok(())
            };
            push("intertwining", q.intertwining_residual(Corrector::new(n), &u))?;
            push("isometry", q.isometry_defect(Corrector::new(n), &u))?;
            push("projection", q.projection_defect(Corrector::new(n), &v))?;
            if n == 1 {
                push("isometry_without_a1", q.isometry_defect(Corrector::without_a1(1), &u))?;
            }
        }
    }
    if spec.epsilons.len() >= 2 {
        let mut keys: Vec<(u8, String)> = rows.iter().map(|r| (r.order, r.kind.clone())).collect();
        keys.sort();
        keys.dedup();
        for (n, kind) in keys {
            let sel: Vec<&ResidualRow> = rows.iter().filter(|r| r.order == n && r.kind == kind).collect();
            let x: Vec<f64> = spec.epsilons.iter().map(|e| e.value()).collect();
            let y: Vec<f64> = sel.iter().map(|r| r.value).collect();
            m.fits.insert(format!("{kind}_N{n}"), fit_power_law(&x, &y));
        }
    }
    m.param("slow_nodes", ny);
    m.param("profile", "gaussian, center pi, width 1");
    let p = cli.out.join("residual.csv");
    write(m, &p, output::write_residuals(&p, &rows))?;
    for (k, f) in &m.fits {
        println!("{k}: slope {:.3} +- {:.3}", f.slope, f.slope_ci95);
    }
    Ok(())
}

fn dynamics(cli: &Cli, spec: &ModelSpec, p: &InitialPacket, s_end: f64, packet_at: f64, m: &mut RunManifest) -> Result<(), Failure> {
    let atlas = build_band_atlas(spec).stage("atlas")?;
    let table = table_for(&atlas).stage("gauge")?;
    let tol = spec.tol.ode;
    let eps = spec.epsilons.first().copied().unwrap_or(Epsilon::inverse_of(32));
    let set = match cli.variant {
        Variant::Peierls => FlowSettings::peierls(tol),
        Variant::Corrected => FlowSettings::corrected(tol, eps.value()),
    };
    let tr = integrate_flow(&table, [p.center, 0.0], [p.k0, 0.0], s_end, &set).stage("flow")?;
    let samples = tr.samples(&table, 201);
    m.param("variant", format!("{:?}", cli.variant));
    m.param("packet", [p.center, p.k0, p.width]);
    m.param("s_end", s_end);
    m.values.insert("energy_drift".into(), tr.energy_drift);
    m.values.insert("step_halving_defect".into(), tr.step_halving_defect(&table).stage("flow")?);
    let path = cli.out.join("traj.csv");
    write(m, &path, output::write_trajectory(&path, spec.dim(), &samples))?;
    if spec.dim() == 1 && table.section.is_some() {
        let field = synthesize_packet(&table, p, packet_at, eps, &SynthesisOptions::default()).stage("synthesis")?;
        m.values.insert("min_jacobian".into(), field.min_det);
        m.param("packet_epsilon", eps);
        m.param("packet_at", packet_at);
        let path = cli.out.join("packet.csv");
        write(m, &path, output::write_packet(&path, &field))?;
    }
    Ok(())
}

fn compare(cli: &Cli, spec: &ModelSpec, p: &InitialPacket, s_end: f64, m: &mut RunManifest) -> Result<(), Failure> {
    let atlas = build_band_atlas(spec).stage("atlas")?;
    let table = SymbolTable::new(Arc::new(fix_smooth_gauge(&atlas).stage("gauge")?));
    let eps: Vec<Epsilon> = match &cli.epsilon {
        Some(e) => e.clone(),
        None => vec![Epsilon::inverse_of(32)],
    };
    m.param("packet", [p.center, p.k0, p.width]);
    m.param("s_end", s_end);
    m.param("compare_epsilons", &eps);
    let mut centers = Vec::new();
    for (i, &e) in eps.iter().enumerate() {
        let r = compare_dynamics(&table, e, s_end, p, &CompareOptions::default()).stage("direct")?;
        let tag = format!("{}-{}", e.num, e.den);
        for (k, v) in [
            ("center_error", r.center_error()),
            ("central_track_error", r.central_track_error),
            ("min_population", r.min_population),
            ("fidelity_forward", r.fidelity_forward),
            ("fidelity_backward", r.fidelity_backward),
            ("phase_error_with_h1", r.phase_error_with_h1),
            ("phase_error_without_h1", r.phase_error_without_h1),
            ("h1_phase", r.h1_phase),
            ("norm_drift", r.norm_drift),
            ("dt", r.dt),
        ] {
            m.values.insert(format!("{k}@{tag}"), v);
        }
        m.param(&format!("orientation@{tag}"), format!("{:?}", r.orientation));
        let path = if i == 0 { cli.out.join("observables.csv") } else { cli.out.join(format!("observables_{tag}.csv")) };
        write(m, &path, output::write_observables(&path, &r.rows))?;
        centers.push(r.center_error());
        println!(
            "eps {e}: center error {:.3e}, min population {:.8}, fidelity {:.4}, phase error {:.2e} (without h1 {:.3})",
            r.center_error(),
            r.min_population,
            r.fidelity_forward.max(r.fidelity_backward),
            r.phase_error_with_h1,
            r.phase_error_without_h1
        );
    }
    if eps.len() >= 2 {
        let x: Vec<f64> = eps.iter().map(|e| e.value()).collect();
        m.fits.insert("center_error".into(), fit_power_law(&x, &centers));
    }
    Ok(())
}

fn validate(cli: &Cli, criterion: Option<u8>, m: &mut RunManifest) -> Result<bool, Failure> {
    let reports = match criterion {
        Some(id) => vec![validation::run_one(id, cli.seed)
            .ok_or_else(|| BlochError::validation("criterion", format!("{id} is not in 1..=11")))
            .stage("config")?],
        None => validation::run_all(cli.seed),
    };
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed;
        for (k, v) in &r.metrics {
            m.values.insert(format!("c{:02}.{k}", r.id), *v);
        }
    }
    let p = cli.out.join("validation.json");
    let text = serde_json::to_string_pretty(&reports).map_err(BlochError::from);
    write(m, &p, text.and_then(|t| Ok(std::fs::write(&p, t)?)))?;
    Ok(ok)
}
