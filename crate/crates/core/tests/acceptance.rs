//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

use blochfx::validation::{self, CriterionReport};

const SEED: u64 = 20240601;

fn report(r: CriterionReport) {
    println!("{r}");
    for (k, v) in &r.metrics {
        println!("    {k} = {v:.6e}");
    }
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_01_free_particle_spectra() {
    report(validation::free_spectra());
}

#[test]
fn criterion_02_landau_flatness() {
    report(validation::landau_flatness());
}

#[test]
fn criterion_03_hellmann_feynman() {
    report(validation::hellmann_feynman());
}

#[test]
fn criterion_04_bundle_diagnostics() {
    report(validation::bundle_diagnostics());
}

#[test]
fn criterion_05_fredholm_solvability() {
    report(validation::fredholm_solvability(SEED));
}

#[test]
fn criterion_06_h1_route_equality() {
    report(validation::route_equality(SEED));
}

#[test]
fn criterion_07_theorem_residual_orders() {
    report(validation::theorem_orders());
}

#[test]
fn criterion_08_almost_projection() {
    report(validation::almost_projection());
}

#[test]
fn criterion_09_flow_quality() {
    report(validation::flow_quality());
}

#[test]
fn criterion_10_dynamics_validation() {
    report(validation::dynamics_validation());
}

#[test]
fn criterion_11_wkb_consistency() {
    report(validation::wkb_consistency());
}
