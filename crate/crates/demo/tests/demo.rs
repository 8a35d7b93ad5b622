use blochfx_demo::Demo;

#[test]
fn bands_are_sorted_and_cover_the_zone() {
    let d = Demo::try_new(1.0, 0.0, 0.0).unwrap();
    let rows = d.try_bands(8).unwrap();
    assert_eq!(rows.len(), 9 * 4);
    for r in rows.chunks(4) {
        assert!(r[1] <= r[2] && r[2] <= r[3]);
    }
    assert_eq!(rows[0], -0.5);
    assert_eq!(rows[32], 0.5);
}

#[test]
fn symbols_report_both_routes_and_zak_phase() {
    let d = Demo::try_new(1.0, 0.3, 0.1).unwrap();
    let s: serde_json::Value = serde_json::from_str(&d.try_symbols(0.4, 0.1).unwrap()).unwrap();
    assert!(s["route_gap"].as_f64().unwrap() < 1e-10);
    let zak = s["zak"].as_f64().unwrap().abs();
    assert!((zak - std::f64::consts::PI).abs() < 1e-6 || zak < 1e-6);
}

#[test]
fn trajectory_rows_start_at_the_initial_point() {
    let d = Demo::try_new(1.0, 0.3, 0.0).unwrap();
    let rows = d.try_trajectory(0.2, 0.1, 2.0, 5).unwrap();
    assert_eq!(rows.len(), 6 * 5);
    assert_eq!(&rows[..3], &[0.0, 0.2, 0.1]);
    assert!((rows[25] - 2.0).abs() < 1e-12);
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(Demo::try_new(f64::NAN, 0.0, 0.0).is_err());
}

#[test]
fn trajectory_stops_before_a_caustic() {
    let d = Demo::try_new(1.0, 0.3, 0.1).unwrap();
    let rows = d.try_trajectory(0.2, 0.1, 10.0, 4).unwrap();
    let s_last = rows[rows.len() - 5];
    assert!(s_last > 1.0 && s_last <= 10.0);
}
