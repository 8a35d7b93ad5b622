use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blochfx"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("blochfx-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn bands_writes_csv_and_manifest() {
    let out = scratch("bands");
    let st = bin().args(["bands", "--config"]).arg(config("mathieu.toml")).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    let csv = std::fs::read_to_string(out.join("bands.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,band_index,energy"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "bands");
    assert_eq!(m["outputs"][0], "bands.csv");
}

#[test]
fn residual_rows_and_slopes_are_reproducible() {
    let run = |name: &str| {
        let out = scratch(name);
        let st = bin()
            .args(["residual", "--order", "1", "--epsilon", "1/8,1/16,1/32", "--out"])
            .arg(&out)
            .env("BLOCHFX_THREADS", "2")
            .status()
            .unwrap();
        assert!(st.success());
        out
    };
    let a = run("res-a");
    let b = run("res-b");
    let text = std::fs::read_to_string(a.join("residual.csv")).unwrap();
    assert_eq!(text, std::fs::read_to_string(b.join("residual.csv")).unwrap());
    // header + 3 epsilons x 4 kinds
    assert_eq!(text.lines().count(), 13);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let slope = m["fits"]["intertwining_N1"]["slope"].as_f64().unwrap();
    assert!(slope > 1.8, "{slope}");
}

#[test]
fn input_errors_exit_with_one() {
    let st = bin().arg("--no-such-flag").output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("Usage"));
    let st = bin().args(["bands", "--epsilon", "3/4"]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    let st = bin().args(["bands", "--nk", "4"]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
}

#[test]
fn numerical_failures_exit_with_two() {
    // the lowest Landau pair is degenerate, so no smooth gauge exists for band 1
    let out = scratch("landau");
    let st = bin().args(["atlas", "--preset", "landau", "--out"]).arg(&out).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("stage"));
}

#[test]
fn dynamics_writes_trajectory_and_packet() {
    let out = scratch("dyn");
    let st = bin().args(["dynamics", "--s-end", "2", "--epsilon", "1/16", "--out"]).arg(&out).status().unwrap();
    assert!(st.success());
    let traj = std::fs::read_to_string(out.join("traj.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("s,y,k,h0,berry_phase,rw_phase,det_J"));
    let packet = std::fs::read_to_string(out.join("packet.csv")).unwrap();
    assert_eq!(packet.lines().next(), Some("x,re_psi,im_psi"));
}
