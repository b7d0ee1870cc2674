use std::fs;
use std::path::Path;

use fpf_core::harness::{parse_config, run_experiment, FAILURE_MARKER};
use fpf_core::Error;

fn linear_config(out: &Path, seed: u64) -> String {
    format!(
        r#"
schema = 1
seed = {seed}
output_dir = "{}"
snapshot_times = [0.1]

[model]
kind = "linear"
a = [[-0.5]]
h = [[1.0]]
initial_mean = [0.0]
initial_cov = [[1.0]]

[time]
dt = 0.002
steps = 100

[[filters]]
kind = "fpf"
gain = "kalman"
particles = 500

[[filters]]
kind = "fpf"
gain = "constant"
particles = 300

[[filters]]
kind = "kalman_bucy"
"#,
        out.display()
    )
}

fn dz_hash_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn linear_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&linear_config(dir.path(), 4)).unwrap();
    let report = run_experiment(&cfg).unwrap();
    for f in [
        "metrics.json",
        "truth.csv",
        "rmse.csv",
        "timeseries_fpf_kalman.csv",
        "timeseries_fpf_constant.csv",
        "timeseries_kalman_bucy.csv",
        "snapshots_fpf_kalman.csv",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    assert!(!dir.path().join(FAILURE_MARKER).exists());
    assert_eq!(report.moment_reference.as_deref(), Some("kalman_bucy"));
    assert!(report.moment_mean_err_max.contains_key("fpf_kalman"));
    assert!(report.moment_cov_err_max["fpf_kalman"] < 0.2);
    assert!(report.all_finite());
    assert!(report.rmse_time_avg.values().all(|v| *v >= 0.0));

    let hashes: Vec<String> = ["fpf_kalman", "fpf_constant", "kalman_bucy"]
        .iter()
        .map(|n| dz_hash_line(&dir.path().join(format!("timeseries_{n}.csv"))))
        .collect();
    assert!(hashes.iter().all(|h| h == &hashes[0]));
    assert_eq!(hashes[0], format!("# dz_sha256={}", report.dz_sha256.clone().unwrap()));

    let header = fs::read_to_string(dir.path().join("timeseries_fpf_kalman.csv")).unwrap();
    assert_eq!(header.lines().nth(1).unwrap(), "t,mu_1,sigma_11,hhat_1");
    let snap = fs::read_to_string(dir.path().join("snapshots_fpf_kalman.csv")).unwrap();
    assert_eq!(snap.lines().next().unwrap(), "t,particle_id,x_1");
    assert_eq!(snap.lines().count(), 501);

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    for key in [
        "rmse_time_avg",
        "moment_mean_err_max",
        "moment_cov_err_max",
        "l1_terminal",
        "gain_l2_err",
        "poincare",
    ] {
        assert!(json.get(key).is_some(), "metrics.json lacks {key}");
    }
}

#[test]
fn same_seed_gives_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&parse_config(&linear_config(a.path(), 9)).unwrap()).unwrap();
    run_experiment(&parse_config(&linear_config(b.path(), 9)).unwrap()).unwrap();
    for f in [
        "metrics.json",
        "timeseries_fpf_constant.csv",
        "snapshots_fpf_kalman.csv",
        "truth.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    run_experiment(&parse_config(&linear_config(c.path(), 10)).unwrap()).unwrap();
    assert_ne!(
        fs::read(a.path().join("metrics.json")).unwrap(),
        fs::read(c.path().join("metrics.json")).unwrap()
    );
}

#[test]
fn scalar_run_with_grid_reference() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
schema = 1
seed = 3
output_dir = "{}"
snapshot_times = [0.1, 0.2]

[model]
kind = "scalar"
drift = [0.0, -1.0]
observation = [0.0, 1.0]
initial = {{ kind = "gaussian", mean = 0.0, var = 0.5 }}

[time]
dt = 0.001
steps = 200

[[filters]]
kind = "fpf"
gain = "dns_kde"
particles = 2000

[[filters]]
kind = "fpf"
gain = "galerkin"
cells = 4
particles = 2000

[[filters]]
kind = "ks_grid"
substeps = 25
"#,
        dir.path().display()
    );
    let report = run_experiment(&parse_config(&text).unwrap()).unwrap();
    assert!(report.l1_terminal["fpf_dns_kde"] < 0.15, "{:?}", report.l1_terminal);
    assert!(report.gain_l2_err.contains_key("fpf_galerkin"));
    assert!(report.poincare["ks_grid_terminal"][0].satisfied);
    for f in ["density_0.1.csv", "density_0.2.csv", "gain_profile.csv"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let density = fs::read_to_string(dir.path().join("density_0.1.csv")).unwrap();
    assert_eq!(density.lines().next().unwrap(), "x,p");
}

#[test]
fn gain_bench_emits_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "schema = 1\nseed = 2\noutput_dir = \"{}\"\n[gain_bench]\ndns_dx = 0.005\n",
        dir.path().display()
    );
    let report = run_experiment(&parse_config(&text).unwrap()).unwrap();
    let err = |k: &str| report.gain_l2_err[k];
    assert!(err("galerkin_quadrature_L5") < err("galerkin_quadrature_L1"));
    assert!(report.galerkin_degenerate.contains_key("particle_L15"));
    let profile = fs::read_to_string(dir.path().join("gain_profile.csv")).unwrap();
    let header = profile.lines().next().unwrap();
    for col in [
        "x",
        "K_dns",
        "K_galerkin_quadrature_L1",
        "K_galerkin_quadrature_L5",
        "K_galerkin_quadrature_L15",
    ] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
}

#[test]
fn failure_leaves_marker_and_context() {
    let dir = tempfile::tempdir().unwrap();
    // A strongly unstable linear drift blows the particles up.
    let text = linear_config(dir.path(), 1)
        .replace("a = [[-0.5]]", "a = [[400.0]]")
        .replace("steps = 100", "steps = 2000");
    let cfg = parse_config(&text).unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Context { .. }), "{err}");
    let marker = fs::read_to_string(dir.path().join(FAILURE_MARKER)).unwrap();
    assert!(!marker.trim().is_empty());
    assert!(dir.path().join("truth.csv").exists() || marker.contains("truth"));
}
