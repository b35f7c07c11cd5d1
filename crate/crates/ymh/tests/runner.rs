use std::fs;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use ymh::runner::{csv_string, fmt_f64, to_json_string, Cell, Experiment, RunConfig, KEYS};
use ymh::Error;

fn ymh(sub: &str, dir: &Path, config: &str, extra: &[&str]) -> (i32, String) {
    let cfg = dir.join(format!("{sub}.cfg"));
    fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ymh"))
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .args(extra)
        .env_remove("YMH_WORKERS")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn config_overlays_defaults_and_rejects_unknown_keys() {
    let c = RunConfig::parse(Experiment::Simulate, "# comment\n\nbeta = 2.5\n n=3 \nmethod = quadrature\n").unwrap();
    assert_eq!((c.beta, c.n), (2.5, 3));
    assert_eq!(c.sweeps, RunConfig::defaults(Experiment::Simulate).sweeps);
    for bad in ["bogus = 1", "beta = x", "beta", "n = 1\nn = 2", "method = simpson"] {
        match RunConfig::parse(Experiment::Simulate, bad) {
            Err(Error::Config(_)) => {}
            other => panic!("{bad:?}: {other:?}"),
        }
    }
    let mut c = RunConfig::defaults(Experiment::Expand);
    for k in KEYS {
        assert!(!matches!(c.set(k, "?"), Err(Error::Config(ref m)) if m.contains("unknown")), "{k}");
    }
}

#[test]
fn verify_defaults_are_the_acceptance_sizes() {
    let c = RunConfig::defaults(Experiment::Verify);
    assert_eq!((c.sweeps, c.chains), (1_000_000, 2));
}

#[test]
fn tables_and_json_keep_seventeen_digits() {
    assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    let csv = csv_string(&["a", "b"], &[vec![Cell::Int(3), Cell::Float(1.0 / 3.0)]]);
    assert_eq!(csv, "a,b\n3,3.3333333333333331e-1\n");
    let s = to_json_string(&serde_json::json!({"x": 2.0f64.sqrt(), "k": 4, "nan": f64::NAN})).unwrap();
    assert!(s.contains("\"x\": 1.4142135623730951e0"), "{s}");
    assert!(s.contains("\"nan\": null"));
    let back: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(back["x"].as_f64().unwrap(), 2.0f64.sqrt());
}

proptest! {
    #[test]
    fn formatted_floats_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let s = fmt_f64(x);
        prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        prop_assert_eq!(s.split('e').next().unwrap().replace(['-', '.'], "").len(), 17);
    }
}

#[test]
fn simulate_is_deterministic_and_writes_the_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "n = 6\nbeta = 4\nsweeps = 3000\nburn_in = 500\nkmax = 5\n";
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (code, err) = ymh("simulate", dir.path(), cfg, &["--out", out.to_str().unwrap(), "--seed", "11"]);
        assert_eq!(code, 0, "{err}");
    }
    for f in ["corr.csv", "fit.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let corr = fs::read_to_string(dir.path().join("a/corr.csv")).unwrap();
    assert!(corr.starts_with("pair_x,pair_y,dist,corr,stderr,ess\n"));
    assert_eq!(corr.lines().count(), 6);
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/fit.json")).unwrap()).unwrap();
    for k in ["rate", "rate_ci_lo", "rate_ci_hi", "schema_version"] {
        assert!(fit.get(k).is_some(), "fit.json lacks {k}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 11);
    assert_eq!(manifest["config"]["sweeps"], 3000);
    assert_eq!(manifest["artifact_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config"].as_object().unwrap().len(), KEYS.len() + 1);
}

#[test]
fn proca_scan_writes_cov_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let (code, err) = ymh("proca", dir.path(), "n = 8\nbeta = 1\n", &["--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let cov = fs::read_to_string(out.join("cov.csv")).unwrap();
    assert!(cov.starts_with("dist,cov,abs_cov,fit_residual\n"));
    assert_eq!(cov.lines().count(), 11);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    let (code, err) = ymh("simulate", dir.path(), "sweeps = 100\nburn_in = 100\n", &["--out", out]);
    assert_eq!(code, 2);
    assert!(err.contains("sweeps (100) must exceed burn_in (100)"), "{err}");
    assert_eq!(ymh("geometry", dir.path(), "colour = red\n", &["--out", out]).0, 2);
    assert_eq!(ymh("oracle", dir.path(), "n = 3\n", &["--out", out]).0, 3);
    // A table far outside the convergence region fails the in-run KP check.
    assert_eq!(ymh("expand", dir.path(), "table_norm = 200\nn_max = 3\n", &["--out", out]).0, 1);
    assert_eq!(ymh("expand", dir.path(), "", &["--out", out]).0, 0);
}
