use std::fs;
use std::path::Path;

use proptest::prelude::*;
use serde_json::json;
use wellspin::harness::{
    self, exit, validate_config, validate_config_value, ExperimentConfig, RunOptions, Scenario, OUT_ENV,
};
use wellspin::scaling::ScalingReport;
use wellspin::Error;

fn cfg(v: serde_json::Value) -> ExperimentConfig {
    serde_json::from_value(v).unwrap()
}

fn in_memory() -> RunOptions {
    RunOptions { write: false, ..RunOptions::default() }
}

fn tables(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("tables"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn output_layout_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = cfg(json!({"seed": 11, "spin_suite": {"fields": 60}}));
    for root in [a.path(), b.path()] {
        let opts = RunOptions { out_root: Some(root.to_path_buf()), ..RunOptions::default() };
        let out = harness::run(Scenario::SpinLemmaSuite, &c, &opts).unwrap();
        assert!(out.passed());
        let dir = root.join("spin-lemma-suite");
        assert_eq!(out.dir.as_deref(), Some(dir.as_path()));
        for f in ["summary.json", "digest.txt", "tables/fields.csv"] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["seed"], 11);
        assert_eq!(summary["passed"], true);
        let digest = fs::read_to_string(dir.join("digest.txt")).unwrap();
        assert!(digest.ends_with("overall: PASS\n"));
    }
    assert_eq!(tables(&a.path().join("spin-lemma-suite")), tables(&b.path().join("spin-lemma-suite")));

    let other = harness::run(Scenario::SpinLemmaSuite, &cfg(json!({"seed": 12, "spin_suite": {"fields": 60}})), &in_memory())
        .unwrap();
    let again = harness::run(Scenario::SpinLemmaSuite, &c, &in_memory()).unwrap();
    assert_ne!(other.table("fields"), again.table("fields"));
}

#[test]
fn worker_cap_keeps_output() {
    let c = cfg(json!({"rigidity": {"fields": 12}}));
    let one = harness::run_with_workers(Scenario::RigidityFamily, &c, &in_memory(), Some(1)).unwrap();
    let many = harness::run_with_workers(Scenario::RigidityFamily, &c, &in_memory(), Some(4)).unwrap();
    for (x, y) in one.tables.iter().zip(&many.tables) {
        assert_eq!(x, y);
    }
    assert!(matches!(
        harness::run_with_workers(Scenario::RigidityFamily, &c, &in_memory(), Some(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn output_root_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_root = dir.path().join("from-env");
    std::env::set_var(OUT_ENV, &env_root);
    let c = ExperimentConfig::default_for(Scenario::WellsetAnalysis);
    let out = harness::run(Scenario::WellsetAnalysis, &c, &RunOptions::default()).unwrap();
    assert_eq!(out.dir.unwrap(), env_root.join("wellset-analysis"));
    let c = cfg(json!({"output": "cfg-out"}));
    let opts = RunOptions { base_dir: dir.path().to_path_buf(), ..RunOptions::default() };
    let out = harness::run(Scenario::WellsetAnalysis, &c, &opts).unwrap();
    assert_eq!(out.dir.unwrap(), dir.path().join("cfg-out/wellset-analysis"));
    let opts = RunOptions { out_root: Some(dir.path().join("flag")), ..opts };
    let out = harness::run(Scenario::WellsetAnalysis, &c, &opts).unwrap();
    assert_eq!(out.dir.unwrap(), dir.path().join("flag/wellset-analysis"));
    std::env::remove_var(OUT_ENV);
}

#[test]
fn wellset_analysis_reports_constants() {
    let out = harness::run(Scenario::WellsetAnalysis, &ExperimentConfig::default_for(Scenario::WellsetAnalysis), &in_memory())
        .unwrap();
    assert!(out.passed());
    let r = &out.results;
    assert!((r["d"].as_f64().unwrap() - 1.5 * 2f64.sqrt()).abs() < 1e-12);
    assert!((r["c0"].as_f64().unwrap() - 0.79299).abs() < 1e-4);
    assert_eq!(r["wellset"]["derived"]["connections"].as_array().unwrap().len(), 2);
    let table = String::from_utf8(out.table("connections").unwrap().to_vec()).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("i,j,theta,a,b,residual,double_root"));
}

#[test]
fn wellset_from_file_and_inline() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json!({"dim": 2, "wells": [[1.5, 0.0, 0.0, 1.0 / 1.5], [1.0 / 1.5, 0.0, 0.0, 1.5]]});
    fs::write(dir.path().join("pair.json"), doc.to_string()).unwrap();
    let c = cfg(json!({"wellset": "pair.json"}));
    let opts = RunOptions { base_dir: dir.path().to_path_buf(), write: false, ..RunOptions::default() };
    let from_file = harness::run(Scenario::WellsetAnalysis, &c, &opts).unwrap();
    let inline = harness::run(Scenario::WellsetAnalysis, &cfg(json!({"wellset": doc})), &in_memory()).unwrap();
    assert_eq!(from_file.results["d"], inline.results["d"]);
    assert!(from_file.passed());
    assert!(matches!(
        harness::run(Scenario::WellsetAnalysis, &c, &in_memory()),
        Err(Error::Config(msg)) if msg.contains("wellset")
    ));
}

#[test]
fn laminate_scaling_reports_carry_raw_values() {
    let out = harness::run(Scenario::LaminateSweep, &ExperimentConfig::default_for(Scenario::LaminateSweep), &in_memory())
        .unwrap();
    assert!(out.passed(), "{}", harness::render_digest(&out));
    let reports: Vec<ScalingReport> = out.results["scaling"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| ScalingReport::new(v["quantity"].as_str().unwrap(), &[8, 16, 32, 64], &serde_json::from_value::<Vec<f64>>(v["values"].clone()).unwrap(), v["expected"].as_f64().unwrap(), v["tolerance"].as_f64().unwrap()))
        .collect();
    for (r, v) in reports.iter().zip(out.results["scaling"].as_array().unwrap()) {
        assert_eq!(r.values.len(), 4);
        assert_eq!(r.slope, v["slope"].as_f64());
    }
    let scaling = String::from_utf8(out.table("scaling").unwrap().to_vec()).unwrap();
    assert_eq!(scaling.lines().count(), 1 + 4 * reports.len());
}

#[test]
fn incompatible_mesh_needs_force() {
    let c = cfg(json!({"laminate": {"frame": "identity"}}));
    let err = harness::run(Scenario::LaminateSweep, &c, &in_memory()).unwrap_err();
    assert_eq!(harness::exit_code_for(&err), exit::INCOMPATIBLE_MESH);
    assert!(err.to_string().contains("offending"));
    let forced = RunOptions { force: true, ..in_memory() };
    let out = harness::run(Scenario::LaminateSweep, &c, &forced).unwrap();
    let gate = out.gate("mesh-incompatibility").unwrap();
    assert!(!gate.pass);
    assert_eq!(out.exit_code(), exit::GATE_FAILED);
}

#[test]
fn energy_bound_exit_code() {
    let c = cfg(json!({"lattice_params": {"energy_constant": 1.0}}));
    let err = harness::run(Scenario::AntiferroSweep, &c, &in_memory()).unwrap_err();
    assert_eq!(harness::exit_code_for(&err), exit::ENERGY_BOUND);
    let c = cfg(json!({"lattice": "antiferro-raw", "lattice_params": {"energy_constant": 0.5}}));
    let err = harness::run(Scenario::LatticeSweep, &c, &in_memory()).unwrap_err();
    assert_eq!(harness::exit_code_for(&err), exit::ENERGY_BOUND);
    let ok = cfg(json!({"lattice_params": {"energy_constant": 6.0}}));
    assert!(harness::run(Scenario::AntiferroSweep, &ok, &in_memory()).unwrap().passed());
}

#[test]
fn antiferro_four_components() {
    let out = harness::run(Scenario::AntiferroSweep, &ExperimentConfig::default_for(Scenario::AntiferroSweep), &in_memory())
        .unwrap();
    assert!(out.passed());
    assert_eq!(out.results["sweep"]["component_counts"], json!([4, 4, 4]));
    let remapped = cfg(json!({"lattice_params": {"variant": "remapped", "interfaces": 2}}));
    let out = harness::run(Scenario::AntiferroSweep, &remapped, &in_memory()).unwrap();
    assert!(out.passed());
    assert_eq!(out.results["h2"]["constant"], 2.0);
}

#[test]
fn lattice_sweep_from_csv_deformations() {
    use wellspin::lattice::k_interface_chain;
    use wellspin::lattice::AntiferroVariant;
    let dir = tempfile::tempdir().unwrap();
    let mut refs = Vec::new();
    for m in [32usize, 64, 128] {
        let x = k_interface_chain(AntiferroVariant::Raw, m, 2).unwrap();
        let name = format!("chain{m}.csv");
        let mut buf = Vec::new();
        x.write_csv(&mut buf).unwrap();
        fs::write(dir.path().join(&name), buf).unwrap();
        refs.push(json!({"m": m, "path": name}));
    }
    let c = cfg(json!({"lattice": "antiferro-raw", "lattice_params": {"deformations": refs}}));
    let opts = RunOptions { base_dir: dir.path().to_path_buf(), write: false, ..RunOptions::default() };
    let out = harness::run(Scenario::LatticeSweep, &c, &opts).unwrap();
    assert!(out.passed(), "{}", harness::render_digest(&out));
    assert_eq!(out.results["sweep"]["component_counts"], json!([3, 3, 3]));
    let stripes = harness::run(Scenario::LatticeSweep, &ExperimentConfig::default_for(Scenario::LatticeSweep), &in_memory())
        .unwrap();
    assert!(stripes.passed());
    assert!(stripes.table("labels").is_some());
}

#[test]
fn scenario_mismatch_is_config_error() {
    let c = cfg(json!({"scenario": "antiferro-sweep"}));
    assert!(matches!(harness::run(Scenario::LaminateSweep, &c, &in_memory()), Err(Error::Config(_))));
}

#[test]
fn validate_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, v: serde_json::Value| {
        let p = dir.path().join(name);
        fs::write(&p, v.to_string()).unwrap();
        p
    };
    assert!(validate_config(&write("ok.json", json!({"scenario": "laminate-sweep", "seed": 3})), None).is_empty());
    let d = validate_config(&write("short.json", json!({"scenario": "antiferro-sweep", "m_list": [64, 256]})), None);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].field, "m_list");
    let d = validate_config(&write("neg.json", json!({"delta0": -0.2})), None);
    assert_eq!(d[0].field, "delta0");
    let d = validate_config(&write("missing.json", json!({"lattice": "sys.json"})), Some(Scenario::LatticeSweep));
    assert_eq!(d[0].field, "lattice");
    write("sys.json", json!({}));
    assert!(validate_config(&dir.path().join("missing.json"), Some(Scenario::LatticeSweep)).is_empty());
    let d = validate_config(&write("typo.json", json!({"laminate": {"perid": 1.0}})), None);
    assert!(d[0].field.starts_with("laminate"));
    let bad = write("bad.json", json!(null));
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(validate_config(&bad, None)[0].field, "<file>");
}

#[test]
fn example_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            let d = validate_config(&p, None);
            assert!(d.is_empty(), "{}: {d:?}", p.display());
            seen += 1;
        }
    }
    assert!(seen >= 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn m_list_order_is_enforced(list in prop::collection::vec(2usize..200, 0..6)) {
        let v = json!({"scenario": "laminate-sweep", "m_list": list});
        let d = validate_config_value(&v, None, Path::new("."));
        let increasing = list.windows(2).all(|w| w[1] > w[0]);
        let long_enough = list.is_empty() || list.len() >= 3;
        prop_assert_eq!(d.is_empty(), increasing && long_enough);
        prop_assert!(d.iter().all(|x| x.field == "m_list"));
    }

    #[test]
    fn scaling_pass_matches_tolerance(
        slope in -2.0f64..2.0,
        expected in -2.0f64..2.0,
        tol in 0.01f64..1.0,
        c in 0.1f64..10.0,
    ) {
        let m = [8usize, 16, 32, 64];
        let values: Vec<f64> = m.iter().map(|&x| c * (x as f64).powf(slope)).collect();
        let r = ScalingReport::new("q", &m, &values, expected, tol);
        let fitted = r.slope.unwrap();
        prop_assert!((fitted - slope).abs() < 1e-9);
        prop_assert_eq!(r.pass, (fitted - expected).abs() <= tol);
        prop_assert_eq!(r.values, values);
    }

    #[test]
    fn delta0_range(delta0 in -1.0f64..2.0) {
        let d = validate_config_value(&json!({"delta0": delta0}), None, Path::new("."));
        prop_assert_eq!(d.is_empty(), delta0 > 0.0 && delta0 < 1.0);
    }
}
