use collapse_heat::geometry::ScheduleStep;
use collapse_heat::harness::*;
use collapse_heat::Error;
use std::sync::OnceLock;

mod common;
use common::small_json;

fn collapsing() -> ExperimentConfig {
    ExperimentConfig::from_json_str(&small_json(0.75, 0.3, [0.02, 0.01, 0.005, 0.0025])).unwrap()
}

fn collapsing_report() -> &'static BookkeepingReport {
    static CELL: OnceLock<BookkeepingReport> = OnceLock::new();
    CELL.get_or_init(|| run_iterated_limit(&collapsing(), 1).unwrap())
}

fn config_path(r: Result<ExperimentConfig, Error>) -> String {
    match r {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn bundled_configs_parse() {
    for s in [include_str!("../configs/default.json"), include_str!("../configs/negative_control.json")] {
        let c = ExperimentConfig::from_json_str(s).unwrap();
        assert!(c.rhos.len() >= 4);
        assert_eq!(c.renorm_rho_sequence().len(), 6);
    }
}

#[test]
fn config_errors_name_the_field() {
    let good = small_json(0.75, 0.3, [0.02, 0.01, 0.005, 0.0025]);
    assert_eq!(config_path(ExperimentConfig::from_json_str(&good.replace("\"n_f\": 6", "\"n_f\": 4"))), "fiber.n_f");
    assert_eq!(config_path(ExperimentConfig::from_json_str(&good.replace("[0.1, 0.2]", "[0.1, -0.2]"))), "taus");
    let bad_rhos = good.replace("\"rhos\": [0.5, 0.25, 0.125, 0.0625]", "\"rhos\": [0.5, 0.25, 0.25, 0.0625]");
    assert_eq!(config_path(ExperimentConfig::from_json_str(&bad_rhos)), "rhos");
    let tiny_rho = good.replace("\"rhos\": [0.5, 0.25, 0.125, 0.0625]", "\"rhos\": [0.5, 0.25, 0.125, 0.03]");
    assert_eq!(config_path(ExperimentConfig::from_json_str(&tiny_rho)), "rhos");
    assert_eq!(config_path(ExperimentConfig::from_json_str(&good.replace("\"alpha\": 0.75", "\"alpha\": -1"))), "cone");
    assert_eq!(config_path(ExperimentConfig::from_json_str(&good.replace("\"s\": 0.3", "\"s\": 0.5"))), "schedule");
    // unknown keys and syntax errors report a location
    let p = config_path(ExperimentConfig::from_json_str(&good.replace("\"chi_radius\"", "\"chi_radus\"")));
    assert!(p.starts_with("line "), "{p}");
    assert!(config_path(ExperimentConfig::from_json_str("{ nope")).starts_with("line "));
}

#[test]
fn run_needs_four_steps() {
    let mut c = collapsing();
    c.schedule = ScheduleSpec::Custom { steps: vec![ScheduleStep { s: 0.4, epsilon: 0.01 }, ScheduleStep { s: 0.2, epsilon: 0.005 }] };
    assert!(matches!(run_iterated_limit(&c, 1), Err(Error::Config { .. })));
}

#[test]
fn unperturbed_plane_passes() {
    let c = ExperimentConfig::from_json_str(&small_json(1.0, 0.0, [0.0; 4])).unwrap();
    let rep = run_iterated_limit(&c, 1).unwrap();
    assert!(rep.verdict.pass, "{:?}", rep.verdict.reasons);
    assert!(rep.records.iter().all(|r| r.interior.abs() < 1e-8), "interior not zero");
    assert_eq!(rep.schema, "collapse-heat/report/v1");
}

#[test]
fn collapsing_run_is_consistent() {
    let rep = collapsing_report();
    assert_eq!(rep.records.len(), 4 * 4 * 2);
    assert!(rep.mixed_ceiling_violations.is_empty());
    assert!(rep.max_bilinear_defect < 1e-10);
    for r in &rep.records {
        assert!(r.estimate > 0.0);
    }
    assert!(rep.bound_fraction >= BOUND_FRACTION, "{}", rep.bound_fraction);
    assert_eq!(rep.limsups.len(), 4);
}

#[test]
fn runs_are_deterministic() {
    let a = collapsing_report().to_json().unwrap();
    let b = run_iterated_limit(&collapsing(), 1).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let files = collapsing_report().write(dir.path()).unwrap();
    for name in ["report.json", "channels/interior.csv", "channels/mixed.csv", "channels/edge.csv", "plots/discrepancy.gp"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(files.len() >= 6);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(v["schema"], "collapse-heat/report/v1");
    let csv = collapsing_report().channel_csv("interior");
    assert_eq!(csv.lines().count(), 1 + 32);
}

#[test]
fn halving_epsilon_halves_the_interior() {
    let c = collapsing();
    let base = build_base_side(&c, &c.base_grid).unwrap();
    let (_, a) = evaluate_step(&c, &base, 0, &ScheduleStep { s: 0.2, epsilon: 0.02 }).unwrap();
    let (_, b) = evaluate_step(&c, &base, 0, &ScheduleStep { s: 0.2, epsilon: 0.01 }).unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (x, y) in a.iter().zip(&b) {
        if x.rho >= 0.25 {
            let q = y.interior.abs() / x.interior.abs();
            lo = lo.min(q);
            hi = hi.max(q);
        }
    }
    assert!(lo >= 0.3 && hi <= 0.8, "ratios in [{lo}, {hi}]");
}
