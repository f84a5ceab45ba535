use pdmp_experiments::config::{ExperimentConfig, KineticsSpec, LevelConfig, StudyKind};
use pdmp_experiments::run_study;

fn small(kind: &str, kinetics: &str, occupation: &str, replicates: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
schema_version = 1

[model]
nodes = 16
ladder = [
    {{ compartments = 2, channels = 5 }},
    {{ compartments = 4, channels = 20 }},
    {{ compartments = 8, channels = 80 }},
]
kinetics = {kinetics}
initial = {{ occupation = {occupation} }}

[study]
kind = "{kind}"
t_end = 0.5
replicates = {replicates}
basis = {{ modes = 2 }}
cadence = 0.05

[execution]
seed = 3
"#
    ))
    .unwrap()
}

#[test]
fn unknown_keys_and_bad_versions_are_rejected() {
    let good = small("lln", r#"{ type = "two-state" }"#, "[1.0, 0.0]", 4).to_toml().unwrap();
    assert!(ExperimentConfig::from_toml(&good).is_ok());
    let extra = good.replace("[study]", "[study]\ncolour = \"red\"");
    assert!(ExperimentConfig::from_toml(&extra).is_err());
    let version = good.replace("schema_version = 1", "schema_version = 2");
    assert!(ExperimentConfig::from_toml(&version).unwrap_err().to_string().contains("schema version"));
    let mut cfg = ExperimentConfig::from_toml(&good).unwrap();
    cfg.study.z_threshold = 0.0;
    assert!(cfg.validate().is_err());
    cfg.study.z_threshold = 3.0;
    cfg.study.kind = StudyKind::Clt;
    cfg.study.replicates = 5;
    assert!(cfg.validate().is_err());
}

#[test]
fn config_hash_ignores_workers_and_output() {
    let a = small("lln", r#"{ type = "two-state" }"#, "[1.0, 0.0]", 4);
    let mut b = a.clone();
    b.execution.workers = 8;
    b.execution.out = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.execution.seed += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn lln_with_zero_kinetics_only_sees_solver_mismatch() {
    let cfg = small("lln", r#"{ type = "zero", states = 2 }"#, "[0.6, 0.4]", 3);
    let report = run_study(&cfg).unwrap();
    for level in 0..3 {
        let e = report.find(level, "l2_error").unwrap();
        assert!(e.estimate < 1e-4, "level {level}: {}", e.estimate);
        assert_eq!(e.stderr, Some(0.0));
    }
}

#[test]
fn lln_errors_decrease_and_estimates_are_stable() {
    let cfg = small("lln", r#"{ type = "two-state" }"#, "[1.0, 0.0]", 40);
    let report = run_study(&cfg).unwrap();
    assert!(report.verdicts.iter().any(|v| v.name == "l2_error_decreasing" && v.pass));
    let fig = &report.figures[0];
    assert!(fig.series.iter().all(|s| s.points.len() == 3));
    let mut doubled = cfg.clone();
    doubled.study.replicates = 80;
    let again = run_study(&doubled).unwrap();
    for level in 0..3 {
        let a = report.find(level, "l2_error").unwrap();
        let b = again.find(level, "l2_error").unwrap();
        // the first 40 paths are shared, so this is conservative
        let se = (a.stderr.unwrap().powi(2) + b.stderr.unwrap().powi(2)).sqrt();
        assert!((a.estimate - b.estimate).abs() <= 2.0 * se, "level {level}");
    }
}

#[test]
fn clt_frozen_benchmark_matches_the_analytic_integral() {
    let mut cfg = small("clt", r#"{ type = "frozen-two-state", q01 = 2.0, q10 = 1.0 }"#, "[0.4, 0.6]", 400);
    cfg.model.ladder = vec![LevelConfig { compartments: 4, channels: 10 }, LevelConfig { compartments: 8, channels: 40 }];
    cfg.study.t_end = 1.0;
    let report = run_study(&cfg).unwrap();
    let variance: Vec<_> = report.verdicts.iter().filter(|v| v.name.starts_with("variance:")).collect();
    assert_eq!(variance.len(), 4);
    assert!(report.passed(), "{:?}", report.verdicts.iter().filter(|v| !v.pass).collect::<Vec<_>>());
    let null = report.find(1, "null:const").unwrap();
    assert_eq!((null.estimate, null.verdict), (0.0, Some(true)));
    assert_eq!(report.find(1, "var_ref:const").unwrap().estimate, 0.0);
}

#[test]
fn ito_study_on_the_benchmark() {
    let mut cfg = small("ito", r#"{ type = "two-state" }"#, "[1.0, 0.0]", 1000);
    cfg.study.level = Some(0);
    let report = run_study(&cfg).unwrap();
    assert!(report.passed(), "{:?}", report.verdicts.iter().filter(|v| !v.pass).collect::<Vec<_>>());
    let c = report.find(0, "mean_martingale:const").unwrap();
    assert_eq!(c.estimate, 0.0);
}

#[test]
fn diagnostics_trend_down_the_ladder() {
    let cfg = small("diagnostics", r#"{ type = "two-state" }"#, "[1.0, 0.0]", 10);
    let report = run_study(&cfg).unwrap();
    assert!(report.passed(), "{:?}", report.verdicts);
    assert!(report.find(2, "trace_qv").is_some());
    assert_eq!(report.figures[0].series[0].points.len(), 3);
}

#[test]
fn langevin_compare_zero_kinetics_is_deterministic() {
    let cfg = small("langevin-compare", r#"{ type = "zero", states = 2 }"#, "[0.6, 0.4]", 20);
    let report = run_study(&cfg).unwrap();
    for r in report.rows.iter().filter(|r| r.metric.starts_with("pdmp_var:") || r.metric.starts_with("langevin_var:")) {
        assert!(r.estimate.abs() < 1e-20, "{}: {}", r.metric, r.estimate);
    }
    for r in report.rows.iter().filter(|r| r.metric.starts_with("mean_diff:")) {
        assert!(r.estimate.abs() < 1e-5, "{}: {}", r.metric, r.estimate);
    }
}

#[test]
fn langevin_compare_means_agree_on_the_benchmark() {
    let mut cfg = small("langevin-compare", r#"{ type = "two-state" }"#, "[1.0, 0.0]", 300);
    cfg.study.level = Some(1);
    let report = run_study(&cfg).unwrap();
    assert!(report.passed(), "{:?}", report.verdicts.iter().filter(|v| !v.pass).collect::<Vec<_>>());
    assert!(report.find(1, "langevin_p_excursion_fraction").is_some());
}

#[test]
fn explicit_kinetics_round_trip() {
    let mut cfg = small("lln", r#"{ type = "two-state" }"#, "[1.0, 0.0]", 4);
    cfg.model.kinetics = KineticsSpec::Explicit {
        conductance: vec![0.0, 1.0],
        reversal: vec![0.0, 1.0],
        transitions: vec![
            pdmp_core::Transition { from: 0, to: 1, rate: pdmp_core::RateFunction::Constant { value: 1.0 } },
            pdmp_core::Transition { from: 1, to: 0, rate: pdmp_core::RateFunction::Constant { value: 2.0 } },
        ],
    };
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
}
