//! Ladder studies: law of large numbers, central limit covariance, Itô
//! isometry, condition diagnostics and the PDMP/Langevin comparison.

use anyhow::{ensure, Context, Result};
use pdmp_core::engine::{simulate_observed, HybridState, Model, PathObserver, RunSettings};
use pdmp_core::langevin::{solve_langevin, NoiseScale};
use pdmp_core::martingale::{
    condition_diagnostics, integrated_limit_g, jump_bound, ConditionObserver, IsometryResidual, LevelStatistics,
    MartingaleTracker, TestFunction,
};
use pdmp_core::stats::{covariance, MeanAccumulator, Moments, ZCheck};
use pdmp_core::{run_replicates, solve_limit, Error as CoreError, LimitState, RateTable, ReplicatePlan, Schedule};

use crate::config::{ExperimentConfig, Setup, StudyKind};
use crate::report::{Figure, Provenance, Series, StudyReport};

/// Streams of different levels and study parts never overlap.
fn stream_offset(level: usize, part: u64) -> u64 {
    (part << 48) | ((level as u64) << 32)
}

fn plan(cfg: &ExperimentConfig, level: usize, part: u64) -> ReplicatePlan {
    ReplicatePlan::new(cfg.study.replicates, cfg.execution.seed, cfg.execution.workers)
        .with_offset(stream_offset(level, part))
}

fn settings(cfg: &ExperimentConfig) -> RunSettings {
    RunSettings {
        t_end: cfg.study.t_end,
        method: cfg.study.method,
        cadence: Some(cfg.study.cadence),
    }
}

fn schedule(cfg: &ExperimentConfig) -> Schedule {
    Schedule {
        t_end: cfg.study.t_end,
        dt: cfg.study.dt,
        cadence: Some(cfg.study.cadence),
    }
}

fn new_report(cfg: &ExperimentConfig, kind: StudyKind) -> StudyReport {
    StudyReport::new(
        kind,
        Provenance {
            config_hash: cfg.hash(),
            seed: cfg.execution.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )
}

/// Runs the study named in the configuration.
pub fn run_study(cfg: &ExperimentConfig) -> Result<StudyReport> {
    cfg.validate()?;
    match cfg.study.kind {
        StudyKind::Lln => run_lln_study(cfg),
        StudyKind::Clt => run_clt_study(cfg),
        StudyKind::Ito => run_ito_study(cfg),
        StudyKind::Diagnostics => run_diagnostics_study(cfg),
        StudyKind::LangevinCompare => run_langevin_compare(cfg),
    }
}

/// Deterministic limit from the configured initial data, on the study cadence.
pub fn limit_trajectory(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<LimitState>> {
    solve_limit(&setup.kinetics, &setup.operator, &setup.limit_initial(), schedule(cfg)).context("deterministic limit failed")
}

/// Distances between a hybrid path and the limit at the snapshot times.
struct ErrorObserver<'a> {
    model: &'a Model,
    limit: &'a [LimitState],
    cadence: f64,
    /// `(t, ‖U − u‖, [‖z_i − p_i‖])`
    samples: Vec<(f64, f64, Vec<f64>)>,
}

impl<'a> ErrorObserver<'a> {
    fn record(&mut self, state: &HybridState, reference: &LimitState) {
        let grid = self.model.partition.grid();
        let du: Vec<f64> = state.membrane.u.iter().zip(&reference.u).map(|(a, b)| a - b).collect();
        let z = state.z.all_on_grid(&self.model.partition);
        let dz = z
            .iter()
            .zip(&reference.p)
            .map(|(zi, pi)| {
                let d: Vec<f64> = zi.iter().zip(pi).map(|(a, b)| a - b).collect();
                grid.inner(&d, &d).sqrt()
            })
            .collect();
        self.samples.push((state.membrane.t, grid.inner(&du, &du).sqrt(), dz));
    }
}

impl PathObserver for ErrorObserver<'_> {
    fn on_snapshot(&mut self, state: &HybridState, _rates: &RateTable) -> pdmp_core::Result<()> {
        let t = state.membrane.t;
        let k = (t / self.cadence).round() as usize;
        let reference = self
            .limit
            .get(k)
            .filter(|s| s.t == t)
            .ok_or_else(|| CoreError::Analysis(format!("no limit state at snapshot time {t}")))?;
        self.record(state, reference);
        Ok(())
    }
}

/// Per-path LLN errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathErrors {
    /// `(∫ ‖U − u‖² + Σ_i ‖z_i − p_i‖² dt)^{1/2}`
    pub product: f64,
    /// `‖U − u‖_{L²(0,T;L²)} + Σ_i ‖z_i − p_i‖_{L²(0,T;L²)}`
    pub sum: f64,
    /// `sup_t ‖U − u‖ + Σ_i sup_t ‖z_i − p_i‖`
    pub sup: f64,
    /// `‖U − u‖_{L²(0,T;L²)}`
    pub membrane: f64,
}

fn path_errors(samples: &[(f64, f64, Vec<f64>)]) -> PathErrors {
    let m = samples[0].2.len();
    let mut sq_u = 0.0;
    let mut sq_z = vec![0.0; m];
    for w in samples.windows(2) {
        let dt = w[1].0 - w[0].0;
        sq_u += 0.5 * dt * (w[0].1 * w[0].1 + w[1].1 * w[1].1);
        for i in 0..m {
            sq_z[i] += 0.5 * dt * (w[0].2[i] * w[0].2[i] + w[1].2[i] * w[1].2[i]);
        }
    }
    let sup_u = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    let sup_z: f64 = (0..m).map(|i| samples.iter().map(|s| s.2[i]).fold(0.0, f64::max)).sum();
    PathErrors {
        product: (sq_u + sq_z.iter().sum::<f64>()).sqrt(),
        sum: sq_u.sqrt() + sq_z.iter().map(|v| v.sqrt()).sum::<f64>(),
        sup: sup_u + sup_z,
        membrane: sq_u.sqrt(),
    }
}

/// Errors of independent paths at one ladder level.
pub fn lln_level_errors(cfg: &ExperimentConfig, setup: &Setup, limit: &[LimitState], level: usize) -> Result<Vec<PathErrors>> {
    let model = setup.model(level)?;
    let initial = setup.hybrid_initial(level)?;
    let run = settings(cfg);
    let errors = run_replicates(&plan(cfg, level, 0), |_, rng| {
        let mut obs = ErrorObserver {
            model: &model,
            limit,
            cadence: cfg.study.cadence,
            samples: Vec::new(),
        };
        let (terminal, _) = simulate_observed(&model, initial.clone(), run, rng, &mut obs)?;
        let last = limit.last().expect("limit trajectory is never empty");
        if obs.samples.last().map_or(true, |s| s.0 < terminal.membrane.t) {
            obs.record(&terminal, last);
        }
        Ok(path_errors(&obs.samples))
    })?;
    Ok(errors)
}

pub fn run_lln_study(cfg: &ExperimentConfig) -> Result<StudyReport> {
    let setup = Setup::new(cfg)?;
    let limit = limit_trajectory(cfg, &setup)?;
    let mut report = new_report(cfg, StudyKind::Lln);
    let mut means = Vec::new();
    let mut series: Vec<Series> = ["product", "sum", "sup"]
        .iter()
        .map(|l| Series { label: l.to_string(), points: Vec::new() })
        .collect();
    for level in 0..setup.ladder.len() {
        let errs = lln_level_errors(cfg, &setup, &limit, level)?;
        let n = errs.len();
        let acc = |f: fn(&PathErrors) -> f64| errs.iter().map(f).collect::<MeanAccumulator>();
        let product = acc(|e| e.product);
        let sum = acc(|e| e.sum);
        let sup = acc(|e| e.sup);
        let membrane = acc(|e| e.membrane);
        report.row(level, "l2_error", product.mean(), Some(product.stderr()), n, None);
        report.row(level, "l2_error_sum", sum.mean(), Some(sum.stderr()), n, None);
        report.row(level, "sup_error", sup.mean(), Some(sup.stderr()), n, None);
        report.row(level, "membrane_l2_error", membrane.mean(), Some(membrane.stderr()), n, None);
        report.row(level, "alpha", setup.ladder[level].stats().alpha(), None, 1, None);
        for (s, a) in series.iter_mut().zip([&product, &sum, &sup]) {
            s.points.push((level as f64, a.mean()));
        }
        means.push(product.mean());
    }
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    report.verdict(
        "l2_error_decreasing",
        decreasing,
        format!("mean L² errors across levels: {means:?}"),
    );
    let last = *means.last().expect("non-empty ladder");
    let tol = cfg.study.lln_tolerance;
    report.verdict("l2_error_final_below_tolerance", last < tol, format!("{last} vs tolerance {tol}"));
    report.notes.push(
        "l2_error is the product-space norm of (U − u, z − p) in L²(0,T;L²); l2_error_sum adds the component norms".into(),
    );
    report.figures.push(Figure {
        name: "lln_error".into(),
        title: "LLN error by level".into(),
        x_label: "level".into(),
        y_label: "mean error".into(),
        series,
    });
    Ok(report)
}

/// `√α ⟨Φ_f, M(T)⟩` and the observed jump statistics for every path.
fn scaled_martingales(cfg: &ExperimentConfig, setup: &Setup, level: usize, part: u64) -> Result<Vec<Vec<f64>>> {
    let model = setup.model(level)?;
    let initial = setup.hybrid_initial(level)?;
    let run = RunSettings { cadence: None, ..settings(cfg) };
    let root = setup.ladder[level].stats().alpha().sqrt();
    let out = run_replicates(&plan(cfg, level, part), |_, rng| {
        let mut tracker = MartingaleTracker::new(&model, &setup.basis)?;
        simulate_observed(&model, initial.clone(), run, rng, &mut tracker)?;
        Ok(tracker.totals().iter().map(|t| root * t.martingale()).collect())
    })?;
    Ok(out)
}

fn column(rows: &[Vec<f64>], f: usize) -> Vec<f64> {
    rows.iter().map(|r| r[f]).collect()
}

pub fn run_clt_study(cfg: &ExperimentConfig) -> Result<StudyReport> {
    let setup = Setup::new(cfg)?;
    let limit = limit_trajectory(cfg, &setup)?;
    let mut report = new_report(cfg, StudyKind::Clt);
    let basis = &setup.basis;
    let diagonal: Vec<(&TestFunction, &TestFunction)> = basis.iter().map(|f| (f, f)).collect();
    let reference = integrated_limit_g(&setup.grid, &setup.kinetics, &limit, &diagonal)?;
    let finest = cfg.level();
    let levels: Vec<usize> = match cfg.study.level {
        Some(l) => vec![l],
        None => (0..setup.ladder.len()).collect(),
    };
    let z = cfg.study.z_threshold;
    let mut ratio_series: Vec<Series> = basis
        .iter()
        .filter(|f| f.max_state_difference() > 0.0)
        .map(|f| Series { label: f.label.clone(), points: Vec::new() })
        .collect();
    for &level in &levels {
        let samples = scaled_martingales(cfg, &setup, level, 0)?;
        let n = samples.len();
        let judged = level == finest;
        let mut s_idx = 0;
        for (f, phi) in basis.iter().enumerate() {
            let xs = column(&samples, f);
            let m = Moments::of(&xs);
            let target = reference[f];
            report.row(level, format!("var:{}", phi.label), m.variance, Some(m.variance_stderr), n, None);
            report.row(level, format!("var_ref:{}", phi.label), target, None, 1, None);
            if phi.max_state_difference() == 0.0 {
                // null direction: both sides vanish identically
                let exact = m.variance == 0.0 && target == 0.0 && xs.iter().all(|x| *x == 0.0);
                report.row(level, format!("null:{}", phi.label), m.variance, None, n, Some(exact));
                if judged {
                    report.verdict(format!("null_direction:{}", phi.label), exact, format!("variance {} reference {target}", m.variance));
                }
                continue;
            }
            let check = ZCheck::new(m.variance, target, m.variance_stderr, z);
            report.row(level, format!("var_z:{}", phi.label), check.z, None, n, judged.then_some(check.pass));
            report.row(level, format!("var_ratio:{}", phi.label), m.variance / target, Some(m.variance_stderr / target), n, None);
            report.row(level, format!("skew_z:{}", phi.label), m.skewness_z(), None, n, None);
            report.row(level, format!("kurt_z:{}", phi.label), m.kurtosis_z(), None, n, None);
            ratio_series[s_idx].points.push((level as f64, m.variance / target));
            s_idx += 1;
            if judged {
                report.verdict(
                    format!("variance:{}", phi.label),
                    check.pass,
                    format!("{} ± {} vs {target} (z = {:.3})", m.variance, m.variance_stderr, check.z),
                );
            }
        }
        // off-diagonal covariances against the bilinear form (diagnostic)
        let pairs: Vec<(usize, usize)> = (0..basis.len())
            .flat_map(|a| (a + 1..basis.len()).map(move |b| (a, b)))
            .filter(|&(a, b)| basis[a].max_state_difference() > 0.0 && basis[b].max_state_difference() > 0.0)
            .collect();
        let refs = integrated_limit_g(
            &setup.grid,
            &setup.kinetics,
            &limit,
            &pairs.iter().map(|&(a, b)| (&basis[a], &basis[b])).collect::<Vec<_>>(),
        )?;
        for (&(a, b), r) in pairs.iter().zip(refs) {
            let (c, se) = covariance(&column(&samples, a), &column(&samples, b));
            let name = format!("{}|{}", basis[a].label, basis[b].label);
            report.row(level, format!("cov:{name}"), c, Some(se), n, None);
            report.row(level, format!("cov_ref:{name}"), r, None, 1, None);
        }
    }
    report.figures.push(Figure {
        name: "clt_variance_ratio".into(),
        title: "empirical / limit variance by level".into(),
        x_label: "level".into(),
        y_label: "variance ratio".into(),
        series: ratio_series,
    });
    Ok(report)
}

pub fn run_ito_study(cfg: &ExperimentConfig) -> Result<StudyReport> {
    let setup = Setup::new(cfg)?;
    let level = cfg.level();
    let model = setup.model(level)?;
    let initial = setup.hybrid_initial(level)?;
    let run = RunSettings { cadence: None, ..settings(cfg) };
    let mut report = new_report(cfg, StudyKind::Ito);
    let totals = run_replicates(&plan(cfg, level, 0), |_, rng| {
        let mut tracker = MartingaleTracker::new(&model, &setup.basis)?;
        simulate_observed(&model, initial.clone(), run, rng, &mut tracker)?;
        Ok(tracker.totals().to_vec())
    })?;
    let n = totals.len();
    let z = cfg.study.z_threshold;
    for (f, phi) in setup.basis.iter().enumerate() {
        let m: Vec<f64> = totals.iter().map(|t| t[f].martingale()).collect();
        let g: Vec<f64> = totals.iter().map(|t| t[f].quadratic_variation).collect();
        let iso = IsometryResidual::from_samples(&m, &g);
        report.row(level, format!("mean_sq_martingale:{}", phi.label), iso.lhs, Some(iso.lhs_stderr), n, None);
        report.row(level, format!("integrated_qv:{}", phi.label), iso.rhs, Some(iso.rhs_stderr), n, None);
        let pass = iso.residual.abs() <= z * iso.combined_stderr;
        report.row(level, format!("isometry_residual:{}", phi.label), iso.residual, Some(iso.combined_stderr), n, Some(pass));
        report.verdict(
            format!("isometry:{}", phi.label),
            pass,
            format!("{} vs {} (combined se {})", iso.lhs, iso.rhs, iso.combined_stderr),
        );
        let acc: MeanAccumulator = m.iter().copied().collect();
        let zero = ZCheck::new(acc.mean(), 0.0, acc.stderr(), z);
        report.row(level, format!("mean_martingale:{}", phi.label), acc.mean(), Some(acc.stderr()), n, Some(zero.pass));
        report.verdict(format!("zero_mean:{}", phi.label), zero.pass, format!("{} ± {}", acc.mean(), acc.stderr()));
    }
    Ok(report)
}

pub fn run_diagnostics_study(cfg: &ExperimentConfig) -> Result<StudyReport> {
    let setup = Setup::new(cfg)?;
    let mut report = new_report(cfg, StudyKind::Diagnostics);
    let run = settings(cfg);
    let mut stats = Vec::new();
    for level in 0..setup.ladder.len() {
        let model = setup.model(level)?;
        let initial = setup.hybrid_initial(level)?;
        let partition = &setup.ladder[level];
        let alpha = partition.stats().alpha();
        let bound = jump_bound(partition, &setup.basis);
        let per_path = run_replicates(&plan(cfg, level, 0), |_, rng| {
            let mut obs = (MartingaleTracker::new(&model, &setup.basis)?, ConditionObserver::new(&model));
            simulate_observed(&model, initial.clone(), run, rng, &mut obs)?;
            let (tracker, cond) = obs;
            let max_jump = tracker.totals().iter().map(|t| t.max_jump).fold(0.0, f64::max);
            Ok((tracker.trace_integral(), cond.drift_residual, alpha.sqrt() * max_jump))
        })?;
        let trace: MeanAccumulator = per_path.iter().map(|p| p.0).collect();
        let drift: MeanAccumulator = per_path.iter().map(|p| p.1).collect();
        let max_scaled_jump = per_path.iter().map(|p| p.2).fold(0.0, f64::max);
        let exceedances = per_path.iter().filter(|p| p.2 > bound * (1.0 + 1e-12)).count() as u64;
        stats.push(Some(LevelStatistics {
            level,
            alpha,
            delta_plus: partition.stats().delta_plus,
            trace: (trace.mean(), trace.stderr()),
            drift_residual: (drift.mean(), drift.stderr()),
            max_scaled_jump,
            jump_bound: bound,
            exceedances,
            replicates: per_path.len(),
        }));
    }
    let diag = condition_diagnostics(&stats);
    for r in &diag.rows {
        report.row(r.level, r.metric.clone(), r.estimate, r.stderr, r.n, r.verdict);
    }
    for (i, r) in diag.drift_residual_ratios.iter().enumerate() {
        report.row(i + 1, "drift_residual_ratio", *r, None, 1, None);
    }
    report.verdict("trace_decreasing", diag.trace_decreasing, "integrated trace of the quadratic variation across levels");
    report.verdict("drift_residual_decreasing", diag.drift_residual_decreasing, "generator drift against the limit field");
    report.verdict("jumps_within_bound", diag.jumps_within_bound, "rescaled jump sizes against the analytic bound");
    report.figures.push(Figure {
        name: "diagnostics".into(),
        title: "condition diagnostics by level".into(),
        x_label: "level".into(),
        y_label: "estimate".into(),
        series: vec![
            Series {
                label: "trace".into(),
                points: stats.iter().flatten().map(|s| (s.level as f64, s.trace.0)).collect(),
            },
            Series {
                label: "drift residual".into(),
                points: stats.iter().flatten().map(|s| (s.level as f64, s.drift_residual.0)).collect(),
            },
        ],
    });
    Ok(report)
}

/// Linear functionals compared between the two ensembles: `⟨Φ, occupation⟩`
/// for the basis, then `⟨sin(kπx/L), u⟩` for the sine modes.
fn functionals(setup: &Setup, modes: u32, u: &[f64], occupation: &[Vec<f64>]) -> Vec<f64> {
    let grid = &setup.grid;
    let mut out: Vec<f64> = setup
        .basis
        .iter()
        .map(|phi| phi.components.iter().zip(occupation).map(|(c, p)| grid.inner(c, p)).sum())
        .collect();
    for k in 1..=modes {
        let s = grid.sample(|x| (k as f64 * std::f64::consts::PI * x / grid.length()).sin());
        out.push(grid.inner(&s, u));
    }
    out
}

pub fn run_langevin_compare(cfg: &ExperimentConfig) -> Result<StudyReport> {
    let setup = Setup::new(cfg)?;
    let level = cfg.level();
    let model = setup.model(level)?;
    let initial = setup.hybrid_initial(level)?;
    let alpha = cfg.study.alpha.unwrap_or_else(|| setup.ladder[level].stats().alpha());
    ensure!(alpha > 0.0, "alpha must be positive");
    let scale = NoiseScale::from_alpha(alpha)?;
    let modes = cfg.study.basis.modes;
    let run = RunSettings { cadence: None, ..settings(cfg) };
    let pdmp = run_replicates(&plan(cfg, level, 0), |_, rng| {
        let (terminal, _) = simulate_observed(&model, initial.clone(), run, rng, &mut ())?;
        Ok(functionals(&setup, modes, &terminal.membrane.u, &terminal.z.all_on_grid(&model.partition)))
    })?;
    let sched = Schedule { cadence: None, ..schedule(cfg) };
    let start = setup.limit_initial();
    let langevin = run_replicates(&plan(cfg, level, 1), |_, rng| {
        let out = solve_langevin(&setup.kinetics, &setup.operator, &start, sched, scale, rng)?;
        let last = out.trajectory.last().expect("trajectory holds the end state");
        Ok((functionals(&setup, modes, &last.u, &last.p), out.stats))
    })?;
    let mut report = new_report(cfg, StudyKind::LangevinCompare);
    report.row(level, "alpha", alpha, None, 1, None);
    let names: Vec<String> = setup
        .basis
        .iter()
        .map(|f| format!("occupation:{}", f.label))
        .chain((1..=modes).map(|k| format!("membrane:sin{k}")))
        .collect();
    let z = cfg.study.z_threshold;
    let n = pdmp.len();
    let mut var_series = Series { label: "variance ratio".into(), points: Vec::new() };
    for (f, name) in names.iter().enumerate() {
        let a = Moments::of(&column(&pdmp, f));
        let b = Moments::of(&langevin.iter().map(|l| l.0[f]).collect::<Vec<_>>());
        let se = (a.stderr().powi(2) + b.stderr().powi(2)).sqrt();
        let check = ZCheck::new(a.mean - b.mean, 0.0, se, z);
        report.row(level, format!("pdmp_mean:{name}"), a.mean, Some(a.stderr()), n, None);
        report.row(level, format!("langevin_mean:{name}"), b.mean, Some(b.stderr()), n, None);
        report.row(level, format!("mean_diff:{name}"), a.mean - b.mean, Some(se), n, Some(check.pass));
        report.verdict(format!("mean_agreement:{name}"), check.pass, format!("difference {} (combined se {se})", a.mean - b.mean));
        report.row(level, format!("pdmp_var:{name}"), a.variance, Some(a.variance_stderr), n, None);
        report.row(level, format!("langevin_var:{name}"), b.variance, Some(b.variance_stderr), n, None);
        if b.variance > 0.0 {
            report.row(level, format!("var_ratio:{name}"), a.variance / b.variance, None, n, None);
            var_series.points.push((f as f64, a.variance / b.variance));
        }
    }
    let steps: u64 = langevin.iter().map(|l| l.1.steps).sum();
    let excursions: u64 = langevin.iter().map(|l| l.1.p_excursion_steps).sum();
    let clamps: u64 = langevin.iter().map(|l| l.1.clamp_steps).sum();
    let worst = langevin.iter().map(|l| l.1.p_max_excursion).fold(0.0, f64::max);
    let u_worst = langevin.iter().map(|l| l.1.u_max_excursion).fold(0.0, f64::max);
    report.row(level, "langevin_p_excursion_fraction", excursions as f64 / steps.max(1) as f64, None, n, None);
    report.row(level, "langevin_p_max_excursion", worst, None, n, None);
    report.row(level, "langevin_u_max_excursion", u_worst, None, n, None);
    report.row(level, "langevin_clamp_fraction", clamps as f64 / steps.max(1) as f64, None, n, None);
    if clamps > 0 {
        report
            .notes
            .push(format!("noise covariance used clamped occupations on {clamps} of {steps} steps"));
    }
    report.figures.push(Figure {
        name: "langevin_variance_ratio".into(),
        title: "PDMP / Langevin variance per functional".into(),
        x_label: "functional".into(),
        y_label: "variance ratio".into(),
        series: vec![var_series],
    });
    Ok(report)
}
