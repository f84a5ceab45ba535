//! Experiment configuration (TOML) and the model objects built from it.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use pdmp_core::engine::{HybridState, JumpMethod, Model};
use pdmp_core::kinetics::benchmarks;
use pdmp_core::martingale::TestFunction;
use pdmp_core::{
    ChannelConfiguration, ChannelKinetics, DtPolicy, EllipticOperator, LevelSpec, LimitState, MembraneState, Partition,
    RateFunction, SpatialGrid, Transition,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    pub study: StudySection,
    pub execution: ExecutionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "one")]
    pub length: f64,
    pub nodes: usize,
    #[serde(default = "one")]
    pub diffusion: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "one")]
    pub safety: f64,
    pub kinetics: KineticsSpec,
    pub ladder: Vec<LevelConfig>,
    pub initial: InitialSpec,
}

fn one() -> f64 {
    1.0
}

fn default_dt_max() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KineticsSpec {
    /// `q₀₁ = 1 + 0.5 tanh u`, `q₁₀ = 1`, `g = (1, 1)`, `E = (0, 1)`.
    TwoState,
    HhFourState,
    /// Constant rates and zero conductance: the membrane decouples.
    FrozenTwoState { q01: f64, q10: f64 },
    /// All rates zero.
    Zero { states: usize },
    Explicit {
        /// Constant conductance per state.
        conductance: Vec<f64>,
        reversal: Vec<f64>,
        transitions: Vec<Transition>,
    },
}

impl KineticsSpec {
    pub fn build(&self, grid: &SpatialGrid) -> Result<ChannelKinetics> {
        Ok(match self {
            KineticsSpec::TwoState => benchmarks::two_state(grid),
            KineticsSpec::HhFourState => benchmarks::hh_four_state(grid),
            KineticsSpec::FrozenTwoState { q01, q10 } => {
                ensure!(*q01 >= 0.0 && *q10 >= 0.0, "frozen rates must be non-negative");
                benchmarks::frozen_two_state(grid, *q01, *q10)
            }
            KineticsSpec::Zero { states } => {
                let m = *states;
                let transitions = (0..m)
                    .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
                    .map(|(from, to)| Transition { from, to, rate: RateFunction::Constant { value: 0.0 } })
                    .collect();
                let mut reversal = vec![0.0; m];
                reversal[m.saturating_sub(1)] = 1.0;
                ChannelKinetics::new(m, transitions, vec![vec![1.0; grid.len()]; m], reversal)?
            }
            KineticsSpec::Explicit { conductance, reversal, transitions } => ChannelKinetics::new(
                conductance.len(),
                transitions.clone(),
                conductance.iter().map(|g| vec![*g; grid.len()]).collect(),
                reversal.clone(),
            )?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub compartments: usize,
    pub channels: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    /// `u₀(x) = amplitude · sin(πx/L)`.
    #[serde(default)]
    pub u_amplitude: f64,
    /// Initial occupation fractions, one per state.
    pub occupation: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Lln,
    Clt,
    Ito,
    Diagnostics,
    LangevinCompare,
}

impl StudyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StudyKind::Lln => "lln",
            StudyKind::Clt => "clt",
            StudyKind::Ito => "ito",
            StudyKind::Diagnostics => "diagnostics",
            StudyKind::LangevinCompare => "langevin-compare",
        }
    }

    fn min_replicates(&self) -> usize {
        match self {
            StudyKind::Lln | StudyKind::Diagnostics => 2,
            StudyKind::Clt | StudyKind::Ito | StudyKind::LangevinCompare => 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    /// Sine modes `1..=modes` in every state.
    pub modes: u32,
    /// Append the state-independent constant function.
    #[serde(default = "yes")]
    pub constant: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub kind: StudyKind,
    pub t_end: f64,
    pub replicates: usize,
    pub basis: BasisSpec,
    /// Snapshot cadence for error metrics and limit trajectories.
    pub cadence: f64,
    /// Step of the deterministic and Langevin solvers (further capped by them).
    #[serde(default = "default_continuum_dt")]
    pub dt: f64,
    #[serde(default)]
    pub method: JumpMethod,
    /// Final-level bound on the mean LLN error.
    #[serde(default = "default_lln_tolerance")]
    pub lln_tolerance: f64,
    /// Standard errors allowed in statistical verdicts.
    #[serde(default = "default_z")]
    pub z_threshold: f64,
    /// Ladder level for single-level studies; the finest level by default.
    #[serde(default)]
    pub level: Option<usize>,
    /// Langevin noise parameter; taken from the level's partition when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn default_continuum_dt() -> f64 {
    1e-3
}

fn default_lln_tolerance() -> f64 {
    0.05
}

fn default_z() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionSection {
    pub seed: u64,
    #[serde(default = "one_worker")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn one_worker() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        let m = &self.model;
        ensure!(m.length > 0.0 && m.length.is_finite(), "length must be positive");
        ensure!(m.nodes >= 2, "need at least 2 grid nodes");
        ensure!(m.diffusion > 0.0, "diffusion must be positive");
        ensure!(m.dt_max > 0.0 && m.safety > 0.0, "dt_max and safety must be positive");
        ensure!(!m.ladder.is_empty(), "empty partition ladder");
        let states = self.states()?;
        ensure!(
            m.initial.occupation.len() == states,
            "initial occupation has {} entries for {states} states",
            m.initial.occupation.len()
        );
        ensure!(m.initial.occupation.iter().all(|p| *p >= 0.0), "negative initial occupation");
        let mass: f64 = m.initial.occupation.iter().sum();
        ensure!((mass - 1.0).abs() <= 1e-12, "initial occupation sums to {mass}");
        let s = &self.study;
        ensure!(s.t_end > 0.0 && s.t_end.is_finite(), "t_end must be positive");
        ensure!(s.cadence > 0.0 && s.dt > 0.0, "cadence and dt must be positive");
        ensure!(s.lln_tolerance > 0.0 && s.z_threshold > 0.0, "tolerances must be positive");
        ensure!(
            s.replicates >= s.kind.min_replicates(),
            "{} needs at least {} replicates, got {}",
            s.kind.name(),
            s.kind.min_replicates(),
            s.replicates
        );
        if let Some(l) = s.level {
            ensure!(l < m.ladder.len(), "level {l} outside a ladder of {}", m.ladder.len());
        }
        if let Some(a) = s.alpha {
            ensure!(a > 0.0, "alpha must be positive");
        }
        ensure!(self.execution.workers >= 1, "need at least one worker");
        Ok(())
    }

    fn states(&self) -> Result<usize> {
        Ok(match &self.model.kinetics {
            KineticsSpec::TwoState | KineticsSpec::FrozenTwoState { .. } => 2,
            KineticsSpec::HhFourState => 4,
            KineticsSpec::Zero { states } => *states,
            KineticsSpec::Explicit { conductance, .. } => conductance.len(),
        })
    }

    /// SHA-256 of the canonical serialisation, excluding the worker count and
    /// output directory (which never change results).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.execution.workers = 1;
        canonical.execution.out = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// The study level for single-level studies.
    pub fn level(&self) -> usize {
        self.study.level.unwrap_or(self.model.ladder.len() - 1)
    }
}

/// Everything a study needs, built once from the configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub grid: SpatialGrid,
    pub kinetics: ChannelKinetics,
    pub operator: EllipticOperator,
    pub policy: DtPolicy,
    pub ladder: Vec<Partition>,
    pub basis: Vec<TestFunction>,
    pub u0: Vec<f64>,
    pub occupation: Vec<f64>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let m = &cfg.model;
        let grid = SpatialGrid::new(m.length, m.nodes)?;
        let kinetics = m.kinetics.build(&grid)?;
        let operator = EllipticOperator::constant(&grid, m.diffusion)?;
        let specs: Vec<LevelSpec> = m
            .ladder
            .iter()
            .map(|l| LevelSpec::Uniform { compartments: l.compartments, channels: l.channels })
            .collect();
        let ladder = pdmp_core::build_partition_ladder(&grid, &specs)?;
        let states = kinetics.states();
        let mut basis: Vec<TestFunction> = (0..states)
            .flat_map(|i| TestFunction::sine_modes(&grid, states, i, cfg.study.basis.modes))
            .collect();
        if cfg.study.basis.constant {
            basis.push(TestFunction::constant(&grid, states, 1.0));
        }
        let (lo, hi) = kinetics.voltage_bounds();
        let a = m.initial.u_amplitude;
        let u0 = grid.sample(|x| a * (std::f64::consts::PI * x / m.length).sin());
        if u0.iter().any(|v| *v < lo || *v > hi) {
            bail!("initial membrane potential leaves [{lo}, {hi}]");
        }
        Ok(Self {
            grid,
            kinetics,
            operator,
            policy: DtPolicy { dt_max: m.dt_max, safety: m.safety },
            ladder,
            basis,
            u0,
            occupation: m.initial.occupation.clone(),
        })
    }

    pub fn model(&self, level: usize) -> Result<Model> {
        Ok(Model::new(self.ladder[level].clone(), self.kinetics.clone(), self.operator.clone(), self.policy)?)
    }

    /// Initial hybrid state: per compartment, counts from the occupation
    /// fractions by largest remainder.
    pub fn hybrid_initial(&self, level: usize) -> Result<HybridState> {
        let partition = &self.ladder[level];
        let m = self.occupation.len();
        let counts = (0..partition.len())
            .map(|k| apportion(&self.occupation, partition.channels(k)))
            .collect();
        let config = ChannelConfiguration::new(partition, m, counts)?;
        Ok(HybridState::new(MembraneState { u: self.u0.clone(), t: 0.0 }, config, partition)?)
    }

    pub fn limit_initial(&self) -> LimitState {
        LimitState {
            u: self.u0.clone(),
            p: pdmp_core::limit::uniform_fields(&self.occupation, self.grid.len()),
            t: 0.0,
        }
    }
}

/// Splits `total` into integer parts proportional to `fractions` (largest
/// remainder, ties to the lower index).
pub fn apportion(fractions: &[f64], total: u32) -> Vec<u32> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut parts: Vec<u32> = exact.iter().map(|x| x.floor() as u32).collect();
    let assigned: u32 = parts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        parts[i] += 1;
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_preserves_totals() {
        assert_eq!(apportion(&[0.4, 0.6], 10), vec![4, 6]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(apportion(&[1.0, 0.0], 7), vec![7, 0]);
    }
}
