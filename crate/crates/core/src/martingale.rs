//! Martingales associated with the coordinate process, their compensators
//! and quadratic-variation forms, and the covariance form of the limit.
//!
//! Everything is accessed through pairings `⟨Φ, ·⟩ = Σ_i ∫ φ_i · dx` with
//! grid test functions.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::channels::{ChannelConfiguration, JumpEvent, RateTable};
use crate::engine::{HybridPath, HybridState, Model, PathObserver, Substep};
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kinetics::ChannelKinetics;
use crate::limit::{KineticsVectorField, LimitState};
use crate::partition::Partition;
use crate::stats::{Moments, ZCheck};

/// Tolerated nodewise `|Σ_i p_i − 1|` for covariance evaluation.
pub const LIMIT_MASS_TOLERANCE: f64 = 1e-8;

/// `Φ = (φ_1, …, φ_m)`, one grid function per channel state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub label: String,
    pub components: Vec<Vec<f64>>,
}

impl TestFunction {
    pub fn new(label: impl Into<String>, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Input("test function without components".into()));
        }
        let n = components[0].len();
        if components.iter().any(|c| c.len() != n) {
            return Err(Error::Input("test function components differ in length".into()));
        }
        if components.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("test function has non-finite values".into()));
        }
        Ok(Self {
            label: label.into(),
            components,
        })
    }

    /// `sin(kπx/L)` in state `state`, zero in the others.
    pub fn sine(grid: &SpatialGrid, states: usize, state: usize, mode: u32) -> Self {
        let l = grid.length();
        let mut components = vec![vec![0.0; grid.len()]; states];
        components[state] = grid.sample(|x| (mode as f64 * PI * x / l).sin());
        Self {
            label: format!("sin{mode}[{state}]"),
            components,
        }
    }

    /// The same constant in every state (a null direction of every form).
    pub fn constant(grid: &SpatialGrid, states: usize, value: f64) -> Self {
        Self {
            label: "const".into(),
            components: vec![vec![value; grid.len()]; states],
        }
    }

    /// Sine modes `1..=modes` in state `state`.
    pub fn sine_modes(grid: &SpatialGrid, states: usize, state: usize, modes: u32) -> Vec<Self> {
        (1..=modes).map(|k| Self::sine(grid, states, state, k)).collect()
    }

    /// Default basis: the first `modes` sine modes in every state, then the
    /// constant function.
    pub fn default_basis(grid: &SpatialGrid, states: usize, modes: u32) -> Vec<Self> {
        let mut out: Vec<Self> = (0..states)
            .flat_map(|i| Self::sine_modes(grid, states, i, modes))
            .collect();
        out.push(Self::constant(grid, states, 1.0));
        out
    }

    /// Orthonormal basis of grid functions (midpoint inner product) for each
    /// state: the discrete sine vectors `√(2/L) sin(kπx/L)`, `k < N`, and the
    /// alternating vector `√(1/L)(−1)^i`.
    pub fn orthonormal_basis(grid: &SpatialGrid, states: usize) -> Vec<Self> {
        let n = grid.len();
        let l = grid.length();
        let mut out = Vec::with_capacity(n * states);
        for i in 0..states {
            for k in 1..=n {
                let mut components = vec![vec![0.0; n]; states];
                components[i] = if k < n {
                    let c = (2.0 / l).sqrt();
                    grid.sample(|x| c * (k as f64 * PI * x / l).sin())
                } else {
                    let c = (1.0 / l).sqrt();
                    (0..n).map(|x| if x % 2 == 0 { c } else { -c }).collect()
                };
                out.push(Self {
                    label: format!("onb{k}[{i}]"),
                    components,
                });
            }
        }
        out
    }

    pub fn states(&self) -> usize {
        self.components.len()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            label: format!("{c}*{}", self.label),
            components: self
                .components
                .iter()
                .map(|v| v.iter().map(|x| c * x).collect())
                .collect(),
        }
    }

    /// `a[i][k] = ∫_{D_k} φ_i dx`.
    pub fn pairings(&self, partition: &Partition) -> Vec<Vec<f64>> {
        self.components
            .iter()
            .map(|phi| partition.indicator_pairings(phi))
            .collect()
    }

    /// `⟨Φ, p⟩ = Σ_i ∫ φ_i p_i dx`.
    pub fn pair_fields(&self, grid: &SpatialGrid, p: &[Vec<f64>]) -> f64 {
        self.components
            .iter()
            .zip(p)
            .map(|(phi, pi)| grid.inner(phi, pi))
            .sum()
    }

    /// `max_{a≠b} sup_x |φ_b(x) − φ_a(x)|`.
    pub fn max_state_difference(&self) -> f64 {
        let m = self.states();
        let mut best: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    for (x, y) in self.components[a].iter().zip(&self.components[b]) {
                        best = best.max((y - x).abs());
                    }
                }
            }
        }
        best
    }

    fn check(&self, grid: &SpatialGrid, states: usize) -> Result<()> {
        if self.states() != states || self.components[0].len() != grid.len() {
            return Err(Error::Input(format!(
                "test function {} has the wrong shape",
                self.label
            )));
        }
        Ok(())
    }
}

/// `⟨Φ, z⟩` for a coordinate field, summed compartment by compartment.
pub fn pair_coordinates(pairings: &[Vec<f64>], z: &crate::channels::CoordinateField) -> f64 {
    let mut s = 0.0;
    for (i, a) in pairings.iter().enumerate() {
        for (k, ak) in a.iter().enumerate() {
            s += ak * z.value(i, k);
        }
    }
    s
}

/// Maps jump events to their position in the rate table, whose rows run over
/// occupied compartments (outer) and declared transitions (inner).
#[derive(Debug, Clone)]
struct EventIndex {
    slot_of_compartment: Vec<Option<usize>>,
    transition_of: Vec<Option<usize>>,
    transitions: usize,
    states: usize,
    events: Vec<JumpEvent>,
}

impl EventIndex {
    fn new(partition: &Partition, kinetics: &ChannelKinetics) -> Self {
        let m = kinetics.states();
        let mut slot_of_compartment = vec![None; partition.len()];
        let mut transition_of = vec![None; m * m];
        for (t, tr) in kinetics.transitions().iter().enumerate() {
            transition_of[tr.from * m + tr.to] = Some(t);
        }
        let mut events = Vec::new();
        for (slot, k) in partition.occupied().enumerate() {
            slot_of_compartment[k] = Some(slot);
            for tr in kinetics.transitions() {
                events.push(JumpEvent {
                    compartment: k,
                    from: tr.from,
                    to: tr.to,
                });
            }
        }
        Self {
            slot_of_compartment,
            transition_of,
            transitions: kinetics.transitions().len(),
            states: m,
            events,
        }
    }

    fn index(&self, e: JumpEvent) -> Result<usize> {
        let slot = self.slot_of_compartment.get(e.compartment).copied().flatten();
        let t = self.transition_of.get(e.from * self.states + e.to).copied().flatten();
        match (slot, t) {
            (Some(s), Some(t)) => Ok(s * self.transitions + t),
            _ => Err(Error::Internal(format!("event {e:?} is not in the rate table"))),
        }
    }

    /// `⟨Φ, Δz⟩` for every event, in table order.
    fn increments(&self, pairings: &[Vec<f64>], partition: &Partition) -> Vec<f64> {
        self.events
            .iter()
            .map(|e| {
                let l = partition.channels(e.compartment) as f64;
                (pairings[e.to][e.compartment] - pairings[e.from][e.compartment]) / l
            })
            .collect()
    }

    /// `‖Δz‖²_{L²} = 2|D_k|/l_k²` for every event.
    fn squared_sizes(&self, partition: &Partition) -> Vec<f64> {
        self.events
            .iter()
            .map(|e| {
                let l = partition.channels(e.compartment) as f64;
                2.0 * partition.measure(e.compartment) / (l * l)
            })
            .collect()
    }
}

/// Closed-form generator drift of the coordinates:
/// `Σ_{j≠i} (z_j q_ji − z_i q_ij)` with rates at the compartment averages.
/// Returned as `drift[i][k]`, zero on empty compartments.
pub fn compensator_drift(
    state: &HybridState,
    kinetics: &ChannelKinetics,
    partition: &Partition,
) -> Result<Vec<Vec<f64>>> {
    let m = kinetics.states();
    let kk = partition.len();
    let mut drift = vec![vec![0.0; kk]; m];
    for k in partition.occupied() {
        let v = partition.compartment_average(&state.membrane.u, k)?;
        for tr in kinetics.transitions() {
            let q = kinetics.eval_checked(tr, v)?;
            let outflow = state.z.value(tr.from, k) * q;
            drift[tr.to][k] += outflow;
            drift[tr.from][k] -= outflow;
        }
    }
    Ok(drift)
}

/// Where a quadratic form came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    EmpiricalGn,
    LimitG,
}

pub trait QuadraticForm {
    fn eval(&self, phi: &TestFunction, psi: &TestFunction) -> f64;
    fn provenance(&self) -> Provenance;
}

/// `Gⁿ(u, θ)`: the rate-weighted second moment of the jump increments,
/// by exact enumeration over all events.
#[derive(Debug, Clone)]
pub struct EmpiricalForm<'a> {
    partition: &'a Partition,
    rates: RateTable,
}

/// Builds the quadratic-variation form of the hybrid process at `state`.
pub fn empirical_gn<'a>(
    state: &HybridState,
    kinetics: &ChannelKinetics,
    partition: &'a Partition,
) -> Result<EmpiricalForm<'a>> {
    let rates = crate::channels::jump_event_rates(&state.membrane.u, &state.config, kinetics, partition)?;
    Ok(EmpiricalForm { partition, rates })
}

impl EmpiricalForm<'_> {
    pub fn rates(&self) -> &RateTable {
        &self.rates
    }

    /// `Λ ∫ ‖Δz‖² μ = Σ_events rate · 2|D_k|/l_k²`.
    pub fn trace(&self) -> f64 {
        self.rates
            .events
            .iter()
            .map(|(e, r)| {
                let l = self.partition.channels(e.compartment) as f64;
                r * 2.0 * self.partition.measure(e.compartment) / (l * l)
            })
            .sum()
    }
}

impl QuadraticForm for EmpiricalForm<'_> {
    fn eval(&self, phi: &TestFunction, psi: &TestFunction) -> f64 {
        let a = phi.pairings(self.partition);
        let b = psi.pairings(self.partition);
        self.rates
            .events
            .iter()
            .map(|(e, r)| {
                let k = e.compartment;
                let l = self.partition.channels(k) as f64;
                let da = (a[e.to][k] - a[e.from][k]) / l;
                let db = (b[e.to][k] - b[e.from][k]) / l;
                r * da * db
            })
            .sum()
    }

    fn provenance(&self) -> Provenance {
        Provenance::EmpiricalGn
    }
}

/// Covariance form of the limit at `(u, p)`. Stores the transition fluxes
/// `p_i q_ij(u)` per node and the nodewise matrix `D(x)`.
#[derive(Debug, Clone)]
pub struct LimitForm {
    grid: SpatialGrid,
    states: usize,
    /// `(from, to)` per transition.
    pairs: Vec<(usize, usize)>,
    /// `flux[x * T + t]`.
    flux: Vec<f64>,
    /// `d[x * m * m + i * m + j]`.
    d: Vec<f64>,
}

/// The limit covariance form at `(u, p)`; rejects `p` that is not
/// mass-normalised.
pub fn limit_g(grid: &SpatialGrid, u: &[f64], p: &[Vec<f64>], kinetics: &ChannelKinetics) -> Result<LimitForm> {
    let defect = crate::limit::mass_defect(p);
    if defect > LIMIT_MASS_TOLERANCE {
        return Err(Error::Input(format!(
            "occupation fields violate Σp = 1 by {defect:e}"
        )));
    }
    LimitForm::build(grid, u, p, kinetics, false)
}

impl LimitForm {
    /// With `clamp`, negative occupations are replaced by zero inside the
    /// fluxes (used by the Langevin noise).
    pub(crate) fn build(
        grid: &SpatialGrid,
        u: &[f64],
        p: &[Vec<f64>],
        kinetics: &ChannelKinetics,
        clamp: bool,
    ) -> Result<Self> {
        let m = kinetics.states();
        let n = grid.len();
        if u.len() != n || p.len() != m || p.iter().any(|v| v.len() != n) {
            return Err(Error::Input("covariance arguments do not match the model".into()));
        }
        let trs = kinetics.transitions();
        let nt = trs.len();
        let mut flux = vec![0.0; n * nt];
        let mut d = vec![0.0; n * m * m];
        for x in 0..n {
            let dx = &mut d[x * m * m..(x + 1) * m * m];
            for (t, tr) in trs.iter().enumerate() {
                let pi = if clamp { p[tr.from][x].max(0.0) } else { p[tr.from][x] };
                let f = pi * kinetics.eval_checked(tr, u[x])?;
                flux[x * nt + t] = f;
                dx[tr.from * m + tr.to] -= f;
                dx[tr.to * m + tr.from] -= f;
            }
            // diagonal from the off-diagonal row so that every row sums to 0
            for j in 0..m {
                let mut s = 0.0;
                for i in 0..m {
                    if i != j {
                        s += dx[j * m + i];
                    }
                }
                dx[j * m + j] = -s;
            }
        }
        Ok(Self {
            grid: grid.clone(),
            states: m,
            pairs: trs.iter().map(|t| (t.from, t.to)).collect(),
            flux,
            d,
        })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    /// `D(x)` as a row-major `m × m` slice.
    pub fn matrix(&self, x: usize) -> &[f64] {
        let mm = self.states * self.states;
        &self.d[x * mm..(x + 1) * mm]
    }

    /// `∫ Φᵀ D Ψ dx` by midpoint quadrature.
    pub fn eval_matrix(&self, phi: &TestFunction, psi: &TestFunction) -> f64 {
        let m = self.states;
        let h = self.grid.spacing();
        let mut total = 0.0;
        for x in 0..self.grid.len() {
            let d = self.matrix(x);
            let mut s = 0.0;
            for i in 0..m {
                for j in 0..m {
                    s += phi.components[i][x] * d[i * m + j] * psi.components[j][x];
                }
            }
            total += h * s;
        }
        total
    }

    /// The four sums of integrals:
    /// `Σ_j Σ_{i≠j} ∫ p_i q_ij ψ_j φ_j + ∫ p_j q_ji ψ_j φ_j − ∫ p_j q_ji ψ_i φ_j − ∫ p_i q_ij ψ_i φ_j`.
    pub fn eval_four_term(&self, phi: &TestFunction, psi: &TestFunction) -> f64 {
        let h = self.grid.spacing();
        let nt = self.pairs.len();
        let (mut t1, mut t2, mut t3, mut t4) = (0.0, 0.0, 0.0, 0.0);
        for x in 0..self.grid.len() {
            for (t, &(a, b)) in self.pairs.iter().enumerate() {
                // flux p_a q_ab
                let f = self.flux[x * nt + t] * h;
                let (pa, pb) = (&phi.components, &psi.components);
                // (i, j) = (a, b) in the first and last sums
                t1 += f * pb[b][x] * pa[b][x];
                t4 += f * pb[a][x] * pa[b][x];
                // (j, i) = (a, b) in the second and third sums
                t2 += f * pb[a][x] * pa[a][x];
                t3 += f * pb[b][x] * pa[a][x];
            }
        }
        t1 + t2 - t3 - t4
    }

    /// `Σ_x h · trace D(x)`.
    pub fn trace(&self) -> f64 {
        let m = self.states;
        let h = self.grid.spacing();
        (0..self.grid.len())
            .map(|x| {
                let d = self.matrix(x);
                (0..m).map(|i| d[i * m + i]).sum::<f64>() * h
            })
            .sum()
    }
}

impl QuadraticForm for LimitForm {
    fn eval(&self, phi: &TestFunction, psi: &TestFunction) -> f64 {
        self.eval_matrix(phi, psi)
    }

    fn provenance(&self) -> Provenance {
        Provenance::LimitG
    }
}

/// `∫ G(u(s), p(s))(Φ, Ψ) ds` along a limit trajectory, trapezoid in time.
pub fn integrated_limit_g(
    grid: &SpatialGrid,
    kinetics: &ChannelKinetics,
    trajectory: &[LimitState],
    pairs: &[(&TestFunction, &TestFunction)],
) -> Result<Vec<f64>> {
    let mut totals = vec![0.0; pairs.len()];
    let mut prev: Option<(f64, Vec<f64>)> = None;
    for s in trajectory {
        let form = limit_g(grid, &s.u, &s.p, kinetics)?;
        let vals: Vec<f64> = pairs.iter().map(|(a, b)| form.eval(a, b)).collect();
        if let Some((t0, v0)) = &prev {
            let dt = s.t - t0;
            for ((tot, a), b) in totals.iter_mut().zip(v0).zip(&vals) {
                *tot += 0.5 * dt * (a + b);
            }
        }
        prev = Some((s.t, vals));
    }
    Ok(totals)
}

/// Values of the tracked martingales at the recording times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingalePath {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    /// `values[f][r] = ⟨φ_f, M(t_r)⟩`.
    pub values: Vec<Vec<f64>>,
    /// `compensator[f][r] = ∫₀^{t_r} ⟨φ_f, drift⟩ ds`.
    pub compensator: Vec<Vec<f64>>,
    /// `jumps[f][r] = ⟨φ_f, z(Θ_{t_r}) − z(Θ_0)⟩` accumulated over jumps.
    pub jumps: Vec<Vec<f64>>,
}

/// Per-function running totals maintained by [`MartingaleTracker`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackedTotals {
    /// `⟨Φ, z(Θ_t) − z(Θ_0)⟩` from the jump increments.
    pub jump_sum: f64,
    /// `∫₀ᵗ ⟨Φ, compensator drift⟩ ds`.
    pub compensator: f64,
    /// `∫₀ᵗ Gⁿ(Φ, Φ) ds`.
    pub quadratic_variation: f64,
    /// Largest `|⟨Φ, Δz⟩|` over the jumps seen.
    pub max_jump: f64,
}

impl TrackedTotals {
    pub fn martingale(&self) -> f64 {
        self.jump_sum - self.compensator
    }
}

/// Observer computing `⟨Φ, M(t)⟩`, its compensator and `∫ Gⁿ(Φ, Φ) ds`
/// online, with trapezoid quadrature on the flow sub-steps.
#[derive(Debug, Clone)]
pub struct MartingaleTracker {
    labels: Vec<String>,
    index: EventIndex,
    /// `delta[f][e]`
    delta: Vec<Vec<f64>>,
    sizes: Vec<f64>,
    totals: Vec<TrackedTotals>,
    /// `∫ Λ ∫ ‖Δz‖² μ ds`
    trace_integral: f64,
    carry: Option<(f64, Vec<(f64, f64)>, f64)>,
    record: MartingalePath,
}

impl MartingaleTracker {
    pub fn new(model: &Model, functions: &[TestFunction]) -> Result<Self> {
        let grid = model.partition.grid();
        for f in functions {
            f.check(grid, model.states())?;
        }
        let index = EventIndex::new(&model.partition, &model.kinetics);
        let delta = functions
            .iter()
            .map(|f| index.increments(&f.pairings(&model.partition), &model.partition))
            .collect();
        let labels: Vec<String> = functions.iter().map(|f| f.label.clone()).collect();
        let nf = functions.len();
        Ok(Self {
            sizes: index.squared_sizes(&model.partition),
            index,
            delta,
            totals: vec![TrackedTotals::default(); nf],
            trace_integral: 0.0,
            carry: None,
            record: MartingalePath {
                labels: labels.clone(),
                times: Vec::new(),
                values: vec![Vec::new(); nf],
                compensator: vec![Vec::new(); nf],
                jumps: vec![Vec::new(); nf],
            },
            labels,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn totals(&self) -> &[TrackedTotals] {
        &self.totals
    }

    pub fn trace_integral(&self) -> f64 {
        self.trace_integral
    }

    pub fn path(&self) -> &MartingalePath {
        &self.record
    }

    pub fn into_path(self) -> MartingalePath {
        self.record
    }

    /// `(⟨Φ, drift⟩, Gⁿ(Φ, Φ))` per function and the trace, at one rate table.
    fn evaluate(&self, rates: &RateTable) -> (Vec<(f64, f64)>, f64) {
        debug_assert_eq!(rates.events.len(), self.sizes.len());
        let per = self
            .delta
            .iter()
            .map(|d| {
                let mut c = 0.0;
                let mut g = 0.0;
                for ((_, r), di) in rates.events.iter().zip(d) {
                    let rd = r * di;
                    c += rd;
                    g += rd * di;
                }
                (c, g)
            })
            .collect();
        let trace = rates.events.iter().zip(&self.sizes).map(|((_, r), s)| r * s).sum();
        (per, trace)
    }
}

impl PathObserver for MartingaleTracker {
    fn on_substep(&mut self, step: &Substep<'_>) -> Result<()> {
        let (v0, tr0) = match self.carry.take() {
            Some((t, v, tr)) if t == step.t0 => (v, tr),
            _ => self.evaluate(step.rates0),
        };
        let (v1, tr1) = self.evaluate(step.rates1);
        let dt = step.t1 - step.t0;
        for ((tot, a), b) in self.totals.iter_mut().zip(&v0).zip(&v1) {
            tot.compensator += 0.5 * dt * (a.0 + b.0);
            tot.quadratic_variation += 0.5 * dt * (a.1 + b.1);
        }
        self.trace_integral += 0.5 * dt * (tr0 + tr1);
        self.carry = Some((step.t1, v1, tr1));
        Ok(())
    }

    fn on_jump(&mut self, _t: f64, event: JumpEvent, _state: &HybridState) -> Result<()> {
        // the rate table changes with the configuration
        self.carry = None;
        let e = self.index.index(event)?;
        for (tot, d) in self.totals.iter_mut().zip(&self.delta) {
            tot.jump_sum += d[e];
            tot.max_jump = tot.max_jump.max(d[e].abs());
        }
        Ok(())
    }

    fn on_snapshot(&mut self, state: &HybridState, _rates: &RateTable) -> Result<()> {
        self.record.times.push(state.membrane.t);
        for (f, tot) in self.totals.iter().enumerate() {
            self.record.values[f].push(tot.martingale());
            self.record.compensator[f].push(tot.compensator);
            self.record.jumps[f].push(tot.jump_sum);
        }
        Ok(())
    }
}

/// Offline martingale reconstruction from a recorded path. The membrane is
/// interpolated linearly between snapshots; the compensator uses the
/// trapezoid rule on the grid formed by snapshot and jump times, and a
/// Simpson comparison on each interval estimates the quadrature error.
/// Fails when that estimate exceeds `tolerance`.
pub fn martingale_path(
    path: &HybridPath,
    model: &Model,
    functions: &[TestFunction],
    tolerance: f64,
) -> Result<MartingalePath> {
    let grid = model.partition.grid();
    for f in functions {
        f.check(grid, model.states())?;
    }
    let snaps = &path.snapshots;
    if snaps.len() < 2 {
        return Err(Error::Analysis(
            "path has fewer than two snapshots; record it with an output cadence".into(),
        ));
    }
    let index = EventIndex::new(&model.partition, &model.kinetics);
    let delta: Vec<Vec<f64>> = functions
        .iter()
        .map(|f| index.increments(&f.pairings(&model.partition), &model.partition))
        .collect();
    let nf = functions.len();
    let u_at = |t: f64| -> Vec<f64> {
        let r = snaps.partition_point(|s| s.t <= t).clamp(1, snaps.len() - 1);
        let (a, b) = (&snaps[r - 1], &snaps[r]);
        let w = if b.t > a.t { ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0) } else { 0.0 };
        a.u.iter().zip(&b.u).map(|(x, y)| x + w * (y - x)).collect()
    };
    let drift = |t: f64, config: &ChannelConfiguration| -> Result<Vec<f64>> {
        let rates = crate::channels::jump_event_rates(&u_at(t), config, &model.kinetics, &model.partition)?;
        Ok(delta
            .iter()
            .map(|d| rates.events.iter().zip(d).map(|((_, r), di)| r * di).sum())
            .collect())
    };

    let mut out = MartingalePath {
        labels: functions.iter().map(|f| f.label.clone()).collect(),
        times: Vec::new(),
        values: vec![Vec::new(); nf],
        compensator: vec![Vec::new(); nf],
        jumps: vec![Vec::new(); nf],
    };
    let mut config = snaps[0].config.clone();
    let mut comp = vec![0.0; nf];
    let mut jsum = vec![0.0; nf];
    let mut error_estimate = 0.0;
    let mut t = snaps[0].t;
    let mut jumps = path.jumps.iter().peekable();
    let record = |out: &mut MartingalePath, t: f64, comp: &[f64], jsum: &[f64]| {
        out.times.push(t);
        for f in 0..comp.len() {
            out.values[f].push(jsum[f] - comp[f]);
            out.compensator[f].push(comp[f]);
            out.jumps[f].push(jsum[f]);
        }
    };
    record(&mut out, t, &comp, &jsum);
    for snap in &snaps[1..] {
        loop {
            let next_jump = jumps.peek().map(|j| j.t).filter(|&tj| tj < snap.t);
            let stop = next_jump.unwrap_or(snap.t);
            if stop > t {
                let c0 = drift(t, &config)?;
                let cm = drift(0.5 * (t + stop), &config)?;
                let c1 = drift(stop, &config)?;
                let dt = stop - t;
                for f in 0..nf {
                    let trap = 0.5 * dt * (c0[f] + c1[f]);
                    let simpson = dt / 6.0 * (c0[f] + 4.0 * cm[f] + c1[f]);
                    comp[f] += trap;
                    error_estimate = f64::max(error_estimate, (simpson - trap).abs());
                }
                t = stop;
            }
            match next_jump {
                Some(_) => {
                    let j = jumps.next().expect("peeked");
                    let e = index.index(j.event)?;
                    for f in 0..nf {
                        jsum[f] += delta[f][e];
                    }
                    config.apply(j.event)?;
                }
                None => break,
            }
        }
        if config != snap.config {
            return Err(Error::Analysis(format!(
                "jump log and snapshot at t = {} disagree",
                snap.t
            )));
        }
        record(&mut out, snap.t, &comp, &jsum);
    }
    if error_estimate > tolerance {
        return Err(Error::Analysis(format!(
            "compensator quadrature error {error_estimate:e} exceeds {tolerance:e}; record the path with a finer output cadence"
        )));
    }
    Ok(out)
}

/// Monte Carlo comparison of the two sides of the Itô isometry for one
/// test function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsometryResidual {
    /// `E⟨Φ, M(T)⟩²`
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `E ∫₀ᵀ Gⁿ(Φ, Φ) ds`
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub residual: f64,
    /// `√(se_lhs² + se_rhs²)`
    pub combined_stderr: f64,
    pub z: f64,
    pub n: usize,
    pub pass: bool,
}

impl IsometryResidual {
    /// From per-replicate `⟨Φ, M(T)⟩` and `∫ Gⁿ(Φ, Φ) ds`.
    pub fn from_samples(martingale: &[f64], quadratic_variation: &[f64]) -> Self {
        let sq: Vec<f64> = martingale.iter().map(|m| m * m).collect();
        let l = Moments::of(&sq);
        let r = Moments::of(quadratic_variation);
        let combined = (l.stderr().powi(2) + r.stderr().powi(2)).sqrt();
        let check = ZCheck::new(l.mean, r.mean, combined, 3.0);
        Self {
            lhs: l.mean,
            lhs_stderr: l.stderr(),
            rhs: r.mean,
            rhs_stderr: r.stderr(),
            residual: l.mean - r.mean,
            combined_stderr: combined,
            z: check.z,
            n: sq.len(),
            pass: check.pass,
        }
    }
}

/// Runs `replicates` paths of `model` from `initial` on `[t0, t_end]` and
/// compares both sides of the isometry for every test function.
pub fn ito_isometry_residual(
    model: &Model,
    initial: &HybridState,
    functions: &[TestFunction],
    settings: crate::engine::RunSettings,
    plan: &crate::replicates::ReplicatePlan,
) -> Result<Vec<IsometryResidual>> {
    let totals = crate::replicates::run_replicates(plan, |_, rng| {
        let mut tracker = MartingaleTracker::new(model, functions)?;
        crate::engine::simulate_observed(model, initial.clone(), settings, rng, &mut tracker)?;
        Ok(tracker.totals().to_vec())
    })?;
    Ok((0..functions.len())
        .map(|f| {
            let m: Vec<f64> = totals.iter().map(|t| t[f].martingale()).collect();
            let g: Vec<f64> = totals.iter().map(|t| t[f].quadratic_variation).collect();
            IsometryResidual::from_samples(&m, &g)
        })
        .collect())
}

/// Observer accumulating the per-path statistics behind the condition
/// diagnostics: the generator-versus-limit drift residual at snapshot times
/// and the largest rescaled jump pairings.
#[derive(Debug, Clone)]
pub struct ConditionObserver<'m> {
    model: &'m Model,
    last: Option<(f64, f64)>,
    /// `∫ ‖compensator drift − F(z, u)‖_{L²} dt` (trapezoid on snapshots).
    pub drift_residual: f64,
}

impl<'m> ConditionObserver<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            last: None,
            drift_residual: 0.0,
        }
    }
}

/// `‖drift(z, ū_k) − F(z, u)‖_{L²}` at one state, where the first term
/// uses compartment-averaged rates and the second nodal ones.
pub fn drift_residual(state: &HybridState, model: &Model) -> Result<f64> {
    let drift = compensator_drift(state, &model.kinetics, &model.partition)?;
    let grid = model.partition.grid();
    let z = state.z.all_on_grid(&model.partition);
    let f = KineticsVectorField::new(&model.kinetics).evaluate(&z, &state.membrane.u)?;
    let mut s = 0.0;
    for (i, fi) in f.iter().enumerate() {
        let di = model.partition.expand(&drift[i]);
        let diff: Vec<f64> = di.iter().zip(fi).map(|(a, b)| a - b).collect();
        s += grid.inner(&diff, &diff);
    }
    Ok(s.sqrt())
}

impl PathObserver for ConditionObserver<'_> {
    fn on_snapshot(&mut self, state: &HybridState, _rates: &RateTable) -> Result<()> {
        let r = drift_residual(state, self.model)?;
        let t = state.membrane.t;
        if let Some((t0, r0)) = self.last {
            self.drift_residual += 0.5 * (t - t0) * (r0 + r);
        }
        self.last = Some((t, r));
        Ok(())
    }
}

/// Replicate-averaged statistics of one ladder level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStatistics {
    pub level: usize,
    pub alpha: f64,
    pub delta_plus: f64,
    /// `E ∫ Λ ∫ ‖Δz‖² μ dt` with standard error.
    pub trace: (f64, f64),
    /// `E ∫ ‖drift − F‖ dt` with standard error.
    pub drift_residual: (f64, f64),
    /// Largest observed `√α · |⟨Φ, Δz⟩|` over all tracked functions and paths.
    pub max_scaled_jump: f64,
    /// Analytic per-event bound `√α · max_k |D_k|/l_k · max_{a≠b} sup|φ_b − φ_a|`.
    pub jump_bound: f64,
    /// Number of observed jumps with `√α · |⟨Φ, Δz⟩|` above the threshold.
    pub exceedances: u64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub level: usize,
    pub metric: String,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub n: usize,
    pub verdict: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rows: Vec<DiagnosticRow>,
    /// Levels with missing statistics.
    pub incomplete: Vec<usize>,
    /// Ratios of the drift residual between consecutive levels.
    pub drift_residual_ratios: Vec<f64>,
    /// The trace decreases across the ladder.
    pub trace_decreasing: bool,
    /// The drift residual decreases across the ladder.
    pub drift_residual_decreasing: bool,
    /// No observed jump exceeded its analytic bound.
    pub jumps_within_bound: bool,
}

/// Per-level diagnostics with monotone-trend verdicts across the ladder.
/// `None` entries mark levels whose statistics are missing.
pub fn condition_diagnostics(levels: &[Option<LevelStatistics>]) -> DiagnosticsReport {
    let mut rows = Vec::new();
    let mut incomplete = Vec::new();
    let present: Vec<&LevelStatistics> = levels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            if l.is_none() {
                incomplete.push(i);
            }
            l.as_ref()
        })
        .collect();
    let mut within = true;
    for s in &present {
        let n = s.replicates;
        let row = |metric: &str, estimate: f64, stderr: Option<f64>, verdict: Option<bool>| DiagnosticRow {
            level: s.level,
            metric: metric.into(),
            estimate,
            stderr,
            n,
            verdict,
        };
        rows.push(row("trace_qv", s.trace.0, Some(s.trace.1), None));
        rows.push(row("alpha_trace_qv", s.alpha * s.trace.0, Some(s.alpha * s.trace.1), None));
        rows.push(row("drift_residual", s.drift_residual.0, Some(s.drift_residual.1), None));
        let ok = s.max_scaled_jump <= s.jump_bound * (1.0 + 1e-12);
        within &= ok;
        rows.push(row("max_scaled_jump", s.max_scaled_jump, None, Some(ok)));
        rows.push(row("jump_bound", s.jump_bound, None, None));
        rows.push(row("jump_exceedances", s.exceedances as f64, None, None));
    }
    let decreasing = |f: &dyn Fn(&LevelStatistics) -> f64| present.windows(2).all(|w| f(w[1]) < f(w[0]));
    let all_zero = present.iter().all(|s| s.trace.0 == 0.0 && s.drift_residual.0 == 0.0);
    let ratios = present
        .windows(2)
        .map(|w| {
            if w[1].drift_residual.0 > 0.0 {
                w[0].drift_residual.0 / w[1].drift_residual.0
            } else {
                f64::NAN
            }
        })
        .collect();
    DiagnosticsReport {
        rows,
        incomplete,
        drift_residual_ratios: ratios,
        trace_decreasing: all_zero || decreasing(&|s| s.trace.0),
        drift_residual_decreasing: all_zero || decreasing(&|s| s.drift_residual.0),
        jumps_within_bound: within,
    }
}

/// Analytic per-event bound on `√α |⟨Φ, Δz⟩|` for a partition.
pub fn jump_bound(partition: &Partition, functions: &[TestFunction]) -> f64 {
    let alpha = partition.stats().alpha();
    let worst = partition
        .occupied()
        .map(|k| partition.measure(k) / partition.channels(k) as f64)
        .fold(0.0, f64::max);
    let sup = functions.iter().map(|f| f.max_state_difference()).fold(0.0, f64::max);
    alpha.sqrt() * worst * sup
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{coordinate_field, jump_event_rates};
    use crate::engine::{simulate, stream_rng, JumpMethod, RunSettings};
    use crate::kinetics::{benchmarks, RateFunction, Transition};
    use crate::partition::LevelSpec;
    use crate::pde::{DtPolicy, EllipticOperator, MembraneState};
    use crate::stats::MeanAccumulator;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn frozen(l: u32, q01: f64, q10: f64) -> Model {
        let g = SpatialGrid::new(1.0, 16).unwrap();
        Model::new(
            Partition::single(&g, l).unwrap(),
            benchmarks::frozen_two_state(&g, q01, q10),
            EllipticOperator::constant(&g, 1.0).unwrap(),
            DtPolicy::default(),
        )
        .unwrap()
    }

    fn state(model: &Model, counts: Vec<Vec<u32>>) -> HybridState {
        let n = model.partition.grid().len();
        let cfg = ChannelConfiguration::new(&model.partition, model.states(), counts).unwrap();
        HybridState::new(MembraneState { u: vec![0.0; n], t: 0.0 }, cfg, &model.partition).unwrap()
    }

    /// Σ_events rate · Δz_i, enumerated event by event.
    fn enumerated_drift(s: &HybridState, model: &Model) -> Vec<Vec<f64>> {
        let rates = jump_event_rates(&s.membrane.u, &s.config, &model.kinetics, &model.partition).unwrap();
        let before = coordinate_field(&s.config, &model.partition).unwrap();
        let (m, kk) = (model.states(), model.partition.len());
        let mut out = vec![vec![0.0; kk]; m];
        for (e, r) in &rates.events {
            if *r == 0.0 {
                continue;
            }
            let mut c = s.config.clone();
            c.apply(*e).unwrap();
            let after = coordinate_field(&c, &model.partition).unwrap();
            for i in 0..m {
                for k in 0..kk {
                    out[i][k] += r * (after.value(i, k) - before.value(i, k));
                }
            }
        }
        out
    }

    #[test]
    fn drift_example_and_degenerate_cases() {
        let m = frozen(10, 2.0, 1.0);
        let d = compensator_drift(&state(&m, vec![vec![4, 6]]), &m.kinetics, &m.partition).unwrap();
        assert_relative_eq!(d[1][0], 0.2, epsilon = 1e-15);
        assert_relative_eq!(d[0][0], -0.2, epsilon = 1e-15);
        let m0 = frozen(10, 0.0, 1.0);
        let d = compensator_drift(&state(&m0, vec![vec![10, 0]]), &m0.kinetics, &m0.partition).unwrap();
        assert_eq!(d, vec![vec![0.0], vec![0.0]]);
        let ms = frozen(10, 1.5, 1.5);
        let d = compensator_drift(&state(&ms, vec![vec![5, 5]]), &ms.kinetics, &ms.partition).unwrap();
        assert_eq!(d, vec![vec![0.0], vec![0.0]]);
    }

    fn random_model_and_state() -> impl Strategy<Value = (Model, HybridState)> {
        (2usize..=4, 1usize..=8, 1u32..=12, any::<u64>()).prop_map(|(m, kk, l, seed)| {
            use rand::Rng;
            let mut rng = stream_rng(seed, 0);
            let g = SpatialGrid::new(1.0, 32).unwrap();
            let p = Partition::from_level(&g, &LevelSpec::Uniform { compartments: kk, channels: l }, 0).unwrap();
            let mut transitions = Vec::new();
            for i in 0..m {
                for j in 0..m {
                    if i != j && rng.gen_bool(0.7) {
                        transitions.push(Transition {
                            from: i,
                            to: j,
                            rate: RateFunction::Tanh {
                                base: rng.gen_range(1.0..3.0),
                                amplitude: rng.gen_range(0.0..0.9),
                                slope: rng.gen_range(-2.0..2.0),
                                midpoint: rng.gen_range(0.0..1.0),
                            },
                        });
                    }
                }
            }
            let mut reversal = vec![0.0; m];
            reversal[m - 1] = 1.0;
            let kin = ChannelKinetics::new(m, transitions, vec![vec![1.0; 32]; m], reversal).unwrap();
            let model = Model::new(p, kin, EllipticOperator::constant(&g, 1.0).unwrap(), DtPolicy::default()).unwrap();
            let counts = (0..kk)
                .map(|_| {
                    let mut row = vec![0u32; m];
                    for _ in 0..l {
                        row[rng.gen_range(0..m)] += 1;
                    }
                    row
                })
                .collect();
            let cfg = ChannelConfiguration::new(&model.partition, m, counts).unwrap();
            let u: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s = HybridState::new(MembraneState { u, t: 0.0 }, cfg, &model.partition).unwrap();
            (model, s)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn closed_form_drift_matches_enumeration((model, s) in random_model_and_state()) {
            let closed = compensator_drift(&s, &model.kinetics, &model.partition).unwrap();
            let brute = enumerated_drift(&s, &model);
            for (a, b) in closed.iter().flatten().zip(brute.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
            }
        }

        #[test]
        fn empirical_form_is_symmetric_psd_with_constant_null((model, s) in random_model_and_state()) {
            let g = model.partition.grid().clone();
            let form = empirical_gn(&s, &model.kinetics, &model.partition).unwrap();
            let m = model.states();
            let a = TestFunction::sine(&g, m, 0, 1);
            let b = TestFunction::sine(&g, m, m - 1, 3);
            prop_assert!((form.eval(&a, &b) - form.eval(&b, &a)).abs() <= 1e-12);
            prop_assert!(form.eval(&a, &a) >= -1e-12);
            prop_assert_eq!(form.eval(&TestFunction::constant(&g, m, 2.5), &TestFunction::constant(&g, m, 2.5)), 0.0);
        }

        #[test]
        fn parseval_trace_identity((model, s) in random_model_and_state()) {
            let g = model.partition.grid().clone();
            let form = empirical_gn(&s, &model.kinetics, &model.partition).unwrap();
            let basis = TestFunction::orthonormal_basis(&g, model.states());
            let summed: f64 = basis.iter().map(|e| form.eval(e, e)).sum();
            let direct = form.trace();
            prop_assert!((summed - direct).abs() <= 1e-12 * direct.max(1.0), "{} vs {}", summed, direct);
        }
    }

    #[test]
    fn empirical_form_example() {
        let m = frozen(10, 2.0, 1.0);
        let s = state(&m, vec![vec![4, 6]]);
        let g = m.partition.grid().clone();
        let form = empirical_gn(&s, &m.kinetics, &m.partition).unwrap();
        let phi = TestFunction::new("open", vec![vec![0.0; 16], vec![1.0; 16]]).unwrap();
        assert_relative_eq!(form.eval(&phi, &phi), 0.14, epsilon = 1e-14);
        assert_eq!(form.provenance(), Provenance::EmpiricalGn);
        let c = TestFunction::constant(&g, 2, 1.0);
        assert_eq!(form.eval(&c, &c), 0.0);
    }

    #[test]
    fn limit_form_example_and_routes() {
        let g = SpatialGrid::new(1.0, 16).unwrap();
        let k = benchmarks::frozen_two_state(&g, 1.0, 1.0);
        let p = vec![vec![0.5; 16], vec![0.5; 16]];
        let form = limit_g(&g, &vec![0.0; 16], &p, &k).unwrap();
        let phi = TestFunction::new("open", vec![vec![0.0; 16], vec![1.0; 16]]).unwrap();
        assert_relative_eq!(form.eval(&phi, &phi), 1.0, epsilon = 1e-14);
        assert_relative_eq!(form.eval_four_term(&phi, &phi), 1.0, epsilon = 1e-14);
        let c = TestFunction::constant(&g, 2, 3.0);
        assert_eq!(form.eval(&c, &c), 0.0);
        assert_eq!(form.provenance(), Provenance::LimitG);
    }

    #[test]
    fn limit_form_routes_agree_and_are_symmetric() {
        let g = SpatialGrid::new(1.0, 32).unwrap();
        let k = benchmarks::hh_four_state(&g);
        let u = g.sample(|x| (PI * x).sin());
        let p = vec![
            g.sample(|x| 0.4 + 0.1 * x),
            g.sample(|x| 0.3 - 0.05 * x),
            g.sample(|_| 0.2),
            g.sample(|x| 0.1 - 0.05 * x),
        ];
        let form = limit_g(&g, &u, &p, &k).unwrap();
        let fs = TestFunction::default_basis(&g, 4, 3);
        for a in &fs {
            for b in &fs {
                let x = form.eval_matrix(a, b);
                assert!((x - form.eval_four_term(a, b)).abs() <= 1e-12, "{} {}", a.label, b.label);
                assert!((x - form.eval(b, a)).abs() <= 1e-12);
            }
            assert!(form.eval(a, a) >= -1e-12);
        }
        for x in 0..32 {
            let d = form.matrix(x);
            for j in 0..4 {
                let off: f64 = (0..4).filter(|&i| i != j).map(|i| d[j * 4 + i]).sum();
                assert_eq!(off + d[j * 4 + j], 0.0);
            }
        }
    }

    #[test]
    fn limit_form_rejects_unnormalised_fields() {
        let g = SpatialGrid::new(1.0, 8).unwrap();
        let k = benchmarks::frozen_two_state(&g, 1.0, 1.0);
        let p = vec![vec![0.5; 8], vec![0.5 + 1e-6; 8]];
        assert!(matches!(limit_g(&g, &vec![0.0; 8], &p, &k), Err(Error::Input(_))));
    }

    #[test]
    fn scaled_empirical_form_approaches_the_limit_form() {
        // uniform partition, equal occupations in every compartment: α Gⁿ
        // is the compartment-averaged version of G
        let g = SpatialGrid::new(1.0, 64).unwrap();
        let k = benchmarks::frozen_two_state(&g, 2.0, 1.0);
        let p = Partition::from_level(&g, &LevelSpec::Uniform { compartments: 32, channels: 10 }, 0).unwrap();
        let model = Model::new(p, k.clone(), EllipticOperator::constant(&g, 1.0).unwrap(), DtPolicy::default()).unwrap();
        let cfg = ChannelConfiguration::new(&model.partition, 2, vec![vec![4, 6]; 32]).unwrap();
        let s = HybridState::new(MembraneState { u: vec![0.0; 64], t: 0.0 }, cfg, &model.partition).unwrap();
        let emp = empirical_gn(&s, &model.kinetics, &model.partition).unwrap();
        let lim = limit_g(&g, &vec![0.0; 64], &[vec![0.4; 64], vec![0.6; 64]], &k).unwrap();
        let alpha = model.partition.stats().alpha();
        let phi = TestFunction::new("open", vec![vec![0.0; 64], vec![1.0; 64]]).unwrap();
        assert_relative_eq!(alpha * emp.eval(&phi, &phi), lim.eval(&phi, &phi), max_relative = 1e-12);
    }

    #[test]
    fn zero_kinetics_martingale_vanishes() {
        let m = frozen(5, 0.0, 0.0);
        let s0 = state(&m, vec![vec![2, 3]]);
        let g = m.partition.grid().clone();
        let fs = TestFunction::default_basis(&g, 2, 2);
        let mut tracker = MartingaleTracker::new(&m, &fs).unwrap();
        let settings = RunSettings { t_end: 1.0, method: JumpMethod::IntegratedHazard, cadence: Some(0.25) };
        crate::engine::simulate_observed(&m, s0, settings, &mut stream_rng(0, 0), &mut tracker).unwrap();
        assert!(tracker.path().values.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(tracker.path().times.len(), 5);
    }

    #[test]
    fn martingale_jumps_by_the_indicator_pairing() {
        let g = SpatialGrid::new(1.0, 16).unwrap();
        let p = Partition::from_level(&g, &LevelSpec::Uniform { compartments: 4, channels: 5 }, 0).unwrap();
        let model = Model::new(p, benchmarks::frozen_two_state(&g, 1.0, 1.0), EllipticOperator::constant(&g, 1.0).unwrap(), DtPolicy::default()).unwrap();
        let s0 = HybridState::new(
            MembraneState { u: vec![0.0; 16], t: 0.0 },
            ChannelConfiguration::all_in(&model.partition, 2, 0),
            &model.partition,
        )
        .unwrap();
        let phi = TestFunction::sine(&g, 2, 1, 2);
        struct Jumps(Vec<(f64, JumpEvent, f64)>, MartingaleTracker);
        impl PathObserver for Jumps {
            fn on_substep(&mut self, s: &Substep<'_>) -> Result<()> {
                self.1.on_substep(s)
            }
            fn on_jump(&mut self, t: f64, e: JumpEvent, st: &HybridState) -> Result<()> {
                let before = self.1.totals()[0].martingale();
                self.1.on_jump(t, e, st)?;
                self.0.push((t, e, self.1.totals()[0].martingale() - before));
                Ok(())
            }
        }
        let mut obs = Jumps(Vec::new(), MartingaleTracker::new(&model, std::slice::from_ref(&phi)).unwrap());
        let settings = RunSettings { t_end: 0.5, method: JumpMethod::IntegratedHazard, cadence: None };
        crate::engine::simulate_observed(&model, s0, settings, &mut stream_rng(4, 0), &mut obs).unwrap();
        assert!(!obs.0.is_empty());
        let a = phi.pairings(&model.partition);
        for (_, e, dm) in &obs.0 {
            let expected = (a[e.to][e.compartment] - a[e.from][e.compartment]) / 5.0;
            assert_relative_eq!(*dm, expected, max_relative = 1e-12);
            assert_relative_eq!(dm.abs(), a[1][e.compartment].abs() / 5.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn frozen_benchmark_martingale_has_zero_mean_and_isometry() {
        let m = frozen(10, 2.0, 1.0);
        let s0 = state(&m, vec![vec![4, 6]]);
        let phi = TestFunction::new("open", vec![vec![0.0; 16], vec![1.0; 16]]).unwrap();
        let settings = RunSettings { t_end: 1.0, method: JumpMethod::IntegratedHazard, cadence: None };
        let plan = crate::replicates::ReplicatePlan::new(4000, 17, 1);
        let res = ito_isometry_residual(&m, &s0, &[phi.clone(), phi.scaled(2.0)], settings, &plan).unwrap();
        assert!(res[0].pass, "{:?}", res[0]);
        assert_eq!(res[1].lhs, 4.0 * res[0].lhs);
        assert_eq!(res[1].rhs, 4.0 * res[0].rhs);
        let means: MeanAccumulator = crate::replicates::run_replicates(&plan, |_, rng| {
            let mut t = MartingaleTracker::new(&m, std::slice::from_ref(&phi))?;
            crate::engine::simulate_observed(&m, s0.clone(), settings, rng, &mut t)?;
            Ok(t.totals()[0].martingale())
        })
        .unwrap()
        .into_iter()
        .collect();
        assert!(means.mean().abs() <= 3.0 * means.stderr());
    }

    #[test]
    fn offline_reconstruction_matches_online_tracking() {
        let g = SpatialGrid::new(1.0, 32).unwrap();
        let p = Partition::from_level(&g, &LevelSpec::Uniform { compartments: 4, channels: 5 }, 0).unwrap();
        let model = Model::new(p, benchmarks::two_state(&g), EllipticOperator::constant(&g, 1.0).unwrap(), DtPolicy::default()).unwrap();
        let s0 = HybridState::new(
            MembraneState { u: g.sample(|x| 0.5 * (PI * x).sin()), t: 0.0 },
            ChannelConfiguration::all_in(&model.partition, 2, 0),
            &model.partition,
        )
        .unwrap();
        let fs = TestFunction::sine_modes(&g, 2, 1, 3);
        let settings = RunSettings { t_end: 1.0, method: JumpMethod::IntegratedHazard, cadence: Some(0.005) };
        let path = simulate(&model, s0.clone(), settings, 5, 0).unwrap();
        let offline = martingale_path(&path, &model, &fs, 1e-4).unwrap();
        let mut tracker = MartingaleTracker::new(&model, &fs).unwrap();
        crate::engine::simulate_observed(&model, s0, settings, &mut stream_rng(5, 0), &mut tracker).unwrap();
        let online = tracker.path();
        assert_eq!(offline.times, online.times);
        for f in 0..3 {
            assert_eq!(offline.jumps[f], online.jumps[f]);
            for (a, b) in offline.values[f].iter().zip(&online.values[f]) {
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
        // a coarse cadence is refused
        let coarse = simulate(&model, path.initial.clone(), RunSettings { cadence: Some(0.5), ..settings }, 5, 0).unwrap();
        assert!(matches!(martingale_path(&coarse, &model, &fs, 1e-9), Err(Error::Analysis(_))));
    }

    #[test]
    fn drift_residual_halves_with_compartment_doubling() {
        let g = SpatialGrid::new(1.0, 256).unwrap();
        let k = benchmarks::two_state(&g);
        let u = g.sample(|x| (PI * x).sin());
        let res: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&kk| {
                let p = Partition::from_level(&g, &LevelSpec::Uniform { compartments: kk, channels: 10 }, 0).unwrap();
                let model = Model::new(p, k.clone(), EllipticOperator::constant(&g, 1.0).unwrap(), DtPolicy::default()).unwrap();
                let cfg = ChannelConfiguration::new(&model.partition, 2, vec![vec![7, 3]; kk]).unwrap();
                let s = HybridState::new(MembraneState { u: u.clone(), t: 0.0 }, cfg, &model.partition).unwrap();
                drift_residual(&s, &model).unwrap()
            })
            .collect();
        for w in res.windows(2) {
            let r = w[0] / w[1];
            assert!((1.6..=2.6).contains(&r), "ratio {r} from {res:?}");
        }
    }

    #[test]
    fn jump_bound_dominates_observed_jumps() {
        let g = SpatialGrid::new(1.0, 32).unwrap();
        let p = Partition::from_level(&g, &LevelSpec::Explicit { cells: vec![8, 24], channels: vec![3, 9] }, 0).unwrap();
        let model = Model::new(p, benchmarks::frozen_two_state(&g, 1.0, 1.0), EllipticOperator::constant(&g, 1.0).unwrap(), DtPolicy::default()).unwrap();
        let fs = TestFunction::sine_modes(&g, 2, 1, 4);
        let s0 = HybridState::new(
            MembraneState { u: vec![0.0; 32], t: 0.0 },
            ChannelConfiguration::all_in(&model.partition, 2, 0),
            &model.partition,
        )
        .unwrap();
        let mut tracker = MartingaleTracker::new(&model, &fs).unwrap();
        let settings = RunSettings { t_end: 2.0, method: JumpMethod::IntegratedHazard, cadence: None };
        crate::engine::simulate_observed(&model, s0, settings, &mut stream_rng(8, 0), &mut tracker).unwrap();
        let alpha = model.partition.stats().alpha();
        let bound = jump_bound(&model.partition, &fs);
        for t in tracker.totals() {
            assert!(alpha.sqrt() * t.max_jump <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn zero_ladder_diagnostics_are_zero() {
        let stats = |level| {
            Some(LevelStatistics {
                level,
                alpha: 10.0,
                delta_plus: 0.1,
                trace: (0.0, 0.0),
                drift_residual: (0.0, 0.0),
                max_scaled_jump: 0.0,
                jump_bound: 1.0,
                exceedances: 0,
                replicates: 10,
            })
        };
        let r = condition_diagnostics(&[stats(0), None, stats(2)]);
        assert_eq!(r.incomplete, vec![1]);
        assert!(r.trace_decreasing && r.drift_residual_decreasing && r.jumps_within_bound);
        assert!(r.rows.iter().all(|row| row.estimate == 0.0 || row.metric == "jump_bound"));
    }
}
