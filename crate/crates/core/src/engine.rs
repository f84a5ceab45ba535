//! Exact simulation of the hybrid process: membrane flow between jumps,
//! jump times from the state-dependent survival law, and single-channel
//! post-jump moves.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::channels::{coordinate_field, fill_rate_table, ChannelConfiguration, CoordinateField, JumpEvent, RateTable};
use crate::error::{Error, Result};
use crate::kinetics::ChannelKinetics;
use crate::partition::Partition;
use crate::pde::{check_bounds, DtPolicy, EllipticOperator, FlowStepper, MembraneState, ReactionTerm};

/// Everything that defines one member of the model sequence.
#[derive(Debug, Clone)]
pub struct Model {
    pub partition: Partition,
    pub kinetics: ChannelKinetics,
    pub operator: EllipticOperator,
    pub policy: DtPolicy,
}

impl Model {
    pub fn new(
        partition: Partition,
        kinetics: ChannelKinetics,
        operator: EllipticOperator,
        policy: DtPolicy,
    ) -> Result<Self> {
        let n = partition.grid().len();
        if kinetics.nodes() != n || operator.grid().len() != n {
            return Err(Error::Input(format!(
                "grid mismatch: partition {n}, kinetics {}, operator {}",
                kinetics.nodes(),
                operator.grid().len()
            )));
        }
        if !(policy.dt_max > 0.0 && policy.safety > 0.0) {
            return Err(Error::Input(format!("invalid step policy {policy:?}")));
        }
        Ok(Self {
            partition,
            kinetics,
            operator,
            policy,
        })
    }

    pub fn states(&self) -> usize {
        self.kinetics.states()
    }

    pub fn monotone_cap(&self) -> f64 {
        self.operator.monotone_dt(self.kinetics.max_total_conductance())
    }

    /// `Λ̄ = Σ_k l(k) · m(m−1) · q̄`, the thinning envelope.
    pub fn thinning_bound(&self) -> f64 {
        let m = self.states() as f64;
        self.partition.total_channels() as f64 * m * (m - 1.0) * self.kinetics.rate_bound()
    }

    /// True when no jump can ever occur from `config`.
    fn absorbing(&self, config: &ChannelConfiguration, total_rate: f64) -> bool {
        let _ = config;
        self.kinetics.is_null() || (total_rate == 0.0 && self.kinetics.is_voltage_independent())
    }
}

/// The pair (membrane, channel configuration) plus the cached coordinate field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub membrane: MembraneState,
    pub config: ChannelConfiguration,
    pub z: CoordinateField,
}

impl HybridState {
    pub fn new(membrane: MembraneState, config: ChannelConfiguration, partition: &Partition) -> Result<Self> {
        config.check_conservation(partition)?;
        let z = coordinate_field(&config, partition)?;
        Ok(Self { membrane, config, z })
    }

    /// Checks that the cached field matches the configuration.
    pub fn verify(&self, partition: &Partition) -> Result<()> {
        self.config.check_conservation(partition)?;
        if coordinate_field(&self.config, partition)? != self.z {
            return Err(Error::Internal("stale coordinate field".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum JumpMethod {
    #[default]
    IntegratedHazard,
    Thinning,
}

/// One flow sub-step `[t0, t1]` with the configuration held fixed.
pub struct Substep<'a> {
    pub t0: f64,
    pub t1: f64,
    pub u0: &'a [f64],
    pub u1: &'a [f64],
    pub config: &'a ChannelConfiguration,
    pub z: &'a CoordinateField,
    pub rates0: &'a RateTable,
    pub rates1: &'a RateTable,
}

/// Receives the sub-step grid, jumps and snapshots of a running simulation.
pub trait PathObserver {
    fn on_substep(&mut self, _step: &Substep<'_>) -> Result<()> {
        Ok(())
    }

    fn on_jump(&mut self, _t: f64, _event: JumpEvent, _state: &HybridState) -> Result<()> {
        Ok(())
    }

    fn on_snapshot(&mut self, _state: &HybridState, _rates: &RateTable) -> Result<()> {
        Ok(())
    }
}

impl PathObserver for () {}

impl<A: PathObserver, B: PathObserver> PathObserver for (A, B) {
    fn on_substep(&mut self, step: &Substep<'_>) -> Result<()> {
        self.0.on_substep(step)?;
        self.1.on_substep(step)
    }

    fn on_jump(&mut self, t: f64, event: JumpEvent, state: &HybridState) -> Result<()> {
        self.0.on_jump(t, event, state)?;
        self.1.on_jump(t, event, state)
    }

    fn on_snapshot(&mut self, state: &HybridState, rates: &RateTable) -> Result<()> {
        self.0.on_snapshot(state, rates)?;
        self.1.on_snapshot(state, rates)
    }
}

/// Snapshot times `t0 + c·Δ` (the start is included) up to and including
/// the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cadence {
    interval: Option<f64>,
    origin: f64,
    next_index: u64,
}

impl Cadence {
    pub fn none() -> Self {
        Self {
            interval: None,
            origin: 0.0,
            next_index: 0,
        }
    }

    pub fn every(interval: f64, origin: f64) -> Result<Self> {
        if !(interval.is_finite() && interval > 0.0) {
            return Err(Error::Input(format!("invalid snapshot cadence {interval}")));
        }
        Ok(Self {
            interval: Some(interval),
            origin,
            next_index: 0,
        })
    }

    fn next_time(&self) -> f64 {
        match self.interval {
            Some(dt) => self.origin + self.next_index as f64 * dt,
            None => f64::INFINITY,
        }
    }

    fn advance(&mut self) {
        self.next_index += 1;
    }
}

/// Outcome of a jump-clock draw.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpTime {
    /// The clock rang at this time; the simulator sits at the pre-jump state.
    At(f64),
    /// No jump before the horizon; the simulator sits at the horizon.
    Horizon,
    /// No jump can ever occur (`τ = +∞`).
    Never,
}

/// Mutable simulation state: the hybrid state, the rate table at the current
/// time, and scratch space for proposed sub-steps.
pub struct Simulator<'m> {
    model: &'m Model,
    state: HybridState,
    stepper: FlowStepper,
    reaction: ReactionTerm,
    rates: RateTable,
    cap: f64,
    bounds: (f64, f64),
    averages: Vec<f64>,
    next_u: Vec<f64>,
    next_rates: RateTable,
    cadence: Cadence,
}

impl<'m> Simulator<'m> {
    pub fn new(model: &'m Model, initial: HybridState, cadence: Cadence) -> Result<Self> {
        initial.verify(&model.partition)?;
        let bounds = model.kinetics.voltage_bounds();
        check_bounds(&initial.membrane.u, bounds, initial.membrane.t)?;
        let reaction = ReactionTerm::from_coordinates(&initial.z, &model.partition, &model.kinetics);
        let mut averages = Vec::new();
        let mut rates = RateTable::default();
        fill_rate_table(
            &initial.membrane.u,
            &initial.config,
            &model.kinetics,
            &model.partition,
            &mut averages,
            &mut rates,
        )?;
        let n = initial.membrane.u.len();
        let mut cadence = cadence;
        while cadence.next_time() < initial.membrane.t {
            cadence.advance();
        }
        Ok(Self {
            model,
            stepper: FlowStepper::new(model.operator.clone()),
            reaction,
            cap: model.monotone_cap(),
            bounds,
            averages,
            next_u: vec![0.0; n],
            next_rates: rates.clone(),
            rates,
            state: initial,
            cadence,
        })
    }

    pub fn state(&self) -> &HybridState {
        &self.state
    }

    pub fn into_state(self) -> HybridState {
        self.state
    }

    pub fn rates(&self) -> &RateTable {
        &self.rates
    }

    pub fn time(&self) -> f64 {
        self.state.membrane.t
    }

    fn propose(&mut self, dt: f64) -> Result<()> {
        self.stepper
            .step(&self.state.membrane.u, &self.reaction, dt, &mut self.next_u)?;
        check_bounds(&self.next_u, self.bounds, self.state.membrane.t + dt)?;
        fill_rate_table(
            &self.next_u,
            &self.state.config,
            &self.model.kinetics,
            &self.model.partition,
            &mut self.averages,
            &mut self.next_rates,
        )
    }

    fn commit(&mut self, t1: f64, observer: &mut impl PathObserver) -> Result<()> {
        observer.on_substep(&Substep {
            t0: self.state.membrane.t,
            t1,
            u0: &self.state.membrane.u,
            u1: &self.next_u,
            config: &self.state.config,
            z: &self.state.z,
            rates0: &self.rates,
            rates1: &self.next_rates,
        })?;
        std::mem::swap(&mut self.state.membrane.u, &mut self.next_u);
        std::mem::swap(&mut self.rates, &mut self.next_rates);
        self.state.membrane.t = t1;
        Ok(())
    }

    fn emit_due_snapshot(&mut self, observer: &mut impl PathObserver) -> Result<()> {
        if self.cadence.next_time() == self.state.membrane.t {
            observer.on_snapshot(&self.state, &self.rates)?;
            self.cadence.advance();
        }
        Ok(())
    }

    /// Next stopping point: the earlier of the horizon and the next snapshot.
    fn stop(&self, horizon: f64) -> f64 {
        horizon.min(self.cadence.next_time())
    }

    /// Flows deterministically to `target` (no jump clock).
    pub fn flow_to(&mut self, target: f64, observer: &mut impl PathObserver) -> Result<()> {
        self.emit_due_snapshot(observer)?;
        while self.time() < target {
            let t = self.time();
            let stop = self.stop(target);
            let mut dt = self.model.policy.dt(self.rates.total, self.cap);
            let t1 = if t + dt >= stop {
                dt = stop - t;
                stop
            } else {
                t + dt
            };
            self.propose(dt)?;
            self.commit(t1, observer)?;
            self.emit_due_snapshot(observer)?;
        }
        Ok(())
    }

    /// Runs the jump clock until it rings or the horizon is reached.
    pub fn next_jump(
        &mut self,
        rng: &mut impl Rng,
        method: JumpMethod,
        horizon: f64,
        observer: &mut impl PathObserver,
    ) -> Result<JumpTime> {
        if self.model.absorbing(&self.state.config, self.rates.total) {
            self.flow_to(horizon, observer)?;
            return Ok(JumpTime::Never);
        }
        match method {
            JumpMethod::IntegratedHazard => self.hazard_clock(rng, horizon, observer),
            JumpMethod::Thinning => self.thinning_clock(rng, horizon, observer),
        }
    }

    fn hazard_clock(&mut self, rng: &mut impl Rng, horizon: f64, observer: &mut impl PathObserver) -> Result<JumpTime> {
        let target: f64 = rng.sample(Exp1);
        let mut hazard = 0.0;
        self.emit_due_snapshot(observer)?;
        while self.time() < horizon {
            let t = self.time();
            let stop = self.stop(horizon);
            let mut dt = self.model.policy.dt(self.rates.total, self.cap);
            let t1 = if t + dt >= stop {
                dt = stop - t;
                stop
            } else {
                t + dt
            };
            self.propose(dt)?;
            let increment = 0.5 * (self.rates.total + self.next_rates.total) * dt;
            if increment > 0.0 && hazard + increment >= target {
                // linear interpolation of the cumulative hazard inside the sub-step
                let frac = ((target - hazard) / increment).clamp(0.0, 1.0);
                let partial = frac * dt;
                let tau = if frac == 1.0 { t1 } else { t + partial };
                self.propose(tau - t)?;
                self.commit(tau, observer)?;
                // the clock may ring exactly on a snapshot time
                self.emit_due_snapshot(observer)?;
                return Ok(JumpTime::At(tau));
            }
            hazard += increment;
            self.commit(t1, observer)?;
            self.emit_due_snapshot(observer)?;
        }
        Ok(JumpTime::Horizon)
    }

    fn thinning_clock(&mut self, rng: &mut impl Rng, horizon: f64, observer: &mut impl PathObserver) -> Result<JumpTime> {
        let bound = self.model.thinning_bound();
        loop {
            let gap: f64 = rng.sample::<f64, _>(Exp1) / bound;
            let candidate = self.time() + gap;
            if candidate >= horizon {
                self.flow_to(horizon, observer)?;
                return Ok(JumpTime::Horizon);
            }
            self.flow_to(candidate, observer)?;
            let rate = self.rates.total;
            if rate > bound * (1.0 + 1e-12) {
                return Err(Error::ThinningBound { rate, bound });
            }
            let v: f64 = rng.gen();
            if v * bound < rate {
                return Ok(JumpTime::At(candidate));
            }
        }
    }

    /// Draws and applies the post-jump configuration at the current time.
    pub fn jump(&mut self, rng: &mut impl Rng, observer: &mut impl PathObserver) -> Result<JumpEvent> {
        let (event, config) = sample_post_jump(&self.state.config, &self.rates, rng)?;
        self.state.config = config;
        self.state.z = coordinate_field(&self.state.config, &self.model.partition)?;
        debug_assert!(self.state.config.check_conservation(&self.model.partition).is_ok());
        self.reaction
            .update_from_coordinates(&self.state.z, &self.model.partition, &self.model.kinetics);
        fill_rate_table(
            &self.state.membrane.u,
            &self.state.config,
            &self.model.kinetics,
            &self.model.partition,
            &mut self.averages,
            &mut self.rates,
        )?;
        observer.on_jump(self.state.membrane.t, event, &self.state)?;
        Ok(event)
    }

    /// Applies a known event (used by replay).
    fn apply_event(&mut self, event: JumpEvent) -> Result<()> {
        self.state.config.apply(event)?;
        self.state.z = coordinate_field(&self.state.config, &self.model.partition)?;
        self.reaction
            .update_from_coordinates(&self.state.z, &self.model.partition, &self.model.kinetics);
        fill_rate_table(
            &self.state.membrane.u,
            &self.state.config,
            &self.model.kinetics,
            &self.model.partition,
            &mut self.averages,
            &mut self.rates,
        )
    }
}

/// Result of [`sample_jump_time`].
#[derive(Debug, Clone, PartialEq)]
pub struct JumpSample {
    /// Jump time, `+∞` when no jump occurs before the horizon.
    pub tau: f64,
    /// Membrane and configuration at `τ` (or at the horizon).
    pub state: HybridState,
}

/// Draws the next jump time from `state` and flows the membrane to it.
pub fn sample_jump_time(
    model: &Model,
    state: HybridState,
    rng: &mut impl Rng,
    method: JumpMethod,
    horizon: f64,
) -> Result<JumpSample> {
    let mut sim = Simulator::new(model, state, Cadence::none())?;
    let tau = match sim.next_jump(rng, method, horizon, &mut ())? {
        JumpTime::At(t) => t,
        JumpTime::Horizon | JumpTime::Never => f64::INFINITY,
    };
    Ok(JumpSample {
        tau,
        state: sim.into_state(),
    })
}

/// Selects event `(k, i → j)` with probability `rate/Λ` and moves one channel.
pub fn sample_post_jump(
    config: &ChannelConfiguration,
    rates: &RateTable,
    rng: &mut impl Rng,
) -> Result<(JumpEvent, ChannelConfiguration)> {
    if !(rates.total > 0.0) {
        return Err(Error::Internal(format!(
            "post-jump draw with total rate {}",
            rates.total
        )));
    }
    let v: f64 = rng.gen();
    let idx = rates.select(v)?;
    let (event, _) = *rates
        .events
        .get(idx)
        .ok_or_else(|| Error::Internal(format!("event index {idx} out of range")))?;
    let mut next = config.clone();
    next.apply(event)?;
    Ok((event, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub t: f64,
    pub event: JumpEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub u: Vec<f64>,
    pub config: ChannelConfiguration,
}

/// A simulated path: exact jump log, cadence snapshots and terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPath {
    pub seed: u64,
    pub stream: u64,
    pub initial: HybridState,
    pub jumps: Vec<JumpRecord>,
    pub snapshots: Vec<Snapshot>,
    pub terminal: HybridState,
}

/// Collects jumps and snapshots into a [`HybridPath`].
#[derive(Debug, Default)]
pub struct PathRecorder {
    pub jumps: Vec<JumpRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl PathObserver for PathRecorder {
    fn on_jump(&mut self, t: f64, event: JumpEvent, _state: &HybridState) -> Result<()> {
        self.jumps.push(JumpRecord { t, event });
        Ok(())
    }

    fn on_snapshot(&mut self, state: &HybridState, _rates: &RateTable) -> Result<()> {
        self.snapshots.push(Snapshot {
            t: state.membrane.t,
            u: state.membrane.u.clone(),
            config: state.config.clone(),
        });
        Ok(())
    }
}

/// Seeded generator for replicate `stream` of a study.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub t_end: f64,
    pub method: JumpMethod,
    pub cadence: Option<f64>,
}

/// Runs the hybrid process on `[t0, t_end]`, reporting to `observer`.
/// Returns the terminal state and the number of jumps.
pub fn simulate_observed(
    model: &Model,
    initial: HybridState,
    settings: RunSettings,
    rng: &mut impl Rng,
    observer: &mut impl PathObserver,
) -> Result<(HybridState, usize)> {
    let t0 = initial.membrane.t;
    if !(settings.t_end > t0) {
        return Err(Error::Input(format!(
            "end time {} must exceed start time {t0}",
            settings.t_end
        )));
    }
    let cadence = match settings.cadence {
        Some(dt) => Cadence::every(dt, t0)?,
        None => Cadence::none(),
    };
    let mut sim = Simulator::new(model, initial, cadence)?;
    let mut jumps = 0;
    loop {
        let now = sim.time();
        match sim
            .next_jump(rng, settings.method, settings.t_end, observer)
            .map_err(|e| e.at_time(now))?
        {
            JumpTime::At(t) => {
                sim.jump(rng, observer).map_err(|e| e.at_time(t))?;
                jumps += 1;
            }
            JumpTime::Horizon | JumpTime::Never => break,
        }
    }
    Ok((sim.into_state(), jumps))
}

/// Runs the hybrid process and records the full path.
pub fn simulate(
    model: &Model,
    initial: HybridState,
    settings: RunSettings,
    seed: u64,
    stream: u64,
) -> Result<HybridPath> {
    let mut rng = stream_rng(seed, stream);
    let mut rec = PathRecorder::default();
    let (terminal, _) = simulate_observed(model, initial.clone(), settings, &mut rng, &mut rec)?;
    Ok(HybridPath {
        seed,
        stream,
        initial,
        jumps: rec.jumps,
        snapshots: rec.snapshots,
        terminal,
    })
}

/// Re-runs the flow through the recorded jump log, returning the snapshots
/// it produces at the path's snapshot times.
pub fn replay(model: &Model, path: &HybridPath, cadence: Option<f64>) -> Result<Vec<Snapshot>> {
    let t0 = path.initial.membrane.t;
    let cadence = match cadence {
        Some(dt) => Cadence::every(dt, t0)?,
        None => Cadence::none(),
    };
    let mut sim = Simulator::new(model, path.initial.clone(), cadence)?;
    let mut rec = PathRecorder::default();
    for j in &path.jumps {
        sim.flow_to(j.t, &mut rec)?;
        sim.apply_event(j.event)?;
    }
    sim.flow_to(path.terminal.membrane.t, &mut rec)?;
    Ok(rec.snapshots)
}
