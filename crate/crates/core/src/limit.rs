//! The fluid limit: the membrane equation driven by occupation fields `p_i`
//! that follow the nodewise master equation
//! `ṗ_j = Σ_{i≠j} q_ij(u) p_i − q_ji(u) p_j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::ChannelKinetics;
use crate::pde::{check_bounds, EllipticOperator, FlowStepper, ReactionTerm};

/// Largest admissible `q̄ · dt` for the explicit kinetics stage.
pub const KINETICS_STEP_FRACTION: f64 = 0.1;
/// Tolerated nodewise deviation of `Σ_i p_i` from 1.
pub const MASS_TOLERANCE: f64 = 1e-8;
/// Tolerance on `Σ_i p_i = 1` for initial data.
pub const INITIAL_MASS_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitState {
    pub u: Vec<f64>,
    /// `p[i][x]`, one grid function per channel state.
    pub p: Vec<Vec<f64>>,
    pub t: f64,
}

impl LimitState {
    /// Largest nodewise `|Σ_i p_i − 1|`.
    pub fn mass_defect(&self) -> f64 {
        mass_defect(&self.p)
    }

    pub fn validate(&self, kinetics: &ChannelKinetics) -> Result<()> {
        let n = kinetics.nodes();
        if self.u.len() != n || self.p.len() != kinetics.states() || self.p.iter().any(|p| p.len() != n) {
            return Err(Error::Input("limit state does not match the model dimensions".into()));
        }
        let defect = self.mass_defect();
        if defect > INITIAL_MASS_TOLERANCE {
            return Err(Error::Input(format!("occupation fields sum to 1 ± {defect:e}")));
        }
        if let Some(v) = self.p.iter().flatten().find(|v| !(**v >= 0.0 && **v <= 1.0 + INITIAL_MASS_TOLERANCE)) {
            return Err(Error::Input(format!("occupation value {v} outside [0, 1]")));
        }
        check_bounds(&self.u, kinetics.voltage_bounds(), self.t)
    }
}

pub(crate) fn mass_defect(p: &[Vec<f64>]) -> f64 {
    let n = p.first().map_or(0, Vec::len);
    (0..n)
        .map(|x| (p.iter().map(|pi| pi[x]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Nodewise evaluator of the kinetics drift `F_j(p, u)`.
#[derive(Debug, Clone, Copy)]
pub struct KineticsVectorField<'a> {
    kinetics: &'a ChannelKinetics,
}

impl<'a> KineticsVectorField<'a> {
    pub fn new(kinetics: &'a ChannelKinetics) -> Self {
        Self { kinetics }
    }

    /// Writes `F(p, u)` into `out`. The fluxes `q_ij p_i` are added to state
    /// `j` and removed from state `i`; the last component is then set to minus
    /// the sum of the others so that `Σ_j F_j` is exactly zero when summed in
    /// index order.
    pub fn eval(&self, p: &[Vec<f64>], u: &[f64], out: &mut [Vec<f64>]) -> Result<()> {
        let m = self.kinetics.states();
        for o in out.iter_mut() {
            o.fill(0.0);
        }
        for tr in self.kinetics.transitions() {
            for x in 0..u.len() {
                let flux = self.kinetics.eval_checked(tr, u[x])? * p[tr.from][x];
                out[tr.to][x] += flux;
                out[tr.from][x] -= flux;
            }
        }
        for x in 0..u.len() {
            let mut s = 0.0;
            for o in out.iter().take(m - 1) {
                s += o[x];
            }
            out[m - 1][x] = -s;
        }
        Ok(())
    }

    /// Allocating convenience wrapper.
    pub fn evaluate(&self, p: &[Vec<f64>], u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; u.len()]; self.kinetics.states()];
        self.eval(p, u, &mut out)?;
        Ok(out)
    }
}

/// Fixed-step IMEX integrator of the limit system: Crank–Nicolson for `u`
/// with the reaction frozen at the step start, Heun for `p` using `u` at both
/// ends of the step.
#[derive(Debug, Clone)]
pub struct LimitSolver<'a> {
    kinetics: &'a ChannelKinetics,
    stepper: FlowStepper,
    reaction: ReactionTerm,
    dt_cap: f64,
    next_u: Vec<f64>,
    k1: Vec<Vec<f64>>,
    k2: Vec<Vec<f64>>,
    stage: Vec<Vec<f64>>,
}

impl<'a> LimitSolver<'a> {
    pub fn new(kinetics: &'a ChannelKinetics, operator: &EllipticOperator) -> Result<Self> {
        let n = operator.grid().len();
        if kinetics.nodes() != n {
            return Err(Error::Input(format!(
                "kinetics sampled on {} nodes, operator on {n}",
                kinetics.nodes()
            )));
        }
        let m = kinetics.states();
        let q = kinetics.rate_bound();
        let kin_cap = if q > 0.0 { KINETICS_STEP_FRACTION / q } else { f64::INFINITY };
        let dt_cap = kin_cap.min(operator.monotone_dt(kinetics.max_total_conductance()));
        Ok(Self {
            kinetics,
            stepper: FlowStepper::new(operator.clone()),
            reaction: ReactionTerm::zero(n),
            dt_cap,
            next_u: vec![0.0; n],
            k1: vec![vec![0.0; n]; m],
            k2: vec![vec![0.0; n]; m],
            stage: vec![vec![0.0; n]; m],
        })
    }

    /// Largest step the solver accepts (kinetics and monotonicity caps).
    pub fn dt_cap(&self) -> f64 {
        self.dt_cap
    }

    pub fn kinetics(&self) -> &ChannelKinetics {
        self.kinetics
    }

    /// One step of size `min(dt, cap)`; returns the step actually taken.
    pub fn step_limit(&mut self, state: &mut LimitState, dt: f64) -> Result<f64> {
        let dt = dt.min(self.dt_cap);
        self.drift_step(state, dt)?;
        check_bounds(&state.u, self.kinetics.voltage_bounds(), state.t)?;
        self.check_occupations(state)?;
        Ok(dt)
    }

    /// The deterministic part of a step, shared with the Langevin scheme.
    /// Checks mass drift but not the pointwise bounds.
    pub(crate) fn drift_step(&mut self, state: &mut LimitState, dt: f64) -> Result<()> {
        let field = KineticsVectorField::new(self.kinetics);
        self.reaction.update_from_fields(&state.p, self.kinetics);
        self.stepper.step(&state.u, &self.reaction, dt, &mut self.next_u)?;
        field.eval(&state.p, &state.u, &mut self.k1)?;
        for ((s, p), k) in self.stage.iter_mut().zip(&state.p).zip(&self.k1) {
            for x in 0..s.len() {
                s[x] = p[x] + dt * k[x];
            }
        }
        field.eval(&self.stage, &self.next_u, &mut self.k2)?;
        for ((p, a), b) in state.p.iter_mut().zip(&self.k1).zip(&self.k2) {
            for x in 0..p.len() {
                p[x] += 0.5 * dt * (a[x] + b[x]);
            }
        }
        std::mem::swap(&mut state.u, &mut self.next_u);
        state.t += dt;
        let defect = state.mass_defect();
        if defect > MASS_TOLERANCE {
            return Err(Error::Scheme {
                time: state.t,
                detail: format!("occupation mass drifted by {defect:e}"),
            });
        }
        Ok(())
    }

    fn check_occupations(&self, state: &LimitState) -> Result<()> {
        for (i, p) in state.p.iter().enumerate() {
            if let Some((x, v)) = p
                .iter()
                .enumerate()
                .find(|(_, v)| !(**v >= -1e-12 && **v <= 1.0 + INITIAL_MASS_TOLERANCE))
            {
                return Err(Error::Scheme {
                    time: state.t,
                    detail: format!("p[{i}] = {v} at node {x} left [0, 1]"),
                });
            }
        }
        Ok(())
    }
}

/// Step schedule shared by the limit and Langevin solvers: steps of at most
/// `dt`, landing exactly on every output time and on `t_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_end: f64,
    pub dt: f64,
    /// Output interval; `None` records only the start and the end.
    pub cadence: Option<f64>,
}

impl Schedule {
    pub(crate) fn validate(&self, t0: f64) -> Result<()> {
        if !(self.t_end >= t0 && self.t_end.is_finite()) {
            return Err(Error::Input(format!("end time {} before start {t0}", self.t_end)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Input(format!("invalid step {}", self.dt)));
        }
        if let Some(c) = self.cadence {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Input(format!("invalid cadence {c}")));
            }
        }
        Ok(())
    }

    /// Output times `t0, t0 + Δ, …` strictly before `t_end`, then `t_end`.
    pub fn output_times(&self, t0: f64) -> Vec<f64> {
        let mut out = vec![t0];
        if let Some(c) = self.cadence {
            let mut k = 1u64;
            loop {
                let t = t0 + k as f64 * c;
                if t >= self.t_end {
                    break;
                }
                out.push(t);
                k += 1;
            }
        }
        if self.t_end > t0 {
            out.push(self.t_end);
        }
        out
    }

    /// Runs `step(state, dt)` between consecutive output times, calling
    /// `record` at each of them.
    pub(crate) fn drive<S>(
        &self,
        state: &mut S,
        time: impl Fn(&S) -> f64,
        set_time: impl Fn(&mut S, f64),
        mut step: impl FnMut(&mut S, f64) -> Result<f64>,
        mut record: impl FnMut(&S) -> Result<()>,
    ) -> Result<()> {
        let times = self.output_times(time(state));
        record(state)?;
        for &stop in &times[1..] {
            while time(state) < stop {
                let t = time(state);
                let remaining = stop - t;
                let taken = step(state, self.dt.min(remaining))?;
                // land exactly on the output time
                if taken >= remaining || t + taken >= stop {
                    set_time(state, stop);
                }
            }
            record(state)?;
        }
        Ok(())
    }
}

/// Integrates the limit system from `initial`, returning the states at the
/// output times of `schedule`.
pub fn solve_limit(
    kinetics: &ChannelKinetics,
    operator: &EllipticOperator,
    initial: &LimitState,
    schedule: Schedule,
) -> Result<Vec<LimitState>> {
    initial.validate(kinetics)?;
    schedule.validate(initial.t)?;
    let mut solver = LimitSolver::new(kinetics, operator)?;
    let mut state = initial.clone();
    let mut out = Vec::new();
    schedule.drive(
        &mut state,
        |s| s.t,
        |s, t| s.t = t,
        |s, dt| solver.step_limit(s, dt),
        |s| {
            out.push(s.clone());
            Ok(())
        },
    )?;
    Ok(out)
}

/// Spatially uniform occupation fields.
pub fn uniform_fields(p: &[f64], nodes: usize) -> Vec<Vec<f64>> {
    p.iter().map(|&v| vec![v; nodes]).collect()
}

/// Growth rate of the separation of two limit solutions: the largest value
/// of `log(‖d(t)‖/‖d(0)‖)/t` over the output times, with `‖·‖` the
/// Euclidean norm over `(u, p)` weighted by the grid spacing.
pub fn divergence_rate(
    kinetics: &ChannelKinetics,
    operator: &EllipticOperator,
    a: &LimitState,
    b: &LimitState,
    schedule: Schedule,
) -> Result<f64> {
    let ta = solve_limit(kinetics, operator, a, schedule)?;
    let tb = solve_limit(kinetics, operator, b, schedule)?;
    let h = operator.grid().spacing();
    let dist = |x: &LimitState, y: &LimitState| {
        let mut s: f64 = x.u.iter().zip(&y.u).map(|(p, q)| (p - q) * (p - q)).sum();
        for (pi, qi) in x.p.iter().zip(&y.p) {
            s += pi.iter().zip(qi).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
        (s * h).sqrt()
    };
    let d0 = dist(&ta[0], &tb[0]);
    if d0 == 0.0 {
        return Err(Error::Input("initial states coincide".into()));
    }
    let mut rate = f64::NEG_INFINITY;
    for (x, y) in ta.iter().zip(&tb).skip(1) {
        let dt = x.t - ta[0].t;
        if dt > 0.0 {
            rate = rate.max((dist(x, y) / d0).ln() / dt);
        }
    }
    Ok(rate)
}
