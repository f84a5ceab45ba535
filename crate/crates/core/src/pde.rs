//! Membrane equation `u̇ = a(x) u_xx + Σ_i g_i z_i (E_i − u)` with homogeneous
//! Dirichlet data, stepped by Crank–Nicolson diffusion and explicit reaction.
//!
//! The same stepper advances the membrane between jumps of the hybrid
//! process, in the deterministic limit and in the Langevin scheme.

use serde::{Deserialize, Serialize};

use crate::channels::CoordinateField;
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kinetics::ChannelKinetics;
use crate::partition::Partition;

/// Slack allowed on the pointwise bounds `[ū₋, ū₊]` after a step.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Hazard samples per expected inter-jump gap.
pub const SUBSTEPS_PER_GAP: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembraneState {
    pub u: Vec<f64>,
    pub t: f64,
}

/// `A u = a(x) u_xx` on the cell-centred grid with ghost values `−u` across
/// each boundary (so the Dirichlet value 0 sits on the boundary itself).
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticOperator {
    grid: SpatialGrid,
    diffusion: Vec<f64>,
}

impl EllipticOperator {
    pub fn new(grid: &SpatialGrid, diffusion: Vec<f64>) -> Result<Self> {
        if diffusion.len() != grid.len() {
            return Err(Error::Input(format!(
                "diffusion field has {} values for {} nodes",
                diffusion.len(),
                grid.len()
            )));
        }
        if let Some((i, a)) = diffusion
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0))
        {
            return Err(Error::Input(format!(
                "diffusion must be strictly positive, a({i}) = {a}"
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            diffusion,
        })
    }

    pub fn constant(grid: &SpatialGrid, a: f64) -> Result<Self> {
        Self::new(grid, vec![a; grid.len()])
    }

    /// Skips the ellipticity check; lets tests switch diffusion off.
    #[cfg(test)]
    pub(crate) fn new_unchecked(grid: &SpatialGrid, diffusion: Vec<f64>) -> Self {
        Self {
            grid: grid.clone(),
            diffusion,
        }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    /// Largest step for which the IMEX update is monotone:
    /// `1.5 dt max(a)/h² + dt max Σ g_i ≤ 1`. Under it every step maps
    /// `[ū₋, ū₊]` into itself.
    pub fn monotone_dt(&self, max_total_conductance: f64) -> f64 {
        let h = self.grid.spacing();
        let amax = self.diffusion.iter().cloned().fold(0.0, f64::max);
        let rate = 1.5 * amax / (h * h) + max_total_conductance;
        if rate > 0.0 {
            1.0 / rate
        } else {
            f64::INFINITY
        }
    }

    /// `(A u)_i`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        let inv_h2 = 1.0 / (self.grid.spacing() * self.grid.spacing());
        for i in 0..n {
            let left = if i == 0 { -u[0] } else { u[i - 1] };
            let right = if i + 1 == n { -u[n - 1] } else { u[i + 1] };
            out[i] = self.diffusion[i] * (left - 2.0 * u[i] + right) * inv_h2;
        }
    }
}

/// Nodewise reaction `B(z, u) = Σ_i g_i z_i (E_i − u) = s_E − s u`, stored as
/// the two coefficient fields `s = Σ g_i z_i` and `s_E = Σ g_i z_i E_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionTerm {
    sum_gz: Vec<f64>,
    sum_gze: Vec<f64>,
}

impl ReactionTerm {
    pub fn zero(nodes: usize) -> Self {
        Self {
            sum_gz: vec![0.0; nodes],
            sum_gze: vec![0.0; nodes],
        }
    }

    pub fn from_coordinates(z: &CoordinateField, partition: &Partition, kinetics: &ChannelKinetics) -> Self {
        let mut r = Self::zero(partition.grid().len());
        r.update_from_coordinates(z, partition, kinetics);
        r
    }

    pub fn update_from_coordinates(
        &mut self,
        z: &CoordinateField,
        partition: &Partition,
        kinetics: &ChannelKinetics,
    ) {
        z.reaction_coefficients(partition, kinetics, &mut self.sum_gz, &mut self.sum_gze);
    }

    /// From nodal occupation fields `p_i(x)`.
    pub fn from_fields(p: &[Vec<f64>], kinetics: &ChannelKinetics) -> Self {
        let mut r = Self::zero(kinetics.nodes());
        r.update_from_fields(p, kinetics);
        r
    }

    pub fn update_from_fields(&mut self, p: &[Vec<f64>], kinetics: &ChannelKinetics) {
        self.sum_gz.fill(0.0);
        self.sum_gze.fill(0.0);
        let e = kinetics.reversal();
        for (i, pi) in p.iter().enumerate() {
            let g = kinetics.conductance(i);
            for x in 0..pi.len() {
                let gz = g[x] * pi[x];
                self.sum_gz[x] += gz;
                self.sum_gze[x] += gz * e[i];
            }
        }
    }

    pub fn eval(&self, u: &[f64], out: &mut [f64]) {
        for x in 0..u.len() {
            out[x] = self.sum_gze[x] - self.sum_gz[x] * u[x];
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sum_gz.iter().all(|v| *v == 0.0) && self.sum_gze.iter().all(|v| *v == 0.0)
    }
}

/// Crank–Nicolson/explicit-reaction stepper with a cached tridiagonal
/// factorisation (recomputed whenever `dt` changes).
#[derive(Debug, Clone)]
pub struct FlowStepper {
    op: EllipticOperator,
    cached_dt: f64,
    lower: Vec<f64>,
    upper_prime: Vec<f64>,
    inv_pivot: Vec<f64>,
    rhs: Vec<f64>,
}

impl FlowStepper {
    pub fn new(op: EllipticOperator) -> Self {
        let n = op.grid.len();
        Self {
            op,
            cached_dt: f64::NAN,
            lower: vec![0.0; n],
            upper_prime: vec![0.0; n],
            inv_pivot: vec![0.0; n],
            rhs: vec![0.0; n],
        }
    }

    pub fn operator(&self) -> &EllipticOperator {
        &self.op
    }

    fn factor(&mut self, dt: f64) -> Result<()> {
        if dt == self.cached_dt {
            return Ok(());
        }
        let n = self.rhs.len();
        let h = self.op.grid.spacing();
        let c = 0.5 * dt / (h * h);
        // M = I − (dt/2) A: off-diagonals −c a_i, diagonal 1 + 2 c a_i
        // (1 + 3 c a_i in the two boundary rows).
        let mut prev_upper = 0.0;
        for i in 0..n {
            let a = self.op.diffusion[i];
            let off = -c * a;
            let diag = if i == 0 || i + 1 == n {
                1.0 + 3.0 * c * a
            } else {
                1.0 + 2.0 * c * a
            };
            let lower = if i == 0 { 0.0 } else { off };
            let pivot = diag - lower * prev_upper;
            if !(pivot.is_finite() && pivot != 0.0) {
                return Err(Error::Numerical(format!(
                    "tridiagonal pivot {pivot} at row {i} (dt = {dt})"
                )));
            }
            let upper = if i + 1 == n { 0.0 } else { off };
            self.lower[i] = lower;
            self.inv_pivot[i] = 1.0 / pivot;
            self.upper_prime[i] = upper / pivot;
            prev_upper = self.upper_prime[i];
        }
        self.cached_dt = dt;
        Ok(())
    }

    /// `out = (I − dt/2 A)⁻¹ [(I + dt/2 A) u + dt B(z, u)]`.
    pub fn step(&mut self, u: &[f64], reaction: &ReactionTerm, dt: f64, out: &mut [f64]) -> Result<()> {
        if !(dt.is_finite() && dt >= 0.0) {
            return Err(Error::Numerical(format!("invalid step {dt}")));
        }
        self.factor(dt)?;
        let n = u.len();
        let h = self.op.grid.spacing();
        let c = 0.5 * dt / (h * h);
        for i in 0..n {
            let left = if i == 0 { -u[0] } else { u[i - 1] };
            let right = if i + 1 == n { -u[n - 1] } else { u[i + 1] };
            let diffusion = c * self.op.diffusion[i] * (left - 2.0 * u[i] + right);
            let react = dt * (reaction.sum_gze[i] - reaction.sum_gz[i] * u[i]);
            self.rhs[i] = u[i] + diffusion + react;
        }
        // forward sweep
        let mut prev = 0.0;
        for i in 0..n {
            let d = (self.rhs[i] - self.lower[i] * prev) * self.inv_pivot[i];
            self.rhs[i] = d;
            prev = d;
        }
        // back substitution
        let mut next = 0.0;
        for i in (0..n).rev() {
            let x = self.rhs[i] - self.upper_prime[i] * next;
            out[i] = x;
            next = x;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite membrane value after step".into()));
        }
        Ok(())
    }
}

/// Checks `u ∈ [lo − tol, hi + tol]` nodewise.
pub fn check_bounds(u: &[f64], bounds: (f64, f64), time: f64) -> Result<()> {
    let (lo, hi) = bounds;
    for (i, v) in u.iter().enumerate() {
        if *v < lo - BOUND_TOLERANCE || *v > hi + BOUND_TOLERANCE {
            return Err(Error::Scheme {
                time,
                detail: format!("u[{i}] = {v} outside [{lo}, {hi}]"),
            });
        }
    }
    Ok(())
}

/// Advances the membrane by one step with the coordinate field held fixed,
/// checking the pointwise bounds when given.
pub fn step_flow(
    op: &EllipticOperator,
    state: &MembraneState,
    reaction: &ReactionTerm,
    dt: f64,
    bounds: Option<(f64, f64)>,
) -> Result<MembraneState> {
    let mut stepper = FlowStepper::new(op.clone());
    let mut u = vec![0.0; state.u.len()];
    stepper.step(&state.u, reaction, dt, &mut u)?;
    let t = state.t + dt;
    if let Some(b) = bounds {
        check_bounds(&u, b, t)?;
    }
    Ok(MembraneState { u, t })
}

/// Sub-step length rule: `min(dt_max, monotone cap, safety · gap / 20)` with
/// `gap = 1/Λ` the expected time to the next jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtPolicy {
    pub dt_max: f64,
    pub safety: f64,
}

impl Default for DtPolicy {
    fn default() -> Self {
        Self {
            dt_max: 1e-2,
            safety: 1.0,
        }
    }
}

impl DtPolicy {
    pub fn dt(&self, total_rate: f64, monotone_cap: f64) -> f64 {
        let mut dt = self.dt_max.min(monotone_cap);
        if total_rate > 0.0 {
            dt = dt.min(self.safety / (SUBSTEPS_PER_GAP * total_rate));
        }
        dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardSample {
    pub t: f64,
    pub rate: f64,
}

/// Trapezoid integral of a sequence of hazard samples.
pub fn cumulative_hazard(samples: &[HazardSample]) -> f64 {
    samples
        .windows(2)
        .map(|w| 0.5 * (w[0].rate + w[1].rate) * (w[1].t - w[0].t))
        .sum()
}

/// Sub-steps the flow up to `t_end`, sampling the total jump rate at every
/// sub-step node (including the start).
pub fn integrate_to(
    stepper: &mut FlowStepper,
    state: &MembraneState,
    reaction: &ReactionTerm,
    t_end: f64,
    policy: &DtPolicy,
    monotone_cap: f64,
    bounds: Option<(f64, f64)>,
    mut hazard: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(MembraneState, Vec<HazardSample>)> {
    if t_end < state.t {
        return Err(Error::Input(format!(
            "t_end = {t_end} precedes state time {}",
            state.t
        )));
    }
    if t_end == state.t {
        return Ok((state.clone(), Vec::new()));
    }
    let mut u = state.u.clone();
    let mut next = vec![0.0; u.len()];
    let mut t = state.t;
    let mut rate = hazard(&u)?;
    let mut samples = vec![HazardSample { t, rate }];
    while t < t_end {
        let mut dt = policy.dt(rate, monotone_cap);
        let last = t + dt >= t_end;
        if last {
            dt = t_end - t;
        }
        stepper.step(&u, reaction, dt, &mut next)?;
        t = if last { t_end } else { t + dt };
        if let Some(b) = bounds {
            check_bounds(&next, b, t)?;
        }
        std::mem::swap(&mut u, &mut next);
        rate = hazard(&u)?;
        samples.push(HazardSample { t, rate });
    }
    Ok((MembraneState { u, t }, samples))
}
