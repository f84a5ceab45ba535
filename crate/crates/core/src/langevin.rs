//! Langevin approximation: the limit system with Gaussian noise on the
//! occupation fields whose covariance is the limit covariance form scaled by
//! `1/α`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::ChannelKinetics;
use crate::limit::{LimitSolver, LimitState, Schedule};
use crate::martingale::LimitForm;
use crate::pde::EllipticOperator;

/// Eigenvalues above `−PSD_TOLERANCE` are clamped to 0; lower ones are errors.
pub const PSD_TOLERANCE: f64 = 1e-12;

/// The Langevin state has the same shape as the limit state.
pub type LangevinState = LimitState;

/// Noise amplitude `1/√α`; zero for `α = ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale(f64);

impl NoiseScale {
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Input(format!("α must be positive, got {alpha}")));
        }
        Ok(Self(if alpha.is_infinite() { 0.0 } else { 1.0 / alpha.sqrt() }))
    }

    pub fn zero() -> Self {
        Self(0.0)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Nodewise square roots of the covariance matrices `D(x)`.
#[derive(Debug, Clone)]
pub struct NoiseKernel {
    states: usize,
    /// `roots[x * m * m + i * m + j]`
    roots: Vec<f64>,
    /// Nodes where some occupation was negative and got clamped.
    pub clamped_nodes: usize,
}

impl NoiseKernel {
    /// Builds `√D(x)` from `(u, p)`; negative occupations enter the rates as 0.
    pub fn new(grid: &crate::grid::SpatialGrid, u: &[f64], p: &[Vec<f64>], kinetics: &ChannelKinetics) -> Result<Self> {
        let form = LimitForm::build(grid, u, p, kinetics, true)?;
        let m = kinetics.states();
        let n = grid.len();
        let clamped_nodes = (0..n).filter(|&x| p.iter().any(|pi| pi[x] < 0.0)).count();
        let mut roots = vec![0.0; n * m * m];
        for x in 0..n {
            let d = form.matrix(x);
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite covariance at node {x}")));
            }
            if d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, d));
            let mut lam = eig.eigenvalues.clone();
            let floor = -PSD_TOLERANCE * (1.0 + d.iter().fold(0.0f64, |a, v| a.max(v.abs())));
            for l in lam.iter_mut() {
                if *l < floor {
                    return Err(Error::NotPositive { node: x, eigenvalue: *l });
                }
                *l = l.max(0.0).sqrt();
            }
            let v = &eig.eigenvectors;
            // D annihilates constants, so does its exact root; project away the
            // √ε leak from the roundoff-level null eigenvalue
            let proj = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
            let root = &proj * (v * DMatrix::from_diagonal(&lam) * v.transpose()) * &proj;
            for i in 0..m {
                for j in 0..m {
                    // symmetrise against roundoff
                    roots[x * m * m + i * m + j] = 0.5 * (root[(i, j)] + root[(j, i)]);
                }
            }
        }
        Ok(Self {
            states: m,
            roots,
            clamped_nodes,
        })
    }

    pub fn root(&self, x: usize) -> &[f64] {
        let mm = self.states * self.states;
        &self.roots[x * mm..(x + 1) * mm]
    }

    /// Adds `scale · √D(x) ξ · √(dt/h)` to `p`, with the last component set to
    /// minus the sum of the others so that `Σ_i` of the increment is exactly 0.
    pub fn add_noise(&self, p: &mut [Vec<f64>], scale: NoiseScale, dt: f64, h: f64, rng: &mut impl Rng) {
        let m = self.states;
        let amp = scale.value() * (dt / h).sqrt();
        let mut xi = vec![0.0; m];
        let mut inc = vec![0.0; m];
        for x in 0..p[0].len() {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let r = self.root(x);
            let mut s = 0.0;
            for i in 0..m - 1 {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += r[i * m + j] * xi[j];
                }
                inc[i] = amp * acc;
                s += inc[i];
            }
            inc[m - 1] = -s;
            for i in 0..m {
                p[i][x] += inc[i];
            }
        }
    }
}

/// Excursion bookkeeping for a Langevin run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExcursionStats {
    pub steps: u64,
    /// Steps after which some `P_i(x)` lay outside `[0, 1]`.
    pub p_excursion_steps: u64,
    /// Largest distance of any `P_i(x)` from `[0, 1]`.
    pub p_max_excursion: f64,
    /// Steps whose noise used clamped occupations.
    pub clamp_steps: u64,
    /// Largest distance of `u` from `[ū₋, ū₊]`.
    pub u_max_excursion: f64,
}

/// Euler–Maruyama integrator sharing the deterministic step with the limit
/// solver.
pub struct LangevinSolver<'a> {
    inner: LimitSolver<'a>,
    grid: crate::grid::SpatialGrid,
    scale: NoiseScale,
    pub stats: ExcursionStats,
}

impl<'a> LangevinSolver<'a> {
    pub fn new(kinetics: &'a ChannelKinetics, operator: &EllipticOperator, scale: NoiseScale) -> Result<Self> {
        Ok(Self {
            inner: LimitSolver::new(kinetics, operator)?,
            grid: operator.grid().clone(),
            scale,
            stats: ExcursionStats::default(),
        })
    }

    pub fn dt_cap(&self) -> f64 {
        self.inner.dt_cap()
    }

    /// One step of size `min(dt, cap)`; returns the step taken.
    pub fn step_langevin(&mut self, state: &mut LangevinState, dt: f64, rng: &mut impl Rng) -> Result<f64> {
        let dt = dt.min(self.inner.dt_cap());
        let kinetics = self.inner.kinetics();
        let kernel = NoiseKernel::new(&self.grid, &state.u, &state.p, kinetics)?;
        let (lo, hi) = kinetics.voltage_bounds();
        self.inner.drift_step(state, dt)?;
        kernel.add_noise(&mut state.p, self.scale, dt, self.grid.spacing(), rng);
        self.stats.steps += 1;
        if kernel.clamped_nodes > 0 {
            self.stats.clamp_steps += 1;
        }
        let mut p_exc: f64 = 0.0;
        for v in state.p.iter().flatten() {
            p_exc = p_exc.max(-v).max(v - 1.0);
        }
        if p_exc > 0.0 {
            self.stats.p_excursion_steps += 1;
            self.stats.p_max_excursion = self.stats.p_max_excursion.max(p_exc);
        }
        for v in &state.u {
            self.stats.u_max_excursion = self.stats.u_max_excursion.max(lo - v).max(v - hi);
        }
        Ok(dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinRun {
    pub trajectory: Vec<LangevinState>,
    pub stats: ExcursionStats,
}

/// Integrates the Langevin system on the schedule's output grid.
pub fn solve_langevin(
    kinetics: &ChannelKinetics,
    operator: &EllipticOperator,
    initial: &LangevinState,
    schedule: Schedule,
    scale: NoiseScale,
    rng: &mut impl Rng,
) -> Result<LangevinRun> {
    initial.validate(kinetics)?;
    schedule.validate(initial.t)?;
    let mut solver = LangevinSolver::new(kinetics, operator, scale)?;
    let mut trajectory = Vec::new();
    let mut state = initial.clone();
    schedule.drive(
        &mut state,
        |s| s.t,
        |s, t| s.t = t,
        |s, dt| solver.step_langevin(s, dt, rng),
        |s| {
            trajectory.push(s.clone());
            Ok(())
        },
    )?;
    Ok(LangevinRun {
        trajectory,
        stats: solver.stats,
    })
}
