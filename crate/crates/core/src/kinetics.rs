//! Channel kinetics: state count, voltage-dependent transition rates,
//! conductance fields and reversal potentials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;

/// Closed-form rate families. Each one knows its supremum and Lipschitz
/// constant on an interval, which feed the thinning bound and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateFunction {
    Constant {
        value: f64,
    },
    /// `base + amplitude · tanh(slope · (u − midpoint))`
    Tanh {
        base: f64,
        amplitude: f64,
        slope: f64,
        midpoint: f64,
    },
    /// `clamp(base + slope · u, min, max)`
    LinearSaturating {
        base: f64,
        slope: f64,
        min: f64,
        max: f64,
    },
    /// `scale · exp((u − midpoint) / width)`, the Hodgkin–Huxley β-type form.
    Exponential {
        scale: f64,
        midpoint: f64,
        width: f64,
    },
    /// `low + (high − low) / (1 + exp(−(u − midpoint) / width))`
    Sigmoid {
        low: f64,
        high: f64,
        midpoint: f64,
        width: f64,
    },
    /// `scale · x / (1 − exp(−x))` with `x = (u − midpoint) / width`, the
    /// Hodgkin–Huxley α-type form (continuous at `x = 0`).
    LinExp {
        scale: f64,
        midpoint: f64,
        width: f64,
    },
}

fn linexp(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 + 0.5 * x + x * x / 12.0
    } else {
        x / (1.0 - (-x).exp())
    }
}

fn linexp_derivative(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        0.5 + x / 6.0
    } else {
        let e = (-x).exp();
        let d = 1.0 - e;
        (d - x * e) / (d * d)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn closest(lo: f64, hi: f64, target: f64) -> f64 {
    target.clamp(lo, hi)
}

impl RateFunction {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            RateFunction::Constant { value } => value,
            RateFunction::Tanh {
                base,
                amplitude,
                slope,
                midpoint,
            } => base + amplitude * (slope * (u - midpoint)).tanh(),
            RateFunction::LinearSaturating {
                base,
                slope,
                min,
                max,
            } => (base + slope * u).clamp(min, max),
            RateFunction::Exponential {
                scale,
                midpoint,
                width,
            } => scale * ((u - midpoint) / width).exp(),
            RateFunction::Sigmoid {
                low,
                high,
                midpoint,
                width,
            } => low + (high - low) * logistic((u - midpoint) / width),
            RateFunction::LinExp {
                scale,
                midpoint,
                width,
            } => scale * linexp((u - midpoint) / width),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, RateFunction::Constant { value } if *value == 0.0)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, RateFunction::Constant { .. })
    }

    /// `sup_{u ∈ [lo, hi]} q(u)`. Every family is monotone in `u`.
    pub fn bound(&self, lo: f64, hi: f64) -> f64 {
        self.eval(lo).max(self.eval(hi))
    }

    /// `sup_{u ∈ [lo, hi]} |q'(u)|`.
    pub fn lipschitz(&self, lo: f64, hi: f64) -> f64 {
        match *self {
            RateFunction::Constant { .. } => 0.0,
            RateFunction::Tanh {
                amplitude,
                slope,
                midpoint,
                ..
            } => {
                let t = (slope * (closest(lo, hi, midpoint) - midpoint)).tanh();
                (amplitude * slope).abs() * (1.0 - t * t)
            }
            RateFunction::LinearSaturating { slope, .. } => slope.abs(),
            RateFunction::Exponential { width, .. } => {
                self.eval(lo).abs().max(self.eval(hi).abs()) / width.abs()
            }
            RateFunction::Sigmoid {
                low,
                high,
                midpoint,
                width,
            } => {
                let s = logistic((closest(lo, hi, midpoint) - midpoint) / width);
                (high - low).abs() * s * (1.0 - s) / width.abs()
            }
            RateFunction::LinExp {
                scale,
                midpoint,
                width,
            } => {
                // x/(1 − e^{−x}) is convex, so |q'| peaks at an endpoint
                let a = linexp_derivative((lo - midpoint) / width);
                let b = linexp_derivative((hi - midpoint) / width);
                (scale / width).abs() * a.abs().max(b.abs())
            }
        }
    }

    fn check_parameters(&self) -> Result<()> {
        let bad = match *self {
            RateFunction::Exponential { width, .. }
            | RateFunction::Sigmoid { width, .. }
            | RateFunction::LinExp { width, .. } => width == 0.0 || !width.is_finite(),
            RateFunction::LinearSaturating { min, max, .. } => !(min <= max),
            _ => false,
        };
        if bad {
            return Err(Error::Kinetics(format!("degenerate rate parameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub rate: RateFunction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelKinetics {
    states: usize,
    transitions: Vec<Transition>,
    /// `g_i` sampled on the grid, one vector per state.
    conductances: Vec<Vec<f64>>,
    reversal: Vec<f64>,
    u_min: f64,
    u_max: f64,
    rate_bound: f64,
    lipschitz: f64,
}

const DENSE_SAMPLES: usize = 2001;

impl ChannelKinetics {
    pub fn new(
        states: usize,
        transitions: Vec<Transition>,
        conductances: Vec<Vec<f64>>,
        reversal: Vec<f64>,
    ) -> Result<Self> {
        if states < 2 {
            return Err(Error::Kinetics(format!("need at least 2 states, got {states}")));
        }
        if conductances.len() != states || reversal.len() != states {
            return Err(Error::Kinetics(format!(
                "{states} states but {} conductance fields and {} reversal potentials",
                conductances.len(),
                reversal.len()
            )));
        }
        if reversal.iter().any(|e| !e.is_finite()) {
            return Err(Error::Kinetics("non-finite reversal potential".into()));
        }
        let nodes = conductances[0].len();
        for (i, g) in conductances.iter().enumerate() {
            if g.len() != nodes {
                return Err(Error::Kinetics(format!("conductance field {i} has wrong length")));
            }
            if let Some(x) = g.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::Kinetics(format!("conductance g_{i} has invalid value {x}")));
            }
        }
        let mut seen = vec![false; states * states];
        for t in &transitions {
            if t.from >= states || t.to >= states || t.from == t.to {
                return Err(Error::Kinetics(format!(
                    "invalid transition {} -> {}",
                    t.from, t.to
                )));
            }
            if std::mem::replace(&mut seen[t.from * states + t.to], true) {
                return Err(Error::Kinetics(format!(
                    "duplicate transition {} -> {}",
                    t.from, t.to
                )));
            }
            t.rate.check_parameters()?;
        }
        let u_min = reversal.iter().cloned().fold(0.0, f64::min);
        let u_max = reversal.iter().cloned().fold(0.0, f64::max);
        let mut rate_bound: f64 = 0.0;
        let mut lipschitz: f64 = 0.0;
        for t in &transitions {
            let b = t.rate.bound(u_min, u_max);
            rate_bound = rate_bound.max(b);
            lipschitz = lipschitz.max(t.rate.lipschitz(u_min, u_max));
            // spot check the declared bound on a dense sample
            for s in 0..DENSE_SAMPLES {
                let v = u_min + (u_max - u_min) * s as f64 / (DENSE_SAMPLES - 1) as f64;
                let q = t.rate.eval(v);
                if !(q.is_finite() && q >= 0.0) {
                    return Err(Error::Rate {
                        from: t.from,
                        to: t.to,
                        argument: v,
                        value: q,
                    });
                }
                if q > b * (1.0 + 1e-12) + 1e-300 {
                    return Err(Error::Kinetics(format!(
                        "rate {} -> {} exceeds its bound {b} at u = {v}: {q}",
                        t.from, t.to
                    )));
                }
            }
        }
        Ok(Self {
            states,
            transitions,
            conductances,
            reversal,
            u_min,
            u_max,
            rate_bound,
            lipschitz,
        })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn conductance(&self, state: usize) -> &[f64] {
        &self.conductances[state]
    }

    pub fn conductances(&self) -> &[Vec<f64>] {
        &self.conductances
    }

    pub fn reversal(&self) -> &[f64] {
        &self.reversal
    }

    /// `[ū₋, ū₊]` with `ū₋ = min(0, min E_i)` and `ū₊ = max(0, max E_i)`.
    pub fn voltage_bounds(&self) -> (f64, f64) {
        (self.u_min, self.u_max)
    }

    /// `q̄`, the largest rate over all transitions on `[ū₋, ū₊]`.
    pub fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `max_x Σ_i g_i(x)`.
    pub fn max_total_conductance(&self) -> f64 {
        let n = self.conductances[0].len();
        (0..n)
            .map(|x| self.conductances.iter().map(|g| g[x]).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn nodes(&self) -> usize {
        self.conductances[0].len()
    }

    /// True when every rate is identically zero.
    pub fn is_null(&self) -> bool {
        self.transitions.iter().all(|t| t.rate.is_zero())
    }

    /// True when no rate depends on the membrane variable.
    pub fn is_voltage_independent(&self) -> bool {
        self.transitions.iter().all(|t| t.rate.is_constant())
    }

    /// Evaluates `q_ij(v)` for every declared transition, checking the sign.
    pub fn eval_checked(&self, t: &Transition, v: f64) -> Result<f64> {
        let q = t.rate.eval(v);
        if q.is_finite() && q >= 0.0 {
            Ok(q)
        } else {
            Err(Error::Rate {
                from: t.from,
                to: t.to,
                argument: v,
                value: q,
            })
        }
    }

    /// Dense `m × m` rate matrix at `v` (row = from, zero diagonal).
    pub fn rate_matrix(&self, v: f64) -> Result<Vec<f64>> {
        let m = self.states;
        let mut q = vec![0.0; m * m];
        for t in &self.transitions {
            q[t.from * m + t.to] = self.eval_checked(t, v)?;
        }
        Ok(q)
    }

    /// Copy with every conductance set to zero, decoupling the membrane
    /// from the channels.
    pub fn decoupled(&self) -> Self {
        let mut k = self.clone();
        for g in &mut k.conductances {
            g.fill(0.0);
        }
        k
    }
}

/// Reference models used by the test-suite and the default configurations.
pub mod benchmarks {
    use super::*;

    /// Two-state kinetics `q₀₁(u) = 1 + 0.5 tanh(u)`, `q₁₀ = 1`, conductance
    /// 1 for both states, reversal potentials `(0, 1)`.
    pub fn two_state(grid: &SpatialGrid) -> ChannelKinetics {
        ChannelKinetics::new(
            2,
            vec![
                Transition {
                    from: 0,
                    to: 1,
                    rate: RateFunction::Tanh {
                        base: 1.0,
                        amplitude: 0.5,
                        slope: 1.0,
                        midpoint: 0.0,
                    },
                },
                Transition {
                    from: 1,
                    to: 0,
                    rate: RateFunction::Constant { value: 1.0 },
                },
            ],
            vec![vec![1.0; grid.len()]; 2],
            vec![0.0, 1.0],
        )
        .expect("benchmark kinetics are valid")
    }

    /// Two-state kinetics with constant rates and no membrane coupling.
    pub fn frozen_two_state(grid: &SpatialGrid, q01: f64, q10: f64) -> ChannelKinetics {
        ChannelKinetics::new(
            2,
            vec![
                Transition {
                    from: 0,
                    to: 1,
                    rate: RateFunction::Constant { value: q01 },
                },
                Transition {
                    from: 1,
                    to: 0,
                    rate: RateFunction::Constant { value: q10 },
                },
            ],
            vec![vec![0.0; grid.len()]; 2],
            vec![0.0, 1.0],
        )
        .expect("frozen kinetics are valid")
    }

    /// Four-state chain `C₀ ⇄ C₁ ⇄ C₂ ⇄ O` with Hodgkin–Huxley style
    /// multiplicities (3α, 2α, α forward; β, 2β, 3β backward). Only the open
    /// state conducts.
    pub fn hh_four_state(grid: &SpatialGrid) -> ChannelKinetics {
        let alpha = |k: f64| RateFunction::Sigmoid {
            low: 0.5 * k,
            high: 2.5 * k,
            midpoint: 0.3,
            width: 0.1,
        };
        let beta = |k: f64| RateFunction::Exponential {
            scale: 1.2 * k,
            midpoint: 0.0,
            width: -0.8,
        };
        let t = |from, to, rate| Transition { from, to, rate };
        let n = grid.len();
        ChannelKinetics::new(
            4,
            vec![
                t(0, 1, alpha(3.0)),
                t(1, 2, alpha(2.0)),
                t(2, 3, alpha(1.0)),
                t(3, 2, beta(3.0)),
                t(2, 1, beta(2.0)),
                t(1, 0, beta(1.0)),
            ],
            vec![vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![1.0; n]],
            vec![0.0, 0.0, 0.0, 1.0],
        )
        .expect("benchmark kinetics are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn families() -> Vec<RateFunction> {
        vec![
            RateFunction::Constant { value: 2.0 },
            RateFunction::Tanh { base: 1.0, amplitude: 0.5, slope: 2.0, midpoint: 0.3 },
            RateFunction::LinearSaturating { base: 0.2, slope: 1.5, min: 0.1, max: 1.0 },
            RateFunction::Exponential { scale: 1.2, midpoint: 0.0, width: -0.8 },
            RateFunction::Sigmoid { low: 0.5, high: 2.5, midpoint: 0.3, width: 0.1 },
            RateFunction::LinExp { scale: 0.7, midpoint: 0.4, width: 0.2 },
            RateFunction::LinExp { scale: 0.7, midpoint: 0.4, width: -0.2 },
        ]
    }

    #[test]
    fn declared_metadata_dominates_dense_samples() {
        let (lo, hi) = (-0.5, 1.2);
        for f in families() {
            let bound = f.bound(lo, hi);
            let lip = f.lipschitz(lo, hi);
            let n = 20000;
            let mut prev = f.eval(lo);
            for s in 1..=n {
                let v = lo + (hi - lo) * s as f64 / n as f64;
                let q = f.eval(v);
                assert!(q <= bound * (1.0 + 1e-12), "{f:?} at {v}");
                let slope = (q - prev).abs() / ((hi - lo) / n as f64);
                assert!(slope <= lip * (1.0 + 1e-6) + 1e-9, "{f:?}: {slope} > {lip}");
                prev = q;
            }
        }
    }

    #[test]
    fn linexp_is_continuous_at_its_removable_point() {
        let f = RateFunction::LinExp { scale: 1.0, midpoint: 0.0, width: 1.0 };
        assert_relative_eq!(f.eval(0.0), 1.0);
        assert_relative_eq!(f.eval(1e-7), f.eval(-1e-7), epsilon = 1e-6);
    }

    #[test]
    fn bounds_follow_reversal_potentials() {
        let g = SpatialGrid::new(1.0, 8).unwrap();
        let k = benchmarks::two_state(&g);
        assert_eq!(k.voltage_bounds(), (0.0, 1.0));
        assert_relative_eq!(k.rate_bound(), 1.0 + 0.5 * 1f64.tanh(), epsilon = 1e-15);
        let hh = benchmarks::hh_four_state(&g);
        assert_eq!(hh.voltage_bounds(), (0.0, 1.0));
        assert!(hh.rate_bound() > 0.0);
    }

    #[test]
    fn rejects_negative_rates_and_conductances() {
        let g = SpatialGrid::new(1.0, 8).unwrap();
        let neg = ChannelKinetics::new(
            2,
            vec![Transition { from: 0, to: 1, rate: RateFunction::Constant { value: -1.0 } }],
            vec![vec![0.0; 8]; 2],
            vec![0.0, 1.0],
        );
        assert!(matches!(neg, Err(Error::Rate { from: 0, to: 1, .. })));
        let badg = ChannelKinetics::new(
            2,
            vec![],
            vec![vec![0.0; 8], vec![-1.0; 8]],
            vec![0.0, 1.0],
        );
        assert!(badg.is_err());
        let dup = ChannelKinetics::new(
            2,
            vec![
                Transition { from: 0, to: 1, rate: RateFunction::Constant { value: 1.0 } },
                Transition { from: 0, to: 1, rate: RateFunction::Constant { value: 2.0 } },
            ],
            vec![vec![0.0; g.len()]; 2],
            vec![0.0, 1.0],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn rate_family_round_trips_through_serde() {
        for f in families() {
            let s = serde_json::to_string(&f).unwrap();
            let back: RateFunction = serde_json::from_str(&s).unwrap();
            assert_eq!(f, back);
        }
        let err = serde_json::from_str::<RateFunction>(r#"{"kind":"constant","value":1,"extra":2}"#);
        assert!(err.is_err());
    }
}
