//! Channel-count configurations, their coordinate fields, and the table of
//! single-channel jump events with their rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::ChannelKinetics;
use crate::partition::Partition;

/// `counts[k][i]`: number of channels of compartment `k` in state `i`,
/// stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfiguration {
    states: usize,
    counts: Vec<u32>,
}

impl ChannelConfiguration {
    /// Validates conservation `Σ_i counts[k][i] = l(k)` for every compartment.
    pub fn new(partition: &Partition, states: usize, counts: Vec<Vec<u32>>) -> Result<Self> {
        if counts.len() != partition.len() {
            return Err(Error::Configuration(format!(
                "{} compartments but {} count rows",
                partition.len(),
                counts.len()
            )));
        }
        let mut flat = Vec::with_capacity(states * counts.len());
        for (k, row) in counts.iter().enumerate() {
            if row.len() != states {
                return Err(Error::Configuration(format!(
                    "compartment {k}: {} counts for {states} states",
                    row.len()
                )));
            }
            let total: u64 = row.iter().map(|&c| c as u64).sum();
            if total != partition.channels(k) as u64 {
                return Err(Error::Configuration(format!(
                    "compartment {k}: counts sum to {total}, expected {}",
                    partition.channels(k)
                )));
            }
            flat.extend_from_slice(row);
        }
        Ok(Self {
            states,
            counts: flat,
        })
    }

    /// Every channel of every compartment in `state`.
    pub fn all_in(partition: &Partition, states: usize, state: usize) -> Self {
        let mut counts = vec![0; states * partition.len()];
        for k in 0..partition.len() {
            counts[k * states + state] = partition.channels(k);
        }
        Self { states, counts }
    }

    /// Rounds occupation fractions per compartment to integer counts with
    /// the largest-remainder rule, so conservation holds exactly.
    /// `fractions[k][i]` must be non-negative and sum to one per row.
    pub fn from_fractions(partition: &Partition, fractions: &[Vec<f64>]) -> Result<Self> {
        let states = fractions.first().map(Vec::len).unwrap_or(0);
        let mut counts = Vec::with_capacity(partition.len());
        for (k, f) in fractions.iter().enumerate() {
            let l = partition.channels(k);
            if f.len() != states || f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Configuration(format!(
                    "compartment {k}: invalid fractions {f:?}"
                )));
            }
            let s: f64 = f.iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::Configuration(format!(
                    "compartment {k}: fractions sum to {s}"
                )));
            }
            let raw: Vec<f64> = f.iter().map(|x| x / s * l as f64).collect();
            let mut row: Vec<u32> = raw.iter().map(|x| x.floor() as u32).collect();
            let mut missing = l - row.iter().sum::<u32>().min(l);
            let mut order: Vec<usize> = (0..states).collect();
            // stable sort keeps ties deterministic
            order.sort_by(|&a, &b| {
                let ra = raw[a] - raw[a].floor();
                let rb = raw[b] - raw[b].floor();
                rb.partial_cmp(&ra).unwrap()
            });
            for &i in order.iter().cycle() {
                if missing == 0 {
                    break;
                }
                row[i] += 1;
                missing -= 1;
            }
            counts.push(row);
        }
        Self::new(partition, states, counts)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn compartments(&self) -> usize {
        self.counts.len() / self.states
    }

    pub fn count(&self, k: usize, i: usize) -> u32 {
        self.counts[k * self.states + i]
    }

    pub fn row(&self, k: usize) -> &[u32] {
        &self.counts[k * self.states..(k + 1) * self.states]
    }

    /// Moves one channel of compartment `k` from `from` to `to`.
    pub fn apply(&mut self, event: JumpEvent) -> Result<()> {
        let m = self.states;
        let src = event.compartment * m + event.from;
        if event.compartment >= self.compartments() || event.from >= m || event.to >= m {
            return Err(Error::Internal(format!("event {event:?} out of range")));
        }
        if self.counts[src] == 0 {
            return Err(Error::Internal(format!(
                "event {event:?} selected from an empty state"
            )));
        }
        self.counts[src] -= 1;
        self.counts[event.compartment * m + event.to] += 1;
        Ok(())
    }

    /// Checks `Σ_i counts[k][i] = l(k)` for every compartment.
    pub fn check_conservation(&self, partition: &Partition) -> Result<()> {
        for k in 0..self.compartments() {
            let total: u64 = self.row(k).iter().map(|&c| c as u64).sum();
            if total != partition.channels(k) as u64 {
                return Err(Error::Configuration(format!(
                    "compartment {k}: {total} channels, expected {}",
                    partition.channels(k)
                )));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant occupation fractions `z_i = Σ_k (counts[k][i] / l(k)) 𝟙_{D_k}`,
/// stored as one value per (state, compartment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateField {
    states: usize,
    /// `values[i * K + k]`
    values: Vec<f64>,
}

impl CoordinateField {
    pub fn states(&self) -> usize {
        self.states
    }

    pub fn compartments(&self) -> usize {
        self.values.len() / self.states
    }

    /// `z_i` on compartment `k`.
    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.compartments() + k]
    }

    /// Per-compartment values of `z_i`.
    pub fn state(&self, i: usize) -> &[f64] {
        let c = self.compartments();
        &self.values[i * c..(i + 1) * c]
    }

    /// `z_i` expanded onto the grid.
    pub fn on_grid(&self, partition: &Partition, i: usize) -> Vec<f64> {
        partition.expand(self.state(i))
    }

    pub fn all_on_grid(&self, partition: &Partition) -> Vec<Vec<f64>> {
        (0..self.states).map(|i| self.on_grid(partition, i)).collect()
    }

    /// Writes `Σ_i g_i(x) z_i(x)` and `Σ_i g_i(x) z_i(x) E_i` on the grid.
    pub(crate) fn reaction_coefficients(
        &self,
        partition: &Partition,
        kinetics: &ChannelKinetics,
        sum_gz: &mut [f64],
        sum_gze: &mut [f64],
    ) {
        sum_gz.fill(0.0);
        sum_gze.fill(0.0);
        let e = kinetics.reversal();
        for (k, c) in partition.compartments().iter().enumerate() {
            for i in 0..self.states {
                let z = self.value(i, k);
                if z == 0.0 {
                    continue;
                }
                let g = kinetics.conductance(i);
                for x in c.cells.clone() {
                    let gz = g[x] * z;
                    sum_gz[x] += gz;
                    sum_gze[x] += gz * e[i];
                }
            }
        }
    }
}

/// Builds the coordinate field of a configuration.
pub fn coordinate_field(config: &ChannelConfiguration, partition: &Partition) -> Result<CoordinateField> {
    let m = config.states();
    let kk = partition.len();
    if config.compartments() != kk {
        return Err(Error::Configuration(format!(
            "configuration has {} compartments, partition has {kk}",
            config.compartments()
        )));
    }
    let mut values = vec![0.0; m * kk];
    for k in 0..kk {
        let l = partition.channels(k);
        if l == 0 {
            if config.row(k).iter().any(|&c| c != 0) {
                return Err(Error::Configuration(format!(
                    "empty compartment {k} holds channels"
                )));
            }
            continue;
        }
        for i in 0..m {
            let c = config.count(k, i);
            if c > l {
                return Err(Error::Configuration(format!(
                    "compartment {k}: {c} channels in state {i} exceed l = {l}"
                )));
            }
            values[i * kk + k] = c as f64 / l as f64;
        }
    }
    Ok(CoordinateField { states: m, values })
}

/// One channel of compartment `compartment` switching `from → to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub compartment: usize,
    pub from: usize,
    pub to: usize,
}

/// All possible single-channel events with their rates and the total rate `Λ`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateTable {
    pub events: Vec<(JumpEvent, f64)>,
    pub total: f64,
}

impl RateTable {
    pub fn rate_of(&self, event: JumpEvent) -> f64 {
        self.events
            .iter()
            .find(|(e, _)| *e == event)
            .map(|(_, r)| *r)
            .unwrap_or(0.0)
    }

    /// Index of the event selected by a uniform draw `v ∈ [0, 1)`.
    pub fn select(&self, v: f64) -> Result<usize> {
        let target = v * self.total;
        let mut acc = 0.0;
        let mut last_positive = None;
        for (n, (_, r)) in self.events.iter().enumerate() {
            if *r > 0.0 {
                acc += r;
                last_positive = Some(n);
                if acc > target {
                    return Ok(n);
                }
            }
        }
        // rounding can leave target just above the running sum
        last_positive.ok_or_else(|| Error::Internal("no event with positive rate".into()))
    }
}

/// Rate table for membrane `u` and configuration `config`.
///
/// The event `(k, i → j)` fires at rate `counts[k][i] · q_ij(avg_k u)`; only
/// non-empty compartments contribute.
pub fn jump_event_rates(
    u: &[f64],
    config: &ChannelConfiguration,
    kinetics: &ChannelKinetics,
    partition: &Partition,
) -> Result<RateTable> {
    let mut table = RateTable::default();
    let mut avg = Vec::new();
    fill_rate_table(u, config, kinetics, partition, &mut avg, &mut table)?;
    Ok(table)
}

/// Allocation-free variant of [`jump_event_rates`] for the simulation loop.
pub(crate) fn fill_rate_table(
    u: &[f64],
    config: &ChannelConfiguration,
    kinetics: &ChannelKinetics,
    partition: &Partition,
    averages: &mut Vec<f64>,
    table: &mut RateTable,
) -> Result<()> {
    partition.averages_into(u, averages);
    table.events.clear();
    let mut total = 0.0;
    for k in partition.occupied() {
        let v = averages[k];
        for t in kinetics.transitions() {
            let q = kinetics.eval_checked(t, v)?;
            let rate = config.count(k, t.from) as f64 * q;
            total += rate;
            table.events.push((
                JumpEvent {
                    compartment: k,
                    from: t.from,
                    to: t.to,
                },
                rate,
            ));
        }
    }
    table.total = total;
    Ok(())
}
