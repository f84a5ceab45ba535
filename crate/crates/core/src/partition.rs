//! Compartmentalisation of the spatial domain.
//!
//! Compartments are contiguous runs of grid cells, so in one dimension every
//! compartment is an interval and piecewise-constant fields on the partition
//! are exactly representable on the grid.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;

pub const MIN_CELLS_PER_COMPARTMENT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compartment {
    pub cells: Range<usize>,
    /// Channels housed in the compartment; zero marks an empty compartment.
    pub channels: u32,
}

impl Compartment {
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels == 0
    }
}

/// Summary statistics over the non-empty compartments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    /// Largest diameter.
    pub delta_plus: f64,
    /// Largest and smallest Lebesgue measure.
    pub nu_plus: f64,
    pub nu_minus: f64,
    /// Largest and smallest channel count.
    pub ell_plus: u32,
    pub ell_minus: u32,
}

impl PartitionStats {
    /// `ℓ₋ν₋ / (ℓ₊ν₊)`, which tends to one along a CLT ladder.
    pub fn balance_ratio(&self) -> f64 {
        (self.ell_minus as f64 * self.nu_minus) / (self.ell_plus as f64 * self.nu_plus)
    }

    /// Fluctuation rescaling `α = ℓ₋ / ν₊`.
    pub fn alpha(&self) -> f64 {
        self.ell_minus as f64 / self.nu_plus
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    grid: SpatialGrid,
    compartments: Vec<Compartment>,
    stats: PartitionStats,
    /// Compartment index of every grid cell.
    cell_owner: Vec<usize>,
}

/// One rung of a partition ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LevelSpec {
    /// `compartments` near-equal intervals holding `channels` each.
    Uniform { compartments: usize, channels: u32 },
    /// Explicit cell counts and channel counts per compartment.
    Explicit { cells: Vec<usize>, channels: Vec<u32> },
}

impl Partition {
    pub fn new(grid: &SpatialGrid, compartments: Vec<Compartment>) -> Result<Self> {
        Self::with_level(grid, compartments, 0)
    }

    fn with_level(grid: &SpatialGrid, compartments: Vec<Compartment>, level: usize) -> Result<Self> {
        if compartments.is_empty() {
            return Err(Error::Partition("no compartments".into()));
        }
        let mut cell_owner = vec![usize::MAX; grid.len()];
        let mut next = 0;
        for (k, c) in compartments.iter().enumerate() {
            if c.cells.start != next {
                return Err(Error::Partition(format!(
                    "compartment {k} starts at cell {} but cell {next} is uncovered or shared",
                    c.cells.start
                )));
            }
            if c.cells.len() < MIN_CELLS_PER_COMPARTMENT {
                return Err(Error::Resolution {
                    level,
                    compartment: k,
                    cells: c.cells.len(),
                });
            }
            for owner in &mut cell_owner[c.cells.clone()] {
                *owner = k;
            }
            next = c.cells.end;
        }
        if next != grid.len() {
            return Err(Error::Partition(format!(
                "compartments cover {next} of {} cells",
                grid.len()
            )));
        }
        let stats = compute_stats(grid, &compartments)?;
        Ok(Self {
            grid: grid.clone(),
            compartments,
            stats,
            cell_owner,
        })
    }

    pub fn from_level(grid: &SpatialGrid, spec: &LevelSpec, level: usize) -> Result<Self> {
        let (cells, channels) = match spec {
            LevelSpec::Uniform {
                compartments,
                channels,
            } => {
                if *compartments == 0 {
                    return Err(Error::Partition("zero compartments".into()));
                }
                (even_split(grid.len(), *compartments), vec![*channels; *compartments])
            }
            LevelSpec::Explicit { cells, channels } => {
                if cells.len() != channels.len() {
                    return Err(Error::Partition(format!(
                        "{} cell counts but {} channel counts",
                        cells.len(),
                        channels.len()
                    )));
                }
                (cells.clone(), channels.clone())
            }
        };
        let mut start = 0;
        let compartments = cells
            .iter()
            .zip(channels)
            .map(|(&n, l)| {
                let c = Compartment {
                    cells: start..start + n,
                    channels: l,
                };
                start += n;
                c
            })
            .collect();
        Self::with_level(grid, compartments, level)
    }

    /// A single compartment covering the whole domain.
    pub fn single(grid: &SpatialGrid, channels: u32) -> Result<Self> {
        Self::new(
            grid,
            vec![Compartment {
                cells: 0..grid.len(),
                channels,
            }],
        )
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn compartments(&self) -> &[Compartment] {
        &self.compartments
    }

    pub fn len(&self) -> usize {
        self.compartments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compartments.is_empty()
    }

    pub fn stats(&self) -> &PartitionStats {
        &self.stats
    }

    pub fn measure(&self, k: usize) -> f64 {
        self.compartments[k].cell_count() as f64 * self.grid.spacing()
    }

    pub fn channels(&self, k: usize) -> u32 {
        self.compartments[k].channels
    }

    pub fn total_channels(&self) -> u64 {
        self.compartments.iter().map(|c| c.channels as u64).sum()
    }

    pub fn owner_of_cell(&self, cell: usize) -> usize {
        self.cell_owner[cell]
    }

    /// Indices of compartments that hold channels.
    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.compartments
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.is_empty())
            .map(|(k, _)| k)
    }

    /// `(1/|D_k|) ∫_{D_k} u dx` under the grid quadrature.
    pub fn compartment_average(&self, u: &[f64], k: usize) -> Result<f64> {
        let c = self
            .compartments
            .get(k)
            .ok_or_else(|| Error::Input(format!("compartment index {k} out of range")))?;
        if c.cells.is_empty() {
            return Err(Error::Input(format!("compartment {k} has no cells")));
        }
        if u.len() != self.grid.len() {
            return Err(Error::Input(format!(
                "grid function has {} values, grid has {} nodes",
                u.len(),
                self.grid.len()
            )));
        }
        Ok(u[c.cells.clone()].iter().sum::<f64>() / c.cells.len() as f64)
    }

    /// Compartment averages for every compartment, written into `out`.
    pub fn averages_into(&self, u: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.compartments
                .iter()
                .map(|c| u[c.cells.clone()].iter().sum::<f64>() / c.cells.len() as f64),
        );
    }

    /// `∫_{D_k} φ dx` for every compartment.
    pub fn indicator_pairings(&self, phi: &[f64]) -> Vec<f64> {
        let h = self.grid.spacing();
        self.compartments
            .iter()
            .map(|c| h * phi[c.cells.clone()].iter().sum::<f64>())
            .collect()
    }

    /// Expands per-compartment values onto the grid.
    pub fn expand(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (c, v) in self.compartments.iter().zip(values) {
            out[c.cells.clone()].fill(*v);
        }
        out
    }
}

fn even_split(cells: usize, parts: usize) -> Vec<usize> {
    let base = cells / parts;
    let extra = cells % parts;
    (0..parts).map(|k| base + usize::from(k < extra)).collect()
}

fn compute_stats(grid: &SpatialGrid, compartments: &[Compartment]) -> Result<PartitionStats> {
    let h = grid.spacing();
    let mut stats: Option<PartitionStats> = None;
    for c in compartments.iter().filter(|c| !c.is_empty()) {
        let len = c.cell_count() as f64 * h;
        let s = stats.get_or_insert(PartitionStats {
            delta_plus: len,
            nu_plus: len,
            nu_minus: len,
            ell_plus: c.channels,
            ell_minus: c.channels,
        });
        s.delta_plus = s.delta_plus.max(len);
        s.nu_plus = s.nu_plus.max(len);
        s.nu_minus = s.nu_minus.min(len);
        s.ell_plus = s.ell_plus.max(c.channels);
        s.ell_minus = s.ell_minus.min(c.channels);
    }
    stats.ok_or_else(|| Error::Partition("every compartment is empty".into()))
}

/// Builds every rung of a ladder and checks that it refines: `δ₊` strictly
/// decreasing and `ℓ₋` strictly increasing from one level to the next.
pub fn build_partition_ladder(grid: &SpatialGrid, levels: &[LevelSpec]) -> Result<Vec<Partition>> {
    if levels.is_empty() {
        return Err(Error::Ladder("no levels".into()));
    }
    let ladder = levels
        .iter()
        .enumerate()
        .map(|(n, spec)| Partition::from_level(grid, spec, n))
        .collect::<Result<Vec<_>>>()?;
    for (n, w) in ladder.windows(2).enumerate() {
        let (a, b) = (w[0].stats(), w[1].stats());
        if b.delta_plus >= a.delta_plus {
            return Err(Error::Ladder(format!(
                "delta_plus does not decrease between levels {n} and {}: {} -> {}",
                n + 1,
                a.delta_plus,
                b.delta_plus
            )));
        }
        if b.ell_minus <= a.ell_minus {
            return Err(Error::Ladder(format!(
                "ell_minus does not increase between levels {n} and {}: {} -> {}",
                n + 1,
                a.ell_minus,
                b.ell_minus
            )));
        }
    }
    Ok(ladder)
}

/// Checks the CLT balance condition `|ℓ₋ν₋/(ℓ₊ν₊) − 1| ≤ tol` on every level.
pub fn check_balance(ladder: &[Partition], tol: f64) -> Result<()> {
    for (n, p) in ladder.iter().enumerate() {
        let r = p.stats().balance_ratio();
        if (r - 1.0).abs() > tol {
            return Err(Error::Ladder(format!(
                "level {n}: balance ratio {r} outside 1 ± {tol}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(n: usize) -> SpatialGrid {
        SpatialGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn uniform_ladder_statistics() {
        let levels = [
            LevelSpec::Uniform { compartments: 8, channels: 10 },
            LevelSpec::Uniform { compartments: 16, channels: 40 },
            LevelSpec::Uniform { compartments: 32, channels: 160 },
        ];
        let ladder = build_partition_ladder(&grid(256), &levels).unwrap();
        let expect = [(1.0 / 8.0, 10), (1.0 / 16.0, 40), (1.0 / 32.0, 160)];
        for (p, (d, l)) in ladder.iter().zip(expect) {
            assert_relative_eq!(p.stats().delta_plus, d, epsilon = 1e-15);
            assert_eq!(p.stats().ell_minus, l);
            assert_relative_eq!(p.stats().balance_ratio(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_compartment() {
        let p = Partition::single(&grid(64), 1).unwrap();
        let s = p.stats();
        assert_eq!(s.delta_plus, 1.0);
        assert_eq!((s.nu_plus, s.nu_minus), (1.0, 1.0));
        assert_eq!((s.ell_plus, s.ell_minus), (1, 1));
        assert_eq!(s.balance_ratio(), 1.0);
    }

    #[test]
    fn nonuniform_balance_ratio() {
        let spec = LevelSpec::Explicit {
            cells: vec![16, 48],
            channels: vec![10, 30],
        };
        let p = Partition::from_level(&grid(64), &spec, 0).unwrap();
        // brute-force min/max over the compartment list
        let lens: Vec<f64> = (0..p.len()).map(|k| p.measure(k)).collect();
        let ls: Vec<f64> = (0..p.len()).map(|k| p.channels(k) as f64).collect();
        let brute = (ls.iter().cloned().fold(f64::INFINITY, f64::min)
            * lens.iter().cloned().fold(f64::INFINITY, f64::min))
            / (ls.iter().cloned().fold(0.0, f64::max) * lens.iter().cloned().fold(0.0, f64::max));
        assert_relative_eq!(p.stats().balance_ratio(), 1.0 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(p.stats().balance_ratio(), brute, epsilon = 1e-15);
    }

    #[test]
    fn rejects_under_resolved_level() {
        let levels = [LevelSpec::Uniform { compartments: 64, channels: 5 }];
        match build_partition_ladder(&grid(64), &levels) {
            Err(Error::Resolution { cells: 1, .. }) => {}
            other => panic!("expected resolution error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_refining_ladder() {
        let levels = [
            LevelSpec::Uniform { compartments: 8, channels: 10 },
            LevelSpec::Uniform { compartments: 8, channels: 40 },
        ];
        assert!(matches!(
            build_partition_ladder(&grid(64), &levels),
            Err(Error::Ladder(_))
        ));
    }

    #[test]
    fn empty_compartments_are_skipped_in_stats() {
        let spec = LevelSpec::Explicit {
            cells: vec![4, 8, 4],
            channels: vec![0, 12, 6],
        };
        let p = Partition::from_level(&grid(16), &spec, 0).unwrap();
        assert_eq!(p.stats().ell_minus, 6);
        assert_eq!(p.stats().nu_minus, 0.25);
        assert_eq!(p.stats().nu_plus, 0.5);
        assert_eq!(p.occupied().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn compartment_average_cases() {
        let g = grid(64);
        let p = Partition::from_level(&g, &LevelSpec::Uniform { compartments: 2, channels: 1 }, 0).unwrap();
        let c = vec![0.7; 64];
        assert_relative_eq!(p.compartment_average(&c, 0).unwrap(), 0.7, epsilon = 1e-15);
        let x = g.positions();
        // midpoint rule integrates linear functions exactly
        assert_relative_eq!(p.compartment_average(&x, 0).unwrap(), 0.25, epsilon = 1e-14);
        let alt: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(p.compartment_average(&alt, 1).unwrap(), 0.0);
        assert!(p.compartment_average(&x, 5).is_err());
    }

    proptest! {
        #[test]
        fn stats_match_brute_force(cells in prop::collection::vec(2usize..9, 1..12),
                                   chans in prop::collection::vec(0u32..50, 12)) {
            let n: usize = cells.iter().sum::<usize>().max(4);
            let mut cells = cells;
            let total: usize = cells.iter().sum();
            if total < n { *cells.last_mut().unwrap() += n - total; }
            let mut channels: Vec<u32> = chans[..cells.len()].to_vec();
            channels[0] = channels[0].max(1);
            let g = grid(n);
            let p = Partition::from_level(&g, &LevelSpec::Explicit { cells: cells.clone(), channels: channels.clone() }, 0).unwrap();
            let occ: Vec<usize> = (0..cells.len()).filter(|&k| channels[k] > 0).collect();
            let h = g.spacing();
            let lens: Vec<f64> = occ.iter().map(|&k| cells[k] as f64 * h).collect();
            let ls: Vec<u32> = occ.iter().map(|&k| channels[k]).collect();
            let s = p.stats();
            prop_assert_eq!(s.delta_plus, lens.iter().cloned().fold(0.0, f64::max));
            prop_assert_eq!(s.nu_minus, lens.iter().cloned().fold(f64::INFINITY, f64::min));
            prop_assert_eq!(s.ell_plus, *ls.iter().max().unwrap());
            prop_assert_eq!(s.ell_minus, *ls.iter().min().unwrap());
            // cells are covered exactly once
            for cell in 0..n {
                let k = p.owner_of_cell(cell);
                prop_assert!(p.compartments()[k].cells.contains(&cell));
            }
        }

        #[test]
        fn average_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, seed in 0u64..1000) {
            let g = grid(40);
            let p = Partition::from_level(&g, &LevelSpec::Uniform { compartments: 5, channels: 3 }, 0).unwrap();
            let u: Vec<f64> = (0..40).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let v: Vec<f64> = (0..40).map(|i| ((i as u64 * 7 + seed) % 11) as f64 * 0.5).collect();
            let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            for k in 0..5 {
                let lhs = p.compartment_average(&w, k).unwrap();
                let rhs = a * p.compartment_average(&u, k).unwrap() + b * p.compartment_average(&v, k).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }
}
