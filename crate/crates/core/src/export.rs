//! JSON-lines export of hybrid paths and continuum trajectories.
//!
//! Every file starts with a header record; the remaining records carry a
//! `kind` tag. Floats are written in shortest round-trip form, so equal
//! inputs give equal bytes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channels::coordinate_field;
use crate::engine::HybridPath;
use crate::error::{Error, Result};
use crate::limit::LimitState;
use crate::partition::Partition;

pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header {
        version: u32,
        source: String,
        config_hash: String,
        seed: u64,
        stream: u64,
    },
    Jump {
        t: f64,
        k: usize,
        i: usize,
        j: usize,
    },
    Snapshot {
        t: f64,
        u: Vec<f64>,
        z: Vec<Vec<f64>>,
    },
    Deterministic {
        t: f64,
        u: Vec<f64>,
        p: Vec<Vec<f64>>,
    },
    Langevin {
        t: f64,
        u: Vec<f64>,
        p: Vec<Vec<f64>>,
    },
}

/// Which continuum solver produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Deterministic,
    Langevin,
}

fn write_record(w: &mut impl Write, record: &Record) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Writes the header, then jumps and snapshots merged in time order. A
/// snapshot taken at a jump time holds the pre-jump state and goes first.
pub fn write_hybrid_path(w: &mut impl Write, path: &HybridPath, partition: &Partition, config_hash: &str) -> Result<()> {
    write_record(
        w,
        &Record::Header {
            version: EXPORT_VERSION,
            source: "pdmp".into(),
            config_hash: config_hash.into(),
            seed: path.seed,
            stream: path.stream,
        },
    )?;
    let mut jumps = path.jumps.iter().peekable();
    for snap in &path.snapshots {
        while let Some(j) = jumps.next_if(|j| j.t < snap.t) {
            write_record(w, &jump_record(j))?;
        }
        let z = coordinate_field(&snap.config, partition)?.all_on_grid(partition);
        write_record(
            w,
            &Record::Snapshot {
                t: snap.t,
                u: snap.u.clone(),
                z,
            },
        )?;
    }
    for j in jumps {
        write_record(w, &jump_record(j))?;
    }
    Ok(())
}

fn jump_record(j: &crate::engine::JumpRecord) -> Record {
    Record::Jump {
        t: j.t,
        k: j.event.compartment,
        i: j.event.from,
        j: j.event.to,
    }
}

/// Writes a deterministic or Langevin trajectory.
pub fn write_trajectory(
    w: &mut impl Write,
    kind: TrajectoryKind,
    trajectory: &[LimitState],
    config_hash: &str,
    seed: u64,
    stream: u64,
) -> Result<()> {
    let source = match kind {
        TrajectoryKind::Deterministic => "limit",
        TrajectoryKind::Langevin => "langevin",
    };
    write_record(
        w,
        &Record::Header {
            version: EXPORT_VERSION,
            source: source.into(),
            config_hash: config_hash.into(),
            seed,
            stream,
        },
    )?;
    for s in trajectory {
        let (t, u, p) = (s.t, s.u.clone(), s.p.clone());
        let rec = match kind {
            TrajectoryKind::Deterministic => Record::Deterministic { t, u, p },
            TrajectoryKind::Langevin => Record::Langevin { t, u, p },
        };
        write_record(w, &rec)?;
    }
    Ok(())
}

/// Parses a JSON-lines document back into records.
pub fn read_records(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Input(format!("record {}: {e}", n + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::ChannelConfiguration;
    use crate::engine::{simulate, HybridState, JumpMethod, Model, RunSettings};
    use crate::grid::SpatialGrid;
    use crate::kinetics::benchmarks;
    use crate::limit::uniform_fields;
    use crate::partition::LevelSpec;
    use crate::pde::{DtPolicy, EllipticOperator, MembraneState};

    fn path() -> (HybridPath, Partition) {
        let g = SpatialGrid::new(1.0, 8).unwrap();
        let partition = Partition::from_level(&g, &LevelSpec::Uniform { compartments: 4, channels: 5 }, 0).unwrap();
        let model = Model::new(partition.clone(), benchmarks::two_state(&g), EllipticOperator::constant(&g, 1.0).unwrap(), DtPolicy::default()).unwrap();
        let config = ChannelConfiguration::all_in(&partition, 2, 0);
        let init = HybridState::new(MembraneState { u: vec![0.0; 8], t: 0.0 }, config, &partition).unwrap();
        let settings = RunSettings { t_end: 1.0, method: JumpMethod::IntegratedHazard, cadence: Some(0.25) };
        (simulate(&model, init, settings, 5, 2).unwrap(), partition)
    }

    #[test]
    fn path_export_is_deterministic_and_round_trips() {
        let (p, partition) = path();
        let mut a = Vec::new();
        write_hybrid_path(&mut a, &p, &partition, "abc").unwrap();
        let (q, _) = path();
        let mut b = Vec::new();
        write_hybrid_path(&mut b, &q, &partition, "abc").unwrap();
        assert_eq!(a, b);
        let recs = read_records(std::str::from_utf8(&a).unwrap()).unwrap();
        assert!(matches!(&recs[0], Record::Header { seed: 5, stream: 2, .. }));
        let jumps = recs.iter().filter(|r| matches!(r, Record::Jump { .. })).count();
        let snaps = recs.iter().filter(|r| matches!(r, Record::Snapshot { .. })).count();
        assert_eq!(jumps, p.jumps.len());
        assert_eq!(snaps, p.snapshots.len());
        let times: Vec<f64> = recs[1..]
            .iter()
            .map(|r| match r {
                Record::Jump { t, .. } | Record::Snapshot { t, .. } => *t,
                _ => unreachable!(),
            })
            .collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn trajectory_records_are_tagged() {
        let s = LimitState { u: vec![0.5, 0.25], p: uniform_fields(&[0.5, 0.5], 2), t: 0.0 };
        let mut out = Vec::new();
        write_trajectory(&mut out, TrajectoryKind::Langevin, &[s.clone()], "h", 1, 0).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("{\"kind\":\"langevin\""));
        let recs = read_records(&text).unwrap();
        assert_eq!(recs[1], Record::Langevin { t: 0.0, u: s.u, p: s.p });
    }
}
