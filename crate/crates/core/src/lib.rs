//! Compartmental piecewise deterministic Markov models of spatially extended
//! excitable membranes.
//!
//! The crate simulates the hybrid process exactly (membrane PDE between
//! single-channel jumps), solves its deterministic fluid limit, extracts the
//! associated martingales and their quadratic-variation forms, and integrates
//! the Langevin approximation whose noise covariance matches the limit.

pub mod channels;
pub mod engine;
pub mod error;
pub mod export;
pub mod grid;
pub mod kinetics;
pub mod langevin;
pub mod limit;
pub mod martingale;
pub mod partition;
pub mod pde;
pub mod replicates;
pub mod stats;

pub use channels::{coordinate_field, jump_event_rates, ChannelConfiguration, CoordinateField, JumpEvent, RateTable};
pub use error::{Error, Result};
pub use grid::SpatialGrid;
pub use kinetics::{ChannelKinetics, RateFunction, Transition};
pub use partition::{build_partition_ladder, LevelSpec, Partition, PartitionStats};
pub use pde::{step_flow, DtPolicy, EllipticOperator, FlowStepper, MembraneState, ReactionTerm};
pub use engine::{
    replay, sample_jump_time, sample_post_jump, simulate, simulate_observed, stream_rng, HybridPath, HybridState, JumpMethod,
    Model, PathObserver, RunSettings,
};
pub use limit::{solve_limit, KineticsVectorField, LimitSolver, LimitState, Schedule};
pub use martingale::{
    compensator_drift, empirical_gn, limit_g, martingale_path, MartingaleTracker, QuadraticForm, TestFunction,
};
pub use replicates::{run_replicates, ReplicatePlan};
pub use langevin::{solve_langevin, LangevinRun, LangevinSolver, LangevinState, NoiseKernel, NoiseScale};
pub use export::{read_records, write_hybrid_path, write_trajectory, Record, TrajectoryKind};
