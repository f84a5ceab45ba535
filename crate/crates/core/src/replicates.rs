//! Independent Monte Carlo replicates on a worker pool.
//!
//! Replicate `r` always draws from stream `r` of the study seed and results
//! come back in replicate order, so any reduction done by the caller is
//! independent of the number of workers.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::stream_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicatePlan {
    pub replicates: usize,
    pub seed: u64,
    /// Offset added to the replicate index to form the stream id, so that
    /// different parts of one study never share streams.
    pub stream_offset: u64,
    pub workers: usize,
}

impl ReplicatePlan {
    pub fn new(replicates: usize, seed: u64, workers: usize) -> Self {
        Self {
            replicates,
            seed,
            stream_offset: 0,
            workers,
        }
    }

    pub fn with_offset(mut self, offset: u64) -> Self {
        self.stream_offset = offset;
        self
    }

    pub fn stream(&self, replicate: usize) -> u64 {
        self.stream_offset + replicate as u64
    }
}

/// Runs `job(replicate, rng)` for every replicate and returns the results in
/// replicate order. The first failing replicate (by index) fails the run.
pub fn run_replicates<T, F>(plan: &ReplicatePlan, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    let wrap = |r: usize| -> Result<T> {
        let stream = plan.stream(r);
        let mut rng = stream_rng(plan.seed, stream);
        job(r, &mut rng).map_err(|e| Error::Replicate {
            replicate: r,
            seed: plan.seed,
            stream,
            source: Box::new(e),
        })
    };
    let results: Vec<Result<T>> = if plan.workers <= 1 {
        (0..plan.replicates).map(wrap).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.workers)
            .build()
            .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
        pool.install(|| (0..plan.replicates).into_par_iter().map(wrap).collect())
    };
    results.into_iter().collect()
}
