//! Snapshots of the luminance network collected for checkpoint ensembling.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// One immutable snapshot with the step it was taken at.
#[derive(Clone)]
pub struct Snapshot {
    pub step: u64,
    pub weights: Arc<ParamStore>,
}

/// Ordered list of frozen snapshots; sampling is uniform.
#[derive(Clone, Default)]
pub struct CheckpointPool {
    snapshots: Vec<Snapshot>,
}

impl CheckpointPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pool holding a single frozen copy of `store`.
    pub fn single(store: &ParamStore) -> Result<Self> {
        let mut pool = Self::new();
        pool.push(store)?;
        Ok(pool)
    }

    /// Publishes a detached copy of `store`. Every snapshot must carry the same parameter
    /// names and shapes as the first.
    pub fn push(&mut self, store: &ParamStore) -> Result<()> {
        let snap = store.frozen_snapshot()?;
        if let Some(first) = self.snapshots.first() {
            let shapes = |s: &ParamStore| {
                s.vars()
                    .into_iter()
                    .map(|(n, v)| (n, v.dims().to_vec()))
                    .collect::<Vec<_>>()
            };
            if shapes(&first.weights) != shapes(&snap) {
                return Err(Error::validation("snapshot is not config-compatible with the pool"));
            }
        }
        self.snapshots.push(Snapshot {
            step: store.step(),
            weights: Arc::new(snap),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn steps(&self) -> Vec<u64> {
        self.snapshots.iter().map(|s| s.step).collect()
    }
}

/// Index of a uniformly drawn snapshot.
pub fn sample_index(pool: &CheckpointPool, rng: &mut impl Rng) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::NoSamples("checkpoint pool is empty".into()));
    }
    Ok(rng.random_range(0..pool.len()))
}

pub fn sample_checkpoint<'a>(pool: &'a CheckpointPool, rng: &mut impl Rng) -> Result<&'a Snapshot> {
    Ok(&pool.snapshots[sample_index(pool, rng)?])
}

/// Steps after which snapshots are taken: `count` evenly spaced points ending at
/// `fraction · total`.
pub fn snapshot_steps(total: usize, count: usize, fraction: f64) -> Vec<usize> {
    let span = fraction * total as f64;
    let mut steps: Vec<usize> = (1..=count)
        .map(|k| ((k as f64 * span / count as f64).round() as usize).clamp(1, total))
        .collect();
    steps.dedup();
    steps
}
