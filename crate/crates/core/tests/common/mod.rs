#![allow(dead_code)]

pub mod probe;

use std::sync::Arc;

use empipe::{BlockConfig, Executor, NullProgress, Pipeline, PipelineRun, Storage};

pub struct Env {
    pub storage: Storage,
    pub dir: tempfile::TempDir,
}

/// Storage with `block` items per block and `memory` bytes of budget.
pub fn env(block: u64, memory: u64) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let config = BlockConfig::new(block, memory, 8).unwrap();
    Env {
        storage: Storage::with_tmpdir(config, dir.path()).unwrap(),
        dir,
    }
}

impl Env {
    pub fn run(&self, pipeline: Pipeline) -> PipelineRun {
        self.try_run(pipeline).unwrap()
    }

    pub fn try_run(&self, pipeline: Pipeline) -> empipe::Result<PipelineRun> {
        Executor::new(&self.storage).run(pipeline, 0, "test", Arc::new(NullProgress))
    }
}

/// Deterministic pseudo-random values.
pub fn values(n: usize, seed: u64) -> Vec<u64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..1_000_000)).collect()
}
