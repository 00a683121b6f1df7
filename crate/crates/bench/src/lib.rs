//! Shared fixtures for the benchmarks.

use commonspace::training::ExperimentConfig;
use commonspace::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian `[n, c, h, w]` input.
pub fn features(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![n, c, h, w], 1.0, &mut rng(seed))
}

/// Desk shapes with single-step stages.
pub fn one_step_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.steps.pretrain = 1;
    cfg.steps.stage1 = 1;
    cfg.steps.stage2 = 1;
    cfg.steps.join_stage1 = 1;
    cfg.steps.join_stage2 = 1;
    cfg.dataset.scenes = 16;
    cfg
}
