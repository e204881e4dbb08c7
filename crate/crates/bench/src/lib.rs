//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segrnn_core::selftest::{random_feasible_labels, random_lattice};
use segrnn_core::{FrameSequence, LabelSequence, ModelConfig, ScoreLattice};

pub fn lattice(t_len: usize, clamp: usize, vocab: usize, seed: u64) -> ScoreLattice {
    random_lattice(&mut ChaCha8Rng::seed_from_u64(seed), t_len, clamp, vocab)
}

pub fn labels(t_len: usize, clamp: usize, vocab: usize, seed: u64) -> LabelSequence {
    random_feasible_labels(&mut ChaCha8Rng::seed_from_u64(seed), t_len, clamp, vocab)
}

pub fn frames(t_len: usize, dim: usize, seed: u64) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t_len * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    FrameSequence::new(data, t_len, dim).expect("non-empty frames")
}

/// The small preset shrunk so one training step stays in the millisecond range.
pub fn compact_config() -> ModelConfig {
    let mut cfg = ModelConfig::small();
    cfg.encoder.hidden = 16;
    cfg.features.d_w = 16;
    cfg.features.d_h = 16;
    cfg.features.embed_dim = 4;
    cfg
}
