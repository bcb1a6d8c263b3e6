//! Deterministic fixtures shared by the benchmarks.

use mpner::gradcheck::random_batch;
use mpner::model::BatchInput;
use mpner::train::Batch;
use mpner::{ModelConfig, TagLattice};

/// Cheap reproducible values in `[-2, 2)`.
fn values(n: usize, salt: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let h = mpner::embed::splitmix64(i ^ salt.rotate_left(17));
            (h >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        })
        .collect()
}

pub fn lattice(len: usize, n_tags: usize, salt: u64) -> TagLattice {
    TagLattice::new(
        n_tags,
        values(len * n_tags, salt),
        values(n_tags * n_tags, salt + 1),
        values(n_tags, salt + 2),
        values(n_tags, salt + 3),
    )
    .expect("sizes match")
}

/// Configuration with the default layer sizes over a vocabulary of
/// `sparse_input_dim` features and 32-dimensional dense inputs.
pub fn default_config(sparse_input_dim: usize) -> ModelConfig {
    ModelConfig {
        sparse_input_dim,
        dense_dim: 32,
        ..Default::default()
    }
}

pub fn input(config: &ModelConfig, lengths: &[usize]) -> BatchInput {
    random_batch(config, lengths, 1)
}

/// Batch of `size` sequences of `len` tokens tagged `U O U O ...`.
pub fn batch(config: &ModelConfig, size: usize, len: usize) -> Batch {
    let lengths = vec![len; size];
    let input = input(config, &lengths);
    let gold = (0..size * len)
        .map(|i| if i % 2 == 0 { 4 } else { 0 })
        .collect();
    Batch {
        input,
        gold,
        lengths,
    }
}
