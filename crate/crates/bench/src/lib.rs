//! Fixtures shared by the benchmarks.

use covrank::synth::{generate, ring_mixture};
use covrank::{ErrorMatrix, VoteSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Votes from the five-subpopulation ring preset.
pub fn ring_votes(n_votes: usize, seed: u64) -> VoteSet {
    generate(&ring_mixture(n_votes, seed)).expect("preset spec is valid").0
}

/// Error matrix where each model is accurate on a random block of items.
pub fn blocky_matrix(n_items: usize, n_models: usize, seed: u64) -> ErrorMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = Vec::with_capacity(n_items * n_models);
    let centers: Vec<usize> = (0..n_models).map(|_| rng.random_range(0..n_items)).collect();
    let width = (n_items / n_models.max(1)).max(1) * 2;
    for i in 0..n_items {
        for &c in &centers {
            let near = i.abs_diff(c) < width;
            let e: f64 = if near { rng.random_range(0.0..0.3) } else { rng.random_range(0.3..1.0) };
            err.push(e);
        }
    }
    let items = (0..n_items).map(|i| i.to_string()).collect();
    let models = (0..n_models).map(|j| format!("m{j}")).collect();
    ErrorMatrix::new(items, models, err).expect("dimensions agree")
}
