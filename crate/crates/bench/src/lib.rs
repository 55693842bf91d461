//! Shared fixtures for the criterion benchmarks in `benches/`.

use molpde::{GridField, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A deterministic random field on a square grid with unit-ish values.
pub fn random_field(channels: usize, n: usize, seed: u64) -> GridField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = 1.0 / n as f64;
    GridField::from_fn(Shape::new(channels, n, n), dx, dx, |_, _, _| rng.gen_range(-1.0..1.0)).expect("finite values")
}
