//! Shared inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrnco_core::ingest::{synth_basemap, SynthConfig};
use rrnco_core::{BaseMap, Matrix, Tensor};

pub fn base_map(n: usize) -> BaseMap {
    synth_basemap(&SynthConfig::new(n, 17)).expect("synthetic map")
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_distances(n: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, |i, j| if i == j { 0.0 } else { rng.gen_range(1.0..100.0) })
}
