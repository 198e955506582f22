//! Fixtures shared by the benchmarks.

use mvcnn_core::RealArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A `rows × cols` array with entries drawn from `[-1, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> RealArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    RealArray::new(vec![rows, cols], data).expect("shape matches data")
}
