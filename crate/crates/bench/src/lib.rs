//! Shared inputs for the benchmarks.

use csisense::prepare::DataFrame;
use csisense::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Matrix with entries uniform in `[-1, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Stacked frame of `antennas` windows of `window` packets by `subcarriers`
/// tones.
pub fn random_frame(antennas: usize, window: usize, subcarriers: usize, seed: u64) -> DataFrame {
    DataFrame {
        matrix: random_matrix(antennas * window, subcarriers, seed),
        receiver_id: 0,
        window_index: 0,
        antennas,
        window,
        subcarriers,
    }
}
