//! Dense linear algebra, seeded randomness and simplex sampling.
//!
//! Everything is `f64`. The toy objective's `log`/`tanh` compositions lose
//! too much precision in single precision.

mod matrix;
mod rng;
mod simplex;

pub use matrix::{dot, flatten_normalize, matmul, Matrix};
pub use rng::SeededRng;
pub use simplex::{sample_dirichlet, simplex_grid, simplex_grid_len, PreferenceVector};

use rand::Rng;

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Matrix with i.i.d. `U(-bound, bound)` entries.
pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}
