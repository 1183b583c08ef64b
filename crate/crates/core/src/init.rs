//! Seeded parameter initialization.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// `rows × cols` matrix of independent `N(0, std^2)` draws.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("standard deviation must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || T::from_f64(normal.sample(rng)))
}
