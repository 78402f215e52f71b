//! Dense linear algebra, activations and quadrature.

mod activation;
mod linalg;
pub mod quadrature;

pub use activation::Activation;
pub use linalg::{Lu, Matrix, Vector};

use rand::Rng;

/// Matrix with entries drawn uniformly from `[-scale, scale]`.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();
    Matrix::from_raw(rows, cols, data)
}

/// Vector with entries drawn uniformly from `[-scale, scale]`.
pub fn random_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vector {
    Vector::from_vec((0..n).map(|_| rng.gen_range(-scale..=scale)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn det_is_multiplicative(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, n, 1.0);
            let b = random_matrix(&mut rng, n, n, 1.0);
            let lhs = a.mul(&b).det();
            let rhs = a.det() * b.det();
            prop_assert!((lhs - rhs).abs() <= 1e-9, "{} vs {}", lhs, rhs);
        }

        #[test]
        fn det_matches_singular_value_product(seed in any::<u64>(), n in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, n, 1.0);
            let s = a.singular_values();
            let (lo, hi) = a.svd_extremes();
            prop_assert!(lo <= hi);
            let prod: f64 = s.iter().product();
            prop_assert!((a.det().abs() - prod).abs() <= 1e-8);
        }
    }
}
