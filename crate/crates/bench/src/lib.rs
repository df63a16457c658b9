//! Inputs shared by the benchmarks.

use cacl_core::dataset::{generate_split, Dataset, SyntheticSpec};
use cacl_core::rng::seeded;
use cacl_core::Tensor;
use rand::Rng as _;

/// Uniform `[-1, 1)` entries.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// The default 200-image synthetic set with its split.
pub fn synthetic() -> Dataset {
    generate_split(&SyntheticSpec::default()).expect("default spec is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_expected_shapes() {
        let m = random_matrix(3, 4, 0);
        assert_eq!((m.rows(), m.cols()), (3, 4));
        assert!(m.data().iter().all(|v| (-1.0..1.0).contains(v)));
        assert_eq!(synthetic().len(), 200);
    }
}
