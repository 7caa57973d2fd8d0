//! Seeded random construction of tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose from a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over (seed, stream)
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Entries uniform in `[-bound, bound)`.
pub fn uniform(rng: &mut SeededRng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

/// Entries i.i.d. `N(0, std^2)`.
pub fn gaussian(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

/// `rows x cols` matrix with orthonormal rows (`rows <= cols`), obtained by
/// Gram-Schmidt on Gaussian draws.
pub fn orthonormal_rows(rng: &mut SeededRng, rows: usize, cols: usize) -> Result<Tensor> {
    if rows > cols {
        return Err(Error::Config(format!("cannot fit {rows} orthonormal rows in dimension {cols}")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_rows_are_orthonormal() {
        let mut rng = seeded(1);
        let t = orthonormal_rows(&mut rng, 4, 16).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = t.row_slice(i).iter().zip(t.row_slice(j)).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
        assert!(orthonormal_rows(&mut rng, 5, 4).is_err());
    }

    #[test]
    fn seeding_is_deterministic() {
        let a = gaussian(&mut seeded(42), &[3, 3], 1.0);
        let b = gaussian(&mut seeded(42), &[3, 3], 1.0);
        assert_eq!(a, b);
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
    }
}
