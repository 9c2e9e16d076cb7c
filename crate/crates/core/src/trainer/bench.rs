//! Wall-clock comparison of the naive and Gauss complex matmul paths.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctensor::CTensor;
use crate::cvops::{matmul_counted, MulCounter, Path};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub size: usize,
    pub reps: usize,
    /// Fastest repetition, seconds.
    pub naive_secs: f64,
    pub gauss_secs: f64,
    /// Counts for a single product.
    pub naive: MulCounter,
    pub gauss: MulCounter,
    /// Largest relative deviation of the Gauss result from the naive one.
    pub max_rel_diff: f64,
}

impl BenchReport {
    /// Gauss real multiplications over naive real multiplications.
    pub fn mult_ratio(&self) -> f64 {
        self.gauss.real_mults as f64 / self.naive.real_mults as f64
    }

    pub fn application_ratio(&self) -> f64 {
        self.gauss.applications as f64 / self.naive.applications as f64
    }
}

/// Multiplies two random `size × size` complex matrices `reps` times on each
/// path, alternating paths so neither benefits from a warmer machine.
pub fn bench_gauss(size: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if size == 0 || reps == 0 {
        return Err(Error::Config("bench size and reps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = CTensor::randn(&[size, size], 1.0, &mut rng);
    let b = CTensor::randn(&[size, size], 1.0, &mut rng);
    let (mut naive_secs, mut gauss_secs) = (f64::INFINITY, f64::INFINITY);
    let (mut naive, mut gauss) = (MulCounter::default(), MulCounter::default());
    let mut outputs = (None, None);
    for _ in 0..reps {
        for path in [Path::Naive, Path::Gauss] {
            let mut counter = MulCounter::default();
            let t = Instant::now();
            let out = matmul_counted(&a, &b, path, &mut counter)?;
            let secs = t.elapsed().as_secs_f64();
            match path {
                Path::Naive => {
                    naive_secs = naive_secs.min(secs);
                    naive = counter;
                    outputs.0 = Some(out);
                }
                Path::Gauss => {
                    gauss_secs = gauss_secs.min(secs);
                    gauss = counter;
                    outputs.1 = Some(out);
                }
            }
        }
    }
    let (n, g) = (outputs.0.unwrap(), outputs.1.unwrap());
    Ok(BenchReport { size, reps, naive_secs, gauss_secs, naive, gauss, max_rel_diff: g.max_rel_diff(&n)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_three_of_four() {
        let r = bench_gauss(32, 1, 0).unwrap();
        assert_eq!((r.naive.applications, r.gauss.applications), (4, 3));
        assert_eq!(r.mult_ratio(), 0.75);
        assert_eq!(r.naive.real_mults, 4 * 32 * 32 * 32);
        assert!(r.max_rel_diff < 1e-10);
    }
}
