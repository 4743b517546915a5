use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Matrix, Real};

/// Seeded ChaCha8 stream. `split` derives independent child streams from
/// the same seed by selecting a different ChaCha stream id.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream `stream` of the same seed, starting at its origin.
    pub fn split(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            rng,
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("finite std")
            .sample(&mut self.rng)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            p.swap(i, j);
        }
        p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// `U(−1/√fan_in, 1/√fan_in)` with `fan_in = rows`.
    UniformFanIn,
    Normal {
        std: f64,
    },
    Zeros,
}

impl InitScheme {
    /// Latent initialisation used by the neural-process model.
    pub const LATENT: InitScheme = InitScheme::Normal { std: 0.02 };
}

pub fn init_matrix<T: Real>(
    rng: &mut RngState,
    rows: usize,
    cols: usize,
    scheme: InitScheme,
) -> Matrix<T> {
    match scheme {
        InitScheme::Zeros => Matrix::zeros(rows, cols),
        InitScheme::UniformFanIn => {
            let bound = (1.0 / rows.max(1) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| T::of(rng.uniform(-bound, bound)))
        }
        InitScheme::Normal { std } => {
            Matrix::from_fn(rows, cols, |_, _| T::of(rng.normal(0.0, std)))
        }
    }
}
