//! Reproducible noise: ChaCha20 keyed by the base seed, one stream per
//! trajectory, standard normals by inverse-CDF transform of 53-bit uniforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.3), stream = trajectory index; normals by inverse normal CDF (statrs) of (k + 0.5)/2^53 uniforms";

#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha20Rng,
    normal: Normal,
    pub seed: u64,
    pub stream: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseStream { rng, normal: Normal::new(0.0, 1.0).expect("unit normal"), seed, stream }
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u = self.uniform();
        self.normal.inverse_cdf(u)
    }

    /// Wiener increment with variance `dt`.
    pub fn wiener(&mut self, dt: f64) -> f64 {
        self.standard_normal() * dt.sqrt()
    }
}
