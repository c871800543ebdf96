use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

/// Particle slot reserved for the common Brownian motion `B₁`.
const COMMON: u64 = u64::MAX;
/// Step slot reserved for initial-law sampling.
const INIT: u64 = u64::MAX;
/// Common increments are drawn in blocks of this many steps from one generator.
const COMMON_BLOCK: u64 = 64;

#[inline]
fn mix(mut z: u64) -> u64 {
    // SplitMix64 finaliser.
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random-number substreams for one Monte-Carlo path.
///
/// Every draw is keyed by `(seed, path_index, particle_index, step_index)`, so the
/// increments a particle receives never depend on how work is scheduled across
/// threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub path_index: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, path_index: u64) -> Self {
        NoiseStream { seed, path_index }
    }

    fn key(&self, particle: u64, step: u64) -> u64 {
        let h = mix(self.seed ^ 0x6D76_696D_7075_6C73);
        let h = mix(h ^ self.path_index);
        let h = mix(h ^ particle);
        mix(h ^ step)
    }

    /// Generator for the idiosyncratic draws of `particle` during `step`.
    pub fn particle_rng(&self, particle: u64, step: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.key(particle, step))
    }

    /// Generator used to sample the initial position of `particle`.
    pub fn init_rng(&self, particle: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.key(particle, INIT))
    }

    fn common_block(&self, block: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.key(COMMON, block))
    }

    /// Common Brownian increment `ΔB₁ ~ N(0, dt)` of `step`. Shared by all particles.
    pub fn common_increment(&self, step: u64, dt: f64) -> f64 {
        let mut rng = self.common_block(step / COMMON_BLOCK);
        let mut z: f64 = StandardNormal.sample(&mut rng);
        for _ in 0..step % COMMON_BLOCK {
            z = StandardNormal.sample(&mut rng);
        }
        dt.sqrt() * z
    }

    /// The increments `common_increment(0, dt), common_increment(1, dt), …` in order,
    /// without reseeding on every step.
    pub fn common_increments(&self, dt: f64) -> CommonIncrements {
        CommonIncrements { stream: *self, step: 0, rng: self.common_block(0), scale: dt.sqrt() }
    }
}

/// Sequential reader of the common Brownian increments of one path.
#[derive(Debug, Clone)]
pub struct CommonIncrements {
    stream: NoiseStream,
    step: u64,
    rng: Xoshiro256PlusPlus,
    scale: f64,
}

impl Iterator for CommonIncrements {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if self.step > 0 && self.step.is_multiple_of(COMMON_BLOCK) {
            self.rng = self.stream.common_block(self.step / COMMON_BLOCK);
        }
        self.step += 1;
        let z: f64 = StandardNormal.sample(&mut self.rng);
        Some(self.scale * z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_pure_functions_of_indices() {
        let s = NoiseStream::new(7, 3);
        assert_eq!(s.common_increment(11, 0.01), s.common_increment(11, 0.01));
        let a: u64 = s.particle_rng(5, 9).random();
        let b: u64 = NoiseStream::new(7, 3).particle_rng(5, 9).random();
        assert_eq!(a, b);
    }

    #[test]
    fn substreams_differ_across_indices() {
        let s = NoiseStream::new(7, 3);
        let draws = [
            s.particle_rng(5, 9).random::<u64>(),
            s.particle_rng(5, 10).random::<u64>(),
            s.particle_rng(6, 9).random::<u64>(),
            NoiseStream::new(7, 4).particle_rng(5, 9).random::<u64>(),
            NoiseStream::new(8, 3).particle_rng(5, 9).random::<u64>(),
        ];
        for i in 0..draws.len() {
            for j in 0..i {
                assert_ne!(draws[i], draws[j]);
            }
        }
    }

    #[test]
    fn sequential_and_random_access_agree() {
        let s = NoiseStream::new(4, 2);
        let seq: Vec<f64> = s.common_increments(0.01).take(300).collect();
        for (k, x) in seq.iter().enumerate() {
            assert_eq!(*x, s.common_increment(k as u64, 0.01));
        }
    }

    #[test]
    fn common_increments_have_unit_variance() {
        let s = NoiseStream::new(1, 0);
        let n = 200_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for z in s.common_increments(1.0).take(n as usize) {
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }
}
