//! Deterministic fixture randomness.
//!
//! Every stream is ChaCha8 keyed by the run seed with a caller-chosen stream
//! id, so tensors can be generated independently and in any order. Values are
//! produced with integer operations and exactly rounded `f32` arithmetic only,
//! which keeps fixtures bitwise identical across platforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub struct FixtureRng {
    inner: ChaCha8Rng,
}

impl FixtureRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    /// Uniform on `[0, 1)` with 24 bits of resolution.
    pub fn uniform01(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform on `[-1, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.uniform01() * 2.0 - 1.0
    }

    /// Zero-mean, unit-variance bell shape: the scaled sum of four uniforms.
    pub fn bell(&mut self) -> f32 {
        const SCALE: f32 = 0.866_025_4; // sqrt(3/4)
        (self.uniform() + self.uniform() + self.uniform() + self.uniform()) * SCALE
    }

    pub fn range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform01()
    }

    pub fn below(&mut self, n: u32) -> u32 {
        ((self.next_u32() as u64 * n as u64) >> 32) as u32
    }

    pub fn bell_tensor(&mut self, shape: Vec<usize>, scale: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.bell() * scale).collect();
        Tensor::new(shape, data).expect("shape product matches generated length")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u32> = {
            let mut r = FixtureRng::new(7, 1);
            (0..8).map(|_| r.next_u32()).collect()
        };
        let b: Vec<u32> = {
            let mut r = FixtureRng::new(7, 1);
            (0..8).map(|_| r.next_u32()).collect()
        };
        let c: Vec<u32> = {
            let mut r = FixtureRng::new(7, 2);
            (0..8).map(|_| r.next_u32()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn known_answer() {
        // Pins the generator so a dependency change that alters the stream
        // is caught here rather than as a silent fixture drift.
        let mut r = FixtureRng::new(0, 0);
        let got: Vec<u32> = (0..3).map(|_| r.next_u32()).collect();
        assert_eq!(got, vec![2811902828, 3045455719, 3134767159]);
    }

    #[test]
    fn bell_moments() {
        let mut r = FixtureRng::new(3, 9);
        let xs: Vec<f64> = (0..20000).map(|_| r.bell() as f64).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
        let u: Vec<f32> = (0..1000).map(|_| r.uniform01()).collect();
        assert!(u.iter().all(|v| (0.0..1.0).contains(v)));
        assert!((0..1000).map(|_| r.below(5)).all(|v| v < 5));
    }
}
