//! Reproducible Gaussian increments.
//!
//! Every trajectory owns one ChaCha8 stream: the key is derived from the
//! master seed and the stream id is the trajectory index. Draws are consumed
//! in `(step, channel)` order, two 64-bit words per Gaussian, so the value at
//! a given `(master_seed, trajectory, step, channel)` is fixed regardless of
//! which thread runs the trajectory. Gaussians come from the cosine branch of
//! the Box–Muller transform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// Uniform in `(0, 1]`.
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * TWO_POW_M53
}

/// Uniform in `[0, 1)`.
fn half_open_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * TWO_POW_M53
}

/// Counter-addressed standard normal stream for one trajectory.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(master_seed: u64, trajectory: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(trajectory);
        Self { rng }
    }

    /// Jumps to the draw for `(step, channel)` in a layout with
    /// `n_channels` draws per step.
    pub fn seek(&mut self, step: u64, channel: u64, n_channels: u64) {
        let index = step as u128 * n_channels as u128 + channel as u128;
        self.rng.set_word_pos(index * 4);
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = open_unit(self.rng.next_u64());
        let u2 = half_open_unit(self.rng.next_u64());
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn uniform(&mut self) -> f64 {
        half_open_unit(self.rng.next_u64())
    }
}

/// Source of per-step Wiener increments `ΔW_k`.
pub trait IncrementSource {
    /// Fills `out` with the increments of the next step.
    fn next_step(&mut self, out: &mut [f64]);
}

/// `ΔW_k ~ N(0, dt)`, independent across steps and channels.
#[derive(Debug, Clone)]
pub struct GaussianIncrements {
    stream: NoiseStream,
    sqrt_dt: f64,
}

impl GaussianIncrements {
    pub fn new(master_seed: u64, trajectory: u64, dt: f64) -> Self {
        Self {
            stream: NoiseStream::new(master_seed, trajectory),
            sqrt_dt: dt.sqrt(),
        }
    }
}

impl IncrementSource for GaussianIncrements {
    fn next_step(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.sqrt_dt * self.stream.standard_normal();
        }
    }
}

/// Sums `factor` consecutive fine increments into one coarse increment, so a
/// coarse run follows the same Brownian path as a fine run.
#[derive(Debug, Clone)]
pub struct CoarsenedIncrements<S> {
    inner: S,
    factor: usize,
    buf: Vec<f64>,
}

impl<S: IncrementSource> CoarsenedIncrements<S> {
    pub fn new(inner: S, factor: usize) -> Self {
        Self {
            inner,
            factor: factor.max(1),
            buf: Vec::new(),
        }
    }
}

impl<S: IncrementSource> IncrementSource for CoarsenedIncrements<S> {
    fn next_step(&mut self, out: &mut [f64]) {
        self.buf.resize(out.len(), 0.0);
        out.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..self.factor {
            self.inner.next_step(&mut self.buf);
            for (o, b) in out.iter_mut().zip(&self.buf) {
                *o += b;
            }
        }
    }
}

/// Replays a fixed list of increments, then zeros.
#[derive(Debug, Clone)]
pub struct RecordedIncrements {
    steps: Vec<Vec<f64>>,
    pos: usize,
}

impl RecordedIncrements {
    pub fn new(steps: Vec<Vec<f64>>) -> Self {
        Self { steps, pos: 0 }
    }
}

impl IncrementSource for RecordedIncrements {
    fn next_step(&mut self, out: &mut [f64]) {
        match self.steps.get(self.pos) {
            Some(s) => out.copy_from_slice(&s[..out.len()]),
            None => out.iter_mut().for_each(|x| *x = 0.0),
        }
        self.pos += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seek_matches_sequential_draws() {
        let mut seq = NoiseStream::new(7, 3);
        let mut draws = Vec::new();
        for _ in 0..20 {
            draws.push(seq.standard_normal());
        }
        let mut jump = NoiseStream::new(7, 3);
        jump.seek(6, 1, 2);
        assert_eq!(jump.standard_normal(), draws[13]);
        jump.seek(0, 0, 2);
        assert_eq!(jump.standard_normal(), draws[0]);
    }

    #[test]
    fn streams_differ_by_trajectory_and_seed() {
        let a = NoiseStream::new(1, 0).standard_normal();
        let b = NoiseStream::new(1, 1).standard_normal();
        let c = NoiseStream::new(2, 0).standard_normal();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn moments() {
        let mut s = NoiseStream::new(42, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.standard_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.015);
    }

    #[test]
    fn coarsening_sums_fine_steps() {
        let mut fine = GaussianIncrements::new(5, 0, 0.01);
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        fine.next_step(&mut a);
        fine.next_step(&mut b);
        let mut coarse = CoarsenedIncrements::new(GaussianIncrements::new(5, 0, 0.01), 2);
        let mut c = [0.0; 2];
        coarse.next_step(&mut c);
        assert_eq!(c, [a[0] + b[0], a[1] + b[1]]);
    }
}
