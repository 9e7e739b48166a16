//! Counter-based random streams.
//!
//! Every random number used by the crate is a pure function of an explicit
//! key, so results do not depend on thread count or evaluation order:
//!
//! * [`NoiseStream`] draws the Brownian increments of one path. It is a ChaCha8
//!   stream selected by `(seed, path, channel)` whose word position is a fixed
//!   multiple of the step index, so the normals for step `k` can be regenerated
//!   in isolation (martingale residuals, restarts, time extension).
//! * [`keyed_uniform`] hashes a small tuple of integers into `[0, 1)`; it backs
//!   pair sampling in the Hölder estimators and bootstrap resampling.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Channel used for the Brownian increments of a path.
pub const CHANNEL_BROWNIAN: u64 = 0;
/// Channel reserved for auxiliary driver randomness (regime switches, ...).
pub const CHANNEL_AUX: u64 = 1;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of `(seed, keys...)` into 64 bits.
#[inline]
pub fn keyed_u64(seed: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ k.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    h
}

/// Uniform in `[0, 1)` keyed by `(seed, keys...)`.
#[inline]
pub fn keyed_uniform(seed: u64, keys: &[u64]) -> f64 {
    (keyed_u64(seed, keys) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn open_uniform(bits: u64) -> f64 {
    // (0, 1]: safe for ln
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draws for one `(seed, path, channel)` triple.
///
/// Each step consumes exactly `2 * ceil(width / 2)` 64-bit words, so the
/// stream can be positioned at any step with [`NoiseStream::seek_step`].
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    width: usize,
}

impl NoiseStream {
    pub fn new(seed: u64, path: u64, channel: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path.wrapping_mul(4).wrapping_add(channel));
        Self { rng, width }
    }

    /// Words (u32) consumed per step.
    #[inline]
    fn words_per_step(&self) -> u128 {
        (self.width.div_ceil(2) * 4) as u128
    }

    pub fn seek_step(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * self.words_per_step());
    }

    pub fn at_step(seed: u64, path: u64, channel: u64, width: usize, step: u64) -> Self {
        let mut s = Self::new(seed, path, channel, width);
        s.seek_step(step);
        s
    }

    /// Fill `out` (length `width`) with the normals of the next step (Box–Muller).
    pub fn next_normals(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width);
        let mut i = 0;
        while i < self.width {
            let u1 = open_uniform(self.rng.next_u64());
            let u2 = open_uniform(self.rng.next_u64());
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            out[i] = r * c;
            if i + 1 < self.width {
                out[i + 1] = r * s;
            }
            i += 2;
        }
    }

    /// Uniforms in `(0, 1]`; consumes the same per-step word budget as normals.
    pub fn next_uniforms(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width);
        for o in out.iter_mut() {
            *o = open_uniform(self.rng.next_u64());
        }
        if self.width % 2 == 1 {
            self.rng.next_u64();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seek_reproduces_sequential_draws() {
        let mut seq = NoiseStream::new(7, 3, CHANNEL_BROWNIAN, 3);
        let mut buf = [0.0; 3];
        let mut draws = Vec::new();
        for _ in 0..5 {
            seq.next_normals(&mut buf);
            draws.push(buf);
        }
        let mut jumped = NoiseStream::at_step(7, 3, CHANNEL_BROWNIAN, 3, 4);
        jumped.next_normals(&mut buf);
        assert_eq!(buf, draws[4]);
    }

    #[test]
    fn distinct_paths_and_channels_differ() {
        let mut a = NoiseStream::new(1, 0, CHANNEL_BROWNIAN, 2);
        let mut b = NoiseStream::new(1, 1, CHANNEL_BROWNIAN, 2);
        let mut c = NoiseStream::new(1, 0, CHANNEL_AUX, 2);
        let (mut x, mut y, mut z) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        a.next_normals(&mut x);
        b.next_normals(&mut y);
        c.next_normals(&mut z);
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut s = NoiseStream::new(42, 0, CHANNEL_BROWNIAN, 2);
        let n = 200_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        let mut buf = [0.0; 2];
        for _ in 0..n / 2 {
            s.next_normals(&mut buf);
            for v in buf {
                m1 += v;
                m2 += v * v;
            }
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn keyed_uniform_is_in_unit_interval() {
        for k in 0..1000u64 {
            let u = keyed_uniform(9, &[k, 2 * k]);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
