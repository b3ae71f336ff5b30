//! SplitMix64, the only random source used by the engine.
//!
//! Every synthetic artifact (weights, prompts, needle fillers) is drawn from
//! this stream so that any other implementation can reproduce it bit for bit.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
        z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` built from the top 24 bits, so every value is an
    /// exact `f32`.
    pub fn next_unit_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32
    }

    /// Uniform in `[-a, a)`, computed as `(2u - 1) * a` in `f32`.
    pub fn next_symmetric_f32(&mut self, a: f32) -> f32 {
        (self.next_unit_f32() * 2.0 - 1.0) * a
    }

    /// Uniform integer in `[0, n)` (modulo reduction; `n` must be non-zero).
    pub fn next_below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_values_stay_in_range() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..10_000 {
            let u = rng.next_unit_f32();
            assert!((0.0..1.0).contains(&u));
            let s = rng.next_symmetric_f32(0.3);
            assert!((-0.3..0.3).contains(&s));
        }
    }

    #[test]
    fn symmetric_never_reaches_upper_bound() {
        // Largest unit draw is 1 - 2^-24.
        let u = 1.0f32 - 1.0 / (1u32 << 24) as f32;
        for a in [1.0f32, 0.5, 0.1234567, 3.0, 1e-3] {
            assert!((u * 2.0 - 1.0) * a < a);
        }
    }
}
