//! Deterministic, splittable random number generation.
//!
//! Every random decision in the crate flows from one `u64` seed through
//! [`SplitRng`]. The generator is a SplitMix64 counter stream: `split`
//! derives an independent child stream from a label, so subsystems
//! (weight init, clip sampling, sprite placement, ...) can be reordered or
//! parallelised without perturbing each other's draws.

/// SplitMix64 mixing function: maps a counter to a well-distributed u64.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splittable counter-based generator.
#[derive(Debug, Clone)]
pub struct SplitRng {
    state: u64,
    /// Spare Gaussian sample from the last Box-Muller pair.
    gauss_spare: Option<f64>,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        SplitRng {
            // Pre-mix so that small consecutive seeds give unrelated streams.
            state: mix(seed ^ 0x51_7c_c1_b7_27_22_0a_95),
            gauss_spare: None,
        }
    }

    /// Derive an independent child stream. Children with different labels,
    /// and children of different parents, never share a counter sequence.
    pub fn split(&self, label: u64) -> SplitRng {
        SplitRng {
            state: mix(self.state ^ mix(label.wrapping_add(0xa076_1d64_78bd_642f))),
            gauss_spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased uniform integer in `[0, n)` via rejection sampling.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi, "empty range");
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        loop {
            let u = self.uniform();
            if u <= f64::MIN_POSITIVE {
                continue;
            }
            let v = self.uniform();
            let r = (-2.0 * u.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * v;
            self.gauss_spare = Some(r * theta.sin());
            return r * theta.cos();
        }
    }
}
