//! Deterministic splitmix64 generator.
//!
//! Every random decision in the pipeline (scene layout, instance subsampling,
//! weight init, minibatch order) draws from this generator so that a master
//! seed fully determines every artifact, on every platform.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One step of the splitmix64 recurrence: returns the advanced state and the
/// output word.
#[inline]
pub fn splitmix_next(state: u64) -> (u64, u64) {
    let state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (state, z ^ (z >> 31))
}

/// Seed for stream `index` under `master_seed`: the splitmix output at
/// position `index + 1` from `master_seed`.
///
/// The state after `n` steps is `master + n * gamma`, so this is O(1).
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    let state = master_seed.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA));
    splitmix_next(state).1
}

/// Maps a 64-bit word to a uniform float in [0, 1) using its top 53 bits.
#[inline]
pub fn u64_to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        let (state, out) = splitmix_next(self.state);
        self.state = state;
        out
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        u64_to_unit(self.next_u64())
    }

    /// Uniform integer in [0, k) as floor(unit * k). `k` must be nonzero.
    pub fn below(&mut self, k: usize) -> usize {
        debug_assert!(k > 0);
        let v = (self.next_f64() * k as f64) as usize;
        v.min(k - 1)
    }

    /// Uniform integer in the inclusive range [lo, hi].
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Independent child generator for stream `index`.
    pub fn fork(&self, index: u64) -> Rng {
        Rng::new(derive_seed(self.state, index))
    }
}
