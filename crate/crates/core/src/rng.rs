//! Portable seeded randomness.
//!
//! Every random draw in the crate comes from [`SplitMix64`]: a 64-bit state
//! advanced by the golden-ratio increment `0x9E3779B97F4A7C15` and finalized
//! with the two xor-shift-multiply rounds
//! `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9; z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^ (z >> 31)`.
//! Doubles take the top 53 bits. Normals use Box-Muller with both uniforms
//! drawn fresh on every call (no cached second variate).
//!
//! Sub-seeds are derived hierarchically with [`derive_seed`], so that a single
//! user seed fans out into independent streams per purpose tag.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `(seed, tag)`. Tag bytes are folded in one at a
/// time through the SplitMix64 finalizer.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b)).wrapping_add(GOLDEN);
    }
    mix(h)
}

/// Same as [`derive_seed`] for an integer tag (item index, position, ...).
pub fn derive_seed_u64(seed: u64, tag: u64) -> u64 {
    mix(mix(seed.wrapping_add(GOLDEN)) ^ tag.wrapping_mul(GOLDEN))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn from_tag(seed: u64, tag: &str) -> Self {
        Self::new(derive_seed(seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normals(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
