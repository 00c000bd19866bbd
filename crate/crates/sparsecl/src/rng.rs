//! Counter-based splittable pseudo-random streams.
//!
//! Every consumer of randomness in the crate receives a stream derived from
//! the run seed by a string label, so there is no global generator and no
//! hidden draw-order coupling: the value sequence of a stream depends only on
//! `(seed, stream_id, counter)`. Identical seeds reproduce identical runs
//! across platforms.
//!
//! Each draw hashes the counter with a SplitMix64-style finalizer; labels are
//! folded into the stream id with FNV-1a.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer (Stafford mix 13).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic, splittable random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    /// Root stream for a run seed.
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            stream_id: mix64(seed ^ GOLDEN_GAMMA),
            counter: 0,
        }
    }

    /// Derives a child stream by label. Pure: the child depends only on the
    /// parent's identity and the label, never on how much the parent has
    /// been consumed.
    pub fn derive(&self, label: &str) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: mix64(self.stream_id ^ fnv1a(label.as_bytes())),
            counter: 0,
        }
    }

    /// Derives a child stream by label and index, for families of streams
    /// such as per-task pixel permutations.
    pub fn derive_indexed(&self, label: &str, index: u64) -> Self {
        let base = self.derive(label);
        RngStream {
            seed: base.seed,
            stream_id: mix64(base.stream_id ^ mix64(index ^ GOLDEN_GAMMA)),
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let state = self
            .seed
            .wrapping_add(self.stream_id)
            .wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA));
        self.counter = self.counter.wrapping_add(1);
        mix64(state)
    }

    /// Uniform draw in `[lo, hi)`. Requires `lo < hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo < hi, "uniform: lo {lo} must be below hi {hi}");
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + u * (hi - lo)
    }

    /// Standard normal draw via Box-Muller. Consumes two counter positions.
    pub fn gaussian(&mut self) -> f64 {
        // u1 mapped to (0, 1] so the log never sees zero.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased draw in `0..n` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n >= 1, "below: n must be at least 1");
        let threshold = n.wrapping_neg() % n;
        loop {
            let wide = self.next_u64() as u128 * n as u128;
            if wide as u64 >= threshold {
                return (wide >> 64) as u64;
            }
        }
    }

    /// Uniform random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<u32> {
        assert!(n >= 1, "permutation: n must be at least 1");
        let mut p: Vec<u32> = (0..n as u32).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }

    /// Shuffles a slice in place with the same scheme as [`permutation`].
    ///
    /// [`permutation`]: RngStream::permutation
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
