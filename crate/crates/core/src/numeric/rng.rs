use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic counter-based generator with labeled sub-streams.
///
/// Two generators built from the same seed and label path produce the same
/// sequence. Streams derived under distinct labels use distinct ChaCha stream
/// ids and do not overlap.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Shorthand for `SeededRng::new(seed).derive(label)`.
    pub fn stream(seed: u64, label: &str) -> Self {
        Self::new(seed).derive(label)
    }

    /// Fresh generator for a named purpose. Independent of how much of `self`
    /// has already been consumed.
    pub fn derive(&self, label: &str) -> Self {
        let mut h = Fnv1a::default();
        h.write(&self.stream.to_le_bytes());
        h.write(label.as_bytes());
        Self::with_stream(self.seed, h.finish())
    }

    /// Derive with a numeric suffix, e.g. per-chunk or per-cell streams.
    pub fn derive_indexed(&self, label: &str, index: u64) -> Self {
        let mut h = Fnv1a::default();
        h.write(&self.stream.to_le_bytes());
        h.write(label.as_bytes());
        h.write(&index.to_le_bytes());
        Self::with_stream(self.seed, h.finish())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

// Fixed, platform-independent label hash.
struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv1a {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
