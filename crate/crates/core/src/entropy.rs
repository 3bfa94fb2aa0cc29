//! Uniform random bit supply.
//!
//! Every random quantity in a session (mapping rules, inputs, the virtual
//! measurement values, raw keys, hash seeds) is drawn through an
//! [`EntropySource`]. Bits are handed out most-significant-bit first from
//! each 8-byte block of the underlying generator, and the source keeps an
//! exact count of how many bits it has returned.

use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::bits::BitString;
use crate::error::PkdError;

/// 32-byte seed for the deterministic generator.
pub type Seed = [u8; 32];

/// Parses a seed given as exactly 64 hex characters.
pub fn parse_seed_hex(s: &str) -> Result<Seed, PkdError> {
    let s = s.trim();
    if s.len() != 64 {
        return Err(PkdError::InvalidInput(format!("seed must be 64 hex characters, got {}", s.len())));
    }
    let mut seed = [0u8; 32];
    hex::decode_to_slice(s, &mut seed).map_err(|e| PkdError::InvalidInput(format!("seed is not hex: {e}")))?;
    Ok(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    SystemCsprng,
    Seeded { seed: Seed, stream: u64 },
    External,
}

enum Inner {
    System(OsRng),
    Seeded(Box<ChaCha20Rng>),
    External(Box<dyn RngCore + Send>),
}

/// A single-owner random bit stream.
pub struct EntropySource {
    inner: Inner,
    kind: SourceKind,
    buf: u64,
    buf_bits: u32,
    bits_drawn: u64,
}

impl std::fmt::Debug for EntropySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EntropySource").field("kind", &self.kind).field("bits_drawn", &self.bits_drawn).finish()
    }
}

impl EntropySource {
    pub fn system() -> Self {
        Self::with_inner(Inner::System(OsRng), SourceKind::SystemCsprng)
    }

    /// ChaCha20 keyed by `seed`, stream 0.
    pub fn seeded(seed: Seed) -> Self {
        Self::seeded_stream(seed, 0)
    }

    /// ChaCha20 keyed by `seed` on an independent stream. Workers and
    /// sessions derived from one seed each take their own stream id.
    pub fn seeded_stream(seed: Seed, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(stream);
        Self::with_inner(Inner::Seeded(Box::new(rng)), SourceKind::Seeded { seed, stream })
    }

    /// Wraps any generator. Used for fixtures such as an all-zero stream.
    pub fn from_rng<R: RngCore + Send + 'static>(rng: R) -> Self {
        Self::with_inner(Inner::External(Box::new(rng)), SourceKind::External)
    }

    fn with_inner(inner: Inner, kind: SourceKind) -> Self {
        Self { inner, kind, buf: 0, buf_bits: 0, bits_drawn: 0 }
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    /// Total number of bits returned so far.
    pub fn bits_drawn(&self) -> u64 {
        self.bits_drawn
    }

    fn next_word(&mut self) -> u64 {
        let mut b = [0u8; 8];
        match &mut self.inner {
            Inner::System(r) => r.fill_bytes(&mut b),
            Inner::Seeded(r) => r.fill_bytes(&mut b),
            Inner::External(r) => r.fill_bytes(&mut b),
        }
        u64::from_be_bytes(b)
    }

    /// Draws `width ≤ 64` bits as an unsigned integer, first bit most significant.
    pub fn draw_uint(&mut self, width: u32) -> u64 {
        assert!(width <= 64, "draw_uint width {width} exceeds 64");
        if width == 0 {
            return 0;
        }
        self.bits_drawn += width as u64;
        if self.buf_bits >= width {
            let v = self.buf >> (64 - width);
            self.buf = if width == 64 { 0 } else { self.buf << width };
            self.buf_bits -= width;
            return v;
        }
        let have = self.buf_bits;
        let hi = if have == 0 { 0 } else { self.buf >> (64 - have) };
        let need = width - have;
        let fresh = self.next_word();
        let lo = fresh >> (64 - need);
        self.buf = if need == 64 { 0 } else { fresh << need };
        self.buf_bits = 64 - need;
        if need == 64 {
            lo
        } else {
            (hi << need) | lo
        }
    }

    /// Exactly `count` bits.
    pub fn draw_bits(&mut self, count: usize) -> BitString {
        let mut out = BitString::with_capacity(count);
        let mut left = count;
        while left > 0 {
            let take = left.min(64) as u32;
            out.push_uint(self.draw_uint(take), take);
            left -= take as usize;
        }
        out
    }

    pub fn draw_seed(&mut self) -> Seed {
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            chunk.copy_from_slice(&self.draw_uint(64).to_be_bytes());
        }
        seed
    }

    /// Uniform integer in `[0, bound)`.
    ///
    /// Power-of-two bounds mask exactly `log2(bound)` bits. Other bounds draw
    /// `ceil(log2(bound))` bits and reject values `>= bound`.
    ///
    /// Panics if `bound == 0`.
    pub fn draw_uniform_index(&mut self, bound: u64) -> u64 {
        assert!(bound >= 1, "draw_uniform_index requires bound >= 1");
        if bound.is_power_of_two() {
            return self.draw_uint(bound.trailing_zeros());
        }
        let width = 64 - (bound - 1).leading_zeros();
        loop {
            let v = self.draw_uint(width);
            if v < bound {
                return v;
            }
        }
    }
}
