//! Bit-packed strings.
//!
//! Bits are stored most-significant-bit first: bit `i` lives in word `i / 64`
//! at position `63 - i % 64`. Bits past `len` in the final word are always
//! zero, so word-level equality, XOR and popcount need no masking.

use std::fmt;

use crate::error::PkdError;

/// An ordered, arbitrary-length sequence of bits.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitString {
    words: Vec<u64>,
    len: usize,
}

#[inline]
fn words_for(len: usize) -> usize {
    len.div_ceil(64)
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(len: usize) -> Self {
        Self { words: vec![0; words_for(len)], len }
    }

    pub fn with_capacity(len: usize) -> Self {
        Self { words: Vec::with_capacity(words_for(len)), len: 0 }
    }

    /// Builds a string from packed words, clearing any bits past `len`.
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Self {
        words.resize(words_for(len), 0);
        let mut out = Self { words, len };
        out.clear_tail();
        out
    }

    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut out = Self::new();
        for b in bits {
            out.push(b);
        }
        out
    }

    /// Parses a string of `'0'`/`'1'` characters; whitespace and `_` are ignored.
    pub fn parse_binary(s: &str) -> Result<Self, PkdError> {
        let mut out = Self::new();
        for c in s.chars() {
            match c {
                '0' => out.push(false),
                '1' => out.push(true),
                c if c.is_whitespace() || c == '_' => {}
                c => return Err(PkdError::InvalidInput(format!("not a binary digit: {c:?}"))),
            }
        }
        Ok(out)
    }

    /// Interprets `bytes` MSB-first and keeps the first `len` bits.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self, PkdError> {
        if len > bytes.len() * 8 {
            return Err(PkdError::Length { expected: len, actual: bytes.len() * 8 });
        }
        let mut words = Vec::with_capacity(words_for(len));
        for chunk in bytes[..len.div_ceil(8)].chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            words.push(u64::from_be_bytes(buf));
        }
        Ok(Self::from_words(words, len))
    }

    /// MSB-first bytes, zero-padded in the final byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.len.div_ceil(8);
        let mut out = Vec::with_capacity(nbytes + 8);
        for w in &self.words {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out.truncate(nbytes);
        out
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        (self.words[i >> 6] >> (63 - (i & 63))) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        let mask = 1u64 << (63 - (i & 63));
        if v {
            self.words[i >> 6] |= mask;
        } else {
            self.words[i >> 6] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        self.words[i >> 6] ^= 1u64 << (63 - (i & 63));
    }

    pub fn push(&mut self, v: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        self.len += 1;
        if v {
            let i = self.len - 1;
            self.words[i >> 6] |= 1u64 << (63 - (i & 63));
        }
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn push_uint(&mut self, value: u64, width: u32) {
        assert!(width <= 64);
        if width == 0 {
            return;
        }
        let v = if width == 64 { value } else { value & ((1u64 << width) - 1) };
        let off = self.len & 63;
        let width = width as usize;
        if off == 0 {
            self.words.push(v << (64 - width));
        } else {
            let free = 64 - off;
            let last = self.words.len() - 1;
            if width <= free {
                self.words[last] |= v << (free - width);
            } else {
                self.words[last] |= v >> (width - free);
                self.words.push(v << (64 - (width - free)));
            }
        }
        self.len += width;
    }

    /// Reads `width` bits starting at `start` as an unsigned integer, MSB first.
    pub fn read_uint(&self, start: usize, width: u32) -> u64 {
        assert!(width <= 64);
        let width = width as usize;
        assert!(start + width <= self.len, "read past end of bit string");
        if width == 0 {
            return 0;
        }
        let q = start >> 6;
        let r = start & 63;
        let hi = self.words[q] << r;
        let lo = if r != 0 && q + 1 < self.words.len() { self.words[q + 1] >> (64 - r) } else { 0 };
        (hi | lo) >> (64 - width)
    }

    /// The `i`-th substring of width `w`: bits `[i*w, (i+1)*w)`.
    #[inline]
    pub fn substring(&self, i: usize, w: u32) -> u64 {
        self.read_uint(i * w as usize, w)
    }

    /// Copies `len` bits starting at `start` into a new string.
    pub fn slice(&self, start: usize, len: usize) -> BitString {
        assert!(start + len <= self.len, "slice past end of bit string");
        let mut out = BitString::with_capacity(len);
        let mut pos = start;
        let end = start + len;
        while pos < end {
            let take = (end - pos).min(64) as u32;
            out.push_uint(self.read_uint(pos, take), take);
            pos += take as usize;
        }
        out
    }

    pub fn extend(&mut self, other: &BitString) {
        if self.len.is_multiple_of(64) {
            self.words.extend_from_slice(&other.words);
            self.len += other.len;
            return;
        }
        let mut pos = 0;
        while pos < other.len {
            let take = (other.len - pos).min(64) as u32;
            self.push_uint(other.read_uint(pos, take), take);
            pos += take as usize;
        }
    }

    pub fn xor(&self, other: &BitString) -> Result<BitString, PkdError> {
        let mut out = self.clone();
        out.xor_assign(other)?;
        Ok(out)
    }

    pub fn xor_assign(&mut self, other: &BitString) -> Result<(), PkdError> {
        if self.len != other.len {
            return Err(PkdError::Length { expected: self.len, actual: other.len });
        }
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= *b;
        }
        Ok(())
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Number of positions where the two strings differ.
    pub fn hamming_distance(&self, other: &BitString) -> Result<u64, PkdError> {
        if self.len != other.len {
            return Err(PkdError::Length { expected: self.len, actual: other.len });
        }
        Ok(self.words.iter().zip(&other.words).map(|(a, b)| (a ^ b).count_ones() as u64).sum())
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Positions of set bits in increasing order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let lz = w.leading_zeros() as usize;
                w &= !(1u64 << (63 - lz));
                Some(wi * 64 + lz)
            })
        })
    }

    /// The same bits in reverse order.
    pub fn reversed(&self) -> BitString {
        let nw = self.words.len();
        let words: Vec<u64> = self.words.iter().rev().map(|w| w.reverse_bits()).collect();
        let padded = BitString { words, len: nw * 64 };
        padded.slice(nw * 64 - self.len, self.len)
    }

    /// XORs `len` bits of `src` starting at bit `offset` into `acc`, word by word.
    /// `acc` must hold at least `len.div_ceil(64)` words; bits past `len` in the
    /// last touched word are left unchanged.
    pub(crate) fn xor_window_into(&self, offset: usize, len: usize, acc: &mut [u64]) {
        debug_assert!(offset + len <= self.len);
        let nwords = words_for(len);
        let q = offset >> 6;
        let r = (offset & 63) as u32;
        let src = &self.words;
        if r == 0 {
            for (k, a) in acc[..nwords].iter_mut().enumerate() {
                *a ^= src[q + k];
            }
        } else {
            for (k, a) in acc[..nwords].iter_mut().enumerate() {
                let hi = src[q + k] << r;
                let lo = src.get(q + k + 1).map_or(0, |w| w >> (64 - r));
                *a ^= hi | lo;
            }
        }
        let tail = len & 63;
        if tail != 0 {
            // Undo whatever spilled past `len` in the final word.
            let k = nwords - 1;
            let hi = src[q + k] << r;
            let lo = if r == 0 { 0 } else { src.get(q + k + 1).map_or(0, |w| w >> (64 - r)) };
            acc[k] ^= (hi | lo) & (u64::MAX >> tail);
        }
    }

    /// Parity of the AND of `len` bits of `self` starting at `offset` with `other`.
    pub(crate) fn window_dot(&self, offset: usize, other: &BitString) -> bool {
        let len = other.len;
        debug_assert!(offset + len <= self.len);
        let q = offset >> 6;
        let r = (offset & 63) as u32;
        let src = &self.words;
        let mut acc = 0u64;
        for (k, &b) in other.words.iter().enumerate() {
            let w =
                if r == 0 { src[q + k] } else { (src[q + k] << r) | src.get(q + k + 1).map_or(0, |w| w >> (64 - r)) };
            acc ^= w & b;
        }
        acc.count_ones() & 1 == 1
    }

    fn clear_tail(&mut self) {
        let tail = self.len & 63;
        if tail != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= !(u64::MAX >> tail);
            }
        }
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len <= 128 {
            write!(f, "BitString({self})")
        } else {
            write!(f, "BitString(len={}, ones={})", self.len, self.count_ones())
        }
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromIterator<bool> for BitString {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self::from_bits(iter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn substring_views_are_msb_first() {
        let b = BitString::parse_binary("00 01 10 11").unwrap();
        let vals: Vec<u64> = (0..4).map(|i| b.substring(i, 2)).collect();
        assert_eq!(vals, vec![0, 1, 2, 3]);
    }

    #[test]
    fn push_uint_crosses_word_boundaries() {
        let mut b = BitString::new();
        for v in 0..100u64 {
            b.push_uint(v, 10);
        }
        assert_eq!(b.len(), 1000);
        for v in 0..100usize {
            assert_eq!(b.substring(v, 10), v as u64);
        }
    }

    #[test]
    fn bytes_round_trip_with_padding() {
        let b = BitString::parse_binary("1011001").unwrap();
        assert_eq!(b.to_bytes(), vec![0b1011_0010]);
        assert_eq!(BitString::from_bytes(&b.to_bytes(), 7).unwrap(), b);
    }

    #[test]
    fn xor_requires_equal_lengths() {
        let a = BitString::zeros(3);
        let b = BitString::zeros(4);
        assert!(a.xor(&b).is_err());
    }

    #[test]
    fn reversal() {
        let b = BitString::parse_binary("1100101").unwrap();
        assert_eq!(b.reversed().to_string(), "1010011");
        assert!(BitString::new().reversed().is_empty());
    }

    #[test]
    fn ones_lists_set_positions() {
        let b = BitString::parse_binary("0100000001").unwrap();
        assert_eq!(b.ones().collect::<Vec<_>>(), vec![1, 9]);
    }

    proptest! {
        #[test]
        fn slice_and_window_agree_with_bitwise(bits in proptest::collection::vec(any::<bool>(), 1..400),
                                               a in 0usize..400, l in 0usize..400) {
            let b = BitString::from_bits(bits.iter().copied());
            let start = a % b.len();
            let len = l % (b.len() - start + 1);
            let s = b.slice(start, len);
            prop_assert_eq!(s.len(), len);
            for i in 0..len {
                prop_assert_eq!(s.get(i), bits[start + i]);
            }
            let mut acc = vec![0u64; len.div_ceil(64)];
            b.xor_window_into(start, len, &mut acc);
            prop_assert_eq!(BitString::from_words(acc, len), s);
        }

        #[test]
        fn concatenation_preserves_bits(x in proptest::collection::vec(any::<bool>(), 0..200),
                                        y in proptest::collection::vec(any::<bool>(), 0..200)) {
            let mut a = BitString::from_bits(x.iter().copied());
            a.extend(&BitString::from_bits(y.iter().copied()));
            let expect: Vec<bool> = x.iter().chain(y.iter()).copied().collect();
            prop_assert_eq!(a.iter().collect::<Vec<_>>(), expect);
        }
    }
}
