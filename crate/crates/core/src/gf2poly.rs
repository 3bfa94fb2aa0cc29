//! Multiplication in GF(2)[x] on 64-bit limbs.
//!
//! Limb `w` holds coefficients `64w .. 64w + 63`, least significant bit first.
//! Products use Karatsuba above [`KARATSUBA_LIMBS`] and a schoolbook kernel
//! below it, with the carry-less multiply instruction when the CPU has one.

use crate::bits::BitString;

const KARATSUBA_LIMBS: usize = 32;

/// Coefficient `i` of the result is bit `i` of `bits`.
pub(crate) fn from_bits(bits: &BitString) -> Vec<u64> {
    bits.words().iter().map(|w| w.reverse_bits()).collect()
}

/// Bit `u` of the result is coefficient `start + u` of `poly`.
pub(crate) fn to_bits(poly: &[u64], start: usize, len: usize) -> BitString {
    let (skip, shift) = (start / 64, start % 64);
    let limb = |i: usize| poly.get(i).copied().unwrap_or(0);
    let words = (0..len.div_ceil(64))
        .map(|w| {
            let lo = limb(skip + w) >> shift;
            let hi = if shift == 0 { 0 } else { limb(skip + w + 1) << (64 - shift) };
            (lo | hi).reverse_bits()
        })
        .collect();
    BitString::from_words(words, len)
}

fn clmul_soft(a: u64, b: u64) -> (u64, u64) {
    let (mut lo, mut hi) = (0u64, 0u64);
    let mut b = b;
    while b != 0 {
        let i = b.trailing_zeros();
        lo ^= a << i;
        if i > 0 {
            hi ^= a >> (64 - i);
        }
        b &= b - 1;
    }
    (lo, hi)
}

fn schoolbook_soft(a: &[u64], b: &[u64], out: &mut [u64]) {
    for (i, &x) in a.iter().enumerate() {
        if x == 0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            let (lo, hi) = clmul_soft(x, y);
            out[i + j] ^= lo;
            out[i + j + 1] ^= hi;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq,sse2")]
unsafe fn schoolbook_hw(a: &[u64], b: &[u64], out: &mut [u64]) {
    use std::arch::x86_64::{_mm_clmulepi64_si128, _mm_cvtsi128_si64, _mm_set_epi64x, _mm_srli_si128};
    for (i, &x) in a.iter().enumerate() {
        if x == 0 {
            continue;
        }
        let xa = _mm_set_epi64x(0, x as i64);
        for (j, &y) in b.iter().enumerate() {
            let p = _mm_clmulepi64_si128(xa, _mm_set_epi64x(0, y as i64), 0);
            out[i + j] ^= _mm_cvtsi128_si64(p) as u64;
            out[i + j + 1] ^= _mm_cvtsi128_si64(_mm_srli_si128(p, 8)) as u64;
        }
    }
}

fn schoolbook(a: &[u64], b: &[u64], out: &mut [u64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("pclmulqdq") {
        // SAFETY: the feature was detected at runtime.
        unsafe { schoolbook_hw(a, b, out) };
        return;
    }
    schoolbook_soft(a, b, out);
}

/// `out ^= a · b` for equal-length operands; `out.len() >= 2·a.len()`.
fn karatsuba(a: &[u64], b: &[u64], out: &mut [u64]) {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    if n <= KARATSUBA_LIMBS {
        schoolbook(a, b, out);
        return;
    }
    let h = n / 2;
    let (a0, a1) = a.split_at(h);
    let (b0, b1) = b.split_at(h);
    let hi_len = n - h;

    let mut z0 = vec![0u64; 2 * h];
    karatsuba(a0, b0, &mut z0);
    let mut z2 = vec![0u64; 2 * hi_len];
    karatsuba(a1, b1, &mut z2);

    let mut sa = a1.to_vec();
    let mut sb = b1.to_vec();
    for i in 0..h {
        sa[i] ^= a0[i];
        sb[i] ^= b0[i];
    }
    let mut z1 = vec![0u64; 2 * hi_len];
    karatsuba(&sa, &sb, &mut z1);
    for (i, v) in z0.iter().enumerate() {
        z1[i] ^= v;
    }
    for (i, v) in z2.iter().enumerate() {
        z1[i] ^= v;
    }

    for (i, v) in z0.iter().enumerate() {
        out[i] ^= v;
    }
    for (i, v) in z1.iter().enumerate() {
        out[h + i] ^= v;
    }
    for (i, v) in z2.iter().enumerate() {
        out[2 * h + i] ^= v;
    }
}

/// Full product `a · b`, `a.len() + b.len()` limbs.
pub(crate) fn mul(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = vec![0u64; a.len() + b.len()];
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return out;
    }
    if short.len() <= KARATSUBA_LIMBS {
        schoolbook(short, long, &mut out);
        return out;
    }
    let k = short.len();
    let mut scratch = vec![0u64; 2 * k];
    let mut padded = vec![0u64; k];
    for (c, piece) in long.chunks(k).enumerate() {
        let piece = if piece.len() == k {
            piece
        } else {
            padded[..piece.len()].copy_from_slice(piece);
            padded[piece.len()..].fill(0);
            &padded
        };
        scratch.fill(0);
        karatsuba(short, piece, &mut scratch);
        let base = c * k;
        for (i, v) in scratch.iter().enumerate() {
            if let Some(slot) = out.get_mut(base + i) {
                *slot ^= v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[u64], b: &[u64]) -> Vec<u64> {
        let mut out = vec![0u64; a.len() + b.len()];
        for i in 0..a.len() * 64 {
            if a[i / 64] >> (i % 64) & 1 == 0 {
                continue;
            }
            for j in 0..b.len() * 64 {
                if b[j / 64] >> (j % 64) & 1 == 1 {
                    out[(i + j) / 64] ^= 1 << ((i + j) % 64);
                }
            }
        }
        out
    }

    #[test]
    fn small_products() {
        // (x + 1)^2 = x^2 + 1
        assert_eq!(mul(&[0b11], &[0b11]), vec![0b101, 0]);
        assert_eq!(clmul_soft(1 << 63, 1 << 1), (0, 1));
        assert_eq!(clmul_soft(u64::MAX, 1), (u64::MAX, 0));
    }

    #[test]
    fn kernels_agree() {
        let a: Vec<u64> = (0..5).map(|i| 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i + 1)).collect();
        let b: Vec<u64> = (0..7).map(|i| 0xbf58_476d_1ce4_e5b9u64.wrapping_mul(i + 3)).collect();
        let mut soft = vec![0; 12];
        schoolbook_soft(&a, &b, &mut soft);
        let mut any = vec![0; 12];
        schoolbook(&a, &b, &mut any);
        assert_eq!(soft, any);
        assert_eq!(soft, naive(&a, &b));
    }

    #[test]
    fn karatsuba_matches_schoolbook() {
        let mut state = 0x1234_5678u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for (la, lb) in [(33, 33), (100, 257), (65, 64), (300, 31), (129, 1000)] {
            let a: Vec<u64> = (0..la).map(|_| next()).collect();
            let b: Vec<u64> = (0..lb).map(|_| next()).collect();
            let mut expect = vec![0u64; la + lb];
            schoolbook_soft(&a, &b, &mut expect);
            assert_eq!(mul(&a, &b), expect, "{la}x{lb}");
        }
    }

    proptest! {
        #[test]
        fn product_matches_bitwise(a in prop::collection::vec(any::<u64>(), 0..4), b in prop::collection::vec(any::<u64>(), 0..4)) {
            prop_assert_eq!(mul(&a, &b), naive(&a, &b));
        }

        #[test]
        fn bit_conversion_round_trip(words in prop::collection::vec(any::<u64>(), 1..5), start in 0usize..64, len in 0usize..128) {
            let poly = words.clone();
            let bits = to_bits(&poly, start, len);
            for u in 0..len {
                let c = start + u;
                let coeff = poly.get(c / 64).is_some_and(|w| w >> (c % 64) & 1 == 1);
                prop_assert_eq!(bits.get(u), coeff);
            }
        }
    }
}
