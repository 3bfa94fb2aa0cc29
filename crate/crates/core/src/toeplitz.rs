//! Toeplitz hashing over GF(2).
//!
//! A `rows × cols` Toeplitz matrix is fixed by a seed of `rows + cols − 1`
//! bits with `H[i][j] = seed[i − j + cols − 1]`. Row `i` is the reversed
//! seed window starting at `rows − 1 − i`; column `j` is the forward seed
//! window starting at `cols − 1 − j`. Both products below are computed by
//! XORing one window per set bit of the input into a word-packed accumulator.
//!
//! The same family serves three roles in a session:
//!
//! * masking the input string, `D = K·H` (row vector times matrix),
//! * privacy amplification, `Γ = H·key`,
//! * error-verification tags, `tag = H·key` with `ceil(log2(2/ε_cor))` rows.
//!
//! Large products switch to polynomial multiplication: with `S(x)` the seed
//! and `K(x)` the key as GF(2) polynomials, `Γ_i` is coefficient
//! `i + cols − 1` of `S·K`.

use rayon::prelude::*;

use crate::bits::BitString;
use crate::entropy::EntropySource;
use crate::error::PkdError;
use crate::gf2poly;

/// Output words handled per parallel task.
const CHUNK_WORDS: usize = 2048;
/// Below this many word operations the work stays on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 22;
/// Above this many window word operations [`Method::Auto`] multiplies polynomials.
const POLY_THRESHOLD: usize = 1 << 22;

/// Evaluation strategy for the matrix products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Auto,
    /// One shifted seed window per set input bit.
    Windows,
    /// Karatsuba product of the seed and input polynomials.
    Polynomial,
}

impl Method {
    fn polynomial(self, ones: usize, out_len: usize) -> bool {
        match self {
            Method::Auto => ones.saturating_mul(out_len.div_ceil(64)) >= POLY_THRESHOLD,
            Method::Windows => false,
            Method::Polynomial => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzSpec {
    rows: usize,
    cols: usize,
    seed: BitString,
}

impl ToeplitzSpec {
    pub fn new(rows: usize, cols: usize, seed: BitString) -> Result<Self, PkdError> {
        if rows == 0 || cols == 0 {
            return Err(PkdError::InvalidInput(format!("Toeplitz matrix must be non-empty, got {rows}x{cols}")));
        }
        let expected = rows + cols - 1;
        if seed.len() != expected {
            return Err(PkdError::Length { expected, actual: seed.len() });
        }
        Ok(Self { rows, cols, seed })
    }

    /// Draws a fresh seed from `source`.
    pub fn random(rows: usize, cols: usize, source: &mut EntropySource) -> Result<Self, PkdError> {
        if rows == 0 || cols == 0 {
            return Err(PkdError::InvalidInput(format!("Toeplitz matrix must be non-empty, got {rows}x{cols}")));
        }
        Self::new(rows, cols, source.draw_bits(rows + cols - 1))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> &BitString {
        &self.seed
    }

    pub fn into_seed(self) -> BitString {
        self.seed
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> bool {
        assert!(i < self.rows && j < self.cols);
        self.seed.get(i + self.cols - 1 - j)
    }
}

/// XOR of `src[off .. off + len]` over all offsets, word-packed.
fn xor_windows(src: &BitString, offsets: &[usize], len: usize) -> BitString {
    let nwords = len.div_ceil(64);
    let mut acc = vec![0u64; nwords];
    if offsets.len().saturating_mul(nwords) < PARALLEL_THRESHOLD {
        for &off in offsets {
            src.xor_window_into(off, len, &mut acc);
        }
    } else {
        acc.par_chunks_mut(CHUNK_WORDS).enumerate().for_each(|(c, chunk)| {
            let start = c * CHUNK_WORDS * 64;
            let clen = (len - start).min(CHUNK_WORDS * 64);
            for &off in offsets {
                src.xor_window_into(off + start, clen, chunk);
            }
        });
    }
    BitString::from_words(acc, len)
}

/// `D = K·H`, length `cols`.
pub fn mask_vector(k: &BitString, spec: &ToeplitzSpec) -> Result<BitString, PkdError> {
    mask_vector_with(k, spec, Method::Auto)
}

pub fn mask_vector_with(k: &BitString, spec: &ToeplitzSpec, method: Method) -> Result<BitString, PkdError> {
    if k.len() != spec.rows {
        return Err(PkdError::Length { expected: spec.rows, actual: k.len() });
    }
    if method.polynomial(k.count_ones() as usize, spec.cols) {
        // D_j is coefficient rows + cols − 2 − j of rev(K)·S.
        let p = gf2poly::mul(&gf2poly::from_bits(&k.reversed()), &gf2poly::from_bits(&spec.seed));
        return Ok(gf2poly::to_bits(&p, spec.rows - 1, spec.cols).reversed());
    }
    let reversed = spec.seed.reversed();
    let offsets: Vec<usize> = k.ones().map(|i| spec.rows - 1 - i).collect();
    Ok(xor_windows(&reversed, &offsets, spec.cols))
}

/// `Γ = H·key`, length `rows`.
pub fn privacy_amplify(key: &BitString, spec: &ToeplitzSpec) -> Result<BitString, PkdError> {
    privacy_amplify_with(key, spec, Method::Auto)
}

pub fn privacy_amplify_with(key: &BitString, spec: &ToeplitzSpec, method: Method) -> Result<BitString, PkdError> {
    if key.len() != spec.cols {
        return Err(PkdError::Length { expected: spec.cols, actual: key.len() });
    }
    if method.polynomial(key.count_ones() as usize, spec.rows) {
        let p = gf2poly::mul(&gf2poly::from_bits(key), &gf2poly::from_bits(&spec.seed));
        return Ok(gf2poly::to_bits(&p, spec.cols - 1, spec.rows));
    }
    let offsets: Vec<usize> = key.ones().map(|j| spec.cols - 1 - j).collect();
    Ok(xor_windows(&spec.seed, &offsets, spec.rows))
}

/// Tag length for a correctness bound: `ceil(log2(2/ε_cor))`.
pub fn tag_rows(eps_cor: f64) -> usize {
    (2.0 / eps_cor).log2().ceil() as usize
}

/// Error-verification tag, `H·key`. Any two distinct keys collide with
/// probability at most `2^-rows` over a uniformly random seed.
pub fn verification_tag(key: &BitString, spec: &ToeplitzSpec) -> Result<BitString, PkdError> {
    privacy_amplify(key, spec)
}

/// One output bit of `H·key` by a direct window dot product.
pub fn hash_row(key: &BitString, spec: &ToeplitzSpec, i: usize) -> Result<bool, PkdError> {
    if key.len() != spec.cols {
        return Err(PkdError::Length { expected: spec.cols, actual: key.len() });
    }
    // Row i of H read left to right is the reversed seed window; against the
    // forward seed that is the dot product taken over reversed key bits.
    let rev_key = key.reversed();
    Ok(spec.seed.window_dot(i, &rev_key))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mask(k: &BitString, spec: &ToeplitzSpec) -> BitString {
        (0..spec.cols()).map(|j| (0..spec.rows()).fold(false, |acc, i| acc ^ (k.get(i) & spec.entry(i, j)))).collect()
    }

    fn naive_hash(key: &BitString, spec: &ToeplitzSpec) -> BitString {
        (0..spec.rows()).map(|i| (0..spec.cols()).fold(false, |acc, j| acc ^ (spec.entry(i, j) & key.get(j)))).collect()
    }

    #[test]
    fn small_mask_matches_hand_layout() {
        // seed 1011, rows 2, cols 3: H[i][j] = seed[i - j + 2]
        // H = [[1,0,1],[1,1,0]]; K = 10 picks row 0.
        let spec = ToeplitzSpec::new(2, 3, BitString::parse_binary("1011").unwrap()).unwrap();
        assert!(spec.entry(0, 0));
        assert!(!spec.entry(0, 1));
        assert!(spec.entry(0, 2));
        assert!(spec.entry(1, 0));
        assert!(spec.entry(1, 1));
        assert!(!spec.entry(1, 2));
        let d = mask_vector(&BitString::parse_binary("10").unwrap(), &spec).unwrap();
        assert_eq!(d.to_string(), "101");
        assert_eq!(d, naive_mask(&BitString::parse_binary("10").unwrap(), &spec));
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let mut src = EntropySource::seeded([3; 32]);
        let spec = ToeplitzSpec::random(40, 100, &mut src).unwrap();
        assert_eq!(mask_vector(&BitString::zeros(40), &spec).unwrap().count_ones(), 0);
        assert_eq!(privacy_amplify(&BitString::zeros(100), &spec).unwrap().count_ones(), 0);
    }

    #[test]
    fn single_row_is_a_window_parity() {
        let mut src = EntropySource::seeded([4; 32]);
        let key = src.draw_bits(77);
        let spec = ToeplitzSpec::random(1, 77, &mut src).unwrap();
        let expect = (0..77).fold(false, |acc, j| acc ^ (spec.seed().get(76 - j) & key.get(j)));
        assert_eq!(privacy_amplify(&key, &spec).unwrap().get(0), expect);
        assert_eq!(hash_row(&key, &spec, 0).unwrap(), expect);
    }

    #[test]
    fn diagonal_constancy() {
        let mut src = EntropySource::seeded([5; 32]);
        let spec = ToeplitzSpec::random(17, 31, &mut src).unwrap();
        for i in 1..17 {
            for j in 1..31 {
                assert_eq!(spec.entry(i, j), spec.entry(i - 1, j - 1));
            }
        }
    }

    #[test]
    fn random_64_to_16_matches_naive() {
        let mut src = EntropySource::seeded([6; 32]);
        for _ in 0..50 {
            let key = src.draw_bits(64);
            let spec = ToeplitzSpec::random(16, 64, &mut src).unwrap();
            assert_eq!(privacy_amplify(&key, &spec).unwrap(), naive_hash(&key, &spec));
        }
    }

    #[test]
    fn parallel_path_matches_serial() {
        let mut src = EntropySource::seeded([8; 32]);
        let rows = 3000;
        let cols = 300_000;
        let spec = ToeplitzSpec::random(rows, cols, &mut src).unwrap();
        let k = src.draw_bits(rows);
        let fast = mask_vector(&k, &spec).unwrap();
        let reversed = spec.seed().reversed();
        let mut acc = vec![0u64; cols.div_ceil(64)];
        for i in k.ones() {
            reversed.xor_window_into(rows - 1 - i, cols, &mut acc);
        }
        assert_eq!(fast, BitString::from_words(acc, cols));
        for j in (0..cols).step_by(9973) {
            let bit = (0..rows).fold(false, |a, i| a ^ (k.get(i) & spec.entry(i, j)));
            assert_eq!(fast.get(j), bit);
        }
    }

    #[test]
    fn methods_agree_with_naive() {
        let mut src = EntropySource::seeded([10; 32]);
        for (rows, cols) in [(1, 1), (1, 200), (200, 1), (63, 65), (129, 3000), (3000, 129), (51, 4096)] {
            let spec = ToeplitzSpec::random(rows, cols, &mut src).unwrap();
            let key = src.draw_bits(cols);
            let k = src.draw_bits(rows);
            let hash = naive_hash(&key, &spec);
            let mask = naive_mask(&k, &spec);
            for method in [Method::Windows, Method::Polynomial, Method::Auto] {
                assert_eq!(privacy_amplify_with(&key, &spec, method).unwrap(), hash, "{rows}x{cols} {method:?}");
                assert_eq!(mask_vector_with(&k, &spec, method).unwrap(), mask, "{rows}x{cols} {method:?}");
            }
        }
    }

    #[test]
    fn large_methods_agree() {
        let mut src = EntropySource::seeded([11; 32]);
        let spec = ToeplitzSpec::random(20_000, 70_000, &mut src).unwrap();
        let key = src.draw_bits(70_000);
        assert_eq!(
            privacy_amplify_with(&key, &spec, Method::Windows).unwrap(),
            privacy_amplify_with(&key, &spec, Method::Polynomial).unwrap()
        );
        let k = src.draw_bits(20_000);
        assert_eq!(
            mask_vector_with(&k, &spec, Method::Windows).unwrap(),
            mask_vector_with(&k, &spec, Method::Polynomial).unwrap()
        );
    }

    #[test]
    fn length_checks() {
        assert!(ToeplitzSpec::new(2, 3, BitString::zeros(5)).is_err());
        assert!(ToeplitzSpec::new(0, 3, BitString::zeros(2)).is_err());
        let spec = ToeplitzSpec::new(2, 3, BitString::zeros(4)).unwrap();
        assert!(mask_vector(&BitString::zeros(3), &spec).is_err());
        assert!(privacy_amplify(&BitString::zeros(2), &spec).is_err());
    }

    #[test]
    fn tag_length_for_default_bound() {
        assert_eq!(tag_rows(1e-15), 51);
        assert_eq!(tag_rows(0.5), 2);
    }
}
