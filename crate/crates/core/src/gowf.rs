//! The generalized one-way function.
//!
//! An input string `X` is split into `n` substrings of `log2(m)` bits. A secret
//! permutation (the mapping rule) sends each substring `x` to `x' = f(x)`, and
//! the output bit is 0 with probability `(1 + cos(2π x'/m)) / 2`. Alice samples
//! that bit classically: she draws a `b`-bit uniform value `a` and outputs 0
//! iff `a < τ(x')`, where `τ(x') = floor(2^(b-1) (1 + cos(2π x'/m)))`.
//!
//! Bob, who knows `x'` but not `a`, guesses 0 on `[0, m/4) ∪ [3m/4, m)` and
//! 1 on `[m/4, 3m/4)`. Averaged over uniform `x'` his guess is wrong with
//! probability `1/2 - 1/π`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bits::BitString;
use crate::entropy::EntropySource;
use crate::error::PkdError;

/// Limiting raw-key error rate, `1/2 - 1/π ≈ 0.18169`.
pub const E_REF: f64 = 0.5 - 1.0 / PI;

/// Session parameters shared by both parties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Alphabet size, a power of two ≥ 4.
    pub m: u64,
    /// Substrings per session.
    pub n: usize,
    /// Virtual-measurement resolution in bits.
    pub b: u32,
    /// Masking key length in bits.
    pub s: usize,
    pub eps_cor: f64,
    pub eps_sec: f64,
    /// Largest reconciliation inefficiency accepted before aborting.
    pub f_max: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self { m: 1024, n: 1_000_000, b: 12, s: 10_000, eps_cor: 1e-15, eps_sec: 1e-10, f_max: 1.6 }
    }
}

impl Params {
    pub fn validate(&self) -> Result<(), PkdError> {
        let bad = |msg: String| Err(PkdError::InvalidParams(msg));
        if !self.m.is_power_of_two() || self.m < 4 {
            return bad(format!("m must be a power of two >= 4, got {}", self.m));
        }
        if self.m > 1 << 24 {
            return bad(format!("m = {} is larger than supported (2^24)", self.m));
        }
        if !(2..=32).contains(&self.b) {
            return bad(format!("b must be in [2, 32], got {}", self.b));
        }
        if self.n == 0 || self.s == 0 {
            return bad("n and s must be positive".into());
        }
        if !(self.eps_cor > 0.0 && self.eps_cor < 1.0) || !(self.eps_sec > 0.0 && self.eps_sec < 1.0) {
            return bad("eps_cor and eps_sec must lie in (0, 1)".into());
        }
        if self.f_max.is_nan() || self.f_max < 1.0 {
            return bad(format!("f_max must be >= 1, got {}", self.f_max));
        }
        Ok(())
    }

    pub fn validated(self) -> Result<Self, PkdError> {
        self.validate()?;
        Ok(self)
    }

    /// Bits per substring.
    pub fn log_m(&self) -> u32 {
        self.m.trailing_zeros()
    }

    /// Input length `t = n log2 m` in bits.
    pub fn t(&self) -> usize {
        self.n * self.log_m() as usize
    }

    /// Length of a serialized mapping rule, `m log2 m`.
    pub fn rule_bits(&self) -> usize {
        self.m as usize * self.log_m() as usize
    }
}

fn check_alphabet(m: u64) -> Result<u32, PkdError> {
    if !m.is_power_of_two() || m < 4 {
        return Err(PkdError::InvalidParams(format!("m must be a power of two >= 4, got {m}")));
    }
    if m > 1 << 24 {
        return Err(PkdError::InvalidParams(format!("m = {m} is larger than supported (2^24)")));
    }
    Ok(m.trailing_zeros())
}

/// A bijection on `{0, …, m-1}` with its inverse precomputed.
#[derive(Clone, PartialEq, Eq)]
pub struct MappingRule {
    perm: Vec<u32>,
    inverse: Vec<u32>,
}

impl std::fmt::Debug for MappingRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MappingRule").field("m", &self.m()).finish_non_exhaustive()
    }
}

impl MappingRule {
    pub fn identity(m: u64) -> Result<Self, PkdError> {
        check_alphabet(m)?;
        let perm: Vec<u32> = (0..m as u32).collect();
        Ok(Self { inverse: perm.clone(), perm })
    }

    /// Builds a rule from `perm[j] = f(j)`, rejecting non-bijections.
    pub fn from_perm(perm: Vec<u32>) -> Result<Self, PkdError> {
        let m = perm.len() as u64;
        check_alphabet(m)?;
        let mut inverse = vec![u32::MAX; perm.len()];
        for (j, &v) in perm.iter().enumerate() {
            if v as u64 >= m {
                return Err(PkdError::InvalidInput(format!("mapping value {v} out of range for m = {m}")));
            }
            if inverse[v as usize] != u32::MAX {
                return Err(PkdError::NotBijective { value: v as u64 });
            }
            inverse[v as usize] = j as u32;
        }
        Ok(Self { perm, inverse })
    }

    /// Uniformly random rule by Fisher–Yates.
    pub fn sample(source: &mut EntropySource, m: u64) -> Result<Self, PkdError> {
        check_alphabet(m)?;
        let mut perm: Vec<u32> = (0..m as u32).collect();
        for i in (1..perm.len()).rev() {
            let j = source.draw_uniform_index(i as u64 + 1) as usize;
            perm.swap(i, j);
        }
        Self::from_perm(perm)
    }

    pub fn m(&self) -> u64 {
        self.perm.len() as u64
    }

    pub fn perm(&self) -> &[u32] {
        &self.perm
    }

    #[inline]
    pub fn map(&self, x: u64) -> u64 {
        self.perm[x as usize] as u64
    }

    #[inline]
    pub fn unmap(&self, x_prime: u64) -> u64 {
        self.inverse[x_prime as usize] as u64
    }

    pub fn inverse(&self) -> MappingRule {
        Self { perm: self.inverse.clone(), inverse: self.perm.clone() }
    }

    /// `perm[j]` as the `j`-th `log2 m`-bit substring, MSB first.
    pub fn serialize(&self) -> BitString {
        let w = self.m().trailing_zeros();
        let mut out = BitString::with_capacity(self.perm.len() * w as usize);
        for &v in &self.perm {
            out.push_uint(v as u64, w);
        }
        out
    }

    pub fn deserialize(bits: &BitString, m: u64) -> Result<Self, PkdError> {
        let w = check_alphabet(m)?;
        let expected = m as usize * w as usize;
        if bits.len() != expected {
            return Err(PkdError::Length { expected, actual: bits.len() });
        }
        let perm = (0..m as usize).map(|j| bits.substring(j, w) as u32).collect();
        Self::from_perm(perm)
    }

    /// Substring-wise image `x'_i = f(x_i)`.
    pub fn apply(&self, x: &BitString) -> Result<BitString, PkdError> {
        map_substrings(x, self.m().trailing_zeros(), |v| self.map(v))
    }

    /// Substring-wise preimage.
    pub fn apply_inverse(&self, x_prime: &BitString) -> Result<BitString, PkdError> {
        map_substrings(x_prime, self.m().trailing_zeros(), |v| self.unmap(v))
    }
}

fn substring_count(x: &BitString, w: u32) -> Result<usize, PkdError> {
    if !x.len().is_multiple_of(w as usize) {
        return Err(PkdError::InvalidInput(format!(
            "bit string of length {} is not a whole number of {w}-bit substrings",
            x.len()
        )));
    }
    Ok(x.len() / w as usize)
}

fn map_substrings(x: &BitString, w: u32, f: impl Fn(u64) -> u64) -> Result<BitString, PkdError> {
    let n = substring_count(x, w)?;
    let mut out = BitString::with_capacity(x.len());
    for i in 0..n {
        out.push_uint(f(x.substring(i, w)), w);
    }
    Ok(out)
}

/// Probability of output 0 for mapped value `x'`: `(1 + cos(2π x'/m)) / 2`.
pub fn gowf_p0(x_prime: u64, m: u64) -> Result<f64, PkdError> {
    if x_prime >= m {
        return Err(PkdError::InvalidInput(format!("x' = {x_prime} out of range for m = {m}")));
    }
    Ok((1.0 + (2.0 * PI * x_prime as f64 / m as f64).cos()) / 2.0)
}

/// Integer acceptance threshold `τ(x') = floor(2^(b-1) (1 + cos(2π x'/m)))`.
///
/// The real threshold is an exact integer at `x' ∈ {0, m/4, m/2, 3m/4}`;
/// values within 1e-9 of an integer are snapped so that rounding in `cos`
/// cannot push those cases one step down.
pub fn threshold(x_prime: u64, m: u64, b: u32) -> u64 {
    let scale = (1u64 << (b - 1)) as f64;
    let v = scale * (1.0 + (2.0 * PI * x_prime as f64 / m as f64).cos());
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as u64
    } else {
        v.floor() as u64
    }
}

/// Thresholds for every `x' < m`.
pub fn threshold_table(m: u64, b: u32) -> Vec<u64> {
    (0..m).map(|x| threshold(x, m, b)).collect()
}

/// Samples `Y` from `X'`, consuming exactly `n·b` bits of `source`.
pub fn virtual_measure(
    x_prime: &BitString,
    source: &mut EntropySource,
    params: &Params,
) -> Result<BitString, PkdError> {
    let w = check_alphabet(params.m)?;
    let n = substring_count(x_prime, w)?;
    let tau = threshold_table(params.m, params.b);
    let mut y = BitString::with_capacity(n);
    for i in 0..n {
        let a = source.draw_uint(params.b);
        y.push(a >= tau[x_prime.substring(i, w) as usize]);
    }
    Ok(y)
}

/// Bob's deterministic guess for one mapped value.
#[inline]
pub fn guess_bit(x_prime: u64, m: u64) -> bool {
    x_prime >= m / 4 && x_prime < 3 * m / 4
}

/// `Z` from `X'`.
pub fn guess_output(x_prime: &BitString, m: u64) -> Result<BitString, PkdError> {
    let w = check_alphabet(m)?;
    let n = substring_count(x_prime, w)?;
    Ok((0..n).map(|i| guess_bit(x_prime.substring(i, w), m)).collect())
}

/// Binary Shannon entropy in bits, with `h(0) = h(1) = 0`.
pub fn binary_entropy(x: f64) -> Result<f64, PkdError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(PkdError::InvalidInput(format!("binary entropy argument {x} outside [0, 1]")));
    }
    let term = |p: f64| if p == 0.0 { 0.0 } else { -p * p.log2() };
    Ok(term(x) + term(1.0 - x))
}

/// Exact guess error rate for uniform `x'` under the quantized thresholds.
pub fn predicted_error_rate(m: u64, b: u32) -> f64 {
    let full = (1u64 << b) as f64;
    let total: f64 = (0..m)
        .map(|x| {
            let p0 = threshold(x, m, b) as f64 / full;
            if guess_bit(x, m) {
                p0
            } else {
                1.0 - p0
            }
        })
        .sum();
    total / m as f64
}
