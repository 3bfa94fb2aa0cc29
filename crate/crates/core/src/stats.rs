//! Verification harness: discrimination bounds, joint-attack probabilities,
//! entropies and the raw-key error rate.
//!
//! Joint probabilities average over the mapping rule. Inputs that fall into
//! `k` distinct equality classes are sent to a uniformly random injective
//! `k`-tuple of mapped values, so
//!
//! ```text
//! Pr[Y | X] = 2^-d · Σ_{injective v} Π_c g_c(cos θ_{v_c}) / (m)_k
//! ```
//!
//! with `g_c = (1 + cos)^{#zeros} (1 − cos)^{#ones}` over the positions of
//! class `c`. The injective sum is expanded over set partitions of the classes
//! (Möbius inversion on the partition lattice), which leaves only full-period
//! power sums `S_p = Σ_i cos^p(2πi/m)`. Those are exact rationals:
//! `S_p = m/2^p · Σ_{k : m | 2k−p} C(p, k)`.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::io::Write;

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::bits::BitString;
use crate::entropy::{EntropySource, Seed};
use crate::error::PkdError;
use crate::gowf::{guess_output, predicted_error_rate, virtual_measure, MappingRule, Params, E_REF};

/// Largest `m` for the direct `O(m²)` Gram spectrum.
pub const GRAM_MAX_M: u64 = 1 << 12;
/// Largest `d` accepted by the exact joint-probability operations.
pub const EXACT_MAX_D: usize = 3;
/// Largest `d` accepted by the Monte Carlo sandwich check.
pub const SANDWICH_MAX_D: usize = 12;
const MC_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone)]
pub struct GramSpectrum {
    pub m: u64,
    pub eigenvalues: Vec<Complex64>,
    pub phases: Vec<f64>,
}

/// `(cos, sin)` of `2πj/m`, exact at multiples of a quarter turn.
fn unit_phase(j: u64, m: u64) -> (f64, f64) {
    let j = j % m;
    if (4 * j).is_multiple_of(m) {
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][(4 * j / m) as usize];
    }
    let phi = 2.0 * PI * j as f64 / m as f64;
    (phi.cos(), phi.sin())
}

/// Eigenvalues below this fraction of `m` are rounding noise of exact zeros.
const RANK_TOLERANCE: f64 = 1e-12;

/// DFT of `c_k = (1 + e^{i2πk/m}) / 2`.
pub fn gram_spectrum(m: u64) -> Result<GramSpectrum, PkdError> {
    if m < 2 {
        return Err(PkdError::InvalidInput(format!("Gram spectrum needs m >= 2, got {m}")));
    }
    if m > GRAM_MAX_M {
        return Err(PkdError::InvalidInput(format!("Gram spectrum is computed directly only for m <= {GRAM_MAX_M}")));
    }
    let mu = m as usize;
    let omega: Vec<Complex64> = (0..m).map(|j| unit_phase(j, m)).map(|(c, s)| Complex64::new(c, s)).collect();
    let c: Vec<Complex64> = (0..mu).map(|k| (Complex64::new(1.0, 0.0) + omega[k]) * 0.5).collect();
    let eigenvalues = (0..mu).map(|r| (0..mu).map(|k| c[k] * omega[(k * r) % mu]).sum()).collect();
    let phases = (0..mu).map(|j| 2.0 * PI * j as f64 / m as f64).collect();
    Ok(GramSpectrum { m, eigenvalues, phases })
}

/// `1 − |Σ_r √λ_r|² / m²` from the Gram spectrum.
pub fn min_error_probability(m: u64) -> Result<f64, PkdError> {
    let spec = gram_spectrum(m)?;
    let floor = RANK_TOLERANCE * m as f64;
    let root_sum: f64 = spec.eigenvalues.iter().filter(|l| l.re > floor).map(|l| l.re.sqrt()).sum();
    Ok(1.0 - root_sum * root_sum / (m * m) as f64)
}

/// `max(|Σ cos φ_j|, |Σ sin φ_j|) / m` over `φ_j = 2πj/m`.
pub fn mixed_state_check(m: u64) -> Result<f64, PkdError> {
    if m < 2 {
        return Err(PkdError::InvalidInput(format!("mixed-state check needs m >= 2, got {m}")));
    }
    let (c, s) = (0..m).map(|j| unit_phase(j, m)).fold((0.0f64, 0.0f64), |(c, s), (pc, ps)| (c + pc, s + ps));
    Ok(c.abs().max(s.abs()) / m as f64)
}

/// Which of the `d` input substrings coincide, as canonical class labels
/// (first occurrence order). Displayed as letters: `"aab"` means
/// `x_1 = x_2 ≠ x_3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EqualityPattern(Vec<u8>);

impl EqualityPattern {
    /// Canonicalizes arbitrary labels.
    pub fn new<T: PartialEq + Copy>(labels: &[T]) -> Self {
        let mut seen: Vec<T> = Vec::new();
        let canon = labels
            .iter()
            .map(|l| match seen.iter().position(|s| s == l) {
                Some(i) => i as u8,
                None => {
                    seen.push(*l);
                    (seen.len() - 1) as u8
                }
            })
            .collect();
        Self(canon)
    }

    pub fn parse(s: &str) -> Result<Self, PkdError> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(PkdError::InvalidInput(format!("pattern {s:?} must be lowercase letters")));
        }
        Ok(Self::new(s.as_bytes()))
    }

    pub fn all_distinct(d: usize) -> Self {
        Self((0..d as u8).collect())
    }

    pub fn all_equal(d: usize) -> Self {
        Self(vec![0; d])
    }

    pub fn labels(&self) -> &[u8] {
        &self.0
    }

    pub fn d(&self) -> usize {
        self.0.len()
    }

    pub fn classes(&self) -> usize {
        self.0.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Every set partition of `d` positions.
    pub fn enumerate(d: usize) -> Vec<Self> {
        fn grow(prefix: &mut Vec<u8>, d: usize, out: &mut Vec<EqualityPattern>) {
            if prefix.len() == d {
                out.push(EqualityPattern(prefix.clone()));
                return;
            }
            let next = prefix.iter().map(|&l| l + 1).max().unwrap_or(0);
            for l in 0..=next {
                prefix.push(l);
                grow(prefix, d, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        grow(&mut Vec::with_capacity(d), d, &mut out);
        out
    }
}

impl fmt::Display for EqualityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &l in &self.0 {
            f.write_char((b'a' + l) as char)?;
        }
        Ok(())
    }
}

/// Arithmetic shared by the exact and floating evaluations.
trait Field: Clone + Zero + One + std::ops::Sub<Output = Self> + std::ops::Div<Output = Self> {
    fn from_ratio(r: &BigRational) -> Self;
    fn from_int(v: i64) -> Self;
}

impl Field for BigRational {
    fn from_ratio(r: &BigRational) -> Self {
        r.clone()
    }
    fn from_int(v: i64) -> Self {
        BigRational::from_integer(v.into())
    }
}

impl Field for f64 {
    fn from_ratio(r: &BigRational) -> Self {
        r.to_f64().unwrap_or(f64::NAN)
    }
    fn from_int(v: i64) -> Self {
        v as f64
    }
}

fn binomial(n: u64, k: u64) -> BigInt {
    (0..k).fold(BigInt::one(), |acc, i| acc * BigInt::from(n - i) / BigInt::from(i + 1))
}

/// `Σ_{i<m} cos^p(2πi/m)`, exactly.
pub fn cos_power_sum(m: u64, p: u32) -> BigRational {
    let p64 = p as i64;
    let hits: BigInt =
        (0..=p64).filter(|&k| (2 * k - p64).rem_euclid(m as i64) == 0).map(|k| binomial(p as u64, k as u64)).sum();
    BigRational::new(hits * BigInt::from(m), BigInt::one() << p)
}

fn falling(m: u64, k: usize) -> BigInt {
    (0..k as u64).fold(BigInt::one(), |acc, i| acc * BigInt::from(m - i))
}

fn poly_mul(a: &[i64], b: &[i64]) -> Vec<i64> {
    let mut out = vec![0i64; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `(1 + x)^zeros (1 − x)^ones`.
fn class_poly(zeros: usize, ones: usize) -> Vec<i64> {
    let mut p = vec![1i64];
    for _ in 0..zeros {
        p = poly_mul(&p, &[1, 1]);
    }
    for _ in 0..ones {
        p = poly_mul(&p, &[1, -1]);
    }
    p
}

/// `Σ_{injective v} Π_c g_c(cos θ_{v_c})` by subset dynamic programming over
/// the Möbius expansion.
fn injective_sum<T: Field>(m: u64, polys: &[Vec<i64>]) -> T {
    let k = polys.len();
    let degree: usize = polys.iter().map(|p| p.len() - 1).sum();
    let sums: Vec<T> = (0..=degree as u32).map(|p| T::from_ratio(&cos_power_sum(m, p))).collect();
    let full = (1usize << k) - 1;

    let mut block_poly: Vec<Vec<i64>> = vec![vec![1]; full + 1];
    let mut weight: Vec<T> = vec![T::zero(); full + 1];
    for b in 1..=full {
        let low = b.trailing_zeros() as usize;
        block_poly[b] = poly_mul(&block_poly[b & (b - 1)], &polys[low]);
        let size = b.count_ones() as i64;
        let mobius = (1..size).fold(1i64, |acc, i| acc * -i);
        let s = block_poly[b].iter().enumerate().fold(T::zero(), |acc, (p, &c)| acc + T::from_int(c) * sums[p].clone());
        weight[b] = T::from_int(mobius) * s;
    }

    let mut f: Vec<T> = vec![T::zero(); full + 1];
    f[0] = T::one();
    for u in 1..=full {
        let low = u & u.wrapping_neg();
        let rest = u ^ low;
        let mut acc = T::zero();
        let mut sub = rest;
        loop {
            let block = sub | low;
            acc = acc + weight[block].clone() * f[u ^ block].clone();
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        f[u] = acc;
    }
    f[full].clone()
}

fn class_counts(pattern: &EqualityPattern, output: &BitString) -> Vec<(usize, usize)> {
    let mut counts = vec![(0usize, 0usize); pattern.classes()];
    for (i, &l) in pattern.labels().iter().enumerate() {
        let c = &mut counts[l as usize];
        if output.get(i) {
            c.1 += 1;
        } else {
            c.0 += 1;
        }
    }
    counts
}

fn conditional_generic<T: Field>(m: u64, counts: &[(usize, usize)]) -> T {
    let polys: Vec<Vec<i64>> = counts.iter().map(|&(z, o)| class_poly(z, o)).collect();
    let d: usize = counts.iter().map(|&(z, o)| z + o).sum();
    let denom = BigRational::from_integer(falling(m, counts.len()) << d);
    injective_sum::<T>(m, &polys) / T::from_ratio(&denom)
}

fn check_joint(m: u64, pattern: &EqualityPattern, output: &BitString, max_d: usize) -> Result<(), PkdError> {
    let d = pattern.d();
    if d == 0 || d > max_d {
        return Err(PkdError::InvalidInput(format!("joint width d = {d} is not supported (1..={max_d})")));
    }
    if output.len() != d {
        return Err(PkdError::Length { expected: d, actual: output.len() });
    }
    if m < 2 || (pattern.classes() as u64) > m {
        return Err(PkdError::InvalidInput(format!("m = {m} cannot hold {} distinct inputs", pattern.classes())));
    }
    Ok(())
}

/// Permutation-averaged `Pr[Y_d = output | X_d]` for inputs with `pattern`.
pub fn joint_conditional_probability(
    m: u64,
    pattern: &EqualityPattern,
    output: &BitString,
) -> Result<BigRational, PkdError> {
    check_joint(m, pattern, output, EXACT_MAX_D)?;
    Ok(conditional_generic(m, &class_counts(pattern, output)))
}

/// `Pr[X_d = x | Y_d = output]` for one input tuple `x` with `pattern`,
/// by Bayes with `Pr[x] = m^-d` and `Pr[output] = 2^-d`.
pub fn posterior_probability(m: u64, pattern: &EqualityPattern, output: &BitString) -> Result<BigRational, PkdError> {
    let cond = joint_conditional_probability(m, pattern, output)?;
    let d = pattern.d();
    Ok(cond * BigRational::new(BigInt::one() << d, BigInt::from(m).pow(d as u32)))
}

/// `Pr[Y_d = output]` with every input uniform, summed over patterns.
pub fn output_marginal(m: u64, d: usize, output: &BitString) -> Result<BigRational, PkdError> {
    let total = BigInt::from(m).pow(d as u32);
    let mut acc = BigRational::zero();
    for pattern in EqualityPattern::enumerate(d) {
        if pattern.classes() as u64 > m {
            continue;
        }
        let weight = BigRational::new(falling(m, pattern.classes()), total.clone());
        acc += weight * joint_conditional_probability(m, &pattern, output)?;
    }
    Ok(acc)
}

/// Every output string of width `d`, in counting order.
pub fn outputs(d: usize) -> Vec<BitString> {
    (0..1u64 << d)
        .map(|v| {
            let mut b = BitString::with_capacity(d);
            b.push_uint(v, d as u32);
            b
        })
        .collect()
}

/// Exact conditional and posterior values for every pattern and output.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    pub d: usize,
    pub m: u64,
    pub conditional: BTreeMap<(EqualityPattern, String), BigRational>,
    pub posterior: BTreeMap<(EqualityPattern, String), BigRational>,
}

pub fn posterior_table(m: u64, d: usize) -> Result<PosteriorTable, PkdError> {
    let mut conditional = BTreeMap::new();
    let mut posterior = BTreeMap::new();
    for pattern in EqualityPattern::enumerate(d) {
        if pattern.classes() as u64 > m {
            continue;
        }
        for y in outputs(d) {
            let key = (pattern.clone(), y.to_string());
            conditional.insert(key.clone(), joint_conditional_probability(m, &pattern, &y)?);
            posterior.insert(key, posterior_probability(m, &pattern, &y)?);
        }
    }
    Ok(PosteriorTable { d, m, conditional, posterior })
}

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

/// Closed forms of `Pr[Y_d | X_d]` for `d ≤ 3`, valid for `m ≥ 4`.
pub fn closed_form_conditional(m: u64, pattern: &EqualityPattern, output: &BitString) -> Option<BigRational> {
    let d = pattern.d();
    if d == 0 || d > 3 || output.len() != d || m < 4 {
        return None;
    }
    let m = m as i64;
    let bits: Vec<bool> = output.iter().collect();
    let labels = pattern.labels();
    Some(match d {
        1 => ratio(1, 2),
        2 => {
            let same = bits[0] == bits[1];
            match (labels[1] == 0, same) {
                (true, true) => ratio(3, 8),
                (true, false) => ratio(1, 8),
                (false, true) => ratio(2 * m - 3, 8 * (m - 1)),
                (false, false) => ratio(2 * m - 1, 8 * (m - 1)),
            }
        }
        _ => match pattern.classes() {
            1 => {
                if bits.iter().all(|&b| b == bits[0]) {
                    ratio(5, 16)
                } else {
                    ratio(1, 16)
                }
            }
            3 => {
                if bits.iter().all(|&b| b == bits[0]) {
                    ratio(2 * m * m - 9 * m + 10, 16 * (m - 1) * (m - 2))
                } else {
                    ratio(2 * m * m - 5 * m + 2, 16 * (m - 1) * (m - 2))
                }
            }
            _ => {
                // One pair shares a value; `lone` is the odd position out.
                let lone = (0..3).find(|&i| labels.iter().filter(|&&l| l == labels[i]).count() == 1).unwrap();
                let pair: Vec<usize> = (0..3).filter(|&i| i != lone).collect();
                if bits[pair[0]] != bits[pair[1]] {
                    ratio(1, 16)
                } else if bits[pair[0]] == bits[lone] {
                    ratio(3 * m - 5, 16 * (m - 1))
                } else {
                    ratio(3 * m - 1, 16 * (m - 1))
                }
            }
        },
    })
}

/// Closed-form `d = 2` posteriors: `(2m−3)/(2(m−1)m²)`, `3/(2m²)`,
/// `(2m−1)/(2(m−1)m²)`, `1/(2m²)`.
pub fn closed_form_posterior_d2(m: u64, pattern: &EqualityPattern, output: &BitString) -> Option<BigRational> {
    if pattern.d() != 2 || output.len() != 2 || m < 4 {
        return None;
    }
    let m = m as i64;
    let same = output.get(0) == output.get(1);
    Some(match (pattern.classes() == 1, same) {
        (false, true) => ratio(2 * m - 3, 2 * (m - 1) * m * m),
        (true, true) => ratio(3, 2 * m * m),
        (false, false) => ratio(2 * m - 1, 2 * (m - 1) * m * m),
        (true, false) => ratio(1, 2 * m * m),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EntropyRow {
    pub output: String,
    pub entropy: f64,
    /// Total posterior mass over all `m^d` inputs, exactly one.
    pub mass: f64,
}

/// `H[X_d | Y_d = y]` for every output `y`.
pub fn conditional_entropy_joint(m: u64, d: usize) -> Result<Vec<EntropyRow>, PkdError> {
    if !(2..=3).contains(&d) {
        return Err(PkdError::InvalidInput(format!("joint entropy supports d in {{2, 3}}, got {d}")));
    }
    let mut rows = Vec::new();
    for y in outputs(d) {
        let mut h = 0.0;
        let mut mass = BigRational::zero();
        for pattern in EqualityPattern::enumerate(d) {
            if pattern.classes() as u64 > m {
                continue;
            }
            let post = posterior_probability(m, &pattern, &y)?;
            let count = BigRational::from_integer(falling(m, pattern.classes()));
            let p = post.to_f64().unwrap_or(0.0);
            if p > 0.0 {
                h -= count.to_f64().unwrap_or(f64::NAN) * p * p.log2();
            }
            mass += count * post;
        }
        rows.push(EntropyRow { output: y.to_string(), entropy: h, mass: mass.to_f64().unwrap_or(f64::NAN) });
    }
    Ok(rows)
}

/// Closed form of `H[(x_j ‖ x_s) | y]`.
pub fn closed_form_entropy_d2(m: u64, output: &BitString) -> Option<f64> {
    if output.len() != 2 || m < 4 {
        return None;
    }
    let mf = m as f64;
    let lm = mf.log2();
    Some(if output.get(0) == output.get(1) {
        2.0 * lm
            - (1.0 - 3.0 / (2.0 * mf)) * ((2.0 * mf - 3.0) / (2.0 * (mf - 1.0))).log2()
            - 3.0 / (2.0 * mf) * 1.5f64.log2()
    } else {
        2.0 * lm
            - (1.0 - 1.0 / (2.0 * mf)) * ((2.0 * mf - 1.0) / (2.0 * (mf - 1.0))).log2()
            - 1.0 / (2.0 * mf) * 0.5f64.log2()
    })
}

/// Finite-sum extremes of `Pr[Y_d | X_d]` for `d` identical inputs.
pub fn dbit_identical_extremes(m: u64, d: u32) -> Result<(f64, f64), PkdError> {
    if m < 2 || d == 0 {
        return Err(PkdError::InvalidInput(format!("extremes need m >= 2 and d >= 1, got m = {m}, d = {d}")));
    }
    let (up, down) = (d.div_ceil(2) as i32, (d / 2) as i32);
    let (mut max, mut min) = (0.0f64, 0.0f64);
    for i in 0..m {
        let c = (2.0 * PI * i as f64 / m as f64).cos();
        let (p0, p1) = ((1.0 + c) / 2.0, (1.0 - c) / 2.0);
        max += p0.powi(d as i32);
        min += p0.powi(up) * p1.powi(down);
    }
    Ok((max / m as f64, min / m as f64))
}

/// `C(2d, d) / 4^d`, the large-`m` limit of the maximum.
pub fn max_limit(d: u32) -> f64 {
    binomial(2 * d as u64, d as u64).to_f64().unwrap_or(f64::NAN) / 4f64.powi(d as i32)
}

/// Large-`m` limit of the minimum: `d!/(2^{2d} ((d/2)!)²)` for even `d`,
/// `(d−1)!/(2^{2d−1} (((d−1)/2)!)²)` for odd `d`.
pub fn min_limit(d: u32) -> f64 {
    let fact = |n: u32| (1..=n as u64).fold(BigInt::one(), |a, i| a * i).to_f64().unwrap_or(f64::NAN);
    if d.is_multiple_of(2) {
        fact(d) / (2f64.powi(2 * d as i32) * fact(d / 2).powi(2))
    } else {
        fact(d - 1) / (2f64.powi(2 * d as i32 - 1) * fact((d - 1) / 2).powi(2))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichReport {
    pub m: u64,
    pub d: usize,
    pub trials: u64,
    pub lower: f64,
    pub upper: f64,
    pub min_observed: f64,
    pub max_observed: f64,
    pub violations: u64,
}

/// Samples uniform input tuples and outputs and evaluates the
/// permutation-averaged conditional of each against
/// `[2^-(2d-1), 1/2]`.
pub fn sandwich_bound_check(m: u64, d: usize, trials: u64, seed: Seed) -> Result<SandwichReport, PkdError> {
    if !(2..=SANDWICH_MAX_D).contains(&d) {
        return Err(PkdError::InvalidInput(format!("sandwich check supports d in 2..={SANDWICH_MAX_D}, got {d}")));
    }
    if m < 2 || trials == 0 {
        return Err(PkdError::InvalidInput("sandwich check needs m >= 2 and trials >= 1".into()));
    }
    let lower = 2f64.powi(-(2 * d as i32 - 1));
    let upper = 0.5;
    let chunks = (trials as usize).div_ceil(MC_CHUNK);
    let parts: Vec<(f64, f64, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut src = EntropySource::seeded_stream(seed, c as u64);
            let mut cache: HashMap<Vec<(usize, usize)>, f64> = HashMap::new();
            let count = (trials as usize - c * MC_CHUNK).min(MC_CHUNK);
            let (mut lo, mut hi, mut bad) = (f64::INFINITY, f64::NEG_INFINITY, 0u64);
            for _ in 0..count {
                let x: Vec<u64> = (0..d).map(|_| src.draw_uniform_index(m)).collect();
                let y = src.draw_bits(d);
                let mut key = class_counts(&EqualityPattern::new(&x), &y);
                key.sort_unstable();
                let p = *cache.entry(key.clone()).or_insert_with(|| conditional_generic::<f64>(m, &key));
                lo = lo.min(p);
                hi = hi.max(p);
                if p < lower * (1.0 - 1e-12) || p > upper * (1.0 + 1e-12) {
                    bad += 1;
                }
            }
            (lo, hi, bad)
        })
        .collect();
    let min_observed = parts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_observed = parts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let violations = parts.iter().map(|p| p.2).sum();
    Ok(SandwichReport { m, d, trials, lower, upper, min_observed, max_observed, violations })
}

#[derive(Debug, Clone, Serialize)]
pub struct BerEstimate {
    pub trials: u64,
    pub errors: u64,
    pub rate: f64,
    /// Exact rate for the quantized thresholds at this `(m, b)`.
    pub predicted: f64,
    pub sigma: f64,
}

impl BerEstimate {
    pub fn within_sigmas(&self, k: f64) -> bool {
        (self.rate - self.predicted).abs() <= k * self.sigma
    }
}

pub const BER_MIN_TRIALS: u64 = 10_000;

/// Fraction of `z_i ≠ y_i` over `trials` symbols of the GOWF pipeline.
pub fn empirical_ber(params: &Params, trials: u64, seed: Seed) -> Result<BerEstimate, PkdError> {
    if trials < BER_MIN_TRIALS {
        return Err(PkdError::InvalidInput(format!(
            "empirical BER needs at least {BER_MIN_TRIALS} trials, got {trials}"
        )));
    }
    let chunks = (trials as usize).div_ceil(MC_CHUNK);
    let w = params.log_m();
    let errors: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<u64, PkdError> {
            let mut src = EntropySource::seeded_stream(seed, c as u64);
            let count = (trials as usize - c * MC_CHUNK).min(MC_CHUNK);
            let rule = MappingRule::sample(&mut src, params.m)?;
            let x = src.draw_bits(count * w as usize);
            let x_prime = rule.apply(&x)?;
            let y = virtual_measure(&x_prime, &mut src, params)?;
            let z = guess_output(&x_prime, params.m)?;
            y.hamming_distance(&z)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    let predicted = predicted_error_rate(params.m, params.b);
    Ok(BerEstimate {
        trials,
        errors,
        rate: errors as f64 / trials as f64,
        predicted,
        sigma: (predicted * (1.0 - predicted) / trials as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Discrimination,
    Joint,
    Ber,
    Entropy,
    All,
}

impl std::str::FromStr for Suite {
    type Err = PkdError;
    fn from_str(s: &str) -> Result<Self, PkdError> {
        Ok(match s {
            "discrimination" => Suite::Discrimination,
            "joint" => Suite::Joint,
            "ber" => Suite::Ber,
            "entropy" => Suite::Entropy,
            "all" => Suite::All,
            other => return Err(PkdError::InvalidInput(format!("unknown suite {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Exact,
    Estimate,
}

/// One verified number. `value` and `reference` are printed exactly as
/// compared (rationals as `p/q`).
#[derive(Debug, Clone, Serialize)]
pub struct StatCheck {
    pub quantity: String,
    pub m: u64,
    pub d: usize,
    pub pattern: String,
    pub kind: ValueKind,
    pub value: String,
    pub reference: String,
    pub abs_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub m: u64,
    pub b: u32,
    pub trials: u64,
    pub seed: Seed,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { m: 1024, b: 12, trials: 1_000_000, seed: [0; 32] }
    }
}

#[allow(clippy::too_many_arguments)]
fn float_check(
    quantity: &str,
    m: u64,
    d: usize,
    pattern: &str,
    kind: ValueKind,
    value: f64,
    reference: f64,
    tol: f64,
) -> StatCheck {
    let abs_error = (value - reference).abs();
    StatCheck {
        quantity: quantity.into(),
        m,
        d,
        pattern: pattern.into(),
        kind,
        value: format!("{value:.12}"),
        reference: format!("{reference:.12}"),
        abs_error,
        pass: abs_error <= tol,
    }
}

/// `value ≤ bound` (or `≥` when `above`), allowing `1e-12` relative float slack.
fn bound_check(quantity: &str, m: u64, d: usize, value: f64, bound: f64, above: bool) -> StatCheck {
    let slack = 1e-12 * bound.abs();
    let pass = if above { value >= bound - slack } else { value <= bound + slack };
    StatCheck {
        quantity: quantity.into(),
        m,
        d,
        pattern: if above { ">=".into() } else { "<=".into() },
        kind: ValueKind::Exact,
        value: format!("{value:.12}"),
        reference: format!("{bound:.12}"),
        abs_error: (value - bound).abs(),
        pass,
    }
}

fn rational_check(
    quantity: &str,
    m: u64,
    d: usize,
    pattern: &str,
    value: &BigRational,
    reference: &BigRational,
) -> StatCheck {
    StatCheck {
        quantity: quantity.into(),
        m,
        d,
        pattern: pattern.into(),
        kind: ValueKind::Exact,
        value: value.to_string(),
        reference: reference.to_string(),
        abs_error: (value - reference).abs().to_f64().unwrap_or(f64::NAN),
        pass: value == reference,
    }
}

fn discrimination_suite(opts: &SuiteOptions) -> Result<Vec<StatCheck>, PkdError> {
    let mut ms = vec![2, 4, 8, 16, 64, 1024];
    if opts.m <= GRAM_MAX_M && !ms.contains(&opts.m) {
        ms.push(opts.m);
    }
    let mut out = Vec::new();
    for m in ms {
        let spec = gram_spectrum(m)?;
        let trace: f64 = spec.eigenvalues.iter().map(|l| l.re).sum();
        out.push(float_check("gram_trace", m, 1, "", ValueKind::Exact, trace, m as f64, 1e-9));
        let half = m as f64 / 2.0;
        let top = [spec.eigenvalues[0], spec.eigenvalues[m as usize - 1]];
        for (r, l) in [(0, top[0]), (m - 1, top[1])] {
            out.push(float_check("gram_eigenvalue", m, 1, &format!("r={r}"), ValueKind::Exact, l.re, half, 1e-9));
        }
        let rest = spec.eigenvalues[1..m as usize - 1].iter().map(|l| l.norm()).fold(0.0, f64::max);
        if m > 2 {
            out.push(float_check("gram_other_eigenvalues_max", m, 1, "", ValueKind::Exact, rest, 0.0, 1e-9));
        }
        let imag = spec.eigenvalues.iter().map(|l| l.im.abs()).fold(0.0, f64::max);
        out.push(float_check("gram_imag_max", m, 1, "", ValueKind::Exact, imag, 0.0, 1e-9));
        out.push(float_check(
            "p_min",
            m,
            1,
            "",
            ValueKind::Exact,
            min_error_probability(m)?,
            1.0 - 2.0 / m as f64,
            1e-9,
        ));
        out.push(float_check("mixed_state_residual", m, 1, "", ValueKind::Exact, mixed_state_check(m)?, 0.0, 1e-12));
    }
    Ok(out)
}

/// Widths and `m` of the identical-input extremes rows.
pub const EXTREMES_D: [u32; 3] = [2, 4, 6];
pub const EXTREMES_M: u64 = 1 << 16;

fn joint_suite(opts: &SuiteOptions) -> Result<Vec<StatCheck>, PkdError> {
    let m = opts.m;
    let mut out = Vec::new();
    for d in 1..=EXACT_MAX_D {
        for pattern in EqualityPattern::enumerate(d) {
            if pattern.classes() as u64 > m {
                continue;
            }
            for y in outputs(d) {
                let label = format!("{pattern}|{y}");
                let cond = joint_conditional_probability(m, &pattern, &y)?;
                if let Some(reference) = closed_form_conditional(m, &pattern, &y) {
                    out.push(rational_check("conditional", m, d, &label, &cond, &reference));
                }
                let post = posterior_probability(m, &pattern, &y)?;
                if let Some(reference) = closed_form_posterior_d2(m, &pattern, &y) {
                    out.push(rational_check("posterior", m, d, &label, &post, &reference));
                }
                let factor =
                    (post * BigRational::from_integer(BigInt::from(m).pow(d as u32))).to_f64().unwrap_or(f64::NAN);
                let lo = 2f64.powi(1 - d as i32);
                let hi = 2f64.powi(d as i32 - 1);
                out.push(bound_check(&format!("posterior_factor[{label}]"), m, d, factor, lo, true));
                out.push(bound_check(&format!("posterior_factor[{label}]"), m, d, factor, hi, false));
            }
        }
        for y in outputs(d) {
            let marginal = output_marginal(m, d, &y)?;
            let reference = BigRational::new(BigInt::one(), BigInt::one() << d);
            out.push(rational_check("output_marginal", m, d, &y.to_string(), &marginal, &reference));
        }
    }
    for d in EXTREMES_D {
        let (max, min) = dbit_identical_extremes(EXTREMES_M, d)?;
        let du = d as usize;
        out.push(float_check("identical_max", EXTREMES_M, du, "", ValueKind::Exact, max, max_limit(d), 1e-4));
        out.push(bound_check("identical_max", EXTREMES_M, du, max, 0.5, false));
        out.push(float_check("identical_min", EXTREMES_M, du, "", ValueKind::Exact, min, min_limit(d), 1e-4));
        out.push(bound_check("identical_min", EXTREMES_M, du, min, 2f64.powi(-(2 * d as i32 - 1)), false));
    }
    let sandwich_trials = opts.trials.clamp(1, 100_000);
    for d in [2usize, 6] {
        let r = sandwich_bound_check(m, d, sandwich_trials, opts.seed)?;
        out.push(bound_check("sandwich_min_observed", m, d, r.min_observed, r.lower, true));
        out.push(bound_check("sandwich_max_observed", m, d, r.max_observed, r.upper, false));
        out.push(StatCheck {
            quantity: "sandwich_violations".into(),
            m,
            d,
            pattern: format!("trials={}", r.trials),
            kind: ValueKind::Estimate,
            value: r.violations.to_string(),
            reference: "0".into(),
            abs_error: r.violations as f64,
            pass: r.violations == 0,
        });
    }
    Ok(out)
}

fn ber_suite(opts: &SuiteOptions) -> Result<Vec<StatCheck>, PkdError> {
    let params = Params { m: opts.m, b: opts.b, ..Params::default() }.validated()?;
    let est = empirical_ber(&params, opts.trials, opts.seed)?;
    let quant = 2f64.powi(-(opts.b as i32));
    let mf = opts.m as f64;
    Ok(vec![
        float_check(
            "ber_vs_predicted",
            opts.m,
            1,
            "3sigma",
            ValueKind::Estimate,
            est.rate,
            est.predicted,
            3.0 * est.sigma,
        ),
        float_check(
            "ber_vs_limit",
            opts.m,
            1,
            "3sigma+2^-b",
            ValueKind::Estimate,
            est.rate,
            E_REF,
            3.0 * est.sigma + quant + 2.0 / (mf * mf),
        ),
        float_check(
            "predicted_vs_limit",
            opts.m,
            1,
            "2^-b+2/m^2",
            ValueKind::Exact,
            est.predicted,
            E_REF,
            quant + 2.0 / (mf * mf),
        ),
    ])
}

/// Below this `m` the `d log2 m` approximation is not asserted.
pub const ENTROPY_APPROX_MIN_M: u64 = 1024;

fn entropy_suite(opts: &SuiteOptions) -> Result<Vec<StatCheck>, PkdError> {
    let m = opts.m;
    let mut out = Vec::new();
    for d in 2..=3usize {
        let target = d as f64 * (m as f64).log2();
        let tol = if d == 2 { 0.01 } else { 0.02 };
        for (row, y) in conditional_entropy_joint(m, d)?.into_iter().zip(outputs(d)) {
            out.push(float_check("posterior_mass", m, d, &row.output, ValueKind::Exact, row.mass, 1.0, 1e-12));
            if d == 2 {
                let closed = closed_form_entropy_d2(m, &y).unwrap_or(f64::NAN);
                out.push(float_check(
                    "entropy_closed_form",
                    m,
                    d,
                    &row.output,
                    ValueKind::Exact,
                    row.entropy,
                    closed,
                    1e-9,
                ));
            }
            if m >= ENTROPY_APPROX_MIN_M {
                out.push(float_check(
                    "entropy_vs_dlogm",
                    m,
                    d,
                    &row.output,
                    ValueKind::Exact,
                    row.entropy,
                    target,
                    tol,
                ));
            }
        }
    }
    Ok(out)
}

pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<Vec<StatCheck>, PkdError> {
    Ok(match suite {
        Suite::Discrimination => discrimination_suite(opts)?,
        Suite::Joint => joint_suite(opts)?,
        Suite::Ber => ber_suite(opts)?,
        Suite::Entropy => entropy_suite(opts)?,
        Suite::All => {
            let mut all = discrimination_suite(opts)?;
            all.extend(joint_suite(opts)?);
            all.extend(ber_suite(opts)?);
            all.extend(entropy_suite(opts)?);
            all
        }
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    quantity: &'a str,
    m: u64,
    d: usize,
    pattern: &'a str,
    exact_or_estimate: String,
    reference_value: &'a str,
    abs_error: f64,
    pass: bool,
}

/// Columns: quantity, m, d, pattern, exact_or_estimate, reference_value, abs_error, pass.
pub fn write_csv<W: Write>(checks: &[StatCheck], w: W) -> Result<(), PkdError> {
    let mut wr = csv::Writer::from_writer(w);
    for c in checks {
        let kind = match c.kind {
            ValueKind::Exact => "exact",
            ValueKind::Estimate => "estimate",
        };
        wr.serialize(CsvRow {
            quantity: &c.quantity,
            m: c.m,
            d: c.d,
            pattern: &c.pattern,
            exact_or_estimate: format!("{kind}:{}", c.value),
            reference_value: &c.reference,
            abs_error: c.abs_error,
            pass: c.pass,
        })
        .map_err(|e| PkdError::InvalidInput(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn format_table(checks: &[StatCheck]) -> String {
    let mut s = format!(
        "{:<40} {:>6} {:>2} {:<12} {:>24} {:>24} {:>10}  result\n",
        "quantity", "m", "d", "pattern", "value", "reference", "abs_error"
    );
    for c in checks {
        let _ = writeln!(
            s,
            "{:<40} {:>6} {:>2} {:<12} {:>24} {:>24} {:>10.3e}  {}",
            c.quantity,
            c.m,
            c.d,
            c.pattern,
            c.value,
            c.reference,
            c.abs_error,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    s
}
