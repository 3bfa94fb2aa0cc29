//! Oracles and session drivers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ops::{Add, Mul};
use std::thread;

use num_bigint::BigInt;
use num_rational::BigRational;
use pkd::entropy::{EntropySource, Seed};
use pkd::gowf::Params;
use pkd::protocol::{run_alice, run_bob, KeyMaterial, SessionConfig, SessionResult};
use pkd::toeplitz::ToeplitzSpec;
use pkd::transport::{loopback_pair, Channel};
use pkd::BitString;

pub fn seed(tag: u8) -> Seed {
    let mut s = [0u8; 32];
    s[0] = tag;
    s
}

/// `Γ_i = ⊕_j H[i][j]·key_j` with `H[i][j] = seed[i − j + cols − 1]`, one bit at a time.
pub fn naive_hash(key: &BitString, spec: &ToeplitzSpec) -> BitString {
    let (rows, cols) = (spec.rows(), spec.cols());
    BitString::from_bits(
        (0..rows).map(|i| (0..cols).fold(false, |acc, j| acc ^ (spec.seed().get(i + cols - 1 - j) & key.get(j)))),
    )
}

/// `D_j = ⊕_i K_i·H[i][j]`.
pub fn naive_mask(k: &BitString, spec: &ToeplitzSpec) -> BitString {
    let (rows, cols) = (spec.rows(), spec.cols());
    BitString::from_bits(
        (0..cols).map(|j| (0..rows).fold(false, |acc, i| acc ^ (spec.seed().get(i + cols - 1 - j) & k.get(i)))),
    )
}

pub fn entropy_h(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Key length recomputed from its definition.
pub fn expected_ell(n: usize, lambda: u64, eps_cor: f64, eps_sec: f64) -> i64 {
    let v = n as f64 - lambda as f64 - (2.0 / eps_cor).log2() - 2.0 * (3.0 / (2.0 * eps_sec)).log2();
    v.floor() as i64
}

/// `a + b·√2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ZSqrt2 {
    pub a: i128,
    pub b: i128,
}

impl Add for ZSqrt2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { a: self.a + o.a, b: self.b + o.b }
    }
}

impl Mul for ZSqrt2 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self { a: self.a * o.a + 2 * self.b * o.b, b: self.a * o.b + self.b * o.a }
    }
}

/// `2·cos(2πx/m)` for `m ∈ {2, 4, 8}`, read off the unit circle at eighth turns.
fn two_cos(x: u64, m: u64) -> ZSqrt2 {
    assert!(matches!(m, 2 | 4 | 8), "exact cosine table covers m <= 8");
    let eighth = (x * (8 / m)) % 8;
    let (a, b) = [(2, 0), (0, 1), (0, 0), (0, -1), (-2, 0), (0, -1), (0, 0), (0, 1)][eighth as usize];
    ZSqrt2 { a, b }
}

/// `4·Pr[y | x'] = 2 ± 2cos(2πx'/m)`.
fn four_p(y: bool, x_prime: u64, m: u64) -> ZSqrt2 {
    let c = two_cos(x_prime, m);
    if y {
        ZSqrt2 { a: 2 - c.a, b: -c.b }
    } else {
        ZSqrt2 { a: 2 + c.a, b: c.b }
    }
}

fn permutations(m: usize) -> Vec<Vec<u64>> {
    fn go(prefix: &mut Vec<u64>, used: &mut [bool], out: &mut Vec<Vec<u64>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v as u64);
                go(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; m], &mut out);
    out
}

/// `Pr[Y = y | X = x]` averaged over every permutation of `{0..m}`, exactly.
/// Returns `None` if the √2 part fails to cancel.
pub fn brute_conditional(m: u64, x: &[u64], y: &[bool]) -> Option<BigRational> {
    conditional_over(&permutations(m as usize), m, x, y)
}

fn conditional_over(perms: &[Vec<u64>], m: u64, x: &[u64], y: &[bool]) -> Option<BigRational> {
    let mut total = ZSqrt2::default();
    for f in perms {
        let term = x.iter().zip(y).fold(ZSqrt2 { a: 1, b: 0 }, |acc, (&xi, &yi)| acc * four_p(yi, f[xi as usize], m));
        total = total + term;
    }
    if total.b != 0 {
        return None;
    }
    let den = BigInt::from(4).pow(x.len() as u32) * BigInt::from(perms.len());
    Some(BigRational::new(total.a.into(), den))
}

/// Brute-force conditionals and posteriors for every tuple shape of width `d`.
pub struct BruteTable {
    /// Keyed by (canonical labels, output bits as "0101").
    pub conditional: BTreeMap<(Vec<u8>, String), BigRational>,
    pub posterior: BTreeMap<(Vec<u8>, String), BigRational>,
    /// `Pr[Y = y]` summed over all `m^d` tuples.
    pub marginal: BTreeMap<String, BigRational>,
}

fn canonical(x: &[u64]) -> Vec<u8> {
    let mut seen: Vec<u64> = Vec::new();
    x.iter()
        .map(|v| match seen.iter().position(|s| s == v) {
            Some(p) => p as u8,
            None => {
                seen.push(*v);
                (seen.len() - 1) as u8
            }
        })
        .collect()
}

fn bits_str(y: &[bool]) -> String {
    y.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn brute_table(m: u64, d: usize) -> BruteTable {
    let tuples: Vec<Vec<u64>> = (0..m.pow(d as u32))
        .map(|mut v| {
            (0..d)
                .map(|_| {
                    let r = v % m;
                    v /= m;
                    r
                })
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect()
        })
        .collect();
    let ys: Vec<Vec<bool>> = (0..1u32 << d).map(|v| (0..d).rev().map(|i| (v >> i) & 1 == 1).collect()).collect();
    let perms = permutations(m as usize);
    let mut conditional = BTreeMap::new();
    for x in &tuples {
        let shape = canonical(x);
        for y in &ys {
            let key = (shape.clone(), bits_str(y));
            conditional.entry(key).or_insert_with(|| {
                let rep: Vec<u64> = shape.iter().map(|&l| l as u64).collect();

                conditional_over(&perms, m, &rep, y).expect("irrational permutation average")
            });
        }
    }
    let prior = BigRational::new(BigInt::from(1), BigInt::from(m).pow(d as u32));
    let mut marginal = BTreeMap::new();
    for y in &ys {
        let mut acc = BigRational::from_integer(BigInt::from(0));
        for x in &tuples {
            acc += &prior * &conditional[&(canonical(x), bits_str(y))];
        }
        marginal.insert(bits_str(y), acc);
    }
    let posterior =
        conditional.iter().map(|((shape, y), c)| ((shape.clone(), y.clone()), c * &prior / &marginal[y])).collect();
    BruteTable { conditional, posterior, marginal }
}

/// Alice on a worker thread, Bob here, over a fresh loopback pair.
pub fn loopback_session(
    cfg: &SessionConfig,
    ka: &mut KeyMaterial,
    kb: &mut KeyMaterial,
    source: &mut EntropySource,
) -> (SessionResult, SessionResult) {
    let (mut ca, mut cb) = loopback_pair();
    session_over(cfg, ka, kb, source, &mut ca, &mut cb)
}

pub fn session_over<A: Channel + Send, B: Channel>(
    cfg: &SessionConfig,
    ka: &mut KeyMaterial,
    kb: &mut KeyMaterial,
    source: &mut EntropySource,
    ca: &mut A,
    cb: &mut B,
) -> (SessionResult, SessionResult) {
    thread::scope(|s| {
        let h = s.spawn(|| run_alice(cfg, ka, ca, source).expect("alice"));
        let b = run_bob(cfg, kb, cb).expect("bob");
        (h.join().expect("alice thread"), b)
    })
}

/// Identical key material for both parties.
pub fn key_pair(params: &Params, sessions: u64, extra: usize, material_seed: Seed) -> (KeyMaterial, KeyMaterial) {
    let mut src = EntropySource::seeded(material_seed);
    let km = KeyMaterial::generate(params, sessions, extra, sessions, &mut src).expect("key material");
    let mut buf = Vec::new();
    km.write_to(&mut buf).expect("serialize");
    let twin = KeyMaterial::read_from(&buf[..]).expect("deserialize");
    (km, twin)
}
