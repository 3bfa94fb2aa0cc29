//! Cascade error correction.
//!
//! The reference side (Alice) only answers parity queries. The noisy side
//! (Bob) drives every pass:
//!
//! 1. For pass `p` the key is permuted (identity for pass 0, a shuffle drawn
//!    from the shared seed otherwise) and cut into blocks of `k0 · 2^p` bits.
//! 2. Bob asks for every block's parity. Blocks whose parity differs from his
//!    hold an odd number of errors; a batched binary search over each of them
//!    locates and flips one error per block.
//! 3. Every flip toggles the parity mismatch of the block containing that bit
//!    in all earlier passes. Newly odd blocks are searched again, one pass at
//!    a time, until no known block disagrees.
//!
//! Each disclosed parity is one bit of leakage and is counted in the
//! [`LeakageLedger`] on both sides.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::bits::BitString;
use crate::entropy::{EntropySource, Seed};
use crate::error::PkdError;
use crate::gowf::{binary_entropy, E_REF};
use crate::transport::{decode_bits, encode_bits, Channel, MessageType};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LeakageLedger {
    pub parity_bits_disclosed: u64,
    pub messages_exchanged: u64,
}

/// Source of one-time-pad bits for encrypted parity responses.
pub trait ParityPad {
    fn take(&mut self, bits: usize) -> Result<BitString, PkdError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CascadeConfig {
    pub passes: u32,
    pub initial_block_size: usize,
    pub shuffle_seed: Seed,
}

/// `max(2, round(0.73 / e))`.
pub fn default_block_size(e: f64) -> usize {
    ((0.73 / e).round() as usize).max(2)
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { passes: 4, initial_block_size: default_block_size(E_REF), shuffle_seed: [0; 32] }
    }
}

impl CascadeConfig {
    pub fn with_seed(shuffle_seed: Seed) -> Self {
        Self { shuffle_seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PkdError> {
        if self.passes == 0 || self.passes > 32 {
            return Err(PkdError::InvalidParams(format!("Cascade passes must be in [1, 32], got {}", self.passes)));
        }
        if self.initial_block_size == 0 {
            return Err(PkdError::InvalidParams("Cascade block size must be positive".into()));
        }
        Ok(())
    }
}

/// One parity query: a sub-range `[start, end)` of a block, in permuted order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityQuery {
    pub pass: u32,
    pub block: u32,
    pub start: u32,
    pub end: u32,
}

pub fn encode_request(queries: &[ParityQuery]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 16 * queries.len());
    out.extend_from_slice(&(queries.len() as u32).to_be_bytes());
    for q in queries {
        for v in [q.pass, q.block, q.start, q.end] {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

pub fn decode_request(buf: &[u8]) -> Result<Vec<ParityQuery>, PkdError> {
    let bad = || PkdError::Desync("malformed parity request".into());
    if buf.len() < 4 {
        return Err(bad());
    }
    let count = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if buf.len() != 4 + 16 * count {
        return Err(bad());
    }
    let word = |i: usize| u32::from_be_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    Ok((0..count)
        .map(|k| ParityQuery {
            pass: word(4 * k),
            block: word(4 * k + 1),
            start: word(4 * k + 2),
            end: word(4 * k + 3),
        })
        .collect())
}

/// Block layout shared by both sides: per-pass permutation and block size.
struct Layout {
    n: usize,
    perms: Vec<Vec<u32>>,
    positions: Vec<Vec<u32>>,
    block_sizes: Vec<usize>,
}

impl Layout {
    fn new(n: usize, cfg: &CascadeConfig) -> Result<Self, PkdError> {
        cfg.validate()?;
        if n == 0 || n > u32::MAX as usize {
            return Err(PkdError::InvalidInput(format!("cannot reconcile a key of {n} bits")));
        }
        let mut perms = Vec::with_capacity(cfg.passes as usize);
        let mut positions = Vec::with_capacity(cfg.passes as usize);
        let mut block_sizes = Vec::with_capacity(cfg.passes as usize);
        for p in 0..cfg.passes {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            if p > 0 {
                let mut src = EntropySource::seeded_stream(cfg.shuffle_seed, p as u64);
                for i in (1..n).rev() {
                    let j = src.draw_uniform_index(i as u64 + 1) as usize;
                    perm.swap(i, j);
                }
            }
            let mut pos = vec![0u32; n];
            for (k, &x) in perm.iter().enumerate() {
                pos[x as usize] = k as u32;
            }
            perms.push(perm);
            positions.push(pos);
            let size = cfg.initial_block_size.saturating_mul(1usize << p.min(62)).min(n);
            block_sizes.push(size);
        }
        Ok(Self { n, perms, positions, block_sizes })
    }

    fn block_count(&self, pass: usize) -> usize {
        self.n.div_ceil(self.block_sizes[pass])
    }

    fn block_len(&self, pass: usize, block: usize) -> usize {
        let k = self.block_sizes[pass];
        (self.n - block * k).min(k)
    }

    fn block_of(&self, pass: usize, bit: usize) -> usize {
        self.positions[pass][bit] as usize / self.block_sizes[pass]
    }

    /// Original bit index of offset `off` inside a block.
    fn bit_at(&self, pass: usize, block: usize, off: usize) -> usize {
        self.perms[pass][block * self.block_sizes[pass] + off] as usize
    }

    fn parity(&self, key: &BitString, pass: usize, block: usize, start: usize, end: usize) -> bool {
        let base = block * self.block_sizes[pass];
        self.perms[pass][base + start..base + end].iter().fold(false, |acc, &x| acc ^ key.get(x as usize))
    }

    fn check(&self, q: &ParityQuery) -> Result<(), PkdError> {
        let pass = q.pass as usize;
        if pass >= self.perms.len() {
            return Err(PkdError::Desync(format!("parity request for pass {pass}")));
        }
        let block = q.block as usize;
        if block >= self.block_count(pass) {
            return Err(PkdError::Desync(format!("parity request for block {block} of pass {pass}")));
        }
        if q.start >= q.end || q.end as usize > self.block_len(pass, block) {
            return Err(PkdError::Desync(format!("parity request range {}..{} out of bounds", q.start, q.end)));
        }
        Ok(())
    }
}

/// Answers parity queries until the noisy side sends an empty request.
pub fn reconcile_reference<C: Channel + ?Sized>(
    key: &BitString,
    channel: &mut C,
    cfg: &CascadeConfig,
) -> Result<LeakageLedger, PkdError> {
    reconcile_reference_padded(key, channel, cfg, None)
}

pub fn reconcile_reference_padded<C: Channel + ?Sized>(
    key: &BitString,
    channel: &mut C,
    cfg: &CascadeConfig,
    mut pad: Option<&mut dyn ParityPad>,
) -> Result<LeakageLedger, PkdError> {
    let layout = Layout::new(key.len(), cfg)?;
    let mut ledger = LeakageLedger::default();
    loop {
        let (t, payload) = channel.recv()?;
        ledger.messages_exchanged += 1;
        match t {
            MessageType::ParityRequest => {}
            MessageType::Abort => return Err(PkdError::PeerAbort(payload.first().copied().unwrap_or(0))),
            other => return Err(PkdError::Desync(format!("expected a parity request, got {other:?}"))),
        }
        let queries = decode_request(&payload)?;
        if queries.is_empty() {
            return Ok(ledger);
        }
        let mut parities = BitString::with_capacity(queries.len());
        for q in &queries {
            layout.check(q)?;
            parities.push(layout.parity(key, q.pass as usize, q.block as usize, q.start as usize, q.end as usize));
        }
        ledger.parity_bits_disclosed += parities.len() as u64;
        if let Some(pad) = pad.as_deref_mut() {
            parities.xor_assign(&pad.take(parities.len())?)?;
        }
        channel.send(MessageType::ParityResponse, &encode_bits(&parities))?;
        ledger.messages_exchanged += 1;
    }
}

/// Corrects `key` against the reference side's key.
pub fn reconcile_noisy<C: Channel + ?Sized>(
    key: &BitString,
    channel: &mut C,
    cfg: &CascadeConfig,
) -> Result<(BitString, LeakageLedger), PkdError> {
    reconcile_noisy_padded(key, channel, cfg, None)
}

pub fn reconcile_noisy_padded<C: Channel + ?Sized>(
    key: &BitString,
    channel: &mut C,
    cfg: &CascadeConfig,
    pad: Option<&mut dyn ParityPad>,
) -> Result<(BitString, LeakageLedger), PkdError> {
    let layout = Layout::new(key.len(), cfg)?;
    let mut run = NoisyRun {
        layout: &layout,
        key: key.clone(),
        channel,
        pad,
        ledger: LeakageLedger::default(),
        mismatched: vec![BTreeSet::new(); cfg.passes as usize],
        opened: 0,
    };
    for p in 0..cfg.passes as usize {
        run.open_pass(p)?;
        run.settle()?;
    }
    run.channel.send(MessageType::ParityRequest, &encode_request(&[]))?;
    run.ledger.messages_exchanged += 1;
    Ok((run.key, run.ledger))
}

struct NoisyRun<'l, 'c, 'p, C: Channel + ?Sized> {
    layout: &'l Layout,
    key: BitString,
    channel: &'c mut C,
    pad: Option<&'p mut dyn ParityPad>,
    ledger: LeakageLedger,
    /// Blocks whose parity is known to disagree, per opened pass.
    mismatched: Vec<BTreeSet<usize>>,
    opened: usize,
}

impl<C: Channel + ?Sized> NoisyRun<'_, '_, '_, C> {
    fn exchange(&mut self, queries: &[ParityQuery]) -> Result<BitString, PkdError> {
        self.channel.send(MessageType::ParityRequest, &encode_request(queries))?;
        self.ledger.messages_exchanged += 1;
        let (t, payload) = self.channel.recv()?;
        self.ledger.messages_exchanged += 1;
        match t {
            MessageType::ParityResponse => {}
            MessageType::Abort => return Err(PkdError::PeerAbort(payload.first().copied().unwrap_or(0))),
            other => return Err(PkdError::Desync(format!("expected a parity response, got {other:?}"))),
        }
        let mut bits = decode_bits(&payload)?;
        if bits.len() != queries.len() {
            return Err(PkdError::Desync(format!("{} parities for {} queries", bits.len(), queries.len())));
        }
        if let Some(pad) = self.pad.as_deref_mut() {
            bits.xor_assign(&pad.take(bits.len())?)?;
        }
        self.ledger.parity_bits_disclosed += bits.len() as u64;
        Ok(bits)
    }

    fn open_pass(&mut self, p: usize) -> Result<(), PkdError> {
        let layout = self.layout;
        let queries: Vec<ParityQuery> = (0..layout.block_count(p))
            .map(|b| ParityQuery { pass: p as u32, block: b as u32, start: 0, end: layout.block_len(p, b) as u32 })
            .collect();
        let theirs = self.exchange(&queries)?;
        for (b, q) in queries.iter().enumerate() {
            if layout.parity(&self.key, p, b, 0, q.end as usize) != theirs.get(b) {
                self.mismatched[p].insert(b);
            }
        }
        self.opened = p + 1;
        Ok(())
    }

    fn flip(&mut self, bit: usize) {
        self.key.flip(bit);
        for q in 0..self.opened {
            let b = self.layout.block_of(q, bit);
            if !self.mismatched[q].remove(&b) {
                self.mismatched[q].insert(b);
            }
        }
    }

    /// Searches odd blocks, earliest pass first, until none remain.
    fn settle(&mut self) -> Result<(), PkdError> {
        while let Some(q) = (0..self.opened).find(|&q| !self.mismatched[q].is_empty()) {
            let blocks: Vec<usize> = self.mismatched[q].iter().copied().collect();
            self.binary_search(q, &blocks)?;
        }
        Ok(())
    }

    /// Batched binary search over disjoint odd blocks of one pass.
    fn binary_search(&mut self, pass: usize, blocks: &[usize]) -> Result<(), PkdError> {
        let layout = self.layout;
        let mut active: Vec<(usize, usize, usize)> =
            blocks.iter().map(|&b| (b, 0, layout.block_len(pass, b))).collect();
        let mut found = Vec::with_capacity(blocks.len());
        while !active.is_empty() {
            active.retain(|&(b, lo, hi)| {
                if hi - lo == 1 {
                    found.push(layout.bit_at(pass, b, lo));
                    false
                } else {
                    true
                }
            });
            if active.is_empty() {
                break;
            }
            let queries: Vec<ParityQuery> = active
                .iter()
                .map(|&(b, lo, hi)| ParityQuery {
                    pass: pass as u32,
                    block: b as u32,
                    start: lo as u32,
                    end: (lo + (hi - lo) / 2) as u32,
                })
                .collect();
            let theirs = self.exchange(&queries)?;
            for (k, (b, lo, hi)) in active.iter_mut().enumerate() {
                let mid = *lo + (*hi - *lo) / 2;
                if layout.parity(&self.key, pass, *b, *lo, mid) != theirs.get(k) {
                    *hi = mid;
                } else {
                    *lo = mid;
                }
            }
        }
        for bit in found {
            self.flip(bit);
        }
        Ok(())
    }
}

/// `f = λ / (n h(E))`.
pub fn realized_efficiency(ledger: &LeakageLedger, n: usize, e: f64) -> f64 {
    let h = binary_entropy(e).unwrap_or(f64::NAN);
    ledger.parity_bits_disclosed as f64 / (n as f64 * h)
}
