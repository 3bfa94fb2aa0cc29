//! Session state machines, pre-shared key accounting and key-length bounds.
//!
//! One session exchanges, in this order (A is Alice, B is Bob):
//!
//! | dir | frame | payload |
//! |-----|-------|---------|
//! | A→B | `SessionInit` | parameters, key counters, shuffle seed |
//! | B→A | `SessionInit` | byte-identical echo |
//! | A→B | `MappingRuleCiphertext` | `serialize(f_k) ⊕ K0` |
//! | A→B | `MaskedInput` | `X ⊕ K·H` |
//! | A→B | `MaskedKey` | `Y ⊕ R_a` |
//! | B↔A | `ParityRequest` / `ParityResponse` | Cascade rounds, closed by an empty request |
//! | A→B | `VerifyTag` | tag seed and `H_tag·R_a` |
//! | B→A | `VerifyTag` | empty acknowledgement |
//! | A→B | `PaSeed` | privacy-amplification seed |
//! | B→A | `Finished` | empty |
//!
//! Any side may replace its next frame with `Abort(reason)`; the peer then
//! stops with the same reason.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Serialize, Serializer};

use crate::bits::BitString;
use crate::entropy::{EntropySource, Seed};
use crate::error::PkdError;
use crate::gowf::{binary_entropy, guess_output, predicted_error_rate, virtual_measure, MappingRule, Params, E_REF};
use crate::reconcile::{
    default_block_size, realized_efficiency, reconcile_noisy_padded, reconcile_reference_padded, CascadeConfig,
    LeakageLedger, ParityPad,
};
use crate::toeplitz::{mask_vector, privacy_amplify, tag_rows, verification_tag, ToeplitzSpec};
use crate::transport::{
    decode_bits, encode_bits, encode_frame, Channel, MessageType, PayloadReader, PayloadWriter, Transcript,
    TransportError,
};

const KEY_FILE_MAGIC: &[u8; 4] = b"PKD1";
const INIT_VERSION: u8 = 1;

/// Why a session stopped. The discriminant is the `Abort` frame's reason byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AbortReason {
    Correctness = 0x01,
    Efficiency = 0x02,
    Transport = 0x03,
    Desync = 0x04,
    KeyMaterialExhausted = 0x05,
    KFixReuseLimit = 0x06,
    KeyLength = 0x07,
    Decode = 0x08,
}

impl AbortReason {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use AbortReason::*;
        Some(match code {
            0x01 => Correctness,
            0x02 => Efficiency,
            0x03 => Transport,
            0x04 => Desync,
            0x05 => KeyMaterialExhausted,
            0x06 => KFixReuseLimit,
            0x07 => KeyLength,
            0x08 => Decode,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AbortReason::Correctness => "correctness",
            AbortReason::Efficiency => "efficiency",
            AbortReason::Transport => "transport",
            AbortReason::Desync => "desync",
            AbortReason::KeyMaterialExhausted => "key material exhausted",
            AbortReason::KFixReuseLimit => "k_fix reuse limit",
            AbortReason::KeyLength => "key length",
            AbortReason::Decode => "decode",
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for AbortReason {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// How reconciliation and verification traffic is protected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconcileMode {
    /// Parities in clear, counted as leakage.
    #[default]
    Clear,
    /// Parities and tag one-time padded from the reserve; no leakage is debited.
    Otp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Alice,
    Bob,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub params: Params,
    pub passes: u32,
    pub initial_block_size: usize,
    pub mode: ReconcileMode,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self::new(Params::default())
    }
}

impl SessionConfig {
    pub fn new(params: Params) -> Self {
        Self { params, passes: 4, initial_block_size: default_block_size(E_REF), mode: ReconcileMode::Clear }
    }

    pub fn validate(&self) -> Result<(), PkdError> {
        self.params.validate()?;
        self.cascade([0; 32]).validate()
    }

    pub fn cascade(&self, shuffle_seed: Seed) -> CascadeConfig {
        CascadeConfig { passes: self.passes, initial_block_size: self.initial_block_size, shuffle_seed }
    }

    /// Exact raw-key error rate for these parameters, used for `f`.
    pub fn error_rate(&self) -> f64 {
        predicted_error_rate(self.params.m, self.params.b)
    }

    /// Pre-shared bits a session always spends: `s + m log2 m`.
    pub fn base_consumption(&self) -> usize {
        self.params.s + self.params.rule_bits()
    }

    /// Largest pad draw in OTP mode: parities up to `f_max` plus one tag.
    pub fn otp_budget(&self) -> usize {
        let h = binary_entropy(self.error_rate()).unwrap_or(1.0);
        (self.params.f_max * self.params.n as f64 * h).floor() as usize + tag_rows(self.params.eps_cor)
    }
}

/// Penalty terms of the key-length bound, `log2(2/ε_cor) + 2 log2(3/(2 ε_sec))`.
pub fn security_penalty(eps_cor: f64, eps_sec: f64) -> f64 {
    (2.0 / eps_cor).log2() + 2.0 * (3.0 / (2.0 * eps_sec)).log2()
}

/// `ℓ = floor(n − λ − log2(2/ε_cor) − 2 log2(3/(2 ε_sec)))`, possibly negative.
pub fn secret_key_length(n: usize, lambda: u64, eps_cor: f64, eps_sec: f64) -> i64 {
    (n as f64 - lambda as f64 - security_penalty(eps_cor, eps_sec)).floor() as i64
}

/// `ℓ − s − m log2 m`.
pub fn net_key_gain(ell: i64, s: usize, m: u64) -> i64 {
    ell - s as i64 - (m as i64 * m.trailing_zeros() as i64)
}

/// Pre-shared secrets held identically by both parties.
pub struct KeyMaterial {
    k_fix: Arc<BitString>,
    reserve: BitString,
    reserve_cursor: u64,
    k_fix_uses: u64,
    reuse_limit: u64,
    pending_pad: bool,
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("k_fix_bits", &self.k_fix.len())
            .field("reserve_bits", &self.reserve.len())
            .field("reserve_cursor", &self.reserve_cursor)
            .field("k_fix_uses", &self.k_fix_uses)
            .field("reuse_limit", &self.reuse_limit)
            .finish()
    }
}

/// One session's slice of the key material.
pub struct SessionKeys {
    pub index: u64,
    pub reserve_cursor: u64,
    pub k: BitString,
    pub k0: BitString,
    pub k_fix: Arc<BitString>,
    pub pad: BitString,
}

impl KeyMaterial {
    pub fn new(k_fix: BitString, reserve: BitString, reuse_limit: u64) -> Self {
        Self { k_fix: Arc::new(k_fix), reserve, reserve_cursor: 0, k_fix_uses: 0, reuse_limit, pending_pad: false }
    }

    /// Fresh material for `sessions` sessions, plus `extra_per_session` reserve bits each.
    pub fn generate(
        params: &Params,
        sessions: u64,
        extra_per_session: usize,
        reuse_limit: u64,
        source: &mut EntropySource,
    ) -> Result<Self, PkdError> {
        params.validate()?;
        let per = (params.s + params.rule_bits() + extra_per_session) as u64;
        let total = per
            .checked_mul(sessions)
            .filter(|&t| t <= usize::MAX as u64)
            .ok_or_else(|| PkdError::KeyMaterial(format!("{sessions} sessions do not fit in memory")))?;
        let k_fix = source.draw_bits(params.s + params.t() - 1);
        let reserve = source.draw_bits(total as usize);
        Ok(Self::new(k_fix, reserve, reuse_limit))
    }

    pub fn k_fix(&self) -> &BitString {
        &self.k_fix
    }

    pub fn k_fix_uses(&self) -> u64 {
        self.k_fix_uses
    }

    pub fn reuse_limit(&self) -> u64 {
        self.reuse_limit
    }

    pub fn reserve_cursor(&self) -> u64 {
        self.reserve_cursor
    }

    pub fn reserve_remaining(&self) -> u64 {
        self.reserve.len() as u64 - self.reserve_cursor
    }

    /// Checks that `K_fix` has the `s + t − 1` bits these parameters need.
    pub fn check_params(&self, params: &Params) -> Result<(), PkdError> {
        let want = params.s + params.t() - 1;
        if self.k_fix.len() != want {
            return Err(PkdError::KeyMaterial(format!(
                "K_fix holds {} bits but s = {}, n = {}, m = {} need {want}",
                self.k_fix.len(),
                params.s,
                params.n,
                params.m
            )));
        }
        Ok(())
    }

    /// Takes `K` and `K0` for one session. In OTP mode the pad budget is
    /// reserved too and must be released with [`KeyMaterial::settle`].
    pub fn allocate(&mut self, cfg: &SessionConfig) -> Result<SessionKeys, AbortReason> {
        if self.pending_pad {
            return Err(AbortReason::KeyMaterialExhausted);
        }
        let base = cfg.base_consumption();
        let pad_len = match cfg.mode {
            ReconcileMode::Clear => 0,
            ReconcileMode::Otp => cfg.otp_budget(),
        };
        if self.reserve_remaining() < (base + pad_len) as u64 {
            return Err(AbortReason::KeyMaterialExhausted);
        }
        if self.k_fix_uses >= self.reuse_limit {
            return Err(AbortReason::KFixReuseLimit);
        }
        let start = self.reserve_cursor as usize;
        let s = cfg.params.s;
        let keys = SessionKeys {
            index: self.k_fix_uses,
            reserve_cursor: self.reserve_cursor,
            k: self.reserve.slice(start, s),
            k0: self.reserve.slice(start + s, cfg.params.rule_bits()),
            k_fix: Arc::clone(&self.k_fix),
            pad: self.reserve.slice(start + base, pad_len),
        };
        self.reserve_cursor += base as u64;
        self.k_fix_uses += 1;
        self.pending_pad = pad_len > 0;
        Ok(keys)
    }

    /// Debits the pad bits a session actually used.
    pub fn settle(&mut self, pad_used: u64) {
        self.reserve_cursor += pad_used;
        self.pending_pad = false;
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), PkdError> {
        w.write_all(KEY_FILE_MAGIC)?;
        for bits in [&*self.k_fix, &self.reserve] {
            w.write_all(&(bits.len() as u64).to_be_bytes())?;
            w.write_all(&bits.to_bytes())?;
        }
        let counters = [self.k_fix_uses, self.reuse_limit, self.reserve_cursor];
        w.write_all(&(counters.len() as u64 * 8).to_be_bytes())?;
        for c in counters {
            w.write_all(&c.to_be_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, PkdError> {
        let bad = |m: &str| PkdError::KeyMaterial(m.to_string());
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 4 || &buf[..4] != KEY_FILE_MAGIC {
            return Err(bad("not a key-material file (bad magic)"));
        }
        let mut cur = Cursor { buf: &buf, pos: 4 };
        let mut sections = Vec::with_capacity(2);
        for _ in 0..2 {
            let bits = cur.u64()? as usize;
            let bytes = cur.take(bits.div_ceil(8))?;
            sections.push(BitString::from_bytes(bytes, bits)?);
        }
        if cur.u64()? != 24 {
            return Err(bad("unexpected counter section size"));
        }
        let k_fix_uses = cur.u64()?;
        let reuse_limit = cur.u64()?;
        let reserve_cursor = cur.u64()?;
        if cur.pos != buf.len() {
            return Err(bad("trailing bytes after key-material sections"));
        }
        let reserve = sections.pop().unwrap();
        let k_fix = sections.pop().unwrap();
        if reserve_cursor > reserve.len() as u64 {
            return Err(bad("reserve cursor past the end of the pool"));
        }
        Ok(Self { k_fix: Arc::new(k_fix), reserve, reserve_cursor, k_fix_uses, reuse_limit, pending_pad: false })
    }

    pub fn load(path: &Path) -> Result<Self, PkdError> {
        Self::read_from(fs::File::open(path)?)
    }

    /// Writes to a sibling temporary file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<(), PkdError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PkdError> {
        let out = self
            .buf
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| PkdError::KeyMaterial("truncated key-material file".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, PkdError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn hex_bits<S: Serializer>(bits: &BitString, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(bits.to_bytes()))
}

fn hex_digest<S: Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(d))
}

/// Outcome of one session on one side.
#[derive(Debug, Clone, Serialize)]
pub struct SessionResult {
    pub role: Role,
    pub session: u64,
    pub mode: ReconcileMode,
    pub n: usize,
    pub m: u64,
    pub s: usize,
    pub ell: i64,
    /// Parity bits exchanged during reconciliation.
    pub lambda_actual: u64,
    /// Leakage charged in the key-length bound (zero in OTP mode).
    pub lambda_eq5: u64,
    pub f_actual: f64,
    pub consumed: u64,
    pub pad_bits: u64,
    pub net_gain: i64,
    pub messages: u64,
    /// Bob only: bits Cascade corrected over `n`, once the tag verified.
    pub raw_error_rate: Option<f64>,
    pub aborted: Option<AbortReason>,
    #[serde(serialize_with = "hex_digest")]
    pub transcript_digest: [u8; 32],
    #[serde(serialize_with = "hex_bits")]
    pub gamma: BitString,
}

impl SessionResult {
    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some()
    }
}

/// Per-session transcript over a possibly longer-lived channel.
struct Recorded<'a, C: Channel + ?Sized> {
    inner: &'a mut C,
    transcript: Transcript,
}

impl<C: Channel + ?Sized> Channel for Recorded<'_, C> {
    fn send(&mut self, msg_type: MessageType, payload: &[u8]) -> Result<(), TransportError> {
        self.inner.send(msg_type, payload)?;
        self.transcript.record(&encode_frame(msg_type, payload)?);
        Ok(())
    }

    fn recv(&mut self) -> Result<(MessageType, Vec<u8>), TransportError> {
        let (t, payload) = self.inner.recv()?;
        self.transcript.record(&encode_frame(t, &payload)?);
        Ok((t, payload))
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }
}

struct SlicePad<'a> {
    bits: &'a BitString,
    used: usize,
}

impl ParityPad for SlicePad<'_> {
    fn take(&mut self, bits: usize) -> Result<BitString, PkdError> {
        if self.used + bits > self.bits.len() {
            return Err(PkdError::KeyMaterial("one-time pad budget exhausted".into()));
        }
        let out = self.bits.slice(self.used, bits);
        self.used += bits;
        Ok(out)
    }
}

enum Stop {
    /// Detected here; the peer is told.
    Local(AbortReason),
    /// Reported by the peer.
    Peer(AbortReason),
}

fn classify(e: PkdError) -> Stop {
    match e {
        PkdError::PeerAbort(code) => Stop::Peer(AbortReason::from_code(code).unwrap_or(AbortReason::Decode)),
        PkdError::Transport(TransportError::Closed | TransportError::Timeout | TransportError::Io(_))
        | PkdError::Io(_) => Stop::Local(AbortReason::Transport),
        PkdError::Desync(_) => Stop::Local(AbortReason::Desync),
        PkdError::KeyMaterial(_) => Stop::Local(AbortReason::Efficiency),
        _ => Stop::Local(AbortReason::Decode),
    }
}

impl From<PkdError> for Stop {
    fn from(e: PkdError) -> Self {
        classify(e)
    }
}

impl From<TransportError> for Stop {
    fn from(e: TransportError) -> Self {
        classify(PkdError::Transport(e))
    }
}

fn expect<C: Channel + ?Sized>(ch: &mut C, want: MessageType) -> Result<Vec<u8>, Stop> {
    let (t, payload) = ch.recv()?;
    if t == want {
        return Ok(payload);
    }
    if t == MessageType::Abort {
        return Err(Stop::Peer(
            payload.first().and_then(|&c| AbortReason::from_code(c)).unwrap_or(AbortReason::Decode),
        ));
    }
    Err(Stop::Local(AbortReason::Desync))
}

fn encode_init(cfg: &SessionConfig, keys: &SessionKeys, shuffle_seed: &Seed) -> Vec<u8> {
    let p = &cfg.params;
    PayloadWriter::new()
        .u8(INIT_VERSION)
        .u64(p.m)
        .u64(p.n as u64)
        .u32(p.b)
        .u64(p.s as u64)
        .f64(p.eps_cor)
        .f64(p.eps_sec)
        .f64(p.f_max)
        .u32(cfg.passes)
        .u64(cfg.initial_block_size as u64)
        .u8(cfg.mode as u8)
        .u64(keys.index)
        .u64(keys.reserve_cursor)
        .bytes(shuffle_seed)
        .finish()
}

fn init_seed(payload: &[u8]) -> Option<Seed> {
    payload.len().checked_sub(32).and_then(|k| payload[k..].try_into().ok())
}

/// Running values shared by both roles.
#[derive(Default)]
struct Progress {
    ell: Option<i64>,
    ledger: LeakageLedger,
    lambda_eq5: u64,
    f: f64,
    pad_used: u64,
    raw_errors: Option<u64>,
    gamma: BitString,
}

fn finish<C: Channel + ?Sized>(
    role: Role,
    cfg: &SessionConfig,
    keys: &SessionKeys,
    ch: &mut Recorded<'_, C>,
    prog: Progress,
    outcome: Result<(), Stop>,
) -> SessionResult {
    let aborted = match outcome {
        Ok(()) => None,
        Err(Stop::Peer(r)) => Some(r),
        Err(Stop::Local(r)) => {
            let _ = ch.send(MessageType::Abort, &[r.code()]);
            Some(r)
        }
    };
    let p = &cfg.params;
    let base = cfg.base_consumption() as u64;
    let ell = prog.ell.unwrap_or(0);
    SessionResult {
        role,
        session: keys.index,
        mode: cfg.mode,
        n: p.n,
        m: p.m,
        s: p.s,
        ell,
        lambda_actual: prog.ledger.parity_bits_disclosed,
        lambda_eq5: prog.lambda_eq5,
        f_actual: prog.f,
        consumed: base + prog.pad_used,
        pad_bits: prog.pad_used,
        net_gain: if aborted.is_some() { -((base + prog.pad_used) as i64) } else { net_key_gain(ell, p.s, p.m) },
        messages: ch.transcript.frames(),
        raw_error_rate: prog.raw_errors.map(|e| e as f64 / p.n as f64),
        aborted,
        transcript_digest: ch.transcript.digest(),
        gamma: if aborted.is_some() { BitString::new() } else { prog.gamma },
    }
}

fn masking_spec(cfg: &SessionConfig, keys: &SessionKeys) -> Result<ToeplitzSpec, PkdError> {
    ToeplitzSpec::new(cfg.params.s, cfg.params.t(), (*keys.k_fix).clone())
}

fn settle_leakage(cfg: &SessionConfig, prog: &mut Progress) -> Result<(), Stop> {
    prog.f = realized_efficiency(&prog.ledger, cfg.params.n, cfg.error_rate());
    prog.lambda_eq5 = match cfg.mode {
        ReconcileMode::Clear => prog.ledger.parity_bits_disclosed,
        ReconcileMode::Otp => 0,
    };
    prog.ell = Some(secret_key_length(cfg.params.n, prog.lambda_eq5, cfg.params.eps_cor, cfg.params.eps_sec));
    Ok(())
}

/// Alice's side of one session on pre-allocated keys.
pub fn run_alice_session<C: Channel + ?Sized>(
    cfg: &SessionConfig,
    keys: &SessionKeys,
    channel: &mut C,
    source: &mut EntropySource,
) -> SessionResult {
    let mut ch = Recorded { inner: channel, transcript: Transcript::default() };
    let mut prog = Progress::default();
    let outcome = alice_flow(cfg, keys, &mut ch, source, &mut prog);
    finish(Role::Alice, cfg, keys, &mut ch, prog, outcome)
}

fn alice_flow<C: Channel + ?Sized>(
    cfg: &SessionConfig,
    keys: &SessionKeys,
    ch: &mut C,
    source: &mut EntropySource,
    prog: &mut Progress,
) -> Result<(), Stop> {
    let p = &cfg.params;
    let shuffle_seed = source.draw_seed();
    let init = encode_init(cfg, keys, &shuffle_seed);
    ch.send(MessageType::SessionInit, &init)?;
    if expect(ch, MessageType::SessionInit)? != init {
        return Err(Stop::Local(AbortReason::Desync));
    }

    let rule = MappingRule::sample(source, p.m)?;
    ch.send(MessageType::MappingRuleCiphertext, &encode_bits(&rule.serialize().xor(&keys.k0)?))?;

    let x = source.draw_bits(p.t());
    let d = mask_vector(&keys.k, &masking_spec(cfg, keys)?)?;
    ch.send(MessageType::MaskedInput, &encode_bits(&x.xor(&d)?))?;

    let y = virtual_measure(&rule.apply(&x)?, source, p)?;
    let r_a = source.draw_bits(p.n);
    ch.send(MessageType::MaskedKey, &encode_bits(&y.xor(&r_a)?))?;

    let mut pad = SlicePad { bits: &keys.pad, used: 0 };
    let otp = cfg.mode == ReconcileMode::Otp;
    let result =
        reconcile_reference_padded(&r_a, ch, &cfg.cascade(shuffle_seed), otp.then_some(&mut pad as &mut dyn ParityPad));
    prog.pad_used = pad.used as u64;
    prog.ledger = result?;
    settle_leakage(cfg, prog)?;
    if prog.f > p.f_max {
        return Err(Stop::Local(AbortReason::Efficiency));
    }

    let rows = tag_rows(p.eps_cor);
    let tag_spec = ToeplitzSpec::random(rows, p.n, source)?;
    let mut tag = verification_tag(&r_a, &tag_spec)?;
    if otp {
        tag.xor_assign(&pad.take(rows)?)?;
        prog.pad_used = pad.used as u64;
    }
    ch.send(MessageType::VerifyTag, &PayloadWriter::new().bits(tag_spec.seed()).bits(&tag).finish())?;
    if !expect(ch, MessageType::VerifyTag)?.is_empty() {
        return Err(Stop::Local(AbortReason::Desync));
    }

    let ell = prog.ell.unwrap_or(0);
    if ell <= 0 {
        return Err(Stop::Local(AbortReason::KeyLength));
    }
    let pa_spec = ToeplitzSpec::random(ell as usize, p.n, source)?;
    ch.send(MessageType::PaSeed, &encode_bits(pa_spec.seed()))?;
    prog.gamma = privacy_amplify(&r_a, &pa_spec)?;
    if !expect(ch, MessageType::Finished)?.is_empty() {
        return Err(Stop::Local(AbortReason::Desync));
    }
    Ok(())
}

/// Bob's side of one session on pre-allocated keys.
pub fn run_bob_session<C: Channel + ?Sized>(cfg: &SessionConfig, keys: &SessionKeys, channel: &mut C) -> SessionResult {
    let mut ch = Recorded { inner: channel, transcript: Transcript::default() };
    let mut prog = Progress::default();
    let outcome = bob_flow(cfg, keys, &mut ch, &mut prog);
    finish(Role::Bob, cfg, keys, &mut ch, prog, outcome)
}

fn bob_flow<C: Channel + ?Sized>(
    cfg: &SessionConfig,
    keys: &SessionKeys,
    ch: &mut C,
    prog: &mut Progress,
) -> Result<(), Stop> {
    let p = &cfg.params;
    let init = expect(ch, MessageType::SessionInit)?;
    let shuffle_seed = init_seed(&init).ok_or(Stop::Local(AbortReason::Decode))?;
    if encode_init(cfg, keys, &shuffle_seed) != init {
        return Err(Stop::Local(AbortReason::Desync));
    }
    ch.send(MessageType::SessionInit, &init)?;

    let ct = decode_bits(&expect(ch, MessageType::MappingRuleCiphertext)?)?;
    let rule = MappingRule::deserialize(&ct.xor(&keys.k0)?, p.m)?;

    let masked = decode_bits(&expect(ch, MessageType::MaskedInput)?)?;
    let d = mask_vector(&keys.k, &masking_spec(cfg, keys)?)?;
    let z = guess_output(&rule.apply(&masked.xor(&d)?)?, p.m)?;

    let masked_key = decode_bits(&expect(ch, MessageType::MaskedKey)?)?;
    let r_b = masked_key.xor(&z)?;

    let mut pad = SlicePad { bits: &keys.pad, used: 0 };
    let otp = cfg.mode == ReconcileMode::Otp;
    let result =
        reconcile_noisy_padded(&r_b, ch, &cfg.cascade(shuffle_seed), otp.then_some(&mut pad as &mut dyn ParityPad));
    prog.pad_used = pad.used as u64;
    let (corrected, ledger) = result?;
    prog.ledger = ledger;
    settle_leakage(cfg, prog)?;

    let rows = tag_rows(p.eps_cor);
    let tag_payload = expect(ch, MessageType::VerifyTag)?;
    let mut reader = PayloadReader::new(&tag_payload);
    let seed = reader.bits()?;
    let mut tag = reader.bits()?;
    reader.finish()?;
    if otp {
        tag.xor_assign(&pad.take(rows)?)?;
        prog.pad_used = pad.used as u64;
    }
    let tag_spec = ToeplitzSpec::new(rows, p.n, seed).map_err(|_| Stop::Local(AbortReason::Decode))?;
    if tag.len() != rows {
        return Err(Stop::Local(AbortReason::Decode));
    }
    if verification_tag(&corrected, &tag_spec)? != tag {
        return Err(Stop::Local(AbortReason::Correctness));
    }
    prog.raw_errors = Some(r_b.hamming_distance(&corrected)?);
    ch.send(MessageType::VerifyTag, &[])?;

    let ell = prog.ell.unwrap_or(0);
    let pa_seed = decode_bits(&expect(ch, MessageType::PaSeed)?)?;
    if ell <= 0 {
        return Err(Stop::Local(AbortReason::Desync));
    }
    let pa_spec = ToeplitzSpec::new(ell as usize, p.n, pa_seed).map_err(|_| Stop::Local(AbortReason::Desync))?;
    prog.gamma = privacy_amplify(&corrected, &pa_spec)?;
    ch.send(MessageType::Finished, &[])?;
    Ok(())
}

impl SessionResult {
    /// A session that never started: only the `Abort` frame was sent.
    pub fn refused(role: Role, cfg: &SessionConfig, session: u64, reason: AbortReason) -> SessionResult {
        let mut t = Transcript::default();
        if let Ok(frame) = encode_frame(MessageType::Abort, &[reason.code()]) {
            t.record(&frame);
        }
        SessionResult {
            role,
            session,
            mode: cfg.mode,
            n: cfg.params.n,
            m: cfg.params.m,
            s: cfg.params.s,
            ell: 0,
            lambda_actual: 0,
            lambda_eq5: 0,
            f_actual: 0.0,
            consumed: 0,
            pad_bits: 0,
            net_gain: 0,
            messages: t.frames(),
            raw_error_rate: None,
            aborted: Some(reason),
            transcript_digest: t.digest(),
            gamma: BitString::new(),
        }
    }
}

fn run_role<C: Channel + ?Sized>(
    role: Role,
    cfg: &SessionConfig,
    keys: &mut KeyMaterial,
    channel: &mut C,
    body: impl FnOnce(&SessionKeys, &mut C) -> SessionResult,
) -> Result<SessionResult, PkdError> {
    cfg.validate()?;
    keys.check_params(&cfg.params)?;
    match keys.allocate(cfg) {
        Ok(slice) => {
            let result = body(&slice, channel);
            keys.settle(result.pad_bits);
            Ok(result)
        }
        Err(reason) => {
            let _ = channel.send(MessageType::Abort, &[reason.code()]);
            Ok(SessionResult::refused(role, cfg, keys.k_fix_uses(), reason))
        }
    }
}

/// Runs one session as Alice, debiting `keys`.
pub fn run_alice<C: Channel + ?Sized>(
    cfg: &SessionConfig,
    keys: &mut KeyMaterial,
    channel: &mut C,
    source: &mut EntropySource,
) -> Result<SessionResult, PkdError> {
    run_role(Role::Alice, cfg, keys, channel, |slice, ch| run_alice_session(cfg, slice, ch, source))
}

/// Runs one session as Bob, debiting `keys`.
pub fn run_bob<C: Channel + ?Sized>(
    cfg: &SessionConfig,
    keys: &mut KeyMaterial,
    channel: &mut C,
) -> Result<SessionResult, PkdError> {
    run_role(Role::Bob, cfg, keys, channel, |slice, ch| run_bob_session(cfg, slice, ch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::loopback_pair;
    use std::thread;

    fn small() -> SessionConfig {
        SessionConfig::new(Params { m: 16, n: 4096, b: 12, s: 256, ..Params::default() })
    }

    fn pair(cfg: &SessionConfig, sessions: u64, extra: usize) -> (KeyMaterial, KeyMaterial) {
        let mut src = EntropySource::seeded([0x42; 32]);
        let a = KeyMaterial::generate(&cfg.params, sessions, extra, 100, &mut src).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        (a, KeyMaterial::read_from(&buf[..]).unwrap())
    }

    fn session(
        cfg: SessionConfig,
        mut ka: KeyMaterial,
        mut kb: KeyMaterial,
        seed: Seed,
    ) -> (SessionResult, SessionResult) {
        let (mut a, mut b) = loopback_pair();
        let alice = thread::spawn(move || {
            let mut src = EntropySource::seeded(seed);
            run_alice(&cfg, &mut ka, &mut a, &mut src).unwrap()
        });
        let rb = run_bob(&cfg, &mut kb, &mut b).unwrap();
        (alice.join().unwrap(), rb)
    }

    #[test]
    fn key_length_examples() {
        assert_eq!(secret_key_length(1_000_000, 0, 1e-15, 1e-10), 999_881);
        assert_eq!(secret_key_length(1_000_000, 700_000, 1e-15, 1e-10), 299_881);
        assert!(secret_key_length(1_000_000, 1_000_000, 1e-15, 1e-10) < 0);
        assert!((security_penalty(1e-15, 1e-10) - 118.437_408_322).abs() < 1e-8);
    }

    #[test]
    fn net_gain_examples() {
        assert_eq!(net_key_gain(30_000, 10_000, 1024), 9_760);
        assert_eq!(net_key_gain(10_000 + 10_240, 10_000, 1024), 0);
        assert!(net_key_gain(0, 10_000, 1024) < 0);
    }

    #[test]
    fn abort_codes_round_trip() {
        for code in 1..=8u8 {
            assert_eq!(AbortReason::from_code(code).unwrap().code(), code);
        }
        assert_eq!(AbortReason::from_code(0), None);
        assert_eq!(AbortReason::from_code(9), None);
    }

    #[test]
    fn loopback_session_agrees() {
        let cfg = small();
        let (ka, kb) = pair(&cfg, 1, 0);
        let (ra, rb) = session(cfg, ka, kb, [1; 32]);
        assert_eq!(ra.aborted, None);
        assert_eq!(rb.aborted, None);
        assert_eq!(ra.gamma, rb.gamma);
        assert_eq!(ra.gamma.len() as i64, ra.ell);
        assert_eq!(ra.transcript_digest, rb.transcript_digest);
        assert_eq!(ra.lambda_actual, rb.lambda_actual);
        assert_eq!(ra.consumed, (256 + 64) as u64);
        assert_eq!(ra.net_gain, ra.ell - 256 - 64);
    }

    #[test]
    fn key_file_round_trip_and_accounting() {
        let cfg = small();
        let (mut ka, _) = pair(&cfg, 3, 0);
        let before = ka.reserve_remaining();
        ka.allocate(&cfg).unwrap();
        assert_eq!(before - ka.reserve_remaining(), cfg.base_consumption() as u64);
        let mut buf = Vec::new();
        ka.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PKD1");
        let back = KeyMaterial::read_from(&buf[..]).unwrap();
        assert_eq!(back.k_fix_uses(), 1);
        assert_eq!(back.reserve_cursor(), ka.reserve_cursor());
        assert_eq!(back.k_fix(), ka.k_fix());
        assert!(KeyMaterial::read_from(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(KeyMaterial::read_from(&buf[..]).is_err());
        buf[0] = b'X';
        assert!(KeyMaterial::read_from(&buf[..]).is_err());
    }

    #[test]
    fn exhaustion_and_reuse_limit() {
        let cfg = small();
        let mut src = EntropySource::seeded([5; 32]);
        let mut km = KeyMaterial::generate(&cfg.params, 2, 0, 100, &mut src).unwrap();
        km.allocate(&cfg).unwrap();
        km.allocate(&cfg).unwrap();
        assert_eq!(km.allocate(&cfg).err(), Some(AbortReason::KeyMaterialExhausted));
        let mut km = KeyMaterial::generate(&cfg.params, 5, 0, 1, &mut src).unwrap();
        km.allocate(&cfg).unwrap();
        assert_eq!(km.allocate(&cfg).err(), Some(AbortReason::KFixReuseLimit));
    }

    #[test]
    fn otp_mode_charges_pad_not_leakage() {
        let mut cfg = small();
        cfg.mode = ReconcileMode::Otp;
        let (ka, kb) = pair(&cfg, 1, cfg.otp_budget());
        let (ra, rb) = session(cfg, ka, kb, [2; 32]);
        assert_eq!(ra.aborted, None);
        assert_eq!(ra.gamma, rb.gamma);
        assert_eq!(ra.lambda_eq5, 0);
        assert_eq!(ra.pad_bits, ra.lambda_actual + 51);
        assert_eq!(ra.ell, secret_key_length(4096, 0, 1e-15, 1e-10));
        assert_eq!(rb.pad_bits, ra.pad_bits);
    }

    #[test]
    fn efficiency_abort_is_shared() {
        let mut cfg = small();
        cfg.params.f_max = 1.0;
        let (ka, kb) = pair(&cfg, 1, 0);
        let (ra, rb) = session(cfg, ka, kb, [3; 32]);
        assert_eq!(ra.aborted, Some(AbortReason::Efficiency));
        assert_eq!(rb.aborted, Some(AbortReason::Efficiency));
        assert!(ra.gamma.is_empty());
    }

    #[test]
    fn key_length_abort_when_leakage_dominates() {
        // n = 64 cannot cover the 118-bit security penalty.
        let cfg = SessionConfig::new(Params { m: 4, n: 64, b: 12, s: 16, f_max: 100.0, ..Params::default() });
        let (ka, kb) = pair(&cfg, 1, 0);
        let (ra, rb) = session(cfg, ka, kb, [4; 32]);
        assert_eq!(ra.aborted, Some(AbortReason::KeyLength));
        assert_eq!(rb.aborted, Some(AbortReason::KeyLength));
        assert!(ra.ell < 0);
        assert_eq!(ra.ell, rb.ell);
    }

    #[test]
    fn mismatched_key_files_desync() {
        let cfg = small();
        let (ka, mut kb) = pair(&cfg, 2, 0);
        kb.allocate(&cfg).unwrap();
        let (ra, rb) = session(cfg, ka, kb, [5; 32]);
        assert_eq!(rb.aborted, Some(AbortReason::Desync));
        assert_eq!(ra.aborted, Some(AbortReason::Desync));
    }
}
