mod common;

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use pkd::entropy::EntropySource;
use pkd::gowf::Params;
use pkd::protocol::{run_alice, run_bob, AbortReason, KeyMaterial, ReconcileMode, SessionConfig};
use pkd::transport::{loopback_pair, loopback_pair_with, Channel, MessageType, TcpChannel, Transcript, TransportError};

use common::{key_pair, loopback_session, seed, session_over};

fn small_params() -> Params {
    Params { m: 16, n: 8192, s: 1500, ..Params::default() }
}

/// Flips one payload bit of the first outgoing frame of a given type.
struct Tamper<C> {
    inner: C,
    target: MessageType,
    byte: usize,
    mask: u8,
    done: bool,
}

impl<C: Channel> Channel for Tamper<C> {
    fn send(&mut self, msg_type: MessageType, payload: &[u8]) -> Result<(), TransportError> {
        if msg_type == self.target && !self.done {
            self.done = true;
            let mut p = payload.to_vec();
            let i = if self.byte == usize::MAX { p.len() - 1 } else { self.byte };
            p[i] ^= self.mask;
            return self.inner.send(msg_type, &p);
        }
        self.inner.send(msg_type, payload)
    }

    fn recv(&mut self) -> Result<(MessageType, Vec<u8>), TransportError> {
        self.inner.recv()
    }

    fn transcript(&self) -> &Transcript {
        self.inner.transcript()
    }
}

fn tampered(
    target: MessageType,
    byte: usize,
    mask: u8,
) -> (pkd::protocol::SessionResult, pkd::protocol::SessionResult) {
    let cfg = SessionConfig::new(small_params());
    let (mut ka, mut kb) = key_pair(&cfg.params, 1, 0, seed(0x31));
    let (ca, mut cb) = loopback_pair();
    let mut ca = Tamper { inner: ca, target, byte, mask, done: false };
    let mut src = EntropySource::seeded(seed(0x32));
    session_over(&cfg, &mut ka, &mut kb, &mut src, &mut ca, &mut cb)
}

#[test]
fn flipped_tag_bit_aborts_both_sides_on_correctness() {
    // The last byte's top bit is the tag's first bit in that byte.
    let (a, b) = tampered(MessageType::VerifyTag, usize::MAX, 0x80);
    assert_eq!(b.aborted, Some(AbortReason::Correctness));
    assert_eq!(a.aborted, Some(AbortReason::Correctness));
    assert!(a.gamma.is_empty() && b.gamma.is_empty());
    assert_eq!(a.net_gain, -(a.consumed as i64));
}

#[test]
fn flipped_masked_key_bit_is_reconciled_away() {
    let (a, b) = tampered(MessageType::MaskedKey, 1, 0x80);
    assert_eq!(a.aborted, None);
    assert_eq!(b.aborted, None);
    assert_eq!(a.gamma, b.gamma);
}

#[test]
fn corrupted_mapping_rule_never_yields_a_silent_mismatch() {
    let (a, b) = tampered(MessageType::MappingRuleCiphertext, 1, 0x01);
    if a.aborted.is_none() && b.aborted.is_none() {
        assert_eq!(a.gamma, b.gamma);
    } else {
        assert!(a.aborted.is_some() && b.aborted.is_some());
    }
}

#[test]
fn loopback_and_tcp_transcripts_match() {
    let cfg = SessionConfig::new(small_params());
    let (mut ka, mut kb) = key_pair(&cfg.params, 2, 0, seed(0x41));
    let (mut la, mut lb) = loopback_pair_with(Duration::from_secs(30), true);
    let mut src = EntropySource::seeded(seed(0x42));
    let looped: Vec<_> = (0..2).map(|_| session_over(&cfg, &mut ka, &mut kb, &mut src, &mut la, &mut lb)).collect();

    let (mut ka, mut kb) = key_pair(&cfg.params, 2, 0, seed(0x41));
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tcp, log) = thread::scope(|s| {
        let h = s.spawn(move || {
            let mut ch = TcpChannel::accept(&listener, Duration::from_secs(30)).unwrap().record_frames();
            let mut src = EntropySource::seeded(seed(0x42));
            let r: Vec<_> = (0..2).map(|_| run_alice(&cfg, &mut ka, &mut ch, &mut src).unwrap()).collect();
            (r, ch.transcript().log().unwrap().to_vec())
        });
        let mut ch = TcpChannel::connect(addr, Duration::from_secs(30)).unwrap();
        let bob: Vec<_> = (0..2).map(|_| run_bob(&cfg, &mut kb, &mut ch).unwrap()).collect();
        let (alice, log) = h.join().unwrap();
        (alice.into_iter().zip(bob).collect::<Vec<_>>(), log)
    });
    assert_eq!(la.transcript().log().unwrap(), &log[..]);
    assert_eq!(la.transcript().digest(), lb.transcript().digest());
    for ((la, lb), (ta, tb)) in looped.iter().zip(&tcp) {
        assert_eq!(la.transcript_digest, ta.transcript_digest);
        assert_eq!(lb.transcript_digest, tb.transcript_digest);
        assert_eq!(la.transcript_digest, lb.transcript_digest);
        assert_eq!(la.gamma, tb.gamma);
    }
}

#[test]
fn sessions_run_until_material_runs_out() {
    let cfg = SessionConfig::new(small_params());
    let mut material = EntropySource::seeded(seed(0x51));
    let mut ka = KeyMaterial::generate(&cfg.params, 2, 0, 10, &mut material).unwrap();
    let mut buf = Vec::new();
    ka.write_to(&mut buf).unwrap();
    let mut kb = KeyMaterial::read_from(&buf[..]).unwrap();
    let mut src = EntropySource::seeded(seed(0x52));
    for _ in 0..2 {
        let (a, b) = loopback_session(&cfg, &mut ka, &mut kb, &mut src);
        assert!(a.aborted.is_none() && b.aborted.is_none());
        assert_eq!(a.consumed, (cfg.params.s + 16 * 4) as u64);
    }
    let (a, b) = loopback_session(&cfg, &mut ka, &mut kb, &mut src);
    assert_eq!(a.aborted, Some(AbortReason::KeyMaterialExhausted));
    assert_eq!(b.aborted, Some(AbortReason::KeyMaterialExhausted));
    assert_eq!(a.consumed, 0);
}

#[test]
fn reuse_limit_stops_sessions_before_the_reserve_does() {
    let cfg = SessionConfig::new(small_params());
    let mut material = EntropySource::seeded(seed(0x53));
    let mut ka = KeyMaterial::generate(&cfg.params, 3, 0, 1, &mut material).unwrap();
    let mut buf = Vec::new();
    ka.write_to(&mut buf).unwrap();
    let mut kb = KeyMaterial::read_from(&buf[..]).unwrap();
    let mut src = EntropySource::seeded(seed(0x54));
    let (a, _) = loopback_session(&cfg, &mut ka, &mut kb, &mut src);
    assert!(a.aborted.is_none());
    let (a, b) = loopback_session(&cfg, &mut ka, &mut kb, &mut src);
    assert_eq!(a.aborted, Some(AbortReason::KFixReuseLimit));
    assert_eq!(b.aborted, Some(AbortReason::KFixReuseLimit));
}

#[test]
fn shared_key_file_survives_a_round_trip_between_sessions() {
    let dir = std::env::temp_dir().join(format!("pkd-sessions-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("shared.pkd");
    let cfg = SessionConfig::new(small_params());
    let mut src = EntropySource::seeded(seed(0x61));
    KeyMaterial::generate(&cfg.params, 3, 0, 3, &mut src).unwrap().save(&path).unwrap();

    let mut alice_src = EntropySource::seeded(seed(0x62));
    for i in 0..3 {
        let mut ka = KeyMaterial::load(&path).unwrap();
        let mut kb = KeyMaterial::load(&path).unwrap();
        let (a, b) = loopback_session(&cfg, &mut ka, &mut kb, &mut alice_src);
        assert_eq!(a.session, i);
        assert_eq!(a.gamma, b.gamma);
        assert_eq!(ka.reserve_cursor(), kb.reserve_cursor());
        ka.save(&path).unwrap();
    }
    assert_eq!(KeyMaterial::load(&path).unwrap().reserve_remaining(), 0);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn otp_sessions_charge_no_leakage_and_debit_the_pad() {
    let mut cfg = SessionConfig::new(small_params());
    cfg.mode = ReconcileMode::Otp;
    let (mut ka, mut kb) = key_pair(&cfg.params, 2, cfg.otp_budget(), seed(0x71));
    let mut src = EntropySource::seeded(seed(0x72));
    let before = ka.reserve_remaining();
    let (a, b) = loopback_session(&cfg, &mut ka, &mut kb, &mut src);
    assert!(a.aborted.is_none(), "{:?}", a.aborted);
    assert_eq!(a.gamma, b.gamma);
    assert_eq!(a.lambda_eq5, 0);
    assert_eq!(a.pad_bits, a.lambda_actual + 51);
    assert_eq!(before - ka.reserve_remaining(), a.consumed);
    assert_eq!(ka.reserve_remaining(), kb.reserve_remaining());
}

#[test]
fn mismatched_material_is_a_desync() {
    let cfg = SessionConfig::new(small_params());
    let (mut ka, _) = key_pair(&cfg.params, 2, 0, seed(0x81));
    let (mut kb, _) = key_pair(&cfg.params, 2, 0, seed(0x81));
    // Alice's copy is one session ahead.
    ka.allocate(&cfg).unwrap();
    ka.settle(0);
    let mut src = EntropySource::seeded(seed(0x83));
    let (a, b) = loopback_session(&cfg, &mut ka, &mut kb, &mut src);
    assert_eq!(a.aborted, Some(AbortReason::Desync));
    assert_eq!(b.aborted, Some(AbortReason::Desync));
}
