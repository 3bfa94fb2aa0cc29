//! Framed message channels.
//!
//! Wire layout of one frame:
//!
//! ```text
//! +----------------+---------+-----------------+
//! | length: u32 BE | type: u8| payload (length)|
//! +----------------+---------+-----------------+
//! ```
//!
//! `length` counts payload bytes only. Bit strings inside payloads are sent
//! MSB-first with a leading byte giving the number of zero padding bits in
//! the final byte.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bits::BitString;

pub const HEADER_LEN: usize = 5;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    SessionInit = 0x01,
    MappingRuleCiphertext = 0x02,
    MaskedInput = 0x03,
    MaskedKey = 0x04,
    ParityRequest = 0x05,
    ParityResponse = 0x06,
    VerifyTag = 0x07,
    PaSeed = 0x08,
    Finished = 0x09,
    Abort = 0x0A,
}

impl MessageType {
    pub fn code(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for MessageType {
    type Error = TransportError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        use MessageType::*;
        Ok(match v {
            0x01 => SessionInit,
            0x02 => MappingRuleCiphertext,
            0x03 => MaskedInput,
            0x04 => MaskedKey,
            0x05 => ParityRequest,
            0x06 => ParityResponse,
            0x07 => VerifyTag,
            0x08 => PaSeed,
            0x09 => Finished,
            0x0A => Abort,
            other => return Err(TransportError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("frame length mismatch: header says {declared} payload bytes, buffer holds {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("payload of {0} bytes does not fit a frame")]
    PayloadTooLarge(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("channel closed")]
    Closed,
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

pub fn encode_frame(msg_type: MessageType, payload: &[u8]) -> Result<Vec<u8>, TransportError> {
    let len = u32::try_from(payload.len()).map_err(|_| TransportError::PayloadTooLarge(payload.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.push(msg_type.code());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_frame(buf: &[u8]) -> Result<(MessageType, Vec<u8>), TransportError> {
    if buf.len() < HEADER_LEN {
        return Err(TransportError::Truncated { needed: HEADER_LEN, have: buf.len() });
    }
    let declared = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    let msg_type = MessageType::try_from(buf[4])?;
    let actual = buf.len() - HEADER_LEN;
    if actual < declared {
        return Err(TransportError::Truncated { needed: HEADER_LEN + declared, have: buf.len() });
    }
    if actual > declared {
        return Err(TransportError::LengthMismatch { declared, actual });
    }
    Ok((msg_type, buf[HEADER_LEN..].to_vec()))
}

/// Running SHA-256 over every frame sent or received, in order.
#[derive(Clone)]
pub struct Transcript {
    hasher: Sha256,
    frames: u64,
    log: Option<Vec<Vec<u8>>>,
}

impl Default for Transcript {
    fn default() -> Self {
        Self { hasher: Sha256::new(), frames: 0, log: None }
    }
}

impl Transcript {
    /// A transcript that also keeps a copy of every frame.
    pub fn recording() -> Self {
        Self { log: Some(Vec::new()), ..Self::default() }
    }

    pub fn record(&mut self, frame: &[u8]) {
        self.hasher.update(frame);
        self.frames += 1;
        if let Some(log) = &mut self.log {
            log.push(frame.to_vec());
        }
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn log(&self) -> Option<&[Vec<u8>]> {
        self.log.as_deref()
    }

    pub fn digest(&self) -> [u8; 32] {
        self.hasher.clone().finalize().into()
    }
}

/// An ordered, reliable, framed channel endpoint.
pub trait Channel {
    fn send(&mut self, msg_type: MessageType, payload: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<(MessageType, Vec<u8>), TransportError>;
    fn transcript(&self) -> &Transcript;
}

impl<C: Channel + ?Sized> Channel for &mut C {
    fn send(&mut self, msg_type: MessageType, payload: &[u8]) -> Result<(), TransportError> {
        (**self).send(msg_type, payload)
    }
    fn recv(&mut self) -> Result<(MessageType, Vec<u8>), TransportError> {
        (**self).recv()
    }
    fn transcript(&self) -> &Transcript {
        (**self).transcript()
    }
}

/// In-memory endpoint; see [`loopback_pair`].
pub struct Loopback {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
    transcript: Transcript,
}

/// Two connected in-memory endpoints.
pub fn loopback_pair() -> (Loopback, Loopback) {
    loopback_pair_with(DEFAULT_TIMEOUT, false)
}

pub fn loopback_pair_with(timeout: Duration, record: bool) -> (Loopback, Loopback) {
    let (atx, brx) = mpsc::channel();
    let (btx, arx) = mpsc::channel();
    let t = || if record { Transcript::recording() } else { Transcript::default() };
    (Loopback { tx: atx, rx: arx, timeout, transcript: t() }, Loopback { tx: btx, rx: brx, timeout, transcript: t() })
}

impl Channel for Loopback {
    fn send(&mut self, msg_type: MessageType, payload: &[u8]) -> Result<(), TransportError> {
        let frame = encode_frame(msg_type, payload)?;
        self.transcript.record(&frame);
        self.tx.send(frame).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<(MessageType, Vec<u8>), TransportError> {
        let frame = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::Closed,
        })?;
        self.transcript.record(&frame);
        decode_frame(&frame)
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }
}

/// Stream-socket endpoint.
pub struct TcpChannel {
    stream: TcpStream,
    transcript: Transcript,
}

impl TcpChannel {
    pub fn new(stream: TcpStream, timeout: Duration) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Self { stream, transcript: Transcript::default() })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> io::Result<Self> {
        Self::new(TcpStream::connect(addr)?, timeout)
    }

    pub fn accept(listener: &TcpListener, timeout: Duration) -> io::Result<Self> {
        let (stream, _) = listener.accept()?;
        Self::new(stream, timeout)
    }

    pub fn record_frames(mut self) -> Self {
        self.transcript = Transcript::recording();
        self
    }
}

fn map_io(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout,
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => TransportError::Closed,
        _ => TransportError::Io(e),
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, msg_type: MessageType, payload: &[u8]) -> Result<(), TransportError> {
        let frame = encode_frame(msg_type, payload)?;
        self.stream.write_all(&frame).map_err(map_io)?;
        self.stream.flush().map_err(map_io)?;
        self.transcript.record(&frame);
        Ok(())
    }

    fn recv(&mut self) -> Result<(MessageType, Vec<u8>), TransportError> {
        let mut frame = vec![0u8; HEADER_LEN];
        self.stream.read_exact(&mut frame).map_err(map_io)?;
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        frame.resize(HEADER_LEN + len, 0);
        self.stream.read_exact(&mut frame[HEADER_LEN..]).map_err(map_io)?;
        self.transcript.record(&frame);
        decode_frame(&frame)
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }
}

/// `[pad][bytes]` encoding of a bit string.
pub fn encode_bits(bits: &BitString) -> Vec<u8> {
    let pad = (8 - bits.len() % 8) % 8;
    let mut out = Vec::with_capacity(1 + bits.len().div_ceil(8));
    out.push(pad as u8);
    out.extend_from_slice(&bits.to_bytes());
    out
}

pub fn decode_bits(buf: &[u8]) -> Result<BitString, TransportError> {
    let (&pad, body) = buf.split_first().ok_or_else(|| TransportError::Malformed("empty bit-string payload".into()))?;
    if pad > 7 || (body.is_empty() && pad != 0) {
        return Err(TransportError::Malformed(format!("invalid padding count {pad}")));
    }
    let len = body.len() * 8 - pad as usize;
    let bits = BitString::from_bytes(body, len).map_err(|e| TransportError::Malformed(e.to_string()))?;
    if bits.to_bytes() != body {
        return Err(TransportError::Malformed("nonzero padding bits".into()));
    }
    Ok(bits)
}

/// Builder for payloads with several fields.
#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(mut self, v: u8) -> Self {
        self.buf.push(v);
        self
    }

    pub fn u32(mut self, v: u32) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(self, v: f64) -> Self {
        self.u64(v.to_bits())
    }

    pub fn bytes(mut self, v: &[u8]) -> Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// Length-prefixed bit string: `u32` byte count, then the `[pad][bytes]` form.
    pub fn bits(self, v: &BitString) -> Self {
        let enc = encode_bits(v);
        self.u32(enc.len() as u32).bytes(&enc)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct PayloadReader<'a> {
    buf: &'a [u8],
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        if self.buf.len() < n {
            return Err(TransportError::Malformed(format!(
                "payload ends early: need {n} bytes, have {}",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, TransportError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        self.take(n)
    }

    pub fn bits(&mut self) -> Result<BitString, TransportError> {
        let n = self.u32()? as usize;
        decode_bits(self.take(n)?)
    }

    pub fn finish(self) -> Result<(), TransportError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(TransportError::Malformed(format!("{} trailing payload bytes", self.buf.len())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn finished_frame_layout() {
        assert_eq!(encode_frame(MessageType::Finished, &[]).unwrap(), vec![0, 0, 0, 0, 0x09]);
    }

    #[test]
    fn abort_frame_layout() {
        assert_eq!(encode_frame(MessageType::Abort, &[0x01]).unwrap(), vec![0, 0, 0, 1, 0x0A, 0x01]);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_frame(&[0, 0, 0]), Err(TransportError::Truncated { .. })));
        assert!(matches!(decode_frame(&[0, 0, 0, 2, 0x01, 7]), Err(TransportError::Truncated { .. })));
        assert!(matches!(decode_frame(&[0, 0, 0, 0, 0x0B]), Err(TransportError::UnknownType(0x0B))));
        assert!(matches!(decode_frame(&[0, 0, 0, 0, 0x00]), Err(TransportError::UnknownType(0))));
        assert!(matches!(decode_frame(&[0, 0, 0, 0, 0x09, 1]), Err(TransportError::LengthMismatch { .. })));
    }

    #[test]
    fn bit_payload_padding() {
        let b = BitString::parse_binary("101").unwrap();
        assert_eq!(encode_bits(&b), vec![5, 0b1010_0000]);
        assert_eq!(decode_bits(&[5, 0b1010_0000]).unwrap(), b);
        assert_eq!(encode_bits(&BitString::new()), vec![0]);
        assert!(decode_bits(&[]).is_err());
        assert!(decode_bits(&[8, 0]).is_err());
        assert_eq!(decode_bits(&[3, 0]).unwrap(), BitString::zeros(5));
        assert!(decode_bits(&[3, 0b0000_0100]).is_err());
        assert!(decode_bits(&[5, 0b1010_0001]).is_err());
    }

    #[test]
    fn loopback_delivers_in_order() {
        let (mut a, mut b) = loopback_pair();
        a.send(MessageType::SessionInit, b"hello").unwrap();
        a.send(MessageType::Finished, &[]).unwrap();
        assert_eq!(b.recv().unwrap(), (MessageType::SessionInit, b"hello".to_vec()));
        assert_eq!(b.recv().unwrap(), (MessageType::Finished, vec![]));
        assert_eq!(a.transcript().digest(), b.transcript().digest());
        drop(a);
        assert!(matches!(b.recv(), Err(TransportError::Closed)));
    }

    #[test]
    fn loopback_times_out() {
        let (_a, mut b) = loopback_pair_with(Duration::from_millis(20), false);
        assert!(matches!(b.recv(), Err(TransportError::Timeout)));
    }

    #[test]
    fn payload_fields_round_trip() {
        let bits = BitString::parse_binary("1100111").unwrap();
        let p = PayloadWriter::new().u8(3).u32(70000).f64(0.25).bits(&bits).finish();
        let mut r = PayloadReader::new(&p);
        assert_eq!(r.u8().unwrap(), 3);
        assert_eq!(r.u32().unwrap(), 70000);
        assert_eq!(r.f64().unwrap(), 0.25);
        assert_eq!(r.bits().unwrap(), bits);
        r.finish().unwrap();
    }

    proptest! {
        #[test]
        fn frame_round_trip(code in 1u8..=10, payload in proptest::collection::vec(any::<u8>(), 0..65536)) {
            let t = MessageType::try_from(code).unwrap();
            let enc = encode_frame(t, &payload).unwrap();
            prop_assert_eq!(enc.len(), HEADER_LEN + payload.len());
            prop_assert_eq!(decode_frame(&enc).unwrap(), (t, payload));
        }
    }
}
