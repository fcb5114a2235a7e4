//! Frame layout, little-endian throughout:
//!
//! ```text
//! offset 0  "PSTP"
//!        4  version u8 (= 1)
//!        5  msg_type u8
//!        6  sender_rank u16
//!        8  step u32
//!       12  payload element count u32
//!       16  count × f64
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const FRAME_MAGIC: [u8; 4] = *b"PSTP";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

/// Largest payload a reader will accept, in elements.
pub const MAX_PAYLOAD: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Noise = 0,
    SampleBcast = 1,
    Hello = 2,
    Shutdown = 3,
}

impl MsgType {
    pub const ALL: [MsgType; 4] = [MsgType::Noise, MsgType::SampleBcast, MsgType::Hello, MsgType::Shutdown];

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| *m as u8 == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Noise => "NOISE",
            MsgType::SampleBcast => "SAMPLE_BCAST",
            MsgType::Hello => "HELLO",
            MsgType::Shutdown => "SHUTDOWN",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for MsgType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub sender: u16,
    pub step: u32,
    pub payload: Vec<f64>,
}

impl WireMessage {
    pub fn control(msg_type: MsgType, sender: u16) -> Self {
        Self {
            msg_type,
            sender,
            step: 0,
            payload: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.payload.len()
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bits_eq(&self, other: &WireMessage) -> bool {
        self.msg_type == other.msg_type
            && self.sender == other.sender
            && self.step == other.step
            && self.payload.len() == other.payload.len()
            && self
                .payload
                .iter()
                .zip(&other.payload)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameErrorKind {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} elements exceeds limit")]
    Oversized(u32),
    #[error("truncated: need {need} bytes, {have} available")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("frame error at byte {offset}: {kind}")]
pub struct FrameError {
    pub offset: usize,
    pub kind: FrameErrorKind,
}

fn frame_err(offset: usize, kind: FrameErrorKind) -> FrameError {
    FrameError { offset, kind }
}

pub fn encode_message(m: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(WIRE_VERSION);
    out.push(m.msg_type as u8);
    out.extend_from_slice(&m.sender.to_le_bytes());
    out.extend_from_slice(&m.step.to_le_bytes());
    out.extend_from_slice(&(m.payload.len() as u32).to_le_bytes());
    for v in &m.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Header {
    msg_type: MsgType,
    sender: u16,
    step: u32,
    count: usize,
}

fn parse_header(h: &[u8]) -> Result<Header, FrameError> {
    if h.len() < HEADER_LEN {
        return Err(frame_err(
            h.len(),
            FrameErrorKind::Truncated {
                need: HEADER_LEN,
                have: h.len(),
            },
        ));
    }
    if h[..4] != FRAME_MAGIC {
        return Err(frame_err(0, FrameErrorKind::BadMagic));
    }
    if h[4] != WIRE_VERSION {
        return Err(frame_err(4, FrameErrorKind::BadVersion(h[4])));
    }
    let msg_type = MsgType::from_code(h[5]).ok_or(frame_err(5, FrameErrorKind::UnknownType(h[5])))?;
    let count = u32::from_le_bytes(h[12..16].try_into().unwrap());
    if count as usize > MAX_PAYLOAD {
        return Err(frame_err(12, FrameErrorKind::Oversized(count)));
    }
    Ok(Header {
        msg_type,
        sender: u16::from_le_bytes([h[6], h[7]]),
        step: u32::from_le_bytes(h[8..12].try_into().unwrap()),
        count: count as usize,
    })
}

fn parse_payload(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Decodes exactly one frame occupying all of `buf`.
pub fn decode_message(buf: &[u8]) -> Result<WireMessage, FrameError> {
    let h = parse_header(buf)?;
    let body = &buf[HEADER_LEN..];
    let need = 8 * h.count;
    if body.len() < need {
        return Err(frame_err(
            HEADER_LEN,
            FrameErrorKind::Truncated { need, have: body.len() },
        ));
    }
    if body.len() > need {
        return Err(frame_err(
            HEADER_LEN + need,
            FrameErrorKind::Trailing(body.len() - need),
        ));
    }
    Ok(WireMessage {
        msg_type: h.msg_type,
        sender: h.sender,
        step: h.step,
        payload: parse_payload(body),
    })
}

#[derive(Debug, Error)]
pub enum ReadError {
    /// The stream ended cleanly before the first byte of a frame.
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads `buf.len()` bytes, returning how many arrived before end of stream.
fn fill(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

pub fn read_frame(r: &mut impl Read) -> Result<WireMessage, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    let got = fill(r, &mut header)?;
    if got == 0 {
        return Err(ReadError::Closed);
    }
    let h = parse_header(&header[..got])?;
    let mut body = vec![0u8; 8 * h.count];
    let got = fill(r, &mut body)?;
    if got < body.len() {
        return Err(frame_err(
            HEADER_LEN + got,
            FrameErrorKind::Truncated {
                need: body.len(),
                have: got,
            },
        )
        .into());
    }
    Ok(WireMessage {
        msg_type: h.msg_type,
        sender: h.sender,
        step: h.step,
        payload: parse_payload(&body),
    })
}

pub fn write_frame(w: &mut impl Write, m: &WireMessage) -> io::Result<usize> {
    let bytes = encode_message(m);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hello_golden_bytes() {
        let m = WireMessage::control(MsgType::Hello, 3);
        assert_eq!(
            encode_message(&m),
            [0x50, 0x53, 0x54, 0x50, 0x01, 0x02, 0x03, 0x00, 0, 0, 0, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn noise_round_trip() {
        let m = WireMessage {
            msg_type: MsgType::Noise,
            sender: 1,
            step: 17,
            payload: vec![1.0, -2.5],
        };
        let b = encode_message(&m);
        assert_eq!(b.len(), 32);
        assert_eq!(decode_message(&b).unwrap(), m);
        assert_eq!(read_frame(&mut b.as_slice()).unwrap(), m);
    }

    #[test]
    fn short_payload_reports_offset_16() {
        let mut b = encode_message(&WireMessage {
            msg_type: MsgType::Noise,
            sender: 1,
            step: 2,
            payload: vec![1.0, 2.0],
        });
        b.truncate(HEADER_LEN + 8);
        let e = decode_message(&b).unwrap_err();
        assert_eq!(e.offset, 16);
        assert!(matches!(e.kind, FrameErrorKind::Truncated { need: 16, have: 8 }));
    }

    #[test]
    fn header_corruptions() {
        let good = encode_message(&WireMessage::control(MsgType::Shutdown, 0));
        let at = |i: usize, v: u8| {
            let mut b = good.clone();
            b[i] = v;
            decode_message(&b).unwrap_err()
        };
        assert_eq!(at(1, b'X'), frame_err(0, FrameErrorKind::BadMagic));
        assert_eq!(at(4, 2), frame_err(4, FrameErrorKind::BadVersion(2)));
        assert_eq!(at(5, 9), frame_err(5, FrameErrorKind::UnknownType(9)));
        assert_eq!(decode_message(&good[..10]).unwrap_err().offset, 10);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(
            decode_message(&long).unwrap_err(),
            frame_err(16, FrameErrorKind::Trailing(1))
        );
    }

    #[test]
    fn stream_reader_distinguishes_clean_close() {
        let mut empty: &[u8] = &[];
        assert!(matches!(read_frame(&mut empty), Err(ReadError::Closed)));
        let b = encode_message(&WireMessage {
            msg_type: MsgType::SampleBcast,
            sender: 0,
            step: 5,
            payload: vec![0.5; 3],
        });
        let mut cut = &b[..30];
        match read_frame(&mut cut) {
            Err(ReadError::Frame(e)) => assert_eq!(e.offset, 30),
            other => panic!("{other:?}"),
        }
    }

    fn any_msg() -> impl Strategy<Value = WireMessage> {
        (
            0u8..4,
            any::<u16>(),
            any::<u32>(),
            prop::collection::vec(any::<u64>().prop_map(f64::from_bits), 0..16),
        )
            .prop_map(|(t, sender, step, payload)| WireMessage {
                msg_type: MsgType::from_code(t).unwrap(),
                sender,
                step,
                payload,
            })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(m in any_msg()) {
            let b = encode_message(&m);
            prop_assert_eq!(b.len(), m.encoded_len());
            prop_assert!(decode_message(&b).unwrap().bits_eq(&m));
        }

        #[test]
        fn concatenated_frames_read_in_order(ms in prop::collection::vec(any_msg(), 1..5)) {
            let mut buf = Vec::new();
            for m in &ms {
                write_frame(&mut buf, m).unwrap();
            }
            let mut r = buf.as_slice();
            for m in &ms {
                prop_assert!(read_frame(&mut r).unwrap().bits_eq(m));
            }
            prop_assert!(matches!(read_frame(&mut r), Err(ReadError::Closed)));
        }
    }
}
