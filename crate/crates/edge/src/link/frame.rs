//! Line frames exchanged between a reader and the edge node.
//!
//! Every frame is one ASCII line of at most 64 bytes including the LF
//! terminator, made of space-separated tokens. UIDs are 8 uppercase hex
//! digits. A CR before the LF is tolerated and dropped.

use std::fmt;

use rollcall_core::{AttendanceStatus, CardUid, RejectReason, ScanOutcome};
use thiserror::Error;

pub const MAX_FRAME_BYTES: usize = 64;
const MAX_TOKEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("line longer than {MAX_FRAME_BYTES} bytes")]
    Overlong,
    #[error("non-ascii or control byte in line")]
    NotAscii,
    #[error("unknown frame {0:?}")]
    Unknown(String),
    #[error("bad arguments for {0}")]
    BadArguments(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReaderFrame {
    Hello { node_id: String, fw_version: String },
    Uid(CardUid),
    Ping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckCode {
    Present,
    Late,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NakCode {
    Blocked,
    Unknown,
    Window,
    Closed,
    Day,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeFrame {
    Welcome { nonce: String },
    Ack(AckCode),
    Nak(NakCode),
    Pong,
    Reset,
}

impl AckCode {
    pub fn as_str(self) -> &'static str {
        match self {
            AckCode::Present => "P",
            AckCode::Late => "L",
            AckCode::Duplicate => "D",
        }
    }
}

impl NakCode {
    pub const ALL: [NakCode; 6] = [
        NakCode::Blocked,
        NakCode::Unknown,
        NakCode::Window,
        NakCode::Closed,
        NakCode::Day,
        NakCode::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NakCode::Blocked => "BLK",
            NakCode::Unknown => "UNK",
            NakCode::Window => "WIN",
            NakCode::Closed => "CLO",
            NakCode::Day => "DAY",
            NakCode::Error => "ERR",
        }
    }
}

/// The reply frame for a scan outcome.
pub fn outcome_frame(outcome: ScanOutcome) -> EdgeFrame {
    match outcome {
        ScanOutcome::Recorded(AttendanceStatus::Late) => EdgeFrame::Ack(AckCode::Late),
        ScanOutcome::Recorded(_) => EdgeFrame::Ack(AckCode::Present),
        ScanOutcome::Duplicate(_) => EdgeFrame::Ack(AckCode::Duplicate),
        ScanOutcome::Rejected(r) => EdgeFrame::Nak(match r {
            RejectReason::CardBlocked => NakCode::Blocked,
            RejectReason::UnknownCard | RejectReason::UnlinkedCard => NakCode::Unknown,
            RejectReason::BeforeWindow => NakCode::Window,
            RejectReason::AfterClosure => NakCode::Closed,
            RejectReason::NonSchoolDay => NakCode::Day,
        }),
    }
}

fn token_ok(t: &str) -> bool {
    !t.is_empty() && t.len() <= MAX_TOKEN && t.bytes().all(|b| b.is_ascii_graphic())
}

fn parse_uid(t: &str) -> Option<CardUid> {
    if t.len() != 8 || !t.bytes().all(|b| b.is_ascii_digit() || (b'A'..=b'F').contains(&b)) {
        return None;
    }
    t.parse().ok()
}

/// Checks a line (without its LF) and splits it into tokens.
fn tokens(line: &[u8]) -> Result<Vec<&str>, FrameError> {
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    if line.len() + 1 > MAX_FRAME_BYTES {
        return Err(FrameError::Overlong);
    }
    if !line.iter().all(|b| (0x20..0x7f).contains(b)) {
        return Err(FrameError::NotAscii);
    }
    let s = std::str::from_utf8(line).expect("ascii");
    Ok(s.split(' ').collect())
}

impl ReaderFrame {
    pub fn parse(line: &[u8]) -> Result<Self, FrameError> {
        match tokens(line)?.as_slice() {
            ["HELLO", node, fw] if token_ok(node) && token_ok(fw) => Ok(ReaderFrame::Hello {
                node_id: node.to_string(),
                fw_version: fw.to_string(),
            }),
            ["HELLO", ..] => Err(FrameError::BadArguments("HELLO")),
            ["UID", uid] => parse_uid(uid).map(ReaderFrame::Uid).ok_or(FrameError::BadArguments("UID")),
            ["UID", ..] => Err(FrameError::BadArguments("UID")),
            ["PING"] => Ok(ReaderFrame::Ping),
            other => Err(FrameError::Unknown(other.join(" "))),
        }
    }
}

impl EdgeFrame {
    pub fn parse(line: &[u8]) -> Result<Self, FrameError> {
        match tokens(line)?.as_slice() {
            ["WELCOME", nonce] if token_ok(nonce) => Ok(EdgeFrame::Welcome {
                nonce: nonce.to_string(),
            }),
            ["ACK", c] => match *c {
                "P" => Ok(EdgeFrame::Ack(AckCode::Present)),
                "L" => Ok(EdgeFrame::Ack(AckCode::Late)),
                "D" => Ok(EdgeFrame::Ack(AckCode::Duplicate)),
                _ => Err(FrameError::BadArguments("ACK")),
            },
            ["NAK", c] => NakCode::ALL
                .into_iter()
                .find(|k| k.as_str() == *c)
                .map(EdgeFrame::Nak)
                .ok_or(FrameError::BadArguments("NAK")),
            ["PONG"] => Ok(EdgeFrame::Pong),
            ["RESET"] => Ok(EdgeFrame::Reset),
            other => Err(FrameError::Unknown(other.join(" "))),
        }
    }

    pub fn is_scan_reply(&self) -> bool {
        matches!(self, EdgeFrame::Ack(_) | EdgeFrame::Nak(_))
    }
}

impl fmt::Display for ReaderFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReaderFrame::Hello { node_id, fw_version } => write!(f, "HELLO {node_id} {fw_version}"),
            ReaderFrame::Uid(uid) => write!(f, "UID {uid}"),
            ReaderFrame::Ping => f.write_str("PING"),
        }
    }
}

impl fmt::Display for EdgeFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeFrame::Welcome { nonce } => write!(f, "WELCOME {nonce}"),
            EdgeFrame::Ack(c) => write!(f, "ACK {}", c.as_str()),
            EdgeFrame::Nak(c) => write!(f, "NAK {}", c.as_str()),
            EdgeFrame::Pong => f.write_str("PONG"),
            EdgeFrame::Reset => f.write_str("RESET"),
        }
    }
}

/// Wire bytes of a frame, LF included.
pub fn encode(frame: &impl fmt::Display) -> Vec<u8> {
    let mut s = frame.to_string().into_bytes();
    s.push(b'\n');
    s
}

/// Splits a byte stream into lines. Nothing is dispatched until its LF has
/// arrived. A line that outgrows the frame limit is reported once as
/// `Overlong` and its remaining bytes are skipped up to the next LF.
#[derive(Debug, Default)]
pub struct LineDecoder {
    buf: Vec<u8>,
    discarding: bool,
}

impl LineDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<Result<Vec<u8>, FrameError>> {
        let mut out = Vec::new();
        for &b in bytes {
            if b == b'\n' {
                if self.discarding {
                    self.discarding = false;
                } else {
                    out.push(Ok(std::mem::take(&mut self.buf)));
                }
                continue;
            }
            if self.discarding {
                continue;
            }
            self.buf.push(b);
            // Room for an optional CR and the LF.
            if self.buf.len() > MAX_FRAME_BYTES {
                self.buf.clear();
                self.discarding = true;
                out.push(Err(FrameError::Overlong));
            }
        }
        out
    }

    /// Bytes waiting for their terminator.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}
