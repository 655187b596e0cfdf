//! Per-connection protocol state, independent of any transport.

use rollcall_core::CardUid;

use super::frame::{EdgeFrame, FrameError, NakCode, ReaderFrame};

/// Consecutive malformed lines that end a session.
pub const MALFORMED_LIMIT: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Reply(EdgeFrame),
    /// A well-formed UID from a reader that completed the handshake.
    Scan { uid: CardUid, node_id: String },
    /// A UID that arrived before HELLO. Answered with `NAK ERR`.
    Unsolicited(CardUid),
    /// Send RESET and drop the session.
    Reset,
}

#[derive(Debug, Default)]
pub struct SessionMachine {
    node_id: Option<String>,
    malformed: u8,
}

impl SessionMachine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_id(&self) -> Option<&str> {
        self.node_id.as_deref()
    }

    /// Advances the session by one decoded line. `nonce` is called once per
    /// accepted HELLO.
    pub fn on_line(&mut self, line: Result<Vec<u8>, FrameError>, nonce: &mut dyn FnMut() -> String) -> Action {
        let frame = match line.and_then(|l| ReaderFrame::parse(&l)) {
            Ok(f) => f,
            Err(_) => {
                self.malformed += 1;
                if self.malformed >= MALFORMED_LIMIT {
                    return Action::Reset;
                }
                return Action::Reply(EdgeFrame::Nak(NakCode::Error));
            }
        };
        self.malformed = 0;
        match frame {
            ReaderFrame::Hello { node_id, .. } => {
                self.node_id = Some(node_id);
                Action::Reply(EdgeFrame::Welcome { nonce: nonce() })
            }
            ReaderFrame::Ping => Action::Reply(EdgeFrame::Pong),
            ReaderFrame::Uid(uid) => match &self.node_id {
                Some(node_id) => Action::Scan {
                    uid,
                    node_id: node_id.clone(),
                },
                None => Action::Unsolicited(uid),
            },
        }
    }
}
