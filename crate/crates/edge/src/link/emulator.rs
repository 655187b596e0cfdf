//! Scriptable stand-in for a reader node.

use std::fmt;
use std::io;
use std::time::{Duration, Instant};

use rollcall_core::clock::VirtualClock;
use rollcall_core::CardUid;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::{TcpStream, ToSocketAddrs};

use super::frame::{encode, EdgeFrame, ReaderFrame};

#[derive(Debug, Error)]
pub enum EmulatorError {
    #[error("connection refused: {0}")]
    ConnectionRefused(io::Error),
    #[error("link io error: {0}")]
    Io(#[from] io::Error),
    #[error("edge closed the link")]
    Closed,
    #[error("edge reset the session")]
    Reset,
    #[error("unexpected reply {0:?}")]
    Unexpected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptLine {
    pub direction: Direction,
    pub line: String,
}

/// Every line exchanged in a session, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
}

impl Transcript {
    fn push(&mut self, direction: Direction, line: impl Into<String>) {
        self.lines.push(TranscriptLine {
            direction,
            line: line.into(),
        });
    }

    pub fn received(&self) -> impl Iterator<Item = &str> {
        self.lines
            .iter()
            .filter(|l| l.direction == Direction::Received)
            .map(|l| l.line.as_str())
    }

    pub fn last_received(&self) -> Option<&str> {
        self.received().last()
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            let arrow = match l.direction {
                Direction::Sent => '>',
                Direction::Received => '<',
            };
            writeln!(f, "{arrow} {}", l.line)?;
        }
        Ok(())
    }
}

pub struct ReaderClient<S> {
    stream: BufReader<S>,
    transcript: Transcript,
}

impl ReaderClient<TcpStream> {
    pub async fn connect(addr: impl ToSocketAddrs) -> Result<Self, EmulatorError> {
        let sock = TcpStream::connect(addr).await.map_err(EmulatorError::ConnectionRefused)?;
        sock.set_nodelay(true)?;
        Ok(Self::new(sock))
    }
}

impl<S: AsyncRead + AsyncWrite + Unpin> ReaderClient<S> {
    pub fn new(stream: S) -> Self {
        ReaderClient {
            stream: BufReader::new(stream),
            transcript: Transcript::default(),
        }
    }

    pub async fn send(&mut self, frame: &ReaderFrame) -> Result<(), EmulatorError> {
        self.transcript.push(Direction::Sent, frame.to_string());
        self.send_raw(&encode(frame)).await
    }

    /// Writes bytes as-is, without recording them.
    pub async fn send_raw(&mut self, bytes: &[u8]) -> Result<(), EmulatorError> {
        let s = self.stream.get_mut();
        s.write_all(bytes).await?;
        s.flush().await?;
        Ok(())
    }

    /// Reads the next frame. Lines that do not parse are recorded and
    /// reported as `Unexpected`.
    pub async fn recv(&mut self) -> Result<EdgeFrame, EmulatorError> {
        let mut line = Vec::new();
        if self.stream.read_until(b'\n', &mut line).await? == 0 {
            return Err(EmulatorError::Closed);
        }
        if line.last() == Some(&b'\n') {
            line.pop();
        }
        let text = String::from_utf8_lossy(&line).into_owned();
        self.transcript.push(Direction::Received, text.clone());
        EdgeFrame::parse(&line).map_err(|_| EmulatorError::Unexpected(text))
    }

    /// Handshakes and returns the session nonce.
    pub async fn hello(&mut self, node_id: &str, fw_version: &str) -> Result<String, EmulatorError> {
        self.send(&ReaderFrame::Hello {
            node_id: node_id.into(),
            fw_version: fw_version.into(),
        })
        .await?;
        match self.recv().await? {
            EdgeFrame::Welcome { nonce } => Ok(nonce),
            EdgeFrame::Reset => Err(EmulatorError::Reset),
            other => Err(EmulatorError::Unexpected(other.to_string())),
        }
    }

    /// Sends a UID and waits for its ACK or NAK.
    pub async fn scan(&mut self, uid: CardUid) -> Result<EdgeFrame, EmulatorError> {
        self.send(&ReaderFrame::Uid(uid)).await?;
        match self.recv().await? {
            f if f.is_scan_reply() => Ok(f),
            EdgeFrame::Reset => Err(EmulatorError::Reset),
            other => Err(EmulatorError::Unexpected(other.to_string())),
        }
    }

    /// Like [`scan`](Self::scan), also returning the frame round-trip time.
    pub async fn timed_scan(&mut self, uid: CardUid) -> Result<(EdgeFrame, Duration), EmulatorError> {
        let t0 = Instant::now();
        let f = self.scan(uid).await?;
        Ok((f, t0.elapsed()))
    }

    pub async fn ping(&mut self) -> Result<(), EmulatorError> {
        self.send(&ReaderFrame::Ping).await?;
        match self.recv().await? {
            EdgeFrame::Pong => Ok(()),
            EdgeFrame::Reset => Err(EmulatorError::Reset),
            other => Err(EmulatorError::Unexpected(other.to_string())),
        }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptStep {
    /// Wait before presenting the card.
    pub delay: Duration,
    pub uid: CardUid,
}

/// How script delays pass.
#[derive(Debug, Clone)]
pub enum Pace {
    /// Sleep for real.
    Wall,
    /// Advance a shared virtual clock; no sleeping.
    Virtual(VirtualClock),
}

impl Pace {
    async fn wait(&self, d: Duration) {
        match self {
            Pace::Wall => tokio::time::sleep(d).await,
            Pace::Virtual(c) => c.advance(chrono::Duration::from_std(d).expect("delay in range")),
        }
    }
}

/// Connects over `stream`, handshakes as `node_id`, plays the script and
/// returns everything exchanged.
pub async fn emulate_reader<S>(stream: S, node_id: &str, script: &[ScriptStep], pace: &Pace) -> Result<Transcript, EmulatorError>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let mut client = ReaderClient::new(stream);
    client.hello(node_id, "emu-1").await?;
    for step in script {
        pace.wait(step.delay).await;
        client.scan(step.uid).await?;
    }
    Ok(client.into_transcript())
}
