//! Append-only record file with write-ahead semantics.
//!
//! Layout: an 8-byte magic header, then records framed as
//! `len: u32 LE | crc32(payload): u32 LE | payload (JSON)`.
//! A record is durable once `append` returns. On open, a torn or corrupt
//! tail left by a crash is cut off at the last intact record.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"RCJRNL1\n";
const FRAME_HEADER: usize = 8;
const MAX_RECORD: usize = 16 << 20;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal io error: {0}")]
    Io(#[from] io::Error),
    #[error("storage full")]
    StorageFull,
    #[error("{0} is not a journal file")]
    NotAJournal(PathBuf),
    #[error("record at offset {offset} failed to decode: {source}")]
    Decode {
        offset: u64,
        #[source]
        source: serde_json::Error,
    },
    #[error("record encoding failed: {0}")]
    Encode(#[source] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct JournalOptions {
    /// Refuse appends that would grow the file beyond this many bytes.
    pub max_bytes: Option<u64>,
}

/// What `open` found on disk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Recovery {
    pub records: usize,
    /// Bytes cut from a torn tail.
    pub truncated_bytes: u64,
}

#[derive(Debug)]
pub struct Journal<R> {
    file: File,
    path: PathBuf,
    len: u64,
    opts: JournalOptions,
    _record: PhantomData<fn(R)>,
}

impl<R: Serialize + DeserializeOwned> Journal<R> {
    pub fn open(path: &Path, opts: JournalOptions) -> Result<(Self, Vec<R>, Recovery), JournalError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        if bytes.is_empty() {
            file.write_all(MAGIC)?;
            file.sync_all()?;
            if let Some(dir) = path.parent() {
                // Persist the directory entry of a newly created file.
                if let Ok(d) = File::open(dir) {
                    let _ = d.sync_all();
                }
            }
            bytes.extend_from_slice(MAGIC);
        } else if bytes.len() < MAGIC.len() {
            // Crash while writing the header of a fresh journal.
            if MAGIC.starts_with(&bytes) {
                file.set_len(0)?;
                file.write_all(MAGIC)?;
                file.sync_all()?;
                bytes = MAGIC.to_vec();
            } else {
                return Err(JournalError::NotAJournal(path.to_path_buf()));
            }
        } else if &bytes[..MAGIC.len()] != MAGIC {
            return Err(JournalError::NotAJournal(path.to_path_buf()));
        }

        let mut records = Vec::new();
        let mut off = MAGIC.len();
        while off < bytes.len() {
            let Some(head) = bytes.get(off..off + FRAME_HEADER) else { break };
            let len = u32::from_le_bytes(head[..4].try_into().expect("4 bytes")) as usize;
            let crc = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
            let Some(payload) = bytes.get(off + FRAME_HEADER..off + FRAME_HEADER + len) else { break };
            if len > MAX_RECORD || crc32fast::hash(payload) != crc {
                break;
            }
            let record = serde_json::from_slice(payload).map_err(|source| JournalError::Decode {
                offset: off as u64,
                source,
            })?;
            records.push(record);
            off += FRAME_HEADER + len;
        }
        let truncated = (bytes.len() - off) as u64;
        if truncated > 0 {
            file.set_len(off as u64)?;
            file.sync_all()?;
        }
        let recovery = Recovery {
            records: records.len(),
            truncated_bytes: truncated,
        };
        Ok((
            Journal {
                file,
                path: path.to_path_buf(),
                len: off as u64,
                opts,
                _record: PhantomData,
            },
            records,
            recovery,
        ))
    }

    /// Appends `records` as one write followed by `fdatasync`. Either all of
    /// them become durable or the file is rolled back to its prior length.
    pub fn append(&mut self, records: &[R]) -> Result<(), JournalError> {
        let mut buf = Vec::with_capacity(256 * records.len());
        for r in records {
            let payload = serde_json::to_vec(r).map_err(JournalError::Encode)?;
            buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
            buf.extend_from_slice(&payload);
        }
        if let Some(max) = self.opts.max_bytes {
            if self.len + buf.len() as u64 > max {
                return Err(JournalError::StorageFull);
            }
        }
        let result = self.file.write_all(&buf).and_then(|_| self.file.sync_data());
        match result {
            Ok(()) => {
                self.len += buf.len() as u64;
                Ok(())
            }
            Err(e) => {
                let _ = self.file.set_len(self.len);
                if e.kind() == io::ErrorKind::StorageFull {
                    Err(JournalError::StorageFull)
                } else {
                    Err(JournalError::Io(e))
                }
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len_bytes(&self) -> u64 {
        self.len
    }
}
