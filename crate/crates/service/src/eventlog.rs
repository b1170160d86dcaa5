//! Append-only JSON Lines event log.
//!
//! Each line is one [`EventRecord`]:
//!
//! ```json
//! {"seq":1,"timestamp_ms":1700000000000,"kind":"SessionCreated","payload":{...}}
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use racetrack_core::arena::{ArenaEvent, ArenaState, EventSink};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub event: ArenaEvent,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log is corrupt at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("event log i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Reads every record, checking that `seq` runs 1, 2, 3, ...
pub fn read_records(reader: impl Read) -> Result<Vec<EventRecord>, LogError> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let expected = i as u64 + 1;
        let line = line?;
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| LogError::CorruptLog {
            seq: expected,
            reason: e.to_string(),
        })?;
        if record.seq != expected {
            return Err(LogError::CorruptLog {
                seq: record.seq,
                reason: format!("expected seq {expected}"),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Rebuilds arena state from a log.
pub fn replay(reader: impl Read) -> Result<(ArenaState, u64), LogError> {
    let mut state = ArenaState::new();
    let mut last = 0;
    for record in read_records(reader)? {
        state.apply(record.event).map_err(|e| LogError::CorruptLog {
            seq: record.seq,
            reason: e.to_string(),
        })?;
        last = record.seq;
    }
    Ok((state, last))
}

/// File-backed [`EventSink`]. Every append is written and synced before it
/// returns; a failed append is truncated away so the file never keeps a
/// partial line.
#[derive(Debug)]
pub struct JsonlEventLog {
    file: File,
    len: u64,
    next_seq: u64,
}

impl JsonlEventLog {
    /// Opens (or creates) the log at `path` and replays what is already there.
    pub fn open(path: &Path) -> Result<(Self, ArenaState), LogError> {
        let (state, last_seq) = match File::open(path) {
            Ok(f) => replay(f)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (ArenaState::new(), 0),
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Self::from_file(file, last_seq)?, state))
    }

    /// Appends to an already opened file whose last record has `last_seq`.
    pub fn from_file(file: File, last_seq: u64) -> Result<Self, LogError> {
        let len = file.metadata()?.len();
        Ok(Self {
            file,
            len,
            next_seq: last_seq + 1,
        })
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    fn write_line(&mut self, line: &[u8]) -> std::io::Result<()> {
        self.file.write_all(line)?;
        self.file.sync_data()
    }
}

impl EventSink for JsonlEventLog {
    fn append(&mut self, event: &ArenaEvent) -> Result<(), String> {
        let record = EventRecord {
            seq: self.next_seq,
            timestamp_ms: now_ms(),
            event: event.clone(),
        };
        let mut line = serde_json::to_vec(&record).map_err(|e| e.to_string())?;
        line.push(b'\n');
        if let Err(e) = self.write_line(&line) {
            // Best effort: character devices cannot be truncated.
            let _ = self.file.set_len(self.len);
            return Err(e.to_string());
        }
        self.len += line.len() as u64;
        self.next_seq += 1;
        Ok(())
    }
}
