//! Write-ahead event log.
//!
//! On disk a journal is an 8-byte magic and a version word followed by
//! records of `[len: u32 LE][crc32: u32 LE][payload]`, where the payload is the
//! JSON encoding of one [`JournalEvent`]. An event is durable once `append`
//! returns, and only then is it applied to in-memory state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bracket::ConfigId;
use crate::orchestrator::{ExperimentSpec, Settings, Token};

pub const MAGIC: &[u8; 8] = b"RUNGSJNL";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const MAX_RECORD: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    ExperimentCreated {
        spec: ExperimentSpec,
    },
    BracketOpened {
        bracket: usize,
        early_stopping_rate: u32,
        width: u64,
    },
    ConfigSampled {
        bracket: usize,
        config_id: ConfigId,
        sample_seed: u64,
    },
    JobDispatched {
        token: Token,
        bracket: usize,
        config_id: ConfigId,
        rung: usize,
    },
    ResultRecorded {
        token: Token,
        bracket: usize,
        config_id: ConfigId,
        rung: usize,
        #[serde(with = "crate::serde_f64::loss")]
        loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checkpoint: Option<String>,
    },
    ConfigPromoted {
        bracket: usize,
        config_id: ConfigId,
        from_rung: usize,
    },
    JobDropped {
        token: Token,
        bracket: usize,
        config_id: ConfigId,
        rung: usize,
    },
    WidthExtended {
        bracket: usize,
        additional: u64,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::ExperimentCreated { .. } => "experiment-created",
            EventKind::BracketOpened { .. } => "bracket-opened",
            EventKind::ConfigSampled { .. } => "config-sampled",
            EventKind::JobDispatched { .. } => "job-dispatched",
            EventKind::ResultRecorded { .. } => "result-recorded",
            EventKind::ConfigPromoted { .. } => "config-promoted",
            EventKind::JobDropped { .. } => "job-dropped",
            EventKind::WidthExtended { .. } => "width-extended",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEvent {
    pub sequence_no: u64,
    pub timestamp: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a journal file (bad header)")]
    BadHeader,
    #[error("journal corrupt at sequence {sequence_no}: {reason}")]
    Corrupt { sequence_no: u64, reason: String },
    #[error("event {sequence_no} rejected: {reason}")]
    Rejected { sequence_no: u64, reason: String },
    #[error("cannot encode event: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Tracks what earlier events introduced so later ones can be checked against it.
#[derive(Debug, Clone, Default)]
struct References {
    brackets: usize,
    sampled: BTreeMap<ConfigId, usize>,
    outstanding: BTreeMap<Token, (usize, ConfigId, usize)>,
    results: BTreeSet<(usize, ConfigId, usize)>,
    next_token: Token,
}

impl References {
    fn check(&self, seq: u64, kind: &EventKind) -> Result<(), String> {
        if seq == 0 {
            let EventKind::ExperimentCreated { spec } = kind else {
                return Err("first event must create the experiment".into());
            };
            return Settings::resolve(spec).map(|_| ()).map_err(|e| e.to_string());
        }
        let bracket_ok = |b: usize| if b < self.brackets { Ok(()) } else { Err(format!("unknown bracket {b}")) };
        match kind {
            EventKind::ExperimentCreated { .. } => Err("experiment created twice".into()),
            &EventKind::BracketOpened { bracket, .. } if bracket != self.brackets => {
                Err(format!("bracket {bracket} opened out of order"))
            }
            EventKind::BracketOpened { .. } => Ok(()),
            &EventKind::ConfigSampled { bracket, config_id, .. } => {
                bracket_ok(bracket)?;
                if self.sampled.contains_key(&config_id) {
                    return Err(format!("config {config_id} sampled twice"));
                }
                Ok(())
            }
            &EventKind::JobDispatched { token, bracket, config_id, .. } => {
                bracket_ok(bracket)?;
                if self.sampled.get(&config_id) != Some(&bracket) {
                    return Err(format!("config {config_id} was never sampled into bracket {bracket}"));
                }
                if token < self.next_token {
                    return Err(format!("token {token} reused"));
                }
                Ok(())
            }
            &EventKind::ResultRecorded { token, bracket, config_id, rung, .. }
            | &EventKind::JobDropped { token, bracket, config_id, rung } => match self.outstanding.get(&token) {
                Some(&job) if job == (bracket, config_id, rung) => Ok(()),
                Some(_) => Err(format!("token {token} belongs to a different job")),
                None => Err(format!("token {token} is not outstanding")),
            },
            &EventKind::ConfigPromoted { bracket, config_id, from_rung } => {
                if self.results.contains(&(bracket, config_id, from_rung)) {
                    Ok(())
                } else {
                    Err(format!("config {config_id} has no result in rung {from_rung} of bracket {bracket}"))
                }
            }
            &EventKind::WidthExtended { bracket, .. } => bracket_ok(bracket),
        }
    }

    fn record(&mut self, kind: &EventKind) {
        match kind {
            EventKind::ExperimentCreated { spec } => {
                self.brackets = Settings::resolve(spec).map(|s| s.brackets.len()).unwrap_or(0);
            }
            EventKind::BracketOpened { .. } => self.brackets += 1,
            &EventKind::ConfigSampled { bracket, config_id, .. } => {
                self.sampled.insert(config_id, bracket);
            }
            &EventKind::JobDispatched { token, bracket, config_id, rung } => {
                self.next_token = token + 1;
                self.outstanding.insert(token, (bracket, config_id, rung));
            }
            &EventKind::ResultRecorded { token, bracket, config_id, rung, .. } => {
                self.outstanding.remove(&token);
                self.results.insert((bracket, config_id, rung));
            }
            EventKind::JobDropped { token, .. } => {
                self.outstanding.remove(token);
            }
            EventKind::ConfigPromoted { .. } | EventKind::WidthExtended { .. } => {}
        }
    }

    fn admit(&mut self, seq: u64, kind: &EventKind) -> Result<(), JournalError> {
        self.check(seq, kind).map_err(|reason| JournalError::Rejected { sequence_no: seq, reason })?;
        self.record(kind);
        Ok(())
    }
}

#[derive(Debug)]
struct Sink {
    file: File,
    path: PathBuf,
    fsync: bool,
}

/// An append-only, validated sequence of events, optionally backed by a file.
#[derive(Debug)]
pub struct Journal {
    events: Vec<JournalEvent>,
    refs: References,
    sink: Option<Sink>,
}

impl Journal {
    pub fn in_memory() -> Self {
        Self { events: Vec::new(), refs: References::default(), sink: None }
    }

    /// Creates a new journal file; fails if it already exists.
    pub fn create(path: &Path, fsync: bool) -> Result<Self, JournalError> {
        let mut file = OpenOptions::new().read(true).write(true).create_new(true).open(path)?;
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        file.write_all(&header)?;
        if fsync {
            file.sync_all()?;
        }
        Ok(Self { events: Vec::new(), refs: References::default(), sink: Some(Sink { file, path: path.into(), fsync }) })
    }

    /// Opens an existing journal for appending. A record cut short at the end
    /// of the file (a torn write) is discarded; any other damage is an error.
    pub fn open(path: &Path, fsync: bool) -> Result<Self, JournalError> {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (events, valid_len) = decode_prefix(&bytes)?;
        if valid_len < bytes.len() {
            tracing::warn!(path = %path.display(), dropped = bytes.len() - valid_len, "discarding torn journal tail");
            file.set_len(valid_len as u64)?;
        }
        file.seek(SeekFrom::End(0))?;
        let mut journal = Self { events: Vec::new(), refs: References::default(), sink: None };
        for e in events {
            journal.admit(e)?;
        }
        journal.sink = Some(Sink { file, path: path.into(), fsync });
        Ok(journal)
    }

    /// Reads and validates a journal file without opening it for writing.
    pub fn load(path: &Path) -> Result<Vec<JournalEvent>, JournalError> {
        let bytes = std::fs::read(path)?;
        let events = decode(&bytes)?;
        validate(&events)?;
        Ok(events)
    }

    pub fn from_events(events: Vec<JournalEvent>) -> Result<Self, JournalError> {
        let mut journal = Self::in_memory();
        for e in events {
            journal.admit(e)?;
        }
        Ok(journal)
    }

    fn admit(&mut self, event: JournalEvent) -> Result<(), JournalError> {
        let expected = self.events.len() as u64;
        if event.sequence_no != expected {
            return Err(JournalError::Corrupt {
                sequence_no: expected,
                reason: format!("found sequence number {}", event.sequence_no),
            });
        }
        self.refs.admit(event.sequence_no, &event.kind)?;
        self.events.push(event);
        Ok(())
    }

    /// Validates, persists and returns the new event.
    pub fn append(&mut self, kind: EventKind, timestamp: u64) -> Result<&JournalEvent, JournalError> {
        let sequence_no = self.events.len() as u64;
        self.refs.check(sequence_no, &kind).map_err(|reason| JournalError::Rejected { sequence_no, reason })?;
        let event = JournalEvent { sequence_no, timestamp, kind };
        if let Some(sink) = &mut self.sink {
            let record = encode_record(&event)?;
            sink.file.write_all(&record)?;
            if sink.fsync {
                sink.file.sync_data()?;
            }
        }
        self.refs.record(&event.kind);
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    pub fn events(&self) -> &[JournalEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_sequence_no(&self) -> Option<u64> {
        self.events.last().map(|e| e.sequence_no)
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|s| s.path.as_path())
    }

    /// Writes the whole journal to a new file.
    pub fn write_to(&self, path: &Path) -> Result<(), JournalError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&encode_record(e)?);
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub fn encode_record(event: &JournalEvent) -> Result<Vec<u8>, JournalError> {
    let payload = serde_json::to_vec(event)?;
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes a complete journal image. Any damage, including a truncated final
/// record, is reported with the sequence number of the first bad record.
pub fn decode(bytes: &[u8]) -> Result<Vec<JournalEvent>, JournalError> {
    let (events, valid_len) = decode_prefix(bytes)?;
    if valid_len < bytes.len() {
        return Err(JournalError::Corrupt { sequence_no: events.len() as u64, reason: "truncated record".into() });
    }
    Ok(events)
}

/// Decodes records up to the first one that runs past the end of input.
fn decode_prefix(bytes: &[u8]) -> Result<(Vec<JournalEvent>, usize), JournalError> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(JournalError::BadHeader);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(JournalError::BadHeader);
    }
    let mut events = Vec::new();
    let mut pos = HEADER_LEN;
    while pos < bytes.len() {
        let seq = events.len() as u64;
        let corrupt = |reason: &str| JournalError::Corrupt { sequence_no: seq, reason: reason.into() };
        if bytes.len() - pos < 8 {
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes"));
        if len > MAX_RECORD {
            return Err(corrupt("record length out of range"));
        }
        let start = pos + 8;
        let end = start + len as usize;
        if end > bytes.len() {
            break;
        }
        let payload = &bytes[start..end];
        if crc32fast::hash(payload) != crc {
            return Err(corrupt("checksum mismatch"));
        }
        let event: JournalEvent =
            serde_json::from_slice(payload).map_err(|e| corrupt(&format!("undecodable payload: {e}")))?;
        if event.sequence_no != seq {
            return Err(corrupt(&format!("found sequence number {}", event.sequence_no)));
        }
        events.push(event);
        pos = end;
    }
    Ok((events, pos))
}

/// Checks sequence density and that every event refers only to things earlier
/// events introduced.
pub fn validate(events: &[JournalEvent]) -> Result<(), JournalError> {
    let mut refs = References::default();
    for (i, e) in events.iter().enumerate() {
        if e.sequence_no != i as u64 {
            return Err(JournalError::Corrupt {
                sequence_no: i as u64,
                reason: format!("found sequence number {}", e.sequence_no),
            });
        }
        refs.admit(e.sequence_no, &e.kind)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::Mode;
    use crate::space::{Dimension, SearchSpace};

    fn created() -> EventKind {
        let space = SearchSpace::new(vec![Dimension::linear("x", 0.0, 1.0)]);
        EventKind::ExperimentCreated { spec: ExperimentSpec::new(space, Mode::Asha, 9, 9) }
    }

    #[test]
    fn event_json_is_flat() {
        let e = JournalEvent {
            sequence_no: 4,
            timestamp: 10,
            kind: EventKind::ResultRecorded {
                token: 1,
                bracket: 0,
                config_id: 3,
                rung: 0,
                loss: f64::INFINITY,
                checkpoint: None,
            },
        };
        let text = serde_json::to_string(&e).unwrap();
        assert_eq!(
            text,
            r#"{"sequence_no":4,"timestamp":10,"kind":"result-recorded","token":1,"bracket":0,"config_id":3,"rung":0,"loss":"inf"}"#
        );
        assert_eq!(serde_json::from_str::<JournalEvent>(&text).unwrap(), e);
    }

    #[test]
    fn dangling_references_are_rejected() {
        let mut j = Journal::in_memory();
        j.append(created(), 0).unwrap();
        let err = j.append(EventKind::ConfigPromoted { bracket: 0, config_id: 0, from_rung: 0 }, 1).unwrap_err();
        assert!(matches!(err, JournalError::Rejected { sequence_no: 1, .. }));
        let err = j
            .append(EventKind::JobDispatched { token: 0, bracket: 0, config_id: 5, rung: 0 }, 1)
            .unwrap_err();
        assert!(matches!(err, JournalError::Rejected { sequence_no: 1, .. }));
        assert_eq!(j.len(), 1);
    }

    #[test]
    fn corruption_names_the_first_bad_record() {
        let mut j = Journal::in_memory();
        j.append(created(), 0).unwrap();
        j.append(EventKind::ConfigSampled { bracket: 0, config_id: 0, sample_seed: 1 }, 0).unwrap();
        j.append(EventKind::WidthExtended { bracket: 0, additional: 0 }, 0).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut offsets = Vec::new();
        for e in j.events() {
            offsets.push(bytes.len());
            bytes.extend_from_slice(&encode_record(e).unwrap());
        }
        assert_eq!(decode(&bytes).unwrap(), j.events());
        let mut flipped = bytes.clone();
        flipped[offsets[1] + 12] ^= 0x20;
        match decode(&flipped) {
            Err(JournalError::Corrupt { sequence_no, .. }) => assert_eq!(sequence_no, 1),
            other => panic!("{other:?}"),
        }
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(truncated), Err(JournalError::Corrupt { sequence_no: 2, .. })));
    }
}
