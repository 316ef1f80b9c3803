//! In-process event bus with an append-only journal.
//!
//! Each topic is a sequence of JSON events numbered from zero. On disk a
//! topic lives in `<dir>/<topic>/<first-offset>.jsonl` segment files; a
//! consumer's position is a committed offset, so delivery is at-least-once
//! and consumers dedupe on their own ids.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOPIC_SUBMISSIONS: &str = "submissions.attrs";
pub const TOPIC_RELEASED: &str = "slices.released";
pub const TOPIC_PREPARED: &str = "slices.prepared-ready";

pub const DEFAULT_SEGMENT_SIZE: u64 = 1_000;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("journal gap in `{topic}`: expected offset {expected}, found {found}")]
    JournalGap { topic: String, expected: u64, found: u64 },
    #[error("journal io: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal entry in `{topic}` at offset {offset} is malformed: {reason}")]
    Malformed { topic: String, offset: u64, reason: String },
}

#[derive(Serialize, Deserialize)]
struct JournalLine {
    offset: u64,
    event: serde_json::Value,
}

#[derive(Default)]
struct Topic {
    events: Vec<serde_json::Value>,
    writer: Option<(u64, File)>,
}

pub struct EventBus {
    dir: Option<PathBuf>,
    segment_size: u64,
    topics: BTreeMap<String, Topic>,
    offsets: BTreeMap<String, u64>,
}

impl Default for EventBus {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EventBus {
    pub fn in_memory() -> Self {
        EventBus { dir: None, segment_size: DEFAULT_SEGMENT_SIZE, topics: BTreeMap::new(), offsets: BTreeMap::new() }
    }

    /// Opens (or creates) a journal directory, replaying every topic found.
    pub fn open(dir: &Path) -> Result<Self, BusError> {
        Self::open_with_segment_size(dir, DEFAULT_SEGMENT_SIZE)
    }

    pub fn open_with_segment_size(dir: &Path, segment_size: u64) -> Result<Self, BusError> {
        std::fs::create_dir_all(dir)?;
        let mut bus = EventBus {
            dir: Some(dir.to_path_buf()),
            segment_size: segment_size.max(1),
            topics: BTreeMap::new(),
            offsets: BTreeMap::new(),
        };
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                let name = entry.file_name().to_string_lossy().to_string();
                let events = read_topic(&entry.path(), &name)?;
                bus.topics.insert(name, Topic { events, writer: None });
            }
        }
        let offsets_path = dir.join("offsets.json");
        if offsets_path.exists() {
            bus.offsets = serde_json::from_str(&std::fs::read_to_string(offsets_path)?)
                .map_err(|e| BusError::Io(std::io::Error::other(e)))?;
        }
        Ok(bus)
    }

    pub fn publish<T: Serialize>(&mut self, topic: &str, event: &T) -> Result<u64, BusError> {
        let value = serde_json::to_value(event).map_err(|e| BusError::Io(std::io::Error::other(e)))?;
        let segment_size = self.segment_size;
        let dir = self.dir.clone();
        let t = self.topics.entry(topic.to_string()).or_default();
        let offset = t.events.len() as u64;
        if let Some(dir) = dir {
            let segment_start = offset - offset % segment_size;
            if t.writer.as_ref().map(|(s, _)| *s) != Some(segment_start) {
                let tdir = dir.join(topic);
                std::fs::create_dir_all(&tdir)?;
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(tdir.join(format!("{segment_start:020}.jsonl")))?;
                t.writer = Some((segment_start, f));
            }
            let (_, f) = t.writer.as_mut().unwrap();
            let line = serde_json::to_string(&JournalLine { offset, event: value.clone() }).unwrap();
            writeln!(f, "{line}")?;
        }
        t.events.push(value);
        Ok(offset)
    }

    pub fn len(&self, topic: &str) -> u64 {
        self.topics.get(topic).map_or(0, |t| t.events.len() as u64)
    }

    pub fn is_empty(&self, topic: &str) -> bool {
        self.len(topic) == 0
    }

    fn offset_key(consumer: &str, topic: &str) -> String {
        format!("{consumer}@{topic}")
    }

    pub fn committed(&self, consumer: &str, topic: &str) -> u64 {
        self.offsets.get(&Self::offset_key(consumer, topic)).copied().unwrap_or(0)
    }

    /// Events after the consumer's committed offset, with their offsets.
    pub fn poll<T: DeserializeOwned>(&self, consumer: &str, topic: &str) -> Result<Vec<(u64, T)>, BusError> {
        let from = self.committed(consumer, topic);
        self.read_from(topic, from)
    }

    pub fn read_from<T: DeserializeOwned>(&self, topic: &str, from: u64) -> Result<Vec<(u64, T)>, BusError> {
        let Some(t) = self.topics.get(topic) else { return Ok(Vec::new()) };
        t.events
            .iter()
            .enumerate()
            .skip(from as usize)
            .map(|(i, v)| {
                serde_json::from_value(v.clone())
                    .map(|e| (i as u64, e))
                    .map_err(|e| BusError::Malformed { topic: topic.to_string(), offset: i as u64, reason: e.to_string() })
            })
            .collect()
    }

    pub fn commit(&mut self, consumer: &str, topic: &str, next_offset: u64) {
        self.offsets.insert(Self::offset_key(consumer, topic), next_offset);
    }

    pub fn reset_consumers(&mut self) {
        self.offsets.clear();
    }

    /// Raw JSON of every event on `topic`.
    pub fn raw_events(&self, topic: &str) -> &[serde_json::Value] {
        self.topics.get(topic).map_or(&[], |t| t.events.as_slice())
    }

    pub fn topics(&self) -> Vec<String> {
        self.topics.keys().cloned().collect()
    }

    pub fn flush(&mut self) -> Result<(), BusError> {
        for t in self.topics.values_mut() {
            if let Some((_, f)) = t.writer.as_mut() {
                f.flush()?;
            }
        }
        if let Some(dir) = &self.dir {
            let text = serde_json::to_string_pretty(&self.offsets).unwrap();
            crate::crypto::write_atomic(&dir.join("offsets.json"), text.as_bytes())?;
        }
        Ok(())
    }
}

fn read_topic(dir: &Path, topic: &str) -> Result<Vec<serde_json::Value>, BusError> {
    let mut segments: Vec<(u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
            continue;
        }
        let Some(start) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        segments.push((start, path));
    }
    segments.sort();
    let mut events = Vec::new();
    for (start, path) in segments {
        let expected = events.len() as u64;
        if start != expected {
            return Err(BusError::JournalGap { topic: topic.to_string(), expected, found: start });
        }
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let expected = events.len() as u64;
            let jl: JournalLine = serde_json::from_str(&line).map_err(|e| BusError::Malformed {
                topic: topic.to_string(),
                offset: expected,
                reason: e.to_string(),
            })?;
            if jl.offset != expected {
                return Err(BusError::JournalGap { topic: topic.to_string(), expected, found: jl.offset });
            }
            events.push(jl.event);
        }
    }
    Ok(events)
}
