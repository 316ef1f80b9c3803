//! Persistent stores: the encrypted submission store and the recency-only
//! verification store.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::crypto::{write_atomic, CryptoError, Envelope, EnvelopeStore, Purpose};
use crate::model::Timestamp;

/// One encrypted submission. The attribute and compensation halves are
/// sealed under different purposes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionRecord {
    pub submission_id: String,
    pub attr_envelope: Envelope,
    pub comp_envelope: Envelope,
    pub true_timestamp: Timestamp,
}

#[derive(Serialize, Deserialize)]
struct StoredRecord {
    submission_id: String,
    attr_envelope: String,
    comp_envelope: String,
    true_timestamp: Timestamp,
}

impl SubmissionRecord {
    fn to_line(&self) -> String {
        serde_json::to_string(&StoredRecord {
            submission_id: self.submission_id.clone(),
            attr_envelope: self.attr_envelope.to_base64(),
            comp_envelope: self.comp_envelope.to_base64(),
            true_timestamp: self.true_timestamp,
        })
        .expect("record serializes")
    }

    fn from_line(line: &str) -> std::io::Result<Self> {
        let s: StoredRecord = serde_json::from_str(line).map_err(std::io::Error::other)?;
        let env = |b: &str| Envelope::from_base64(b).map_err(|e: CryptoError| std::io::Error::other(e.to_string()));
        Ok(SubmissionRecord {
            submission_id: s.submission_id,
            attr_envelope: env(&s.attr_envelope)?,
            comp_envelope: env(&s.comp_envelope)?,
            true_timestamp: s.true_timestamp,
        })
    }
}

#[derive(Default)]
struct SubmissionInner {
    path: Option<PathBuf>,
    records: Vec<SubmissionRecord>,
    index: HashMap<String, usize>,
    file: Option<File>,
    dirty: bool,
}

/// Append-only store of encrypted submissions, backed by a JSON-lines file
/// when opened from disk.
#[derive(Clone, Default)]
pub struct SubmissionStore {
    inner: Arc<RwLock<SubmissionInner>>,
}

impl SubmissionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut inner = SubmissionInner { path: Some(path.to_path_buf()), ..Default::default() };
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec = SubmissionRecord::from_line(&line)?;
                inner.index.insert(rec.submission_id.clone(), inner.records.len());
                inner.records.push(rec);
            }
        }
        inner.file = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(SubmissionStore { inner: Arc::new(RwLock::new(inner)) })
    }

    /// Append-only handle for the intake path.
    pub fn writer(&self) -> SubmissionWriter {
        SubmissionWriter { store: self.clone() }
    }

    /// Read handle; only the preparation path is given one.
    pub fn reader(&self) -> SubmissionReader {
        SubmissionReader { store: self.clone() }
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Write-only access to the submission store. There is deliberately no way
/// to read a record back through this type.
#[derive(Clone)]
pub struct SubmissionWriter {
    store: SubmissionStore,
}

impl SubmissionWriter {
    pub fn append(&self, record: SubmissionRecord) -> std::io::Result<()> {
        let mut inner = self.store.inner.write().unwrap();
        if inner.index.contains_key(&record.submission_id) {
            return Err(std::io::Error::new(std::io::ErrorKind::AlreadyExists, "duplicate submission id"));
        }
        if let Some(f) = inner.file.as_mut() {
            writeln!(f, "{}", record.to_line())?;
            f.flush()?;
        }
        let idx = inner.records.len();
        inner.index.insert(record.submission_id.clone(), idx);
        inner.records.push(record);
        Ok(())
    }
}

#[derive(Clone)]
pub struct SubmissionReader {
    store: SubmissionStore,
}

impl SubmissionReader {
    pub fn comp_envelope(&self, submission_id: &str) -> Option<Envelope> {
        let inner = self.store.inner.read().unwrap();
        inner.index.get(submission_id).map(|&i| inner.records[i].comp_envelope.clone())
    }

    pub fn attr_envelope(&self, submission_id: &str) -> Option<Envelope> {
        let inner = self.store.inner.read().unwrap();
        inner.index.get(submission_id).map(|&i| inner.records[i].attr_envelope.clone())
    }

    pub fn contains(&self, submission_id: &str) -> bool {
        self.store.inner.read().unwrap().index.contains_key(submission_id)
    }

    pub fn records(&self) -> Vec<SubmissionRecord> {
        self.store.inner.read().unwrap().records.clone()
    }
}

impl EnvelopeStore for SubmissionStore {
    fn envelope_ids(&self, purpose: Purpose) -> Vec<String> {
        match purpose {
            Purpose::Attributes | Purpose::Compensation => {
                self.inner.read().unwrap().records.iter().map(|r| r.submission_id.clone()).collect()
            }
            Purpose::Threshold => Vec::new(),
        }
    }

    fn envelope(&self, id: &str, purpose: Purpose) -> Option<Envelope> {
        let reader = self.reader();
        match purpose {
            Purpose::Attributes => reader.attr_envelope(id),
            Purpose::Compensation => reader.comp_envelope(id),
            Purpose::Threshold => None,
        }
    }

    fn replace_envelope(&mut self, id: &str, envelope: Envelope) -> std::io::Result<()> {
        let mut inner = self.inner.write().unwrap();
        let &i = inner
            .index
            .get(id)
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, id.to_string()))?;
        let rec = &mut inner.records[i];
        match envelope.purpose {
            Purpose::Attributes => rec.attr_envelope = envelope,
            Purpose::Compensation => rec.comp_envelope = envelope,
            Purpose::Threshold => return Err(std::io::Error::other("submission store holds no threshold envelopes")),
        }
        inner.dirty = true;
        Ok(())
    }

    /// Rewrites the backing file after a rotation.
    fn flush(&mut self) -> std::io::Result<()> {
        let mut inner = self.inner.write().unwrap();
        if !inner.dirty {
            return Ok(());
        }
        if let Some(path) = inner.path.clone() {
            let mut text = String::new();
            for r in &inner.records {
                text.push_str(&r.to_line());
                text.push('\n');
            }
            write_atomic(&path, text.as_bytes())?;
            inner.file = Some(OpenOptions::new().append(true).open(&path)?);
        }
        inner.dirty = false;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResubmissionMode {
    FixedWindow,
    ProfileChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResubmissionPolicy {
    pub mode: ResubmissionMode,
    /// Window length in seconds.
    pub window: i64,
}

impl Default for ResubmissionPolicy {
    fn default() -> Self {
        ResubmissionPolicy { mode: ResubmissionMode::FixedWindow, window: 365 * crate::model::SECONDS_PER_DAY }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub member_id: String,
    pub last_submission_at: Timestamp,
}

#[derive(Default, Serialize, Deserialize)]
struct VerificationState {
    records: BTreeMap<String, Timestamp>,
    profile_changed: BTreeSet<String>,
}

/// Who submitted and when; nothing else.
#[derive(Clone, Default)]
pub struct VerificationStore {
    path: Option<PathBuf>,
    state: Arc<Mutex<VerificationState>>,
}

impl VerificationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let state = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(path)?).map_err(std::io::Error::other)?
        } else {
            VerificationState::default()
        };
        Ok(VerificationStore { path: Some(path.to_path_buf()), state: Arc::new(Mutex::new(state)) })
    }

    pub fn get(&self, member_id: &str) -> Option<VerificationRecord> {
        let st = self.state.lock().unwrap();
        st.records
            .get(member_id)
            .map(|&t| VerificationRecord { member_id: member_id.to_string(), last_submission_at: t })
    }

    fn allowed(st: &VerificationState, member_id: &str, now: Timestamp, policy: &ResubmissionPolicy) -> bool {
        match st.records.get(member_id) {
            None => true,
            Some(last) => {
                now.0 - last.0 >= policy.window
                    || (policy.mode == ResubmissionMode::ProfileChange && st.profile_changed.contains(member_id))
            }
        }
    }

    pub fn can_resubmit(&self, member_id: &str, now: Timestamp, policy: &ResubmissionPolicy) -> bool {
        Self::allowed(&self.state.lock().unwrap(), member_id, now, policy)
    }

    /// Check-and-set: records `now` only if the member may submit. The lock
    /// is held across both steps so concurrent submits cannot race the window.
    pub fn try_record(&self, member_id: &str, now: Timestamp, policy: &ResubmissionPolicy) -> bool {
        let mut st = self.state.lock().unwrap();
        if !Self::allowed(&st, member_id, now, policy) {
            return false;
        }
        st.records.insert(member_id.to_string(), now);
        st.profile_changed.remove(member_id);
        true
    }

    /// Undo a `try_record` whose submission then failed downstream.
    pub(crate) fn restore(&self, member_id: &str, previous: Option<Timestamp>) {
        let mut st = self.state.lock().unwrap();
        match previous {
            Some(t) => st.records.insert(member_id.to_string(), t),
            None => st.records.remove(member_id),
        };
    }

    /// Marks that the member added a new position since their last submission.
    pub fn flag_profile_change(&self, member_id: &str) {
        self.state.lock().unwrap().profile_changed.insert(member_id.to_string());
    }

    pub fn has_submitted_within(&self, member_id: &str, window: i64, now: Timestamp) -> bool {
        self.state
            .lock()
            .unwrap()
            .records
            .get(member_id)
            .is_some_and(|last| now.0 - last.0 < window && now.0 >= last.0)
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self) -> std::io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(&*self.state.lock().unwrap()).map_err(std::io::Error::other)?;
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{encrypt, tests::ring};
    use crate::model::SECONDS_PER_DAY;

    fn record(id: &str) -> SubmissionRecord {
        let r = ring();
        SubmissionRecord {
            submission_id: id.into(),
            attr_envelope: encrypt(b"a", &r.m_pub, Purpose::Attributes).unwrap(),
            comp_envelope: encrypt(b"c", &r.c_pub, Purpose::Compensation).unwrap(),
            true_timestamp: Timestamp(10),
        }
    }

    #[test]
    fn append_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("submissions.jsonl");
        let store = SubmissionStore::open(&path).unwrap();
        store.writer().append(record("s1")).unwrap();
        store.writer().append(record("s2")).unwrap();
        assert!(store.writer().append(record("s1")).is_err());
        let again = SubmissionStore::open(&path).unwrap();
        assert_eq!(again.len(), 2);
        assert_eq!(again.reader().comp_envelope("s2"), store.reader().comp_envelope("s2"));
        assert!(again.reader().comp_envelope("nope").is_none());
    }

    #[test]
    fn rotation_rewrites_backing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("submissions.jsonl");
        let mut store = SubmissionStore::open(&path).unwrap();
        for i in 0..3 {
            store.writer().append(record(&format!("s{i}"))).unwrap();
        }
        let mut ks = crate::crypto::Keystore::in_memory(Purpose::Compensation, "pw");
        ks.generate(Timestamp(0)).unwrap();
        // Re-seal under the keystore's key so it can rotate them.
        let pk = ks.current_public_key().unwrap();
        for i in 0..3 {
            let env = encrypt(b"c", &pk, Purpose::Compensation).unwrap();
            store.replace_envelope(&format!("s{i}"), env).unwrap();
        }
        crate::crypto::rotate(&mut ks, &mut store, None, Timestamp(1)).unwrap();
        let reloaded = SubmissionStore::open(&path).unwrap();
        assert!(reloaded
            .reader()
            .records()
            .iter()
            .all(|r| r.comp_envelope.key_version == 2 && r.attr_envelope.key_version == 1));
    }

    #[test]
    fn resubmission_window() {
        let v = VerificationStore::in_memory();
        let policy = ResubmissionPolicy::default();
        let t0 = Timestamp(1_600_000_000);
        assert!(v.can_resubmit("m", t0, &policy));
        assert!(v.try_record("m", t0, &policy));
        assert!(!v.can_resubmit("m", t0.plus_days(182), &policy));
        assert!(!v.try_record("m", t0.plus_days(182), &policy));
        assert!(v.can_resubmit("m", t0.plus_days(400), &policy));
        assert!(v.can_resubmit("m", t0.plus_days(365), &policy));
    }

    #[test]
    fn profile_change_mode() {
        let v = VerificationStore::in_memory();
        let policy = ResubmissionPolicy { mode: ResubmissionMode::ProfileChange, ..Default::default() };
        let t0 = Timestamp(0);
        assert!(v.try_record("m", t0, &policy));
        assert!(!v.can_resubmit("m", t0.plus_days(1), &policy));
        v.flag_profile_change("m");
        assert!(v.can_resubmit("m", t0.plus_days(1), &policy));
        let fixed = ResubmissionPolicy::default();
        assert!(!v.can_resubmit("m", t0.plus_days(1), &fixed));
        assert!(v.try_record("m", t0.plus_days(1), &policy));
        assert!(!v.can_resubmit("m", t0.plus_days(2), &policy));
    }

    #[test]
    fn recency() {
        let v = VerificationStore::in_memory();
        let now = Timestamp(1_000 * SECONDS_PER_DAY);
        let year = 365 * SECONDS_PER_DAY;
        assert!(!v.has_submitted_within("m", year, now));
        v.try_record("m", now.plus_days(-100), &ResubmissionPolicy::default());
        assert!(v.has_submitted_within("m", year, now));
        v.try_record("o", now.plus_days(-400), &ResubmissionPolicy::default());
        assert!(!v.has_submitted_within("o", year, now));
    }

    #[test]
    fn verification_persists_without_compensation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verification.json");
        let v = VerificationStore::open(&path).unwrap();
        v.try_record("m1", Timestamp(5), &ResubmissionPolicy::default());
        v.save().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("salary"));
        let v2 = VerificationStore::open(&path).unwrap();
        assert_eq!(v2.get("m1").unwrap().last_submission_at, Timestamp(5));
    }

    #[test]
    fn concurrent_submits_cannot_race_the_window() {
        let v = VerificationStore::in_memory();
        let policy = ResubmissionPolicy::default();
        let wins: usize = std::thread::scope(|s| {
            let hs: Vec<_> = (0..8).map(|_| s.spawn(|| v.try_record("m", Timestamp(0), &policy) as usize)).collect();
            hs.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(wins, 1);
    }
}
