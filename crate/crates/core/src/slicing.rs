//! Slicing: turns attribute-only change events into per-cohort pending lists
//! and releases them in batches once the cohort's threshold is met.
//!
//! Slice state is only ever held encrypted under the threshold key. This
//! service never sees compensation data or the compensation key.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crypto::{decrypt, encrypt, write_atomic, CryptoError, Envelope, EnvelopeStore, Purpose, SymmetricKey};
use crate::model::{Attribute, CohortKey, ModelError, ReleasePolicy, SliceType, Timestamp};

#[derive(Debug, Error)]
pub enum SlicingError {
    #[error("slice state could not be decrypted: {0}")]
    DecryptFailure(#[from] CryptoError),
    #[error("no release policy for slice type `{0}`")]
    NoPolicy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("slice state io: {0}")]
    Io(#[from] std::io::Error),
}

/// Published on `submissions.attrs`. Carries no compensation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub submission_id: String,
    pub attributes: BTreeMap<Attribute, String>,
    pub true_timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingEntry {
    pub submission_id: String,
    pub true_timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceState {
    pub cohort: CohortKey,
    pub pending: Vec<PendingEntry>,
    pub released_count: u64,
    released_ids: BTreeSet<String>,
    next_seq: u64,
}

impl SliceState {
    fn new(cohort: CohortKey) -> Self {
        SliceState { cohort, pending: Vec::new(), released_count: 0, released_ids: BTreeSet::new(), next_seq: 0 }
    }

    fn contains(&self, id: &str) -> bool {
        self.released_ids.contains(id) || self.pending.iter().any(|p| p.submission_id == id)
    }
}

/// Published on `slices.released`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseBatch {
    pub batch_id: String,
    pub cohort_key: CohortKey,
    pub seq: u64,
    pub entries: Vec<PendingEntry>,
}

impl ReleaseBatch {
    pub fn is_first(&self) -> bool {
        self.seq == 0
    }
}

pub fn batch_id(cohort: &CohortKey, seq: u64) -> String {
    let mut h = Sha256::new();
    h.update(cohort.hash_hex().as_bytes());
    h.update(b":");
    h.update(seq.to_be_bytes());
    hex::encode(&h.finalize()[..16])
}

/// Builds the cohort key for `slice_type` from an event's attribute map.
pub fn cohort_key_from_attributes(
    attributes: &BTreeMap<Attribute, String>,
    slice_type: &SliceType,
) -> Result<CohortKey, ModelError> {
    let mut values = BTreeMap::new();
    for &a in &slice_type.attribute_set {
        match attributes.get(&a).filter(|v| !v.is_empty()) {
            Some(v) => values.insert(a, v.clone()),
            None => return Err(ModelError::MissingAttribute(a, slice_type.name.clone())),
        };
    }
    Ok(CohortKey { slice_type: slice_type.name.clone(), values })
}

/// Key-value file of encrypted slice states keyed by cohort hash.
#[derive(Debug, Default)]
pub struct SliceStateStore {
    path: Option<PathBuf>,
    entries: BTreeMap<String, Envelope>,
}

impl SliceStateStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let entries = if path.exists() {
            let raw: BTreeMap<String, String> =
                serde_json::from_str(&std::fs::read_to_string(path)?).map_err(std::io::Error::other)?;
            raw.into_iter()
                .map(|(k, v)| {
                    Envelope::from_base64(&v).map(|e| (k, e)).map_err(|e| std::io::Error::other(e.to_string()))
                })
                .collect::<Result<_, _>>()?
        } else {
            BTreeMap::new()
        };
        Ok(SliceStateStore { path: Some(path.to_path_buf()), entries })
    }

    pub fn save(&self) -> std::io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let raw: BTreeMap<&String, String> = self.entries.iter().map(|(k, v)| (k, v.to_base64())).collect();
        write_atomic(path, serde_json::to_string(&raw).unwrap().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Raw persisted bytes of every state, for inspection.
    pub fn raw_bytes(&self) -> Vec<Vec<u8>> {
        self.entries.values().map(Envelope::to_bytes).collect()
    }
}

impl EnvelopeStore for SliceStateStore {
    fn envelope_ids(&self, purpose: Purpose) -> Vec<String> {
        if purpose == Purpose::Threshold {
            self.entries.keys().cloned().collect()
        } else {
            Vec::new()
        }
    }

    fn envelope(&self, id: &str, _purpose: Purpose) -> Option<Envelope> {
        self.entries.get(id).cloned()
    }

    fn replace_envelope(&mut self, id: &str, envelope: Envelope) -> std::io::Result<()> {
        self.entries.insert(id.to_string(), envelope);
        Ok(())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.save()
    }
}

pub struct SlicingService {
    catalog: Vec<SliceType>,
    policies: BTreeMap<String, ReleasePolicy>,
    t_sym: SymmetricKey,
    store: SliceStateStore,
}

impl SlicingService {
    pub fn new(
        catalog: Vec<SliceType>,
        policies: Vec<ReleasePolicy>,
        t_sym: SymmetricKey,
        store: SliceStateStore,
    ) -> Result<Self, SlicingError> {
        let policies: BTreeMap<_, _> = policies.into_iter().map(|p| (p.slice_type.clone(), p)).collect();
        for st in &catalog {
            st.validate()?;
            policies.get(&st.name).ok_or_else(|| SlicingError::NoPolicy(st.name.clone()))?.validate()?;
        }
        Ok(SlicingService { catalog, policies, t_sym, store })
    }

    pub fn catalog(&self) -> &[SliceType] {
        &self.catalog
    }

    pub fn policy(&self, slice_type: &str) -> Option<&ReleasePolicy> {
        self.policies.get(slice_type)
    }

    pub fn store(&self) -> &SliceStateStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut SliceStateStore {
        &mut self.store
    }

    /// Swaps in a rotated threshold key.
    pub fn set_threshold_key(&mut self, key: SymmetricKey) {
        self.t_sym = key;
    }

    fn load(&self, hash: &str) -> Result<Option<SliceState>, SlicingError> {
        match self.store.entries.get(hash) {
            None => Ok(None),
            Some(env) => {
                let bytes = decrypt(env, &self.t_sym)?;
                Ok(Some(serde_json::from_slice(&bytes).map_err(|_| CryptoError::Malformed("slice state"))?))
            }
        }
    }

    fn save_state(&mut self, hash: String, state: &SliceState) -> Result<(), SlicingError> {
        let env = encrypt(&serde_json::to_vec(state).unwrap(), &self.t_sym, Purpose::Threshold)?;
        self.store.entries.insert(hash, env);
        Ok(())
    }

    /// Appends the event to every applicable slice and returns the batches
    /// that became releasable. Redelivered events are ignored per slice.
    pub fn on_event(&mut self, event: &ChangeEvent) -> Result<Vec<ReleaseBatch>, SlicingError> {
        let mut out = Vec::new();
        for i in 0..self.catalog.len() {
            let st = &self.catalog[i];
            let Ok(key) = cohort_key_from_attributes(&event.attributes, st) else { continue };
            let policy = self.policies[&st.name].clone();
            let hash = key.hash_hex();
            let mut state = self.load(&hash)?.unwrap_or_else(|| SliceState::new(key.clone()));
            if state.contains(&event.submission_id) {
                continue;
            }
            state.pending.push(PendingEntry {
                submission_id: event.submission_id.clone(),
                true_timestamp: event.true_timestamp,
            });
            loop {
                let need = if state.released_count == 0 {
                    policy.first_release_size()
                } else {
                    policy.batch_size
                } as usize;
                if state.pending.len() < need {
                    break;
                }
                let entries: Vec<PendingEntry> = state.pending.drain(..need).collect();
                state.released_count += entries.len() as u64;
                state.released_ids.extend(entries.iter().map(|e| e.submission_id.clone()));
                let seq = state.next_seq;
                state.next_seq += 1;
                out.push(ReleaseBatch { batch_id: batch_id(&state.cohort, seq), cohort_key: state.cohort.clone(), seq, entries });
            }
            self.save_state(hash, &state)?;
        }
        Ok(out)
    }

    /// Decrypted `(pending, released)` counts for one slice type.
    pub fn slice_counts(&self, slice_type: &str) -> Result<BTreeMap<CohortKey, (u64, u64)>, SlicingError> {
        let mut out = BTreeMap::new();
        for state in self.states()? {
            if state.cohort.slice_type == slice_type {
                out.insert(state.cohort.clone(), (state.pending.len() as u64, state.released_count));
            }
        }
        Ok(out)
    }

    pub fn states(&self) -> Result<Vec<SliceState>, SlicingError> {
        self.store.entries.keys().map(|h| Ok(self.load(h)?.expect("key present"))).collect()
    }

    pub fn save(&self) -> Result<(), SlicingError> {
        Ok(self.store.save()?)
    }
}
