//! Preparation service: the gateway into the offline system.
//!
//! Holds the compensation private key only. For each ready batch it fetches
//! the compensation envelopes by id, decrypts, converts to the local
//! currency, rounds, and appends de-identified records.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{decrypt, write_atomic, CryptoError, PrivateKey};
use crate::model::{convert_amount, CompensationType, DeidentifiedEntry, Money, ReleasePolicy, Timestamp};
use crate::store::SubmissionReader;
use crate::submission::CompensationPayload;
use crate::timestamp::PreparedScheduleItem;

#[derive(Debug, Error)]
pub enum PrepareError {
    #[error("compensation envelope could not be opened with the configured key")]
    AuthFailure,
    #[error("batch {batch_id}: submission {submission_id} not found")]
    MissingSubmission { batch_id: String, submission_id: String },
    #[error("batch {batch_id}: {size} entries, policy requires {required}")]
    BelowThreshold { batch_id: String, size: usize, required: usize },
    #[error("no release policy for slice type `{0}`")]
    UnknownSliceType(String),
    #[error("malformed compensation payload: {0}")]
    Malformed(String),
    #[error("offline store io: {0}")]
    Io(#[from] std::io::Error),
}

/// Nearest multiple of `granularity`, ties rounded up. A non-positive
/// granularity leaves the amount unchanged.
pub fn round_value(amount: Money, granularity: Money) -> Money {
    if granularity <= 0 {
        return amount;
    }
    let r = amount.rem_euclid(granularity);
    let down = amount - r;
    if 2 * r >= granularity {
        down + granularity
    } else {
        down
    }
}

/// Rounding granularities in minor units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundingPolicy {
    pub base_salary: Money,
    pub other: Money,
}

impl Default for RoundingPolicy {
    fn default() -> Self {
        RoundingPolicy { base_salary: 1_000_00, other: 500_00 }
    }
}

impl RoundingPolicy {
    pub fn granularity(&self, ty: CompensationType) -> Money {
        match ty {
            CompensationType::BaseSalary => self.base_salary,
            _ => self.other,
        }
    }
}

/// Append-only de-identified records, partitioned by slice type and release
/// date as `<dir>/<slice_type>/<YYYY-MM-DD>.jsonl`.
pub struct OfflineDataset {
    dir: Option<PathBuf>,
    partitions: BTreeMap<(String, String), Vec<DeidentifiedEntry>>,
}

impl OfflineDataset {
    pub fn in_memory() -> Self {
        OfflineDataset { dir: None, partitions: BTreeMap::new() }
    }

    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut partitions = BTreeMap::new();
        for st in std::fs::read_dir(dir)? {
            let st = st?;
            if !st.file_type()?.is_dir() {
                continue;
            }
            let slice_type = st.file_name().to_string_lossy().to_string();
            for f in std::fs::read_dir(st.path())? {
                let path = f?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                    continue;
                }
                let date = path.file_stem().unwrap().to_string_lossy().to_string();
                let entries = std::fs::read_to_string(&path)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
                    .collect::<Result<Vec<DeidentifiedEntry>, _>>()?;
                partitions.insert((slice_type.clone(), date), entries);
            }
        }
        Ok(OfflineDataset { dir: Some(dir.to_path_buf()), partitions })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Appends one batch to a partition with a single write.
    fn append(&mut self, slice_type: &str, date: &str, entries: Vec<DeidentifiedEntry>) -> std::io::Result<()> {
        if let Some(dir) = &self.dir {
            let pdir = dir.join(slice_type);
            std::fs::create_dir_all(&pdir)?;
            let mut buf = String::new();
            for e in &entries {
                buf.push_str(&serde_json::to_string(e).expect("entry serializes"));
                buf.push('\n');
            }
            let mut f = OpenOptions::new().create(true).append(true).open(pdir.join(format!("{date}.jsonl")))?;
            f.write_all(buf.as_bytes())?;
        }
        self.partitions.entry((slice_type.to_string(), date.to_string())).or_default().extend(entries);
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn append_for_test(&mut self, entries: Vec<DeidentifiedEntry>) {
        for e in entries {
            let st = e.cohort.slice_type.clone();
            self.append(&st, "1970-01-01", vec![e]).unwrap();
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &DeidentifiedEntry> {
        self.partitions.values().flatten()
    }

    pub fn entries_for<'a>(&'a self, slice_type: &'a str) -> impl Iterator<Item = &'a DeidentifiedEntry> + 'a {
        self.partitions.iter().filter(move |((st, _), _)| st == slice_type).flat_map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partitions(&self) -> Vec<(String, String)> {
        self.partitions.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub reason: String,
    pub item: PreparedScheduleItem,
}

pub struct PreparationService {
    c_pri: PrivateKey,
    reader: SubmissionReader,
    rounding: RoundingPolicy,
    policies: BTreeMap<String, ReleasePolicy>,
    dataset: OfflineDataset,
    state_dir: Option<PathBuf>,
    prepared: BTreeSet<String>,
    quarantined: BTreeMap<String, QuarantineRecord>,
}

impl PreparationService {
    pub fn new(
        c_pri: PrivateKey,
        reader: SubmissionReader,
        rounding: RoundingPolicy,
        policies: impl IntoIterator<Item = ReleasePolicy>,
        dataset: OfflineDataset,
    ) -> Self {
        PreparationService {
            c_pri,
            reader,
            rounding,
            policies: policies.into_iter().map(|p| (p.slice_type.clone(), p)).collect(),
            dataset,
            state_dir: None,
            prepared: BTreeSet::new(),
            quarantined: BTreeMap::new(),
        }
    }

    /// Persists the prepared-batch ledger and quarantine under `dir`.
    pub fn with_state_dir(mut self, dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir.join("quarantine"))?;
        let ledger = dir.join("prepared.json");
        if ledger.exists() {
            self.prepared = serde_json::from_str(&std::fs::read_to_string(ledger)?).map_err(std::io::Error::other)?;
        }
        for f in std::fs::read_dir(dir.join("quarantine"))? {
            let path = f?.path();
            let rec: QuarantineRecord =
                serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(std::io::Error::other)?;
            self.quarantined.insert(rec.item.batch_id.clone(), rec);
        }
        self.state_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn dataset(&self) -> &OfflineDataset {
        &self.dataset
    }

    pub fn quarantined(&self) -> &BTreeMap<String, QuarantineRecord> {
        &self.quarantined
    }

    pub fn is_prepared(&self, batch_id: &str) -> bool {
        self.prepared.contains(batch_id)
    }

    fn quarantine(&mut self, item: &PreparedScheduleItem, reason: &PrepareError) -> std::io::Result<()> {
        let rec = QuarantineRecord { reason: reason.to_string(), item: item.clone() };
        if let Some(dir) = &self.state_dir {
            let text = serde_json::to_string_pretty(&rec).unwrap();
            write_atomic(&dir.join("quarantine").join(format!("{}.json", item.batch_id)), text.as_bytes())?;
        }
        self.quarantined.insert(item.batch_id.clone(), rec);
        Ok(())
    }

    fn required_size(&self, item: &PreparedScheduleItem) -> Result<usize, PrepareError> {
        let policy = self
            .policies
            .get(&item.cohort_key.slice_type)
            .ok_or_else(|| PrepareError::UnknownSliceType(item.cohort_key.slice_type.clone()))?;
        Ok(if item.first_release { policy.first_release_size() } else { policy.batch_size } as usize)
    }

    /// Prepares one batch, all or nothing. Returns the number of records
    /// appended; a batch already prepared appends nothing.
    pub fn prepare(&mut self, item: &PreparedScheduleItem) -> Result<usize, PrepareError> {
        if self.prepared.contains(&item.batch_id) {
            return Ok(0);
        }
        let required = self.required_size(item)?;
        if item.entries.len() < required {
            let err = PrepareError::BelowThreshold { batch_id: item.batch_id.clone(), size: item.entries.len(), required };
            self.quarantine(item, &err)?;
            return Err(err);
        }
        let mut out = Vec::with_capacity(item.entries.len());
        for entry in &item.entries {
            let Some(env) = self.reader.comp_envelope(&entry.submission_id) else {
                let err = PrepareError::MissingSubmission {
                    batch_id: item.batch_id.clone(),
                    submission_id: entry.submission_id.clone(),
                };
                self.quarantine(item, &err)?;
                return Err(err);
            };
            let plain = decrypt(&env, &self.c_pri).map_err(|e| match e {
                CryptoError::AuthFailure => PrepareError::AuthFailure,
                other => PrepareError::Malformed(other.to_string()),
            })?;
            let payload: CompensationPayload =
                serde_json::from_slice(&plain).map_err(|e| PrepareError::Malformed(e.to_string()))?;
            let rounding = self.rounding;
            let mut compensation = payload
                .compensation
                .map_amounts(|ty, v| round_value(convert_amount(v, payload.exchange_rate), rounding.granularity(ty)));
            compensation.currency = payload.local_currency;
            out.push(DeidentifiedEntry {
                cohort: item.cohort_key.clone(),
                generalized_timestamp: entry.generalized_timestamp,
                compensation,
            });
        }
        let n = out.len();
        self.dataset.append(&item.cohort_key.slice_type, &release_date(item.ready_at), out)?;
        self.prepared.insert(item.batch_id.clone());
        if let Some(dir) = &self.state_dir {
            write_atomic(&dir.join("prepared.json"), serde_json::to_string(&self.prepared).unwrap().as_bytes())?;
        }
        Ok(n)
    }
}

fn release_date(ts: Timestamp) -> String {
    ts.to_datetime().format("%Y-%m-%d").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{encrypt, tests::ring, Purpose};
    use crate::model::{CohortKey, CompensationData};
    use crate::store::{SubmissionRecord, SubmissionStore};
    use crate::timestamp::{GeneralizedTimestamp, PreparedEntry};
    use proptest::prelude::*;

    #[test]
    fn rounding_examples() {
        assert_eq!(round_value(110_499, 1_000), 110_000);
        assert_eq!(round_value(110_500, 1_000), 111_000);
        assert_eq!(round_value(0, 1_000), 0);
        assert_eq!(round_value(-1_500, 1_000), -1_000);
        assert_eq!(round_value(123, 0), 123);
    }

    fn cohort() -> CohortKey {
        "title-country-region:title=ux-designer,country=GB,region=london-united-kingdom".parse().unwrap()
    }

    fn store_with(n: usize) -> (SubmissionStore, Vec<String>) {
        let r = ring();
        let store = SubmissionStore::in_memory();
        let w = store.writer();
        let mut ids = Vec::new();
        for i in 0..n {
            let mut comp = CompensationData::base("USD", 100_000_00 + i as i64 * 37_00);
            comp.annual_bonus = Some(10_240_00);
            let payload =
                CompensationPayload { compensation: comp, local_currency: "GBP".into(), exchange_rate: 0.79 };
            let id = format!("sub-{i}");
            w.append(SubmissionRecord {
                submission_id: id.clone(),
                attr_envelope: encrypt(b"{}", &r.m_pub, Purpose::Attributes).unwrap(),
                comp_envelope: encrypt(&serde_json::to_vec(&payload).unwrap(), &r.c_pub, Purpose::Compensation).unwrap(),
                true_timestamp: Timestamp(i as i64),
            })
            .unwrap();
            ids.push(id);
        }
        (store, ids)
    }

    fn item(ids: &[String], first: bool) -> PreparedScheduleItem {
        let c = cohort();
        PreparedScheduleItem {
            batch_id: crate::slicing::batch_id(&c, 0),
            cohort_key: c,
            first_release: first,
            ready_at: Timestamp(1_700_000_000),
            entries: ids
                .iter()
                .map(|id| PreparedEntry {
                    submission_id: id.clone(),
                    generalized_timestamp: GeneralizedTimestamp::exact(Timestamp(1_700_000_000)),
                })
                .collect(),
        }
    }

    fn service(store: &SubmissionStore, key: PrivateKey) -> PreparationService {
        PreparationService::new(
            key,
            store.reader(),
            RoundingPolicy::default(),
            [ReleasePolicy::new("title-country-region", 5)],
            OfflineDataset::in_memory(),
        )
    }

    #[test]
    fn valid_batch_is_appended_without_ids() {
        let (store, ids) = store_with(5);
        let mut svc = service(&store, ring().c_pri.clone());
        assert_eq!(svc.prepare(&item(&ids, true)).unwrap(), 5);
        assert_eq!(svc.dataset().len(), 5);
        for e in svc.dataset().entries() {
            let json = serde_json::to_string(e).unwrap();
            assert!(!json.contains("sub-"));
            assert_eq!(e.compensation.currency, "GBP");
            assert_eq!(e.compensation.base_salary % 1_000_00, 0);
            // 10,240 USD -> 8,089.60 GBP -> 8,000 at 500-unit granularity.
            assert_eq!(e.compensation.annual_bonus, Some(8_000_00));
        }
        assert_eq!(svc.prepare(&item(&ids, true)).unwrap(), 0);
        assert_eq!(svc.dataset().len(), 5);
    }

    #[test]
    fn missing_id_quarantines_whole_batch() {
        let (store, mut ids) = store_with(5);
        ids[3] = "nope".into();
        let mut svc = service(&store, ring().c_pri.clone());
        assert!(matches!(svc.prepare(&item(&ids, true)), Err(PrepareError::MissingSubmission { .. })));
        assert!(svc.dataset().is_empty());
        assert_eq!(svc.quarantined().len(), 1);
    }

    #[test]
    fn attribute_key_is_rejected() {
        let (store, ids) = store_with(5);
        let mut svc = service(&store, ring().m_pri.clone());
        assert!(matches!(svc.prepare(&item(&ids, true)), Err(PrepareError::AuthFailure)));
        assert!(svc.dataset().is_empty());
    }

    #[test]
    fn undersized_batch_rejected() {
        let (store, ids) = store_with(4);
        let mut svc = service(&store, ring().c_pri.clone());
        assert!(matches!(svc.prepare(&item(&ids, true)), Err(PrepareError::BelowThreshold { required: 5, .. })));
        assert!(svc.dataset().is_empty());
    }

    #[test]
    fn persisted_partitions_reload() {
        let dir = tempfile::tempdir().unwrap();
        let (store, ids) = store_with(5);
        let mut svc = PreparationService::new(
            ring().c_pri.clone(),
            store.reader(),
            RoundingPolicy::default(),
            [ReleasePolicy::new("title-country-region", 5)],
            OfflineDataset::open(&dir.path().join("offline")).unwrap(),
        )
        .with_state_dir(&dir.path().join("prep"))
        .unwrap();
        svc.prepare(&item(&ids, true)).unwrap();
        let path = dir.path().join("offline/title-country-region/2023-11-14.jsonl");
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 5);
        let reopened = OfflineDataset::open(&dir.path().join("offline")).unwrap();
        assert_eq!(reopened.len(), 5);
        let svc2 = PreparationService::new(
            ring().c_pri.clone(),
            store.reader(),
            RoundingPolicy::default(),
            [],
            reopened,
        )
        .with_state_dir(&dir.path().join("prep"))
        .unwrap();
        assert!(svc2.is_prepared(&item(&ids, true).batch_id));
    }

    proptest! {
        #[test]
        fn rounding_matches_oracle(a in -10_000_000i64..10_000_000, g in 1i64..100_000) {
            // Oracle: pick the closer of the two neighbouring multiples, preferring the upper.
            let lower = (a as f64 / g as f64).floor() as i64 * g;
            let upper = lower + g;
            let want = if a - lower < upper - a { lower } else { upper };
            prop_assert_eq!(round_value(a, g), want);
        }

        #[test]
        fn rounding_only_merges(vals in prop::collection::vec(0i64..50_000_000, 1..50)) {
            let raw: BTreeSet<_> = vals.iter().collect();
            let rounded: BTreeSet<_> = vals.iter().map(|&v| round_value(v, 100_000)).collect();
            prop_assert!(rounded.len() <= raw.len());
        }
    }
}
