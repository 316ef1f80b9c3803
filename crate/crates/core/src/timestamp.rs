//! Timestamp guard: the delayed job queue between slicing and preparation.
//!
//! True submission instants never leave this module. Released batches are
//! either stamped with a common generalized timestamp (hierarchical mode) or
//! have each entry delayed by a uniform random amount (random-delay mode).

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, NaiveTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{CohortKey, ReleasePolicy, Timestamp, TimestampMode};
use crate::slicing::ReleaseBatch;

/// Coarsening levels, finest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeLevel {
    Second,
    Minute,
    Hour,
    Date,
    Week,
    Month,
    Year,
}

impl TimeLevel {
    pub const HIERARCHY: [TimeLevel; 7] = [
        TimeLevel::Second,
        TimeLevel::Minute,
        TimeLevel::Hour,
        TimeLevel::Date,
        TimeLevel::Week,
        TimeLevel::Month,
        TimeLevel::Year,
    ];
}

/// Truncates to the start of the enclosing unit. Weeks start on Monday.
pub fn truncate(ts: Timestamp, level: TimeLevel) -> Timestamp {
    let secs = ts.unix();
    let day_start = |d: NaiveDate| Timestamp(Utc.from_utc_datetime(&d.and_time(NaiveTime::MIN)).timestamp());
    let date = ts.to_datetime().date_naive();
    match level {
        TimeLevel::Second => ts,
        TimeLevel::Minute => Timestamp(secs - secs.rem_euclid(60)),
        TimeLevel::Hour => Timestamp(secs - secs.rem_euclid(3600)),
        TimeLevel::Date => day_start(date),
        TimeLevel::Week => {
            let back = date.weekday().num_days_from_monday() as u64;
            day_start(date - chrono::Days::new(back))
        }
        TimeLevel::Month => day_start(date.with_day(1).expect("day 1 exists")),
        TimeLevel::Year => day_start(NaiveDate::from_ymd_opt(date.year(), 1, 1).expect("Jan 1 exists")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneralizedTimestamp {
    pub level: TimeLevel,
    pub value: Timestamp,
}

impl GeneralizedTimestamp {
    pub fn exact(ts: Timestamp) -> Self {
        GeneralizedTimestamp { level: TimeLevel::Second, value: ts }
    }
}

/// Finest level at which every timestamp truncates to the same value. If
/// they differ even at year level, the latest entry's year is used.
pub fn generalize_batch(timestamps: &[Timestamp]) -> Option<GeneralizedTimestamp> {
    let latest = *timestamps.iter().max()?;
    for level in TimeLevel::HIERARCHY {
        let first = truncate(timestamps[0], level);
        if timestamps.iter().all(|&t| truncate(t, level) == first) {
            return Some(GeneralizedTimestamp { level, value: first });
        }
    }
    Some(GeneralizedTimestamp { level: TimeLevel::Year, value: truncate(latest, TimeLevel::Year) })
}

/// Uniform delay in `[0, max_delay]` seconds. A zero bound is the identity.
pub fn random_delay<R: Rng + ?Sized>(ts: Timestamp, max_delay: i64, rng: &mut R) -> Timestamp {
    if max_delay <= 0 {
        return ts;
    }
    ts.plus_secs(rng.gen_range(0..=max_delay))
}

pub fn random_delay_seeded(ts: Timestamp, max_delay: i64, seed: u64) -> Timestamp {
    random_delay(ts, max_delay, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-batch RNG derived from the run seed and the batch id, so replays
/// draw the same delays.
fn batch_rng(seed: u64, batch_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(batch_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedEntry {
    pub submission_id: String,
    pub generalized_timestamp: GeneralizedTimestamp,
}

/// Published on `slices.prepared-ready`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedScheduleItem {
    pub batch_id: String,
    pub cohort_key: CohortKey,
    pub first_release: bool,
    pub ready_at: Timestamp,
    pub entries: Vec<PreparedEntry>,
}

pub fn schedule(batch: &ReleaseBatch, policy: &ReleasePolicy, now: Timestamp, seed: u64) -> PreparedScheduleItem {
    let (entries, ready_at) = match policy.timestamp_mode {
        TimestampMode::Hierarchical => {
            let ts: Vec<Timestamp> = batch.entries.iter().map(|e| e.true_timestamp).collect();
            let g = generalize_batch(&ts).unwrap_or(GeneralizedTimestamp::exact(now));
            let entries = batch
                .entries
                .iter()
                .map(|e| PreparedEntry { submission_id: e.submission_id.clone(), generalized_timestamp: g })
                .collect();
            (entries, now)
        }
        TimestampMode::RandomDelay => {
            let mut rng = batch_rng(seed, &batch.batch_id);
            let entries: Vec<PreparedEntry> = batch
                .entries
                .iter()
                .map(|e| PreparedEntry {
                    submission_id: e.submission_id.clone(),
                    generalized_timestamp: GeneralizedTimestamp::exact(random_delay(
                        e.true_timestamp,
                        policy.max_random_delay,
                        &mut rng,
                    )),
                })
                .collect();
            let ready = entries.iter().map(|e| e.generalized_timestamp.value).max().unwrap_or(now);
            (entries, ready)
        }
    };
    PreparedScheduleItem {
        batch_id: batch.batch_id.clone(),
        cohort_key: batch.cohort_key.clone(),
        first_release: batch.is_first(),
        ready_at,
        entries,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum QueueOp {
    Scheduled { seq: u64, item: PreparedScheduleItem },
    HandedOff { batch_id: String },
}

/// Delayed job queue on a simulated clock, journaled append-only.
pub struct TimestampGuard {
    seed: u64,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(Timestamp, u64, String)>>,
    items: std::collections::HashMap<String, PreparedScheduleItem>,
    seen: BTreeSet<String>,
    journal: Option<(PathBuf, File)>,
}

impl TimestampGuard {
    pub fn in_memory(seed: u64) -> Self {
        TimestampGuard {
            seed,
            next_seq: 0,
            heap: BinaryHeap::new(),
            items: Default::default(),
            seen: BTreeSet::new(),
            journal: None,
        }
    }

    /// Opens the queue journal and restores items not yet handed off.
    pub fn open(path: &Path, seed: u64) -> std::io::Result<Self> {
        let mut guard = Self::in_memory(seed);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line).map_err(std::io::Error::other)? {
                    QueueOp::Scheduled { seq, item } => {
                        guard.next_seq = guard.next_seq.max(seq + 1);
                        guard.seen.insert(item.batch_id.clone());
                        guard.heap.push(Reverse((item.ready_at, seq, item.batch_id.clone())));
                        guard.items.insert(item.batch_id.clone(), item);
                    }
                    QueueOp::HandedOff { batch_id } => {
                        guard.items.remove(&batch_id);
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        guard.journal = Some((path.to_path_buf(), file));
        Ok(guard)
    }

    fn log(&mut self, op: &QueueOp) -> std::io::Result<()> {
        if let Some((_, f)) = self.journal.as_mut() {
            writeln!(f, "{}", serde_json::to_string(op).unwrap())?;
        }
        Ok(())
    }

    /// Queues a released batch. A batch id seen before is not queued twice.
    pub fn schedule(
        &mut self,
        batch: &ReleaseBatch,
        policy: &ReleasePolicy,
        now: Timestamp,
    ) -> std::io::Result<Option<PreparedScheduleItem>> {
        if self.seen.contains(&batch.batch_id) {
            return Ok(None);
        }
        let item = schedule(batch, policy, now, self.seed);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.log(&QueueOp::Scheduled { seq, item: item.clone() })?;
        self.seen.insert(item.batch_id.clone());
        self.heap.push(Reverse((item.ready_at, seq, item.batch_id.clone())));
        self.items.insert(item.batch_id.clone(), item.clone());
        Ok(Some(item))
    }

    /// Items whose ready time is at or before `now`, in ready order. They
    /// stay queued until [`TimestampGuard::ack`].
    pub fn ready(&mut self, now: Timestamp) -> Vec<PreparedScheduleItem> {
        let mut out = Vec::new();
        let mut keep = Vec::new();
        while let Some(Reverse((at, seq, id))) = self.heap.peek().cloned() {
            if at > now {
                break;
            }
            self.heap.pop();
            if let Some(item) = self.items.get(&id) {
                out.push(item.clone());
                keep.push(Reverse((at, seq, id)));
            }
        }
        self.heap.extend(keep.into_iter().filter(|Reverse((_, _, id))| self.items.contains_key(id)));
        out
    }

    /// Marks an item handed off to preparation.
    pub fn ack(&mut self, batch_id: &str) -> std::io::Result<()> {
        if self.items.remove(batch_id).is_some() {
            self.log(&QueueOp::HandedOff { batch_id: batch_id.to_string() })?;
        }
        Ok(())
    }

    /// Earliest ready time among queued items.
    pub fn next_ready_at(&self) -> Option<Timestamp> {
        self.items.values().map(|i| i.ready_at).min()
    }

    pub fn pending(&self) -> usize {
        self.items.len()
    }

    /// Queued items in ready order.
    pub fn queued(&self) -> Vec<&PreparedScheduleItem> {
        let mut v: Vec<&PreparedScheduleItem> = self.items.values().collect();
        v.sort_by(|a, b| (a.ready_at, &a.batch_id).cmp(&(b.ready_at, &b.batch_id)));
        v
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some((_, f)) = self.journal.as_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slicing::PendingEntry;
    use proptest::prelude::*;

    fn at(s: &str) -> Timestamp {
        Timestamp::parse_rfc3339(s).unwrap()
    }

    /// Independent oracle: compare calendar fields as strings at each level.
    fn oracle_level(ts: &[Timestamp]) -> (TimeLevel, Timestamp) {
        let fmt = |t: Timestamp, level: TimeLevel| {
            let d = t.to_datetime();
            match level {
                TimeLevel::Second => d.format("%Y-%m-%dT%H:%M:%S").to_string(),
                TimeLevel::Minute => d.format("%Y-%m-%dT%H:%M").to_string(),
                TimeLevel::Hour => d.format("%Y-%m-%dT%H").to_string(),
                TimeLevel::Date => d.format("%Y-%m-%d").to_string(),
                TimeLevel::Week => d.format("%G-W%V").to_string(),
                TimeLevel::Month => d.format("%Y-%m").to_string(),
                TimeLevel::Year => d.format("%Y").to_string(),
            }
        };
        for level in TimeLevel::HIERARCHY {
            if ts.iter().all(|&t| fmt(t, level) == fmt(ts[0], level)) {
                return (level, truncate(ts[0], level));
            }
        }
        let latest = *ts.iter().max().unwrap();
        (TimeLevel::Year, truncate(latest, TimeLevel::Year))
    }

    #[test]
    fn truncation_levels() {
        let t = at("2024-03-14T10:17:44Z"); // a Thursday
        assert_eq!(truncate(t, TimeLevel::Minute), at("2024-03-14T10:17:00Z"));
        assert_eq!(truncate(t, TimeLevel::Hour), at("2024-03-14T10:00:00Z"));
        assert_eq!(truncate(t, TimeLevel::Date), at("2024-03-14T00:00:00Z"));
        assert_eq!(truncate(t, TimeLevel::Week), at("2024-03-11T00:00:00Z"));
        assert_eq!(truncate(t, TimeLevel::Month), at("2024-03-01T00:00:00Z"));
        assert_eq!(truncate(t, TimeLevel::Year), at("2024-01-01T00:00:00Z"));
    }

    #[test]
    fn singleton_batch_is_exact() {
        let t = at("2024-03-14T10:17:44Z");
        assert_eq!(generalize_batch(&[t]), Some(GeneralizedTimestamp::exact(t)));
        assert_eq!(generalize_batch(&[]), None);
    }

    #[test]
    fn same_hour() {
        let ts = [at("2024-03-14T10:04:01Z"), at("2024-03-14T10:17:44Z"), at("2024-03-14T10:59:59Z")];
        let g = generalize_batch(&ts).unwrap();
        assert_eq!((g.level, g.value), oracle_level(&ts));
        assert_eq!(g, GeneralizedTimestamp { level: TimeLevel::Hour, value: at("2024-03-14T10:00:00Z") });
    }

    #[test]
    fn two_months_apart() {
        let ts = [at("2024-01-15T08:00:00Z"), at("2024-03-20T09:00:00Z")];
        let g = generalize_batch(&ts).unwrap();
        assert_eq!((g.level, g.value), oracle_level(&ts));
        assert_eq!(g, GeneralizedTimestamp { level: TimeLevel::Year, value: at("2024-01-01T00:00:00Z") });
    }

    #[test]
    fn across_years_uses_latest() {
        let ts = [at("2023-12-31T23:00:00Z"), at("2025-06-01T00:00:00Z")];
        let g = generalize_batch(&ts).unwrap();
        assert_eq!(g, GeneralizedTimestamp { level: TimeLevel::Year, value: at("2025-01-01T00:00:00Z") });
    }

    #[test]
    fn zero_delay_is_identity() {
        let t = at("2024-03-14T10:17:44Z");
        assert_eq!(random_delay_seeded(t, 0, 42), t);
    }

    #[test]
    fn delay_within_48_hours() {
        let t = at("2024-03-14T10:17:44Z");
        for seed in 0..200 {
            let d = random_delay_seeded(t, 48 * 3600, seed).unix() - t.unix();
            assert!((0..=48 * 3600).contains(&d));
        }
    }

    #[test]
    fn delays_are_uniform() {
        // One-sample Kolmogorov-Smirnov against U[0, max].
        let max = 48 * 3600;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut xs: Vec<f64> = (0..1000)
            .map(|_| random_delay(Timestamp(0), max, &mut rng).unix() as f64 / max as f64)
            .collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
            .fold(0.0, f64::max);
        // Asymptotic KS p-value.
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let p: f64 = 2.0 * (1..100).map(|j| (-1f64).powi(j - 1) * (-2.0 * (j as f64 * lambda).powi(2)).exp()).sum::<f64>();
        assert!(p > 0.01, "KS p = {p}");
        assert_ne!(random_delay_seeded(Timestamp(0), max, 1), random_delay_seeded(Timestamp(0), max, 2));
    }

    fn batch(ts: &[Timestamp]) -> ReleaseBatch {
        let cohort: CohortKey = "t:title=a,country=US".parse().unwrap();
        ReleaseBatch {
            batch_id: crate::slicing::batch_id(&cohort, 0),
            cohort_key: cohort,
            seq: 0,
            entries: ts
                .iter()
                .enumerate()
                .map(|(i, &t)| PendingEntry { submission_id: format!("s{i}"), true_timestamp: t })
                .collect(),
        }
    }

    #[test]
    fn hierarchical_schedule_shares_one_stamp() {
        let base = at("2024-03-14T10:00:00Z");
        let ts: Vec<_> = (0..5).map(|i| base.plus_secs(i * 600)).collect();
        let policy = ReleasePolicy::new("t", 5);
        let item = schedule(&batch(&ts), &policy, base.plus_secs(3000), 1);
        assert!(item.entries.iter().all(|e| e.generalized_timestamp
            == GeneralizedTimestamp { level: TimeLevel::Hour, value: base }));
        assert_eq!(item.ready_at, base.plus_secs(3000));
    }

    #[test]
    fn random_delay_ready_at_max() {
        let base = at("2024-03-14T10:00:00Z");
        let ts: Vec<_> = (0..5).map(|i| base.plus_secs(i * 600)).collect();
        let mut policy = ReleasePolicy::new("t", 5);
        policy.timestamp_mode = TimestampMode::RandomDelay;
        let item = schedule(&batch(&ts), &policy, base, 9);
        let max = item.entries.iter().map(|e| e.generalized_timestamp.value).max().unwrap();
        assert_eq!(item.ready_at, max);
        for (e, t) in item.entries.iter().zip(&ts) {
            let d = e.generalized_timestamp.value.unix() - t.unix();
            assert!((0..=policy.max_random_delay).contains(&d));
        }
        assert_eq!(schedule(&batch(&ts), &policy, base, 9), item);
    }

    #[test]
    fn queue_releases_in_time_order_and_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queue.jsonl");
        let mut policy = ReleasePolicy::new("t", 1);
        policy.timestamp_mode = TimestampMode::RandomDelay;
        let base = at("2024-03-14T10:00:00Z");
        let mut g = TimestampGuard::open(&path, 3).unwrap();
        let item = g.schedule(&batch(&[base]), &policy, base).unwrap().unwrap();
        assert!(g.schedule(&batch(&[base]), &policy, base).unwrap().is_none());
        policy.timestamp_mode = TimestampMode::Hierarchical;
        // A policy change does not touch the queued item.
        assert_eq!(g.next_ready_at(), Some(item.ready_at));
        if item.ready_at > base {
            assert!(g.ready(base).is_empty());
        }
        g.flush().unwrap();
        drop(g);
        let mut g = TimestampGuard::open(&path, 3).unwrap();
        assert_eq!(g.pending(), 1);
        let got = g.ready(item.ready_at);
        assert_eq!(got, vec![item.clone()]);
        g.ack(&item.batch_id).unwrap();
        g.flush().unwrap();
        drop(g);
        let g = TimestampGuard::open(&path, 3).unwrap();
        assert_eq!(g.pending(), 0);
    }

    proptest! {
        #[test]
        fn matches_calendar_oracle(ts in prop::collection::vec(1_500_000_000i64..1_800_000_000, 1..8), spread in 0u32..6) {
            let scale = [1i64, 60, 3600, 86_400, 604_800, 2_600_000][spread as usize];
            let base = ts[0];
            let ts: Vec<Timestamp> = ts.iter().map(|t| Timestamp(base + (t - base).rem_euclid(scale * 3))).collect();
            let g = generalize_batch(&ts).unwrap();
            prop_assert_eq!((g.level, g.value), oracle_level(&ts));
        }

        #[test]
        fn superset_never_finer(ts in prop::collection::vec(1_500_000_000i64..1_600_000_000, 2..10), cut in 1usize..9) {
            let ts: Vec<Timestamp> = ts.into_iter().map(Timestamp).collect();
            let cut = cut.min(ts.len() - 1);
            let sub = generalize_batch(&ts[..cut]).unwrap();
            let sup = generalize_batch(&ts).unwrap();
            prop_assert!(sup.level >= sub.level);
        }

        #[test]
        fn truncation_idempotent(t in 0i64..4_000_000_000, li in 0usize..7) {
            let level = TimeLevel::HIERARCHY[li];
            let once = truncate(Timestamp(t), level);
            prop_assert_eq!(truncate(once, level), once);
            prop_assert!(once <= Timestamp(t));
        }
    }
}
