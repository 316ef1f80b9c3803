//! Orchestration: configuration, key loading, and the service wiring over
//! the journaled bus on a simulated clock.
//!
//! Data directory layout:
//!
//! ```text
//! submissions.jsonl      encrypted submission store
//! verification.json      recency-only verification store
//! intake.json            intake counters
//! journal/<topic>/       bus segments and offsets.json
//! slicing/state.json     encrypted slice states
//! queue/journal.jsonl    timestamp guard queue
//! prep/                  prepared-batch ledger and quarantine
//! offline/               de-identified dataset
//! insights/              insight store generations
//! manifest.json          last run manifest
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{BusError, EventBus, TOPIC_PREPARED, TOPIC_RELEASED, TOPIC_SUBMISSIONS};
use crate::campaign::HistoryRecord;
use crate::crypto::{
    load_public_key, rotate, write_atomic, CryptoError, KeyRing, Keystore, PrivateKey, PublicKey, Purpose, RotationReport,
    SymmetricKey,
};
use crate::insights::{compute_insights, query_insight, InsightConfig, InsightResponse, InsightStore, QueryError};
use crate::model::{
    Attribute, CohortKey, CompensationData, CurrencyTable, MemberProfile, ReleasePolicy, SliceType, Timestamp, TimestampMode,
};
use crate::prepare::{OfflineDataset, PrepareError, PreparationService, RoundingPolicy};
use crate::slicing::{ChangeEvent, ReleaseBatch, SliceStateStore, SlicingError, SlicingService};
use crate::standardize::Standardizer;
use crate::store::{ResubmissionPolicy, SubmissionStore, VerificationStore};
use crate::submission::{SubmissionService, SubmitError, SubmitReceipt};
use crate::synth;
use crate::timestamp::{PreparedScheduleItem, TimestampGuard};

pub const PASSPHRASE_ENV: &str = "PAYSLICE_KEYSTORE_PASSPHRASE";

const SLICING: &str = "slicing";
const GUARD: &str = "timestamp-guard";
const PREP: &str = "preparation";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Slicing(#[from] SlicingError),
    #[error(transparent)]
    Prepare(#[from] PrepareError),
    #[error(transparent)]
    Submit(#[from] SubmitError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("data error: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 2 for configuration and key problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Crypto(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceTypeConfig {
    pub name: String,
    pub attributes: Vec<Attribute>,
    pub min_threshold: u32,
    pub batch_size: u32,
    #[serde(default = "default_mode")]
    pub timestamp_mode: TimestampMode,
    /// Seconds.
    #[serde(default = "default_max_delay")]
    pub max_random_delay: i64,
}

fn default_mode() -> TimestampMode {
    TimestampMode::Hierarchical
}

fn default_max_delay() -> i64 {
    48 * 3600
}

impl SliceTypeConfig {
    pub fn slice_type(&self) -> SliceType {
        SliceType { name: self.name.clone(), attribute_set: self.attributes.clone() }
    }

    pub fn policy(&self) -> ReleasePolicy {
        ReleasePolicy {
            slice_type: self.name.clone(),
            min_threshold: self.min_threshold,
            batch_size: self.batch_size,
            timestamp_mode: self.timestamp_mode,
            max_random_delay: self.max_random_delay,
        }
    }

    pub fn from_catalog(st: &SliceType, policy: &ReleasePolicy) -> Self {
        SliceTypeConfig {
            name: st.name.clone(),
            attributes: st.attribute_set.clone(),
            min_threshold: policy.min_threshold,
            batch_size: policy.batch_size,
            timestamp_mode: policy.timestamp_mode,
            max_random_delay: policy.max_random_delay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyDirs {
    pub attributes: PathBuf,
    pub compensation: PathBuf,
    pub threshold: PathBuf,
    pub public: PathBuf,
}

impl KeyDirs {
    pub fn dir(&self, purpose: Purpose) -> &Path {
        match purpose {
            Purpose::Attributes => &self.attributes,
            Purpose::Compensation => &self.compensation,
            Purpose::Threshold => &self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub keys: KeyDirs,
    pub slice_types: Vec<SliceTypeConfig>,
    #[serde(default)]
    pub rounding: RoundingPolicy,
    #[serde(default)]
    pub resubmission: ResubmissionPolicy,
    #[serde(default)]
    pub insights: InsightConfig,
    #[serde(default)]
    pub currencies: CurrencyTable,
    /// Directory with taxonomy files; the bundled ones are used if unset.
    #[serde(default)]
    pub taxonomy_dir: Option<PathBuf>,
}

fn nested(a: &Path, b: &Path) -> bool {
    a.starts_with(b) || b.starts_with(a)
}

impl PipelineConfig {
    /// Default catalog and policies with every path under `root`.
    pub fn in_dir(root: &Path, seed: u64) -> Self {
        let slice_types = crate::model::default_slice_catalog()
            .iter()
            .map(|st| SliceTypeConfig::from_catalog(st, &crate::model::default_policy_for(st)))
            .collect();
        PipelineConfig {
            version: 1,
            seed,
            data_dir: root.join("data"),
            keys: KeyDirs {
                attributes: root.join("keys/attributes"),
                compensation: root.join("keys/compensation"),
                threshold: root.join("keys/threshold"),
                public: root.join("keys/public"),
            },
            slice_types,
            rounding: RoundingPolicy::default(),
            resubmission: ResubmissionPolicy::default(),
            insights: InsightConfig::default(),
            currencies: CurrencyTable::default(),
            taxonomy_dir: None,
        }
    }

    /// Parses a TOML config. Relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data_dir);
        fix(&mut cfg.keys.attributes);
        fix(&mut cfg.keys.compensation);
        fix(&mut cfg.keys.threshold);
        fix(&mut cfg.keys.public);
        if let Some(t) = cfg.taxonomy_dir.as_mut() {
            fix(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.version == 0 {
            return bad("version must be >= 1".into());
        }
        if self.slice_types.is_empty() {
            return bad("at least one slice type is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for st in &self.slice_types {
            if !names.insert(&st.name) {
                return bad(format!("duplicate slice type `{}`", st.name));
            }
            st.slice_type().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            st.policy().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if self.rounding.base_salary <= 0 || self.rounding.other <= 0 {
            return bad("rounding granularities must be positive".into());
        }
        let private = [
            ("attributes", &self.keys.attributes),
            ("compensation", &self.keys.compensation),
            ("threshold", &self.keys.threshold),
        ];
        for (i, (na, a)) in private.iter().enumerate() {
            for (nb, b) in &private[i + 1..] {
                if nested(a, b) {
                    return bad(format!("{na} and {nb} key directories must be disjoint"));
                }
            }
        }
        Ok(())
    }

    pub fn catalog(&self) -> Vec<SliceType> {
        self.slice_types.iter().map(SliceTypeConfig::slice_type).collect()
    }

    pub fn policies(&self) -> Vec<ReleasePolicy> {
        self.slice_types.iter().map(SliceTypeConfig::policy).collect()
    }

    pub fn standardizer(&self) -> Result<Standardizer, PipelineError> {
        match &self.taxonomy_dir {
            Some(d) => Standardizer::load_dir(d).map_err(|e| PipelineError::Config(e.to_string())),
            None => Ok(Standardizer::builtin()),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.data_dir.clone() }
    }
}

/// Paths under the data directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn submissions(&self) -> PathBuf {
        self.root.join("submissions.jsonl")
    }
    pub fn verification(&self) -> PathBuf {
        self.root.join("verification.json")
    }
    pub fn intake(&self) -> PathBuf {
        self.root.join("intake.json")
    }
    pub fn journal(&self) -> PathBuf {
        self.root.join("journal")
    }
    pub fn slicing(&self) -> PathBuf {
        self.root.join("slicing")
    }
    pub fn queue(&self) -> PathBuf {
        self.root.join("queue")
    }
    pub fn prep(&self) -> PathBuf {
        self.root.join("prep")
    }
    pub fn offline(&self) -> PathBuf {
        self.root.join("offline")
    }
    pub fn insights(&self) -> PathBuf {
        self.root.join("insights")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn rotation_marker(&self, purpose: Purpose) -> PathBuf {
        self.root.join(format!("rotation-{}.json", purpose.as_str()))
    }
}

/// The key subset the pipeline process needs. The attribute private key is
/// never part of it.
#[derive(Debug, Clone)]
pub struct PipelineKeys {
    pub m_pub: PublicKey,
    pub c_pub: PublicKey,
    pub c_pri: PrivateKey,
    pub t_sym: SymmetricKey,
}

impl PipelineKeys {
    pub fn from_ring(ring: &KeyRing) -> Self {
        PipelineKeys { m_pub: ring.m_pub.clone(), c_pub: ring.c_pub.clone(), c_pri: ring.c_pri.clone(), t_sym: ring.t_sym.clone() }
    }

    pub fn load(config: &PipelineConfig, passphrase: &str) -> Result<Self, PipelineError> {
        let m_pub = load_public_key(&config.keys.public, Purpose::Attributes)?;
        let c_pub = load_public_key(&config.keys.public, Purpose::Compensation)?;
        let c_pri = Keystore::open(&config.keys.compensation, Purpose::Compensation, passphrase)?.current_private_key()?;
        let t_sym = Keystore::open(&config.keys.threshold, Purpose::Threshold, passphrase)?.current_symmetric_key()?;
        Ok(PipelineKeys { m_pub, c_pub, c_pri, t_sym })
    }
}

/// Creates any missing keystore and exports public halves. Returns the
/// current version per purpose.
pub fn keygen(config: &PipelineConfig, passphrase: &str, now: Timestamp) -> Result<BTreeMap<Purpose, u32>, PipelineError> {
    config.validate()?;
    let mut out = BTreeMap::new();
    for purpose in Purpose::ALL {
        let dir = config.keys.dir(purpose);
        std::fs::create_dir_all(dir)?;
        let mut ks = Keystore::open(dir, purpose, passphrase)?;
        let v = match ks.current_version() {
            Some(v) => v,
            None => ks.generate(now)?,
        };
        if !purpose.is_symmetric() {
            ks.export_public(&config.keys.public)?;
        }
        out.insert(purpose, v);
    }
    Ok(out)
}

/// Rotates one purpose's key and re-wraps every stored envelope of it.
pub fn rotate_key(
    config: &PipelineConfig,
    purpose: Purpose,
    passphrase: &str,
    now: Timestamp,
) -> Result<RotationReport, PipelineError> {
    let layout = config.layout();
    std::fs::create_dir_all(&layout.root)?;
    let mut ks = Keystore::open(config.keys.dir(purpose), purpose, passphrase)?;
    let marker = layout.rotation_marker(purpose);
    let report = match purpose {
        Purpose::Threshold => {
            let mut store = SliceStateStore::open(&layout.slicing().join("state.json"))?;
            rotate(&mut ks, &mut store, Some(&marker), now)?
        }
        _ => {
            let mut store = SubmissionStore::open(&layout.submissions())?;
            rotate(&mut ks, &mut store, Some(&marker), now)?
        }
    };
    if !purpose.is_symmetric() {
        ks.export_public(&config.keys.public)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntakeCounts {
    pub accepted: u64,
    pub unmappable: u64,
    pub invalid: u64,
    pub denied: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    /// Accepted submissions that carry every attribute of the slice type.
    pub submitted: u64,
    pub pending: u64,
    pub released: u64,
    pub queued: u64,
    pub prepared: u64,
    pub quarantined: u64,
}

impl StageCounts {
    pub fn conserved(&self) -> bool {
        self.submitted == self.pending + self.released && self.released == self.queued + self.prepared + self.quarantined
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_version: u32,
    pub seed: u64,
    pub intake: IntakeCounts,
    pub slice_types: BTreeMap<String, StageCounts>,
    pub offline_records: u64,
    pub insight_cohorts: u64,
    pub insight_generation: u64,
    pub conserved: bool,
    pub paths: BTreeMap<String, PathBuf>,
}

pub struct Pipeline {
    config: PipelineConfig,
    layout: Layout,
    standardizer: Arc<Standardizer>,
    bus: EventBus,
    submissions: SubmissionStore,
    verification: VerificationStore,
    intake: SubmissionService,
    slicing: SlicingService,
    guard: TimestampGuard,
    prep: PreparationService,
    counts: IntakeCounts,
    insight_generation: u64,
}

impl Pipeline {
    pub fn open(config: PipelineConfig, keys: PipelineKeys) -> Result<Self, PipelineError> {
        config.validate()?;
        let layout = config.layout();
        std::fs::create_dir_all(&layout.root)?;
        let standardizer = Arc::new(config.standardizer()?);
        let bus = EventBus::open(&layout.journal())?;
        let submissions = SubmissionStore::open(&layout.submissions())?;
        let verification = VerificationStore::open(&layout.verification())?;
        let intake = SubmissionService::new(
            standardizer.clone(),
            config.currencies.clone(),
            keys.m_pub,
            keys.c_pub,
            submissions.writer(),
            verification.clone(),
            config.resubmission,
        );
        let slicing = SlicingService::new(
            config.catalog(),
            config.policies(),
            keys.t_sym,
            SliceStateStore::open(&layout.slicing().join("state.json"))?,
        )?;
        let guard = TimestampGuard::open(&layout.queue().join("journal.jsonl"), config.seed)?;
        let prep = PreparationService::new(
            keys.c_pri,
            submissions.reader(),
            config.rounding,
            config.policies(),
            OfflineDataset::open(&layout.offline())?,
        )
        .with_state_dir(&layout.prep())?;
        let counts = if layout.intake().exists() {
            serde_json::from_str(&std::fs::read_to_string(layout.intake())?).map_err(|e| PipelineError::Data(e.to_string()))?
        } else {
            IntakeCounts::default()
        };
        let insight_generation = InsightStore::current_generation(&layout.insights())?.unwrap_or(0);
        Ok(Pipeline {
            config,
            layout,
            standardizer,
            bus,
            submissions,
            verification,
            intake,
            slicing,
            guard,
            prep,
            counts,
            insight_generation,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn bus(&self) -> &EventBus {
        &self.bus
    }

    pub fn submissions(&self) -> &SubmissionStore {
        &self.submissions
    }

    pub fn verification(&self) -> &VerificationStore {
        &self.verification
    }

    pub fn slicing(&self) -> &SlicingService {
        &self.slicing
    }

    pub fn guard(&self) -> &TimestampGuard {
        &self.guard
    }

    pub fn dataset(&self) -> &OfflineDataset {
        self.prep.dataset()
    }

    pub fn preparation(&self) -> &PreparationService {
        &self.prep
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Intake followed by a pump at `now`.
    pub fn submit(
        &mut self,
        member: &MemberProfile,
        comp: &CompensationData,
        now: Timestamp,
    ) -> Result<SubmitReceipt, PipelineError> {
        let receipt = match self.intake.submit(member, comp, now) {
            Ok(r) => r,
            Err(e) => {
                match &e {
                    SubmitError::Unmappable(_) => self.counts.unmappable += 1,
                    SubmitError::Validation(_) => self.counts.invalid += 1,
                    SubmitError::ResubmissionDenied => self.counts.denied += 1,
                    _ => {}
                }
                return Err(e.into());
            }
        };
        self.counts.accepted += 1;
        self.bus.publish(TOPIC_SUBMISSIONS, &receipt.event)?;
        self.pump(now)?;
        Ok(receipt)
    }

    /// Delivers everything outstanding on the bus. Each change event is
    /// processed on the clock of its own submission time.
    pub fn pump(&mut self, now: Timestamp) -> Result<(), PipelineError> {
        for (offset, event) in self.bus.poll::<ChangeEvent>(SLICING, TOPIC_SUBMISSIONS)? {
            for batch in self.slicing.on_event(&event)? {
                self.bus.publish(TOPIC_RELEASED, &batch)?;
            }
            self.bus.commit(SLICING, TOPIC_SUBMISSIONS, offset + 1);
            self.advance(event.true_timestamp)?;
        }
        self.advance(now)
    }

    fn advance(&mut self, now: Timestamp) -> Result<(), PipelineError> {
        for (offset, batch) in self.bus.poll::<ReleaseBatch>(GUARD, TOPIC_RELEASED)? {
            let policy = self
                .slicing
                .policy(&batch.cohort_key.slice_type)
                .ok_or_else(|| PipelineError::Data(format!("no policy for `{}`", batch.cohort_key.slice_type)))?
                .clone();
            self.guard.schedule(&batch, &policy, now)?;
            self.bus.commit(GUARD, TOPIC_RELEASED, offset + 1);
        }
        for item in self.guard.ready(now) {
            self.bus.publish(TOPIC_PREPARED, &item)?;
            self.guard.ack(&item.batch_id)?;
        }
        for (offset, item) in self.bus.poll::<PreparedScheduleItem>(PREP, TOPIC_PREPARED)? {
            match self.prep.prepare(&item) {
                Ok(_) | Err(PrepareError::MissingSubmission { .. }) | Err(PrepareError::BelowThreshold { .. }) => {}
                Err(e) => return Err(e.into()),
            }
            self.bus.commit(PREP, TOPIC_PREPARED, offset + 1);
        }
        Ok(())
    }

    /// Advances the clock past every queued item.
    pub fn drain(&mut self) -> Result<(), PipelineError> {
        self.pump(Timestamp(i64::MIN))?;
        if let Some(t) = self.guard.queued().iter().map(|i| i.ready_at).max() {
            self.advance(t)?;
        }
        Ok(())
    }

    pub fn checkpoint(&mut self) -> Result<(), PipelineError> {
        self.slicing.save()?;
        self.verification.save()?;
        self.guard.flush()?;
        self.bus.flush()?;
        write_atomic(&self.layout.intake(), serde_json::to_string_pretty(&self.counts).unwrap().as_bytes())?;
        Ok(())
    }

    /// Submits every response in a campaign history, in submission order,
    /// using synthetic profiles and compensation derived from the seed.
    /// Rejected submissions are counted and skipped.
    pub fn ingest_history(&mut self, records: &[HistoryRecord]) -> Result<(), PipelineError> {
        let mut responses: Vec<&HistoryRecord> = records.iter().filter(|r| r.submitted_at.is_some()).collect();
        responses.sort_by(|a, b| (a.submitted_at, &a.member_id).cmp(&(b.submitted_at, &b.member_id)));
        let seed = self.config.seed;
        for r in responses {
            let profile = synth::member_profile(&self.standardizer, &r.cohort_key, &r.member_id, seed);
            let comp = synth::compensation(&self.config.currencies, &r.cohort_key, &r.member_id, seed);
            match self.submit(&profile, &comp, r.submitted_at.unwrap()) {
                Ok(_) | Err(PipelineError::Submit(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Submits pre-built profiles, in the given order.
    pub fn ingest(&mut self, items: &[(MemberProfile, CompensationData, Timestamp)]) -> Result<(), PipelineError> {
        for (p, c, t) in items {
            match self.submit(p, c, *t) {
                Ok(_) | Err(PipelineError::Submit(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Recomputes insights from the offline dataset and publishes a new
    /// store generation.
    pub fn rebuild_insights(&mut self) -> Result<InsightStore, PipelineError> {
        let policies: BTreeMap<String, ReleasePolicy> =
            self.config.policies().into_iter().map(|p| (p.slice_type.clone(), p)).collect();
        let insights = compute_insights(self.prep.dataset(), &self.config.catalog(), &policies, self.config.insights);
        let store = InsightStore::publish(&self.layout.insights(), insights, self.config.version, self.config.seed)?;
        self.insight_generation = store.meta().generation;
        Ok(store)
    }

    /// Drains, rebuilds insights, checkpoints and writes the manifest.
    pub fn finish(&mut self) -> Result<RunManifest, PipelineError> {
        self.drain()?;
        self.rebuild_insights()?;
        self.checkpoint()?;
        let m = self.manifest()?;
        write_atomic(&self.layout.manifest(), serde_json::to_string_pretty(&m).unwrap().as_bytes())?;
        Ok(m)
    }

    pub fn manifest(&self) -> Result<RunManifest, PipelineError> {
        let events: Vec<(u64, ChangeEvent)> = self.bus.read_from(TOPIC_SUBMISSIONS, 0)?;
        let mut slice_types = BTreeMap::new();
        for st in self.config.catalog() {
            let mut c = StageCounts {
                submitted: events
                    .iter()
                    .filter(|(_, e)| st.attribute_set.iter().all(|a| e.attributes.get(a).is_some_and(|v| !v.is_empty())))
                    .count() as u64,
                ..Default::default()
            };
            for (pending, released) in self.slicing.slice_counts(&st.name)?.values() {
                c.pending += pending;
                c.released += released;
            }
            c.queued = self
                .guard
                .queued()
                .iter()
                .filter(|i| i.cohort_key.slice_type == st.name)
                .map(|i| i.entries.len() as u64)
                .sum();
            c.prepared = self.prep.dataset().entries_for(&st.name).count() as u64;
            c.quarantined = self
                .prep
                .quarantined()
                .values()
                .filter(|q| q.item.cohort_key.slice_type == st.name)
                .map(|q| q.item.entries.len() as u64)
                .sum();
            slice_types.insert(st.name.clone(), c);
        }
        let insight_cohorts = match InsightStore::open(&self.layout.insights()) {
            Ok(s) => s.len() as u64,
            Err(_) => 0,
        };
        let conserved = slice_types.values().all(StageCounts::conserved)
            && self.counts.accepted == events.len() as u64;
        let paths = BTreeMap::from([
            ("offline".to_string(), self.layout.offline()),
            ("insights".to_string(), self.layout.insights()),
            ("journal".to_string(), self.layout.journal()),
            ("submissions".to_string(), self.layout.submissions()),
        ]);
        Ok(RunManifest {
            config_version: self.config.version,
            seed: self.config.seed,
            intake: self.counts.clone(),
            slice_types,
            offline_records: self.prep.dataset().len() as u64,
            insight_cohorts,
            insight_generation: self.insight_generation,
            conserved,
            paths,
        })
    }

    /// Give-to-get gated query against the current insight store.
    pub fn query(&self, key: &CohortKey, member_id: &str, now: Timestamp) -> Result<InsightResponse, PipelineError> {
        let store = InsightStore::open(&self.layout.insights())?;
        Ok(query_insight(&store, &self.verification, key, member_id, now)?)
    }
}

/// Deletes all state derived from the submission journal.
pub fn wipe_derived(layout: &Layout) -> Result<(), PipelineError> {
    let journal = layout.journal();
    for p in [
        layout.slicing(),
        layout.queue(),
        layout.prep(),
        layout.offline(),
        layout.insights(),
        journal.join(TOPIC_RELEASED),
        journal.join(TOPIC_PREPARED),
    ] {
        if p.exists() {
            std::fs::remove_dir_all(&p)?;
        }
    }
    for f in [journal.join("offsets.json"), layout.manifest()] {
        if f.exists() {
            std::fs::remove_file(f)?;
        }
    }
    Ok(())
}

/// Regenerates every derived store by replaying `submissions.attrs` from
/// the start. The journal is checked for gaps before anything is deleted.
pub fn bootstrap(config: PipelineConfig, keys: PipelineKeys) -> Result<RunManifest, PipelineError> {
    let layout = config.layout();
    EventBus::open(&layout.journal())?;
    wipe_derived(&layout)?;
    let mut p = Pipeline::open(config, keys)?;
    p.pump(Timestamp(i64::MIN))?;
    p.finish()
}

/// Opens the pipeline, ingests `history` and finishes the run.
pub fn run(config: PipelineConfig, keys: PipelineKeys, history: &[HistoryRecord]) -> Result<RunManifest, PipelineError> {
    let mut p = Pipeline::open(config, keys)?;
    p.ingest_history(history)?;
    p.finish()
}
