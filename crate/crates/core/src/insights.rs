//! Offline insight workflow and the query service.
//!
//! Quantiles are computed exactly over rationals and rounded to minor units
//! only at the edge. Small cohorts are shrunk toward their nearest ancestor
//! with enough data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::write_atomic;
use crate::model::{Attribute, CohortKey, CompensationType, DeidentifiedEntry, Money, ReleasePolicy, SliceType, Timestamp, SECONDS_PER_DAY};
use crate::prepare::OfflineDataset;
use crate::store::VerificationStore;

pub const DEFAULT_TAU: u32 = 10;
pub const DEFAULT_TARGET_BUCKETS: usize = 10;
pub const GIVE_TO_GET_WINDOW: i64 = 365 * SECONDS_PER_DAY;
pub const IQR_FENCE: i64 = 3;

/// Attributes removed, in order, when walking up the ancestor chain.
pub const ANCESTOR_DROP_ORDER: [Attribute; 5] = [
    Attribute::Company,
    Attribute::Industry,
    Attribute::CompanySizeBand,
    Attribute::YearsExperienceBand,
    Attribute::Region,
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InsightError {
    #[error("empty input")]
    EmptyInput,
    #[error("at least 4 values are needed, got {0}")]
    TooFewValues(usize),
    #[error("percentile {0} outside [0, 1]")]
    InvalidPercentile(String),
}

pub fn ratio(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Decimal reading of a fraction `p`, exact to nine places.
pub fn fraction(p: f64) -> Result<BigRational, InsightError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(InsightError::InvalidPercentile(p.to_string()));
    }
    let scale = 1_000_000_000i64;
    Ok(BigRational::new(BigInt::from((p * scale as f64).round() as i64), BigInt::from(scale)))
}

/// Linear interpolation at rank `(n - 1) * p` over sorted values.
pub fn quantile_sorted(sorted: &[i64], p: &BigRational) -> Result<BigRational, InsightError> {
    let rationals: Vec<BigRational> = sorted.iter().map(|&x| ratio(x)).collect();
    quantile_rational(&rationals, p)
}

/// [`quantile_sorted`] over sorted rationals.
pub fn quantile_rational(sorted: &[BigRational], p: &BigRational) -> Result<BigRational, InsightError> {
    if sorted.is_empty() {
        return Err(InsightError::EmptyInput);
    }
    if p.is_negative() || *p > BigRational::one() {
        return Err(InsightError::InvalidPercentile(p.to_string()));
    }
    let h = ratio(sorted.len() as i64 - 1) * p;
    let lo = h.floor();
    let frac = &h - &lo;
    let i = lo.to_integer().to_usize().expect("rank fits");
    let base = &sorted[i];
    if frac.is_zero() || i + 1 >= sorted.len() {
        return Ok(base.clone());
    }
    Ok(base + frac * (&sorted[i + 1] - base))
}

/// Exact quantile of unsorted values.
pub fn quantile_exact(values: &[i64], p: &BigRational) -> Result<BigRational, InsightError> {
    let mut v = values.to_vec();
    v.sort_unstable();
    quantile_sorted(&v, p)
}

pub fn quantile(values: &[i64], p: f64) -> Result<f64, InsightError> {
    Ok(quantile_exact(values, &fraction(p)?)?.to_f64().expect("finite"))
}

/// Nearest integer, ties up.
pub fn round_rational(x: &BigRational) -> Money {
    (x + BigRational::new(BigInt::one(), BigInt::from(2))).floor().to_integer().to_i64().expect("fits in i64")
}

/// Drops values outside the 3·IQR fence, removing at most 10% of the input
/// (farthest first). Output is sorted.
pub fn prune_outliers(values: &[i64]) -> Result<Vec<i64>, InsightError> {
    if values.len() < 4 {
        return Err(InsightError::TooFewValues(values.len()));
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let q1 = quantile_sorted(&v, &BigRational::new(1.into(), 4.into()))?;
    let q3 = quantile_sorted(&v, &BigRational::new(3.into(), 4.into()))?;
    let iqr = &q3 - &q1;
    let lo = &q1 - ratio(IQR_FENCE) * &iqr;
    let hi = &q3 + ratio(IQR_FENCE) * &iqr;
    let distance = |x: i64| {
        let x = ratio(x);
        if x < lo {
            &lo - x
        } else if x > hi {
            x - &hi
        } else {
            BigRational::zero()
        }
    };
    let mut outside: Vec<(BigRational, usize)> =
        v.iter().enumerate().map(|(i, &x)| (distance(x), i)).filter(|(d, _)| !d.is_zero()).collect();
    outside.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let cap = v.len() / 10;
    let mut drop = vec![false; v.len()];
    for (_, i) in outside.into_iter().take(cap) {
        drop[i] = true;
    }
    Ok(v.into_iter().zip(drop).filter(|(_, d)| !d).map(|(x, _)| x).collect())
}

fn prune_or_keep(values: &[i64]) -> Vec<i64> {
    prune_outliers(values).unwrap_or_else(|_| {
        let mut v = values.to_vec();
        v.sort_unstable();
        v
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bucket_edges: Vec<Money>,
    pub counts: Vec<u64>,
}

/// Smallest 1/2/5·10^m not below `span / target`.
pub fn nice_width(span: &BigRational, target: usize) -> Money {
    let want = span / ratio(target.max(1) as i64);
    let mut scale: Money = 1;
    loop {
        for m in [1, 2, 5] {
            let w = m * scale;
            if ratio(w) >= want {
                return w;
            }
        }
        scale *= 10;
    }
}

/// Equal-width histogram over `[p1, p99]` of the pruned values. Tail values
/// are clamped into the outer buckets.
pub fn histogram(values: &[i64], target_buckets: usize) -> Result<Histogram, InsightError> {
    if values.is_empty() {
        return Err(InsightError::EmptyInput);
    }
    let v = prune_or_keep(values);
    let lo = quantile_sorted(&v, &BigRational::new(1.into(), 100.into()))?;
    let hi = quantile_sorted(&v, &BigRational::new(99.into(), 100.into()))?;
    let width = nice_width(&(&hi - &lo), target_buckets);
    let start = (&lo / ratio(width)).floor().to_integer().to_i64().expect("fits") * width;
    let m = ((&hi - ratio(start)) / ratio(width)).ceil().to_integer().to_i64().expect("fits").max(1);
    let bucket_edges: Vec<Money> = (0..=m).map(|i| start + i * width).collect();
    let mut counts = vec![0u64; m as usize];
    for x in v {
        let idx = (x - start).div_euclid(width).clamp(0, m - 1);
        counts[idx as usize] += 1;
    }
    Ok(Histogram { bucket_edges, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub p10: Money,
    pub p50: Money,
    pub p90: Money,
    pub n: u64,
}

/// Unrounded p10/p50/p90.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactSummary {
    pub p10: BigRational,
    pub p50: BigRational,
    pub p90: BigRational,
}

impl ExactSummary {
    pub fn of(values: &[i64]) -> Result<Self, InsightError> {
        let mut v = values.to_vec();
        v.sort_unstable();
        let pct = |p: i64| quantile_sorted(&v, &BigRational::new(p.into(), 100.into()));
        Ok(ExactSummary { p10: pct(10)?, p50: pct(50)?, p90: pct(90)? })
    }

    pub fn rounded(&self, n: u64) -> QuantileSummary {
        QuantileSummary {
            p10: round_rational(&self.p10),
            p50: round_rational(&self.p50),
            p90: round_rational(&self.p90),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Empirical,
    Smoothed,
}

/// `(n·empirical + τ·ancestor) / (n + τ)` per percentile.
pub fn shrink(empirical: &ExactSummary, ancestor: &ExactSummary, n: u64, tau: u32) -> ExactSummary {
    let n = ratio(n as i64);
    let t = ratio(tau as i64);
    let total = &n + &t;
    let mix = |e: &BigRational, a: &BigRational| (&n * e + &t * a) / &total;
    ExactSummary {
        p10: mix(&empirical.p10, &ancestor.p10),
        p50: mix(&empirical.p50, &ancestor.p50),
        p90: mix(&empirical.p90, &ancestor.p90),
    }
}

/// Summarizes a cohort, borrowing from the nearest ancestor (in chain order)
/// holding at least `3·τ` values. Without one the summary is empirical.
pub fn smooth(values: &[i64], ancestors: &[Vec<i64>], tau: u32) -> Result<(QuantileSummary, Provenance), InsightError> {
    if values.is_empty() {
        return Err(InsightError::EmptyInput);
    }
    let own = prune_or_keep(values);
    let empirical = ExactSummary::of(&own)?;
    let n = values.len() as u64;
    let ancestor = ancestors.iter().find(|a| tau > 0 && a.len() as u64 >= 3 * tau as u64);
    match ancestor {
        Some(a) => {
            let anc = ExactSummary::of(&prune_or_keep(a))?;
            Ok((shrink(&empirical, &anc, own.len() as u64, tau).rounded(n), Provenance::Smoothed))
        }
        None => Ok((empirical.rounded(n), Provenance::Empirical)),
    }
}

/// Parent of a key: the first attribute in [`ANCESTOR_DROP_ORDER`] that it
/// carries is removed. Title and country are never dropped.
pub fn parent_key(key: &CohortKey, catalog: &[SliceType]) -> Option<CohortKey> {
    let attr = ANCESTOR_DROP_ORDER.into_iter().find(|a| key.values.contains_key(a))?;
    let mut values = key.values.clone();
    values.remove(&attr);
    let attrs: Vec<Attribute> = values.keys().copied().collect();
    Some(CohortKey { slice_type: slice_type_name(&attrs, catalog), values })
}

pub fn ancestor_chain(key: &CohortKey, catalog: &[SliceType]) -> Vec<CohortKey> {
    let mut out = Vec::new();
    let mut cur = key.clone();
    while let Some(p) = parent_key(&cur, catalog) {
        out.push(p.clone());
        cur = p;
    }
    out
}

fn slice_type_name(attrs: &[Attribute], catalog: &[SliceType]) -> String {
    let mut want = attrs.to_vec();
    want.sort();
    for st in catalog {
        let mut have = st.attribute_set.clone();
        have.sort();
        if have == want {
            return st.name.clone();
        }
    }
    Attribute::ALL.iter().filter(|a| want.contains(a)).map(|a| a.as_str()).collect::<Vec<_>>().join("-")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeInsight {
    pub summary: QuantileSummary,
    pub histogram: Histogram,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompensationInsight {
    pub cohort: CohortKey,
    pub currency: String,
    pub n: u64,
    pub types: BTreeMap<CompensationType, TypeInsight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightConfig {
    pub tau: u32,
    pub target_buckets: usize,
}

impl Default for InsightConfig {
    fn default() -> Self {
        InsightConfig { tau: DEFAULT_TAU, target_buckets: DEFAULT_TARGET_BUCKETS }
    }
}

/// Values of one compensation type for an arbitrary (ancestor) key, pooled
/// from the covering slice type with the fewest attributes.
fn pooled_values(
    key: &CohortKey,
    ty: CompensationType,
    by_cohort: &BTreeMap<&CohortKey, Vec<&DeidentifiedEntry>>,
    catalog: &[SliceType],
) -> Vec<i64> {
    let covering = catalog
        .iter()
        .filter(|st| key.values.keys().all(|a| st.has(*a)))
        .min_by_key(|st| (st.attribute_set.len(), st.name.clone()));
    let Some(st) = covering else { return Vec::new() };
    by_cohort
        .iter()
        .filter(|(c, _)| c.slice_type == st.name && key.values.iter().all(|(a, v)| c.get(*a) == Some(v)))
        .flat_map(|(_, es)| es.iter().filter_map(|e| e.compensation.get(ty)))
        .collect()
}

/// The offline workflow: one insight per released cohort.
pub fn compute_insights(
    dataset: &OfflineDataset,
    catalog: &[SliceType],
    policies: &BTreeMap<String, ReleasePolicy>,
    config: InsightConfig,
) -> Vec<CompensationInsight> {
    let mut by_cohort: BTreeMap<&CohortKey, Vec<&DeidentifiedEntry>> = BTreeMap::new();
    for e in dataset.entries() {
        by_cohort.entry(&e.cohort).or_default().push(e);
    }
    let mut out = Vec::new();
    for (key, entries) in &by_cohort {
        let k = policies.get(&key.slice_type).map_or(1, |p| p.min_threshold) as usize;
        if entries.len() < k {
            continue;
        }
        let chain = ancestor_chain(key, catalog);
        let mut types = BTreeMap::new();
        for ty in CompensationType::ALL {
            let values: Vec<i64> = entries.iter().filter_map(|e| e.compensation.get(ty)).collect();
            if values.is_empty() || (ty != CompensationType::BaseSalary && values.len() < k) {
                continue;
            }
            let ancestors: Vec<Vec<i64>> = chain.iter().map(|a| pooled_values(a, ty, &by_cohort, catalog)).collect();
            let (summary, provenance) = smooth(&values, &ancestors, config.tau).expect("non-empty");
            let histogram = histogram(&values, config.target_buckets).expect("non-empty");
            types.insert(ty, TypeInsight { summary, histogram, provenance });
        }
        out.push(CompensationInsight {
            cohort: (*key).clone(),
            currency: entries[0].compensation.currency.clone(),
            n: entries.len() as u64,
            types,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub generation: u64,
    pub config_version: u32,
    pub seed: u64,
    pub cohorts: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreLine {
    key: String,
    insight: CompensationInsight,
}

/// Generational key-value store of insights keyed by cohort hash. The
/// `CURRENT` file names the live generation and is swapped atomically.
pub struct InsightStore {
    meta: StoreMeta,
    entries: BTreeMap<String, CompensationInsight>,
}

impl InsightStore {
    pub fn generation_dir(root: &Path, generation: u64) -> PathBuf {
        root.join(format!("gen-{generation:06}"))
    }

    pub fn current_generation(root: &Path) -> std::io::Result<Option<u64>> {
        let path = root.join("CURRENT");
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path)?;
        let n = text.trim().strip_prefix("gen-").and_then(|s| s.parse().ok());
        n.map(Some).ok_or_else(|| std::io::Error::other(format!("bad CURRENT file: {text}")))
    }

    pub fn from_insights(insights: Vec<CompensationInsight>, meta: StoreMeta) -> Self {
        let entries = insights.into_iter().map(|i| (i.cohort.hash_hex(), i)).collect();
        InsightStore { meta, entries }
    }

    /// Writes a new generation under `root` and makes it current.
    pub fn publish(
        root: &Path,
        insights: Vec<CompensationInsight>,
        config_version: u32,
        seed: u64,
    ) -> std::io::Result<InsightStore> {
        std::fs::create_dir_all(root)?;
        let generation = Self::current_generation(root)?.map_or(1, |g| g + 1);
        let meta = StoreMeta { generation, config_version, seed, cohorts: insights.len() };
        let store = Self::from_insights(insights, meta);
        let dir = Self::generation_dir(root, generation);
        std::fs::create_dir_all(&dir)?;
        let mut text = String::new();
        for (key, insight) in &store.entries {
            text.push_str(&serde_json::to_string(&StoreLine { key: key.clone(), insight: insight.clone() }).unwrap());
            text.push('\n');
        }
        write_atomic(&dir.join("store.jsonl"), text.as_bytes())?;
        write_atomic(&dir.join("meta.json"), serde_json::to_string_pretty(&store.meta).unwrap().as_bytes())?;
        write_atomic(&root.join("CURRENT"), format!("gen-{generation:06}\n").as_bytes())?;
        Ok(store)
    }

    pub fn open(root: &Path) -> std::io::Result<InsightStore> {
        let generation = Self::current_generation(root)?
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no insight generation published"))?;
        let dir = Self::generation_dir(root, generation);
        let meta: StoreMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?).map_err(std::io::Error::other)?;
        let mut entries = BTreeMap::new();
        for line in std::fs::read_to_string(dir.join("store.jsonl"))?.lines().filter(|l| !l.is_empty()) {
            let l: StoreLine = serde_json::from_str(line).map_err(std::io::Error::other)?;
            entries.insert(l.key, l.insight);
        }
        Ok(InsightStore { meta, entries })
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn get(&self, key: &CohortKey) -> Option<&CompensationInsight> {
        self.entries.get(&key.hash_hex())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insights(&self) -> impl Iterator<Item = &CompensationInsight> {
        self.entries.values()
    }

    /// Same slice type and values except the region.
    pub fn siblings(&self, key: &CohortKey) -> Vec<&CompensationInsight> {
        if key.get(Attribute::Region).is_none() {
            return Vec::new();
        }
        let mut out: Vec<&CompensationInsight> = self
            .entries
            .values()
            .filter(|i| {
                i.cohort.slice_type == key.slice_type
                    && i.cohort.get(Attribute::Region) != key.get(Attribute::Region)
                    && i.cohort.values.len() == key.values.len()
                    && key.values.iter().all(|(a, v)| *a == Attribute::Region || i.cohort.get(*a) == Some(v))
            })
            .collect();
        out.sort_by(|a, b| a.cohort.cmp(&b.cohort));
        out
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("member has not contributed within the last year")]
    NotEligible,
    #[error("no insight available for this cohort")]
    CohortUnavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightResponse {
    pub insight: CompensationInsight,
    pub siblings: Vec<CompensationInsight>,
}

/// Give-to-get gated lookup.
pub fn query_insight(
    store: &InsightStore,
    verification: &VerificationStore,
    key: &CohortKey,
    member_id: &str,
    now: Timestamp,
) -> Result<InsightResponse, QueryError> {
    if !verification.has_submitted_within(member_id, GIVE_TO_GET_WINDOW, now) {
        return Err(QueryError::NotEligible);
    }
    let insight = store.get(key).ok_or(QueryError::CohortUnavailable)?.clone();
    let siblings = store.siblings(key).into_iter().cloned().collect();
    Ok(InsightResponse { insight, siblings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_slice_catalog, CompensationData};
    use crate::timestamp::GeneralizedTimestamp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference quantile over i128 fixed-point: returns the value scaled
    /// by `den * den_p` as an exact fraction `(num, den)`.
    fn oracle_quantile(values: &[i64], pn: i128, pd: i128) -> (i128, i128) {
        let mut v: Vec<i128> = values.iter().map(|&x| x as i128).collect();
        v.sort();
        let n = v.len() as i128;
        let hn = (n - 1) * pn; // rank = hn / pd
        let i = (hn / pd) as usize;
        let rem = hn % pd;
        if rem == 0 || i + 1 >= v.len() {
            return (v[i], 1);
        }
        (v[i] * pd + rem * (v[i + 1] - v[i]), pd)
    }

    fn eq_frac(r: &BigRational, (num, den): (i128, i128)) -> bool {
        *r == BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<i64> = (1..=9).collect();
        assert_eq!(quantile(&v, 0.5).unwrap(), 5.0);
        assert_eq!(quantile(&v, 0.1).unwrap(), 1.8);
        assert_eq!(quantile(&[7], 0.3).unwrap(), 7.0);
        assert_eq!(quantile(&[], 0.3), Err(InsightError::EmptyInput));
        assert!(quantile(&v, 1.5).is_err());
    }

    #[test]
    fn pruning_examples() {
        let mut v = vec![50_000; 9];
        v.push(5_000_000);
        assert_eq!(prune_outliers(&v).unwrap(), vec![50_000; 9]);
        assert_eq!(prune_outliers(&[3; 6]).unwrap(), vec![3; 6]);
        let u: Vec<i64> = (1..=100).collect();
        assert_eq!(prune_outliers(&u).unwrap(), u);
        assert_eq!(prune_outliers(&[1, 2, 3]), Err(InsightError::TooFewValues(3)));
    }

    #[test]
    fn pruning_caps_at_ten_percent() {
        // 20 values, 4 far outliers: only 2 may go, the farthest ones.
        let mut v = vec![100; 16];
        v.extend([10_000, 20_000, 30_000, 40_000]);
        let p = prune_outliers(&v).unwrap();
        assert_eq!(p.len(), 18);
        assert_eq!(&p[16..], &[10_000, 20_000]);
    }

    #[test]
    fn histogram_examples() {
        let v: Vec<i64> = (0..100).map(|i| i * 1_000 + 500).collect();
        let h = histogram(&v, 10).unwrap();
        assert_eq!(h.bucket_edges, (0..=10).map(|i| i * 10_000).collect::<Vec<_>>());
        assert_eq!(h.counts, vec![10; 10]);

        let h = histogram(&[42; 7], 10).unwrap();
        assert_eq!(h.counts, vec![7]);
        assert_eq!(h.bucket_edges, vec![42, 43]);

        let mut two = vec![10_000; 20];
        two.extend(vec![90_000; 20]);
        let h = histogram(&two, 8).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 40);
        assert_eq!(h.counts.first(), Some(&20));
        assert_eq!(h.counts.last(), Some(&20));
        assert!(h.counts[1..h.counts.len() - 1].iter().all(|&c| c == 0));
    }

    #[test]
    fn nice_widths() {
        assert_eq!(nice_width(&ratio(97), 10), 10);
        assert_eq!(nice_width(&ratio(100), 10), 10);
        assert_eq!(nice_width(&ratio(101), 10), 20);
        assert_eq!(nice_width(&ratio(300), 10), 50);
        assert_eq!(nice_width(&ratio(0), 10), 1);
    }

    #[test]
    fn smoothing_identical_cohort() {
        let own = vec![110_000; 6];
        let ancestor: Vec<i64> = (0..31).map(|i| 80_000 + i * 1_000).collect();
        assert_eq!(ExactSummary::of(&ancestor).unwrap().p50, ratio(95_000));
        let (s, prov) = smooth(&own, &[ancestor], 10).unwrap();
        assert_eq!(s.p50, 100_625);
        assert_eq!(prov, Provenance::Smoothed);
    }

    #[test]
    fn smoothing_without_big_ancestor_is_empirical() {
        let own = vec![110_000; 6];
        let small: Vec<i64> = vec![95_000; 29];
        let (s, prov) = smooth(&own, &[small], 10).unwrap();
        assert_eq!((s.p50, prov), (110_000, Provenance::Empirical));
    }

    #[test]
    fn smoothing_fixed_point_and_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<i64> = (0..40).map(|_| rng.gen_range(50_000..150_000)).collect();
        let (s, _) = smooth(&v, &[v.clone()], 10).unwrap();
        assert_eq!(s, ExactSummary::of(&prune_or_keep(&v)).unwrap().rounded(40));

        let big: Vec<i64> = (0..10_000).map(|_| rng.gen_range(100_000..200_000)).collect();
        let anc: Vec<i64> = vec![20_000; 100];
        let (s, _) = smooth(&big, &[anc], 10).unwrap();
        let emp = quantile(&big, 0.5).unwrap();
        assert!((s.p50 as f64 - emp).abs() / emp < 0.002);
    }

    #[test]
    fn sensitivity_is_damped() {
        let tau = 10;
        let anc: Vec<i64> = (0..50).map(|i| 90_000 + i * 500).collect();
        let a = ExactSummary::of(&anc).unwrap();
        let v: Vec<i64> = vec![100_000, 104_000, 108_000, 112_000, 116_000];
        let mut v2 = v.clone();
        v2.push(200_000);
        let (s1, _) = smooth(&v, &[anc.clone()], tau).unwrap();
        let (s2, _) = smooth(&v2, &[anc], tau).unwrap();
        let e1 = ExactSummary::of(&v).unwrap().p50.to_f64().unwrap();
        let e2 = ExactSummary::of(&v2).unwrap().p50.to_f64().unwrap();
        let (w1, w2) = (5.0 / 15.0, 6.0 / 16.0);
        let bound = w2 * (e2 - e1).abs() + (w2 - w1) * (e1 - a.p50.to_f64().unwrap()).abs();
        assert!(((s2.p50 - s1.p50) as f64).abs() <= bound + 1.0);
    }

    #[test]
    fn ancestor_chain_order() {
        let catalog = default_slice_catalog();
        let key: CohortKey =
            "title-company-country-region:title=t,company=c,country=US,region=r".parse().unwrap();
        let chain = ancestor_chain(&key, &catalog);
        let names: Vec<_> = chain.iter().map(|k| k.slice_type.as_str()).collect();
        assert_eq!(names, vec!["title-country-region", "title-country"]);
        assert_eq!(chain[1].to_string(), "title-country:title=t,country=US");
    }

    fn entry(key: &CohortKey, base: Money) -> DeidentifiedEntry {
        DeidentifiedEntry {
            cohort: key.clone(),
            generalized_timestamp: GeneralizedTimestamp::exact(Timestamp(0)),
            compensation: CompensationData::base("USD", base),
        }
    }

    #[test]
    fn insights_store_and_gated_query() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = vec![default_slice_catalog().remove(0)];
        let policies: BTreeMap<_, _> = [(catalog[0].name.clone(), ReleasePolicy::new(catalog[0].name.clone(), 5))].into();
        let sf: CohortKey = "title-country-region:title=t,country=US,region=sf".parse().unwrap();
        let ny: CohortKey = "title-country-region:title=t,country=US,region=ny".parse().unwrap();
        let mut ds = OfflineDataset::open(&dir.path().join("off")).unwrap();
        let entries: Vec<_> = (0..5).map(|i| entry(&sf, 100_000 + i)).chain((0..6).map(|i| entry(&ny, 90_000 + i))).collect();
        ds.append_for_test(entries);
        let insights = compute_insights(&ds, &catalog, &policies, InsightConfig::default());
        assert_eq!(insights.len(), 2);
        let root = dir.path().join("insights");
        InsightStore::publish(&root, insights.clone(), 1, 7).unwrap();
        let store = InsightStore::open(&root).unwrap();
        assert_eq!(store.meta().generation, 1);
        assert_eq!(store.len(), 2);

        let ver = VerificationStore::in_memory();
        let now = Timestamp(400 * SECONDS_PER_DAY);
        assert_eq!(query_insight(&store, &ver, &sf, "m", now), Err(QueryError::NotEligible));
        ver.restore("m", Some(Timestamp(now.0 - 364 * SECONDS_PER_DAY)));
        let r = query_insight(&store, &ver, &sf, "m", now).unwrap();
        assert_eq!(r.insight.cohort, sf);
        assert_eq!(r.siblings.len(), 1);
        assert_eq!(r.siblings[0].cohort, ny);
        let la: CohortKey = "title-country-region:title=t,country=US,region=la".parse().unwrap();
        assert_eq!(query_insight(&store, &ver, &la, "m", now), Err(QueryError::CohortUnavailable));
        ver.restore("m", Some(Timestamp(now.0 - 366 * SECONDS_PER_DAY)));
        assert_eq!(query_insight(&store, &ver, &sf, "m", now), Err(QueryError::NotEligible));

        InsightStore::publish(&root, insights, 1, 7).unwrap();
        assert_eq!(InsightStore::open(&root).unwrap().meta().generation, 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn quantile_matches_oracle(v in prop::collection::vec(-1_000_000i64..1_000_000, 1..60), pct in 0i128..=100) {
            let got = quantile_exact(&v, &BigRational::new(BigInt::from(pct as i64), BigInt::from(100))).unwrap();
            prop_assert!(eq_frac(&got, oracle_quantile(&v, pct, 100)));
        }

        #[test]
        fn smoothing_preserves_order(
            v in prop::collection::vec(10_000i64..500_000, 1..30),
            a in prop::collection::vec(10_000i64..500_000, 30..80),
        ) {
            let (s, _) = smooth(&v, &[a], 10).unwrap();
            prop_assert!(s.p10 <= s.p50 && s.p50 <= s.p90);
        }

        #[test]
        fn histogram_conserves_pruned_count(v in prop::collection::vec(0i64..1_000_000, 1..80), t in 1usize..20) {
            let h = histogram(&v, t).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<u64>() as usize, prune_or_keep(&v).len());
            prop_assert!(h.bucket_edges.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(h.bucket_edges.len(), h.counts.len() + 1);
        }
    }
}
