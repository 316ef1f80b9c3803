//! Analyses over submission histories: response curves, availability under
//! thresholds and batch sizes, and batching-delay distributions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::campaign::HistoryRecord;
use crate::insights::{quantile_rational, ratio, InsightError};
use crate::model::{CohortKey, Timestamp, SECONDS_PER_DAY};

pub const BASELINE_THRESHOLD: u32 = 3;
pub const DELAY_PERCENTILES: [u32; 5] = [10, 30, 50, 70, 90];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HarnessError {
    #[error("history has no responses")]
    EmptyHistory,
    #[error("no cohort reaches the baseline threshold")]
    NoCohortsAtBaseline,
    #[error("threshold {0} below the baseline")]
    ThresholdBelowBaseline(u32),
    #[error("cohort has {n} entries, fewer than k = {k}")]
    CohortTooSmall { n: usize, k: u32 },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error(transparent)]
    Insight(#[from] InsightError),
}

/// Submission instants per cohort, sorted.
pub type SubmissionHistory = BTreeMap<CohortKey, Vec<Timestamp>>;

pub fn history_from_records(records: &[HistoryRecord]) -> SubmissionHistory {
    let mut out = SubmissionHistory::new();
    for r in records {
        if let Some(t) = r.submitted_at {
            out.entry(r.cohort_key.clone()).or_default().push(t);
        }
    }
    for v in out.values_mut() {
        v.sort();
    }
    out
}

pub fn cohort_sizes(history: &SubmissionHistory) -> Vec<u64> {
    history.values().map(|v| v.len() as u64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub days: i64,
    pub responses: u64,
    pub cum_pct: f64,
}

/// Cumulative share of responses received within `d` whole days of their
/// email, for `d` from 0 to the largest lapse.
pub fn response_curve(records: &[HistoryRecord]) -> Result<Vec<CurvePoint>, HarnessError> {
    let mut lapses: Vec<i64> = records
        .iter()
        .filter_map(|r| r.submitted_at.map(|s| (s.0 - r.email_at.0).max(0).div_euclid(SECONDS_PER_DAY)))
        .collect();
    if lapses.is_empty() {
        return Err(HarnessError::EmptyHistory);
    }
    lapses.sort_unstable();
    let total = lapses.len() as u64;
    let max = *lapses.last().unwrap();
    let mut out = Vec::with_capacity(max as usize + 1);
    let mut i = 0;
    for d in 0..=max {
        while i < lapses.len() && lapses[i] <= d {
            i += 1;
        }
        out.push(CurvePoint { days: d, responses: i as u64, cum_pct: pct(i as u64, total) });
    }
    Ok(out)
}

fn pct(num: u64, den: u64) -> f64 {
    (ratio(num as i64 * 100) / ratio(den as i64)).to_f64().unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AvailabilityPoint {
    pub k: u32,
    pub cohorts: u64,
    pub baseline: u64,
    pub pct: f64,
}

/// Share of baseline cohorts (n ≥ k0) that still reach each threshold.
pub fn cohort_availability(sizes: &[u64], thresholds: &[u32], k0: u32) -> Result<Vec<AvailabilityPoint>, HarnessError> {
    let baseline = sizes.iter().filter(|&&n| n >= k0 as u64).count() as u64;
    if baseline == 0 {
        return Err(HarnessError::NoCohortsAtBaseline);
    }
    thresholds
        .iter()
        .map(|&k| {
            if k < k0 {
                return Err(HarnessError::ThresholdBelowBaseline(k));
            }
            let cohorts = sizes.iter().filter(|&&n| n >= k as u64).count() as u64;
            Ok(AvailabilityPoint { k, cohorts, baseline, pct: pct(cohorts, baseline) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataAvailability {
    pub k: u32,
    pub released: u64,
    pub total: u64,
}

impl DataAvailability {
    pub fn fraction(&self) -> BigRational {
        if self.total == 0 {
            return BigRational::zero();
        }
        ratio(self.released as i64) / ratio(self.total as i64)
    }

    pub fn pct(&self) -> f64 {
        pct(self.released, self.total.max(1))
    }
}

/// `Σ⌊n/k⌋·k / Σn` over cohorts with at least the baseline count.
pub fn data_availability(sizes: &[u64], k: u32) -> Result<DataAvailability, HarnessError> {
    if k == 0 {
        return Err(HarnessError::ZeroBatch);
    }
    let k = k as u64;
    let kept: Vec<u64> = sizes.iter().copied().filter(|&n| n >= BASELINE_THRESHOLD as u64).collect();
    Ok(DataAvailability {
        k: k as u32,
        released: kept.iter().map(|n| n / k * k).sum(),
        total: kept.iter().sum(),
    })
}

/// Seconds each entry waits for its batch to fill. Entries of the trailing
/// partial batch are excluded.
pub fn batch_delays(instants: &[Timestamp], k: u32) -> Result<Vec<i64>, HarnessError> {
    if k == 0 {
        return Err(HarnessError::ZeroBatch);
    }
    if instants.len() < k as usize {
        return Err(HarnessError::CohortTooSmall { n: instants.len(), k });
    }
    let mut sorted = instants.to_vec();
    sorted.sort();
    Ok(sorted
        .chunks_exact(k as usize)
        .flat_map(|batch| {
            let last = batch.last().unwrap().0;
            batch.iter().map(move |t| last - t.0)
        })
        .collect())
}

/// `p`-th percentile (0–100) of a cohort's batching delays, in seconds.
pub fn batching_delays(instants: &[Timestamp], k: u32, p: u32) -> Result<BigRational, HarnessError> {
    let mut d = batch_delays(instants, k)?;
    d.sort_unstable();
    let r: Vec<BigRational> = d.into_iter().map(ratio).collect();
    Ok(quantile_rational(&r, &(ratio(p as i64) / ratio(100)))?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxStats {
    pub q1: BigRational,
    pub median: BigRational,
    pub q3: BigRational,
    pub lo: BigRational,
    pub hi: BigRational,
    pub outliers: Vec<BigRational>,
}

pub fn box_stats(values: &[BigRational]) -> Result<BoxStats, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Insight(InsightError::EmptyInput));
    }
    let mut v = values.to_vec();
    v.sort();
    let q = |n: i64| quantile_rational(&v, &(ratio(n) / ratio(4)));
    let (q1, median, q3) = (q(1)?, q(2)?, q(3)?);
    let spread = (&q3 - &q1) * BigRational::new(3.into(), 2.into());
    let lo = (&q1 - &spread).max(BigRational::zero());
    let hi = &q3 + &spread;
    let outliers = v.iter().filter(|x| **x < lo || **x > hi).cloned().collect();
    Ok(BoxStats { q1, median, q3, lo, hi, outliers })
}

pub fn box_stats_i64(values: &[i64]) -> Result<BoxStats, HarnessError> {
    box_stats(&values.iter().map(|&x| ratio(x)).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayBox {
    pub k: u32,
    pub percentile: u32,
    pub cohorts: usize,
    /// Box statistics in days.
    pub lo: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub hi: f64,
    pub outliers: Vec<f64>,
}

fn days(x: &BigRational) -> f64 {
    (x / ratio(SECONDS_PER_DAY)).to_f64().unwrap_or(0.0)
}

/// Per-cohort delay percentile, pooled across cohorts into one box per k.
pub fn delay_boxes(history: &SubmissionHistory, ks: &[u32], percentile: u32) -> Result<Vec<DelayBox>, HarnessError> {
    let mut out = Vec::new();
    for &k in ks {
        let per_cohort: Vec<BigRational> = history
            .values()
            .filter(|v| v.len() >= k as usize && v.len() >= BASELINE_THRESHOLD as usize)
            .map(|v| batching_delays(v, k, percentile))
            .collect::<Result<_, _>>()?;
        if per_cohort.is_empty() {
            continue;
        }
        let b = box_stats(&per_cohort)?;
        out.push(DelayBox {
            k,
            percentile,
            cohorts: per_cohort.len(),
            lo: days(&b.lo),
            q1: days(&b.q1),
            median: days(&b.median),
            q3: days(&b.q3),
            hi: days(&b.hi),
            outliers: b.outliers.iter().map(days).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub response_curve: Vec<CurvePoint>,
    pub cohort_availability: Vec<AvailabilityPoint>,
    pub data_availability: Vec<DataAvailability>,
    pub delays: Vec<DelayBox>,
}

/// Runs every analysis over a campaign history.
pub fn analyze(records: &[HistoryRecord], ks: &[u32]) -> Result<AnalysisReport, HarnessError> {
    let history = history_from_records(records);
    let sizes = cohort_sizes(&history);
    let thresholds: Vec<u32> = ks.iter().copied().filter(|&k| k >= BASELINE_THRESHOLD).collect();
    let mut delays = Vec::new();
    for p in DELAY_PERCENTILES {
        delays.extend(delay_boxes(&history, ks, p)?);
    }
    Ok(AnalysisReport {
        response_curve: response_curve(records)?,
        cohort_availability: cohort_availability(&sizes, &thresholds, BASELINE_THRESHOLD)?,
        data_availability: ks.iter().map(|&k| data_availability(&sizes, k)).collect::<Result<_, _>>()?,
        delays,
    })
}

// Report writers.

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{x}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n",
        x = W / 2.0,
        b = H - PAD,
        r = W - PAD,
    )
}

fn y_of(v: f64, max: f64) -> f64 {
    let max = if max > 0.0 { max } else { 1.0 };
    H - PAD - (v / max) * (H - 2.0 * PAD)
}

fn curve_svg(points: &[CurvePoint]) -> String {
    let mut s = svg_open("Cumulative responses (%) by days since email");
    let n = points.len().max(2) as f64 - 1.0;
    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", PAD + p.days as f64 / n * (W - 2.0 * PAD), y_of(p.cum_pct, 100.0)))
        .collect();
    let _ = writeln!(s, "<polyline class=\"curve\" fill=\"none\" stroke=\"steelblue\" points=\"{}\"/>", path.join(" "));
    s.push_str("</svg>\n");
    s
}

fn bar_svg(title: &str, bars: &[(u32, f64)]) -> String {
    let mut s = svg_open(title);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    for (i, (k, v)) in bars.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.15;
        let y = y_of(*v, 100.0);
        let _ = writeln!(
            s,
            "<rect class=\"bar\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"steelblue\"/>\n\
             <text x=\"{tx:.2}\" y=\"{ty:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{k}</text>",
            w = slot * 0.7,
            h = H - PAD - y,
            tx = x + slot * 0.35,
            ty = H - PAD + 14.0,
        );
    }
    s.push_str("</svg>\n");
    s
}

fn box_svg(title: &str, boxes: &[&DelayBox]) -> String {
    let mut s = svg_open(title);
    let max = boxes.iter().map(|b| b.outliers.iter().copied().fold(b.hi, f64::max)).fold(0.0, f64::max);
    let slot = (W - 2.0 * PAD) / boxes.len().max(1) as f64;
    for (i, b) in boxes.iter().enumerate() {
        let cx = PAD + (i as f64 + 0.5) * slot;
        let half = slot * 0.25;
        let _ = writeln!(
            s,
            "<g class=\"box\">\n\
             <line x1=\"{cx:.2}\" y1=\"{ylo:.2}\" x2=\"{cx:.2}\" y2=\"{yhi:.2}\" stroke=\"black\"/>\n\
             <rect x=\"{x:.2}\" y=\"{yq3:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"lightsteelblue\" stroke=\"black\"/>\n\
             <line x1=\"{x:.2}\" y1=\"{ym:.2}\" x2=\"{x2:.2}\" y2=\"{ym:.2}\" stroke=\"black\"/>\n\
             <text x=\"{cx:.2}\" y=\"{ty:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">k={k}</text>",
            ylo = y_of(b.lo, max),
            yhi = y_of(b.hi, max),
            x = cx - half,
            x2 = cx + half,
            w = 2.0 * half,
            yq3 = y_of(b.q3, max),
            h = (y_of(b.q1, max) - y_of(b.q3, max)).max(0.5),
            ym = y_of(b.median, max),
            ty = H - PAD + 14.0,
            k = b.k,
        );
        for o in &b.outliers {
            let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"none\" stroke=\"black\"/>", y_of(*o, max));
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(";")
}

/// Writes CSV tables and SVG plots into `dir`, returning the paths.
pub fn emit_report(report: &AnalysisReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> std::io::Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };

    let mut csv = String::from("days,cum_pct\n");
    for p in &report.response_curve {
        let _ = writeln!(csv, "{},{:.4}", p.days, p.cum_pct);
    }
    put("response_curve.csv", csv)?;
    put("response_curve.svg", curve_svg(&report.response_curve))?;

    let mut csv = String::from("k,cohorts,pct\n");
    for a in &report.cohort_availability {
        let _ = writeln!(csv, "{},{},{:.4}", a.k, a.cohorts, a.pct);
    }
    put("cohort_availability.csv", csv)?;
    let bars: Vec<(u32, f64)> = report.cohort_availability.iter().map(|a| (a.k, a.pct)).collect();
    put("cohort_availability.svg", bar_svg("Cohorts available (%) by minimum threshold", &bars))?;

    let mut csv = String::from("k,released,total,pct\n");
    for d in &report.data_availability {
        let _ = writeln!(csv, "{},{},{},{:.4}", d.k, d.released, d.total, d.pct());
    }
    put("data_availability.csv", csv)?;
    let bars: Vec<(u32, f64)> = report.data_availability.iter().map(|d| (d.k, d.pct())).collect();
    put("data_availability.svg", bar_svg("Data available (%) by batch size", &bars))?;

    let mut csv = String::from("k,percentile,cohorts,lo_days,q1_days,median_days,q3_days,hi_days,outliers_days\n");
    for b in &report.delays {
        let _ = writeln!(
            csv,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            b.k, b.percentile, b.cohorts, b.lo, b.q1, b.median, b.q3, b.hi, fmt_list(&b.outliers)
        );
    }
    put("batching_delays.csv", csv)?;
    for p in DELAY_PERCENTILES {
        let boxes: Vec<&DelayBox> = report.delays.iter().filter(|b| b.percentile == p).collect();
        if !boxes.is_empty() {
            put(&format!("batching_delays_p{p}.svg"), box_svg(&format!("P{p} batching delay (days) by batch size"), &boxes))?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn day(d: i64) -> Timestamp {
        Timestamp(d * SECONDS_PER_DAY)
    }

    fn rec(lapse_days: i64, i: usize) -> HistoryRecord {
        HistoryRecord {
            member_id: format!("m{i}"),
            cohort_key: "t:title=a,country=US".parse().unwrap(),
            email_at: day(0),
            responded: true,
            submitted_at: Some(day(lapse_days).plus_secs(600)),
        }
    }

    #[test]
    fn curve_examples() {
        let recs: Vec<_> = [0, 0, 0, 0, 1, 2, 3, 10, 60, 200].iter().enumerate().map(|(i, &d)| rec(d, i)).collect();
        let c = response_curve(&recs).unwrap();
        assert_eq!(c[1].cum_pct, 50.0);
        assert_eq!(c[0].cum_pct, 40.0);
        assert_eq!(c.last().unwrap().cum_pct, 100.0);
        assert!(c.windows(2).all(|w| w[0].cum_pct <= w[1].cum_pct));

        let same: Vec<_> = (0..5).map(|i| rec(0, i)).collect();
        assert_eq!(response_curve(&same).unwrap(), vec![CurvePoint { days: 0, responses: 5, cum_pct: 100.0 }]);
        assert_eq!(response_curve(&[]), Err(HarnessError::EmptyHistory));
    }

    #[test]
    fn availability_examples() {
        let sizes = [3, 3, 4, 5, 7, 12];
        let a = cohort_availability(&sizes, &[3, 5], 3).unwrap();
        assert_eq!((a[0].pct, a[1].pct), (100.0, 50.0));
        let big = [10, 11, 30];
        assert!(cohort_availability(&big, &[3, 5, 10], 3).unwrap().iter().all(|p| p.pct == 100.0));
        assert_eq!(cohort_availability(&[1, 2], &[3], 3), Err(HarnessError::NoCohortsAtBaseline));

        assert_eq!(data_availability(&[8], 5).unwrap().pct(), 62.5);
        assert_eq!(data_availability(&[8, 3, 17], 1).unwrap().pct(), 100.0);
        assert_eq!(data_availability(&[3, 3, 3], 3).unwrap().pct(), 100.0);
        assert_eq!(data_availability(&[2, 8], 5).unwrap().total, 8);
    }

    #[test]
    fn delay_examples() {
        let ts: Vec<_> = (1..=8).map(day).collect();
        let mut d = batch_delays(&ts, 5).unwrap();
        assert_eq!(d.iter().map(|x| x / SECONDS_PER_DAY).collect::<Vec<_>>(), vec![4, 3, 2, 1, 0]);
        d.sort();
        assert_eq!(batching_delays(&ts, 5, 50).unwrap(), ratio(2 * SECONDS_PER_DAY));
        assert!(batch_delays(&ts, 1).unwrap().iter().all(|&x| x == 0));
        assert_eq!(batch_delays(&[day(1); 3], 3).unwrap(), vec![0, 0, 0]);
        assert_eq!(batch_delays(&ts[..2], 3), Err(HarnessError::CohortTooSmall { n: 2, k: 3 }));
    }

    #[test]
    fn box_examples() {
        let b = box_stats_i64(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!((b.q1.clone(), b.q3.clone(), b.lo.clone(), b.hi.clone()), (ratio(1), ratio(3), ratio(0), ratio(6)));
        assert!(b.outliers.is_empty());
        let b = box_stats_i64(&[7; 4]).unwrap();
        assert_eq!((b.lo, b.hi), (ratio(7), ratio(7)));
        let b = box_stats_i64(&[1, 1, 1, 1, 100]).unwrap();
        assert_eq!(b.outliers, vec![ratio(100)]);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for c in 0..6 {
            for i in 0..(3 + c * 3) {
                let mut r = rec((i % 4) as i64, recs.len());
                r.cohort_key = format!("t:title=a{c},country=US").parse().unwrap();
                r.submitted_at = Some(day(i as i64 * 2));
                recs.push(r);
            }
        }
        let ks: Vec<u32> = (3..=15).collect();
        let report = analyze(&recs, &ks).unwrap();
        emit_report(&report, dir.path()).unwrap();
        let curve = std::fs::read_to_string(dir.path().join("response_curve.csv")).unwrap();
        assert!(curve.starts_with("days,cum_pct\n"));
        let avail = std::fs::read_to_string(dir.path().join("cohort_availability.csv")).unwrap();
        assert_eq!(avail.lines().count(), 14);
        let svg = std::fs::read_to_string(dir.path().join("batching_delays_p50.svg")).unwrap();
        let boxes = report.delays.iter().filter(|b| b.percentile == 50).count();
        assert_eq!(svg.matches("<g class=\"box\">").count(), boxes);
        assert!(boxes > 3);
    }

    proptest! {
        #[test]
        fn monotone_in_k(sizes in prop::collection::vec(1u64..40, 1..60)) {
            prop_assume!(sizes.iter().any(|&n| n >= 3));
            let ks: Vec<u32> = (3..=15).collect();
            let a = cohort_availability(&sizes, &ks, 3).unwrap();
            prop_assert!(a.windows(2).all(|w| w[0].cohorts >= w[1].cohorts));
            // Data availability is not monotone for every size mix; it is
            // bounded by 1 and exact at k = 1.
            prop_assert_eq!(data_availability(&sizes, 1).unwrap().fraction(), ratio(1));
            for k in 1..=15 {
                prop_assert!(data_availability(&sizes, k).unwrap().fraction() <= ratio(1));
            }
        }
    }
}
