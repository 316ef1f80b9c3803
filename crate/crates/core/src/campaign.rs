//! Two-wave collection campaign simulator on a virtual clock.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Pareto};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Attribute, CohortKey, Timestamp, SECONDS_PER_DAY};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CampaignError {
    #[error("first wave produced no responses")]
    ZeroResponses,
    #[error("no similar cohort with a completed first wave")]
    NoSimilarCohorts,
    #[error("invalid wave: r1 = {r1}, s1 = {s1}")]
    InvalidWave { r1: u64, s1: u64 },
}

/// Second-wave size `max(0, ⌈α·r1/s1⌉ − r1)`, computed exactly.
pub fn plan_second_wave(alpha: u64, r1: u64, s1: u64) -> Result<u64, CampaignError> {
    if s1 == 0 {
        return Err(CampaignError::ZeroResponses);
    }
    if r1 == 0 || s1 > r1 {
        return Err(CampaignError::InvalidWave { r1, s1 });
    }
    let needed = (alpha as u128 * r1 as u128).div_ceil(s1 as u128);
    Ok(needed.saturating_sub(r1 as u128).min(u64::MAX as u128) as u64)
}

/// Response-count-weighted mean of `(γ, responses)` pairs.
pub fn estimate_response_rate(similar: &[(f64, u64)]) -> Result<f64, CampaignError> {
    let total: u64 = similar.iter().map(|(_, s)| s).sum();
    if total == 0 {
        return Err(CampaignError::NoSimilarCohorts);
    }
    Ok(similar.iter().map(|(g, s)| g * *s as f64).sum::<f64>() / total as f64)
}

/// Default similarity: same title, different cohort.
pub fn is_similar(a: &CohortKey, b: &CohortKey) -> bool {
    a != b && a.get(Attribute::Title).is_some() && a.get(Attribute::Title) == b.get(Attribute::Title)
}

/// Response probability plus a three-part delay mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseModel {
    pub base_rate: f64,
    pub fast_weight: f64,
    pub fast_mean_secs: f64,
    pub medium_weight: f64,
    pub medium_mean_secs: f64,
    pub tail_scale_secs: f64,
    pub tail_shape: f64,
}

impl Default for ResponseModel {
    fn default() -> Self {
        ResponseModel {
            base_rate: 0.15,
            fast_weight: 0.80,
            fast_mean_secs: 8.0 * 3600.0,
            medium_weight: 0.07,
            medium_mean_secs: 3.0 * SECONDS_PER_DAY as f64,
            tail_scale_secs: 5.0 * SECONDS_PER_DAY as f64,
            tail_shape: 1.1,
        }
    }
}

impl ResponseModel {
    /// Everyone answers at once.
    pub fn immediate() -> Self {
        ResponseModel {
            base_rate: 1.0,
            fast_weight: 1.0,
            fast_mean_secs: 0.0,
            medium_weight: 0.0,
            medium_mean_secs: 0.0,
            tail_scale_secs: 0.0,
            tail_shape: 1.0,
        }
    }

    /// Delay in whole seconds; the tail is capped at ten years.
    pub fn sample_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        let u: f64 = rng.gen();
        let secs = if u < self.fast_weight {
            exp_sample(self.fast_mean_secs, rng)
        } else if u < self.fast_weight + self.medium_weight {
            exp_sample(self.medium_mean_secs, rng)
        } else if self.tail_scale_secs > 0.0 {
            Pareto::new(self.tail_scale_secs, self.tail_shape).expect("valid pareto").sample(rng)
        } else {
            0.0
        };
        secs.min(3650.0 * SECONDS_PER_DAY as f64).round() as i64
    }
}

fn exp_sample<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Exp::new(1.0 / mean).expect("positive rate").sample(rng)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub cohort_key: CohortKey,
    pub population: u64,
}

impl CohortSpec {
    pub fn member_ids(&self) -> Vec<String> {
        let tag = &self.cohort_key.hash_hex()[..10];
        (0..self.population).map(|i| format!("m-{tag}-{i:06}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub alpha: u64,
    pub start: Timestamp,
    /// Gap between the two waves; first-wave responses are counted up to it.
    pub wave_gap_secs: i64,
    pub min_population: u64,
    pub seed: u64,
}

impl CampaignConfig {
    pub fn new(alpha: u64, seed: u64, min_threshold: u32) -> Self {
        CampaignConfig {
            alpha,
            start: Timestamp(1_704_067_200), // 2024-01-01
            wave_gap_secs: 7 * SECONDS_PER_DAY,
            min_population: 10 * min_threshold as u64,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignPlan {
    pub cohort: CohortKey,
    pub members: Vec<String>,
    pub alpha: u64,
    pub r1: u64,
    pub s1: u64,
    pub gamma: Option<f64>,
    pub r2: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub member_id: String,
    pub cohort_key: CohortKey,
    pub email_at: Timestamp,
    pub responded: bool,
    pub submitted_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignOutcome {
    pub plans: Vec<CampaignPlan>,
    pub history: Vec<HistoryRecord>,
}

impl CampaignOutcome {
    /// Responses in submission order, ties broken by member id.
    pub fn submissions(&self) -> Vec<&HistoryRecord> {
        let mut out: Vec<&HistoryRecord> = self.history.iter().filter(|h| h.submitted_at.is_some()).collect();
        out.sort_by(|a, b| (a.submitted_at, &a.member_id).cmp(&(b.submitted_at, &b.member_id)));
        out
    }
}

fn cohort_rng(seed: u64, cohort: &CohortKey, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(stream.as_bytes());
    h.update(cohort.to_string().as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Cohorts large enough to be targeted.
pub fn select_cohorts(cohorts: &[CohortSpec], min_population: u64) -> Vec<CohortSpec> {
    cohorts.iter().filter(|c| c.population >= min_population).cloned().collect()
}

fn email<R: Rng>(
    members: &[String],
    cohort: &CohortKey,
    at: Timestamp,
    model: &ResponseModel,
    rng: &mut R,
    out: &mut Vec<HistoryRecord>,
) {
    for m in members {
        let responded = rng.gen_bool(model.base_rate.clamp(0.0, 1.0));
        let submitted_at = responded.then(|| at.plus_secs(model.sample_delay(rng)));
        out.push(HistoryRecord {
            member_id: m.clone(),
            cohort_key: cohort.clone(),
            email_at: at,
            responded,
            submitted_at,
        });
    }
}

/// Runs both waves for every eligible cohort. Each cohort draws from its
/// own seeded stream, so results do not depend on which other cohorts are
/// present, except through the similar-cohort fallback.
pub fn run_campaign(cohorts: &[CohortSpec], model: &ResponseModel, config: &CampaignConfig) -> CampaignOutcome {
    let mut cohorts = select_cohorts(cohorts, config.min_population);
    cohorts.sort_by(|a, b| a.cohort_key.cmp(&b.cohort_key));
    let wave2_at = config.start.plus_secs(config.wave_gap_secs);

    let mut plans = Vec::new();
    let mut history = Vec::new();
    let mut rngs = Vec::new();
    for c in &cohorts {
        let mut members = c.member_ids();
        members.shuffle(&mut cohort_rng(config.seed, &c.cohort_key, "order"));
        let mut rng = cohort_rng(config.seed, &c.cohort_key, "responses");
        let r1 = (members.len() as u64).min(config.alpha);
        let start = history.len();
        email(&members[..r1 as usize], &c.cohort_key, config.start, model, &mut rng, &mut history);
        let s1 = history[start..].iter().filter(|h| h.submitted_at.is_some_and(|t| t < wave2_at)).count() as u64;
        let gamma = (r1 > 0).then(|| s1 as f64 / r1 as f64);
        plans.push(CampaignPlan { cohort: c.cohort_key.clone(), members, alpha: config.alpha, r1, s1, gamma, r2: 0 });
        rngs.push(rng);
    }

    let first_waves: Vec<(CohortKey, f64, u64)> =
        plans.iter().filter_map(|p| p.gamma.map(|g| (p.cohort.clone(), g, p.s1))).collect();
    for (plan, rng) in plans.iter_mut().zip(rngs.iter_mut()) {
        let r2 = match plan_second_wave(plan.alpha, plan.r1, plan.s1) {
            Ok(r2) => r2,
            Err(CampaignError::ZeroResponses) => {
                let similar: Vec<(f64, u64)> = first_waves
                    .iter()
                    .filter(|(k, _, _)| is_similar(&plan.cohort, k))
                    .map(|(_, g, s)| (*g, *s))
                    .collect();
                match estimate_response_rate(&similar) {
                    Ok(g) if g > 0.0 => {
                        plan.gamma = Some(g);
                        ((plan.alpha as f64 / g).ceil() as u64).saturating_sub(plan.r1)
                    }
                    _ => 0,
                }
            }
            Err(_) => 0,
        };
        let remaining = plan.members.len() as u64 - plan.r1;
        plan.r2 = r2.min(remaining);
        let lo = plan.r1 as usize;
        let hi = lo + plan.r2 as usize;
        email(&plan.members[lo..hi], &plan.cohort, wave2_at, model, rng, &mut history);
    }
    CampaignOutcome { plans, history }
}

pub fn write_history(history: &[HistoryRecord]) -> String {
    let mut s = String::new();
    for h in history {
        s.push_str(&serde_json::to_string(h).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn read_history(text: &str) -> Result<Vec<HistoryRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// First-wave outcome counts keyed by cohort.
pub fn wave_summary(outcome: &CampaignOutcome) -> BTreeMap<CohortKey, (u64, u64, u64)> {
    outcome.plans.iter().map(|p| (p.cohort.clone(), (p.r1, p.s1, p.r2))).collect()
}
