//! Deterministic synthetic cohorts, members and compensation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use sha2::{Digest, Sha256};

use crate::campaign::CohortSpec;
use crate::harness::SubmissionHistory;
use crate::model::{
    Attribute, CohortKey, CompanySizeBand, CompensationData, CurrencyTable, MemberProfile, Timestamp, SECONDS_PER_DAY,
};
use crate::standardize::Standardizer;
use crate::submission::{MAX_BASE_SALARY_UNITS, MIN_BASE_SALARY_UNITS};

pub const UNIVERSE_SLICE_TYPE: &str = "title-country-region";

pub fn rng_for(seed: u64, tag: &str, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `n` distinct title-country-region keys drawn from the taxonomies, limited
/// to countries with a configured currency.
pub fn cohort_keys(standardizer: &Standardizer, currencies: &CurrencyTable, n: usize, seed: u64) -> Vec<CohortKey> {
    let regions: Vec<_> = standardizer
        .regions
        .entries()
        .iter()
        .filter(|r| r.country.as_deref().is_some_and(|c| currencies.local_currency(c).is_some()))
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..standardizer.titles.entries().len())
        .flat_map(|t| (0..regions.len()).map(move |r| (t, r)))
        .collect();
    pairs.shuffle(&mut rng_for(seed, "keys", ""));
    pairs
        .into_iter()
        .take(n)
        .map(|(t, r)| {
            let region = regions[r];
            let values = BTreeMap::from([
                (Attribute::Title, standardizer.titles.entries()[t].id.clone()),
                (Attribute::Country, region.country.clone().unwrap()),
                (Attribute::Region, region.id.clone()),
            ]);
            CohortKey { slice_type: UNIVERSE_SLICE_TYPE.to_string(), values }
        })
        .collect()
}

/// Cohort sizes: a third each of 3–4, 5–9 and 10–30 entries.
pub fn cohort_sizes(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = rng_for(seed, "sizes", "");
    let mut sizes: Vec<u64> = (0..n)
        .map(|i| match i % 3 {
            0 => rng.gen_range(3..=4),
            1 => rng.gen_range(5..=9),
            _ => rng.gen_range(10..=30),
        })
        .collect();
    sizes.shuffle(&mut rng);
    sizes
}

/// Submission instants over one year for each synthetic cohort.
pub fn synthetic_universe(
    standardizer: &Standardizer,
    currencies: &CurrencyTable,
    n_cohorts: usize,
    start: Timestamp,
    seed: u64,
) -> SubmissionHistory {
    let keys = cohort_keys(standardizer, currencies, n_cohorts, seed);
    let sizes = cohort_sizes(keys.len(), seed);
    keys.into_iter()
        .zip(sizes)
        .map(|(k, n)| {
            let mut rng = rng_for(seed, "instants", &k.to_string());
            let mut ts: Vec<Timestamp> =
                (0..n).map(|_| start.plus_secs(rng.gen_range(0..365 * SECONDS_PER_DAY))).collect();
            ts.sort();
            (k, ts)
        })
        .collect()
}

/// Campaign targets with populations in `[min_pop, max_pop]`.
pub fn cohort_specs(
    standardizer: &Standardizer,
    currencies: &CurrencyTable,
    n: usize,
    min_pop: u64,
    max_pop: u64,
    seed: u64,
) -> Vec<CohortSpec> {
    let mut rng = rng_for(seed, "populations", "");
    cohort_keys(standardizer, currencies, n, seed)
        .into_iter()
        .map(|cohort_key| CohortSpec { cohort_key, population: rng.gen_range(min_pop..=max_pop) })
        .collect()
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// A raw profile whose canonical form matches every attribute in `cohort`;
/// attributes the key does not fix are drawn at random.
pub fn member_profile(standardizer: &Standardizer, cohort: &CohortKey, member_id: &str, seed: u64) -> MemberProfile {
    let mut rng = rng_for(seed, "profile", member_id);
    let display = |tax: &crate::standardize::Taxonomy, id: &str| tax.display_name(id).unwrap_or(id).to_string();
    let title = cohort.get(Attribute::Title).map(str::to_string).unwrap_or_else(|| pick(&mut rng, standardizer.titles.entries()).id.clone());
    let region = cohort.get(Attribute::Region).map(str::to_string).unwrap_or_else(|| pick(&mut rng, standardizer.regions.entries()).id.clone());
    let company = cohort.get(Attribute::Company).map(str::to_string).unwrap_or_else(|| pick(&mut rng, standardizer.companies.entries()).id.clone());
    let industry = cohort.get(Attribute::Industry).map(str::to_string).unwrap_or_else(|| pick(&mut rng, standardizer.industries.entries()).id.clone());
    let country = cohort
        .get(Attribute::Country)
        .map(str::to_string)
        .or_else(|| standardizer.regions.entry(&region).and_then(|r| r.country.clone()))
        .unwrap_or_else(|| "US".to_string());
    let years = match cohort.get(Attribute::YearsExperienceBand) {
        Some("0-2") => rng.gen_range(0..=2),
        Some("3-5") => rng.gen_range(3..=5),
        Some("6-10") => rng.gen_range(6..=10),
        Some(_) => rng.gen_range(11..=30),
        None => rng.gen_range(0..=25),
    };
    let size_band = match cohort.get(Attribute::CompanySizeBand) {
        Some(b) => *CompanySizeBand::ALL.iter().find(|s| s.as_str() == b).unwrap_or(&CompanySizeBand::Medium),
        None => *pick(&mut rng, &CompanySizeBand::ALL),
    };
    MemberProfile {
        member_id: member_id.to_string(),
        raw_title: display(&standardizer.titles, &title),
        raw_company: display(&standardizer.companies, &company),
        raw_region: display(&standardizer.regions, &region),
        country,
        years_experience: years,
        industry: display(&standardizer.industries, &industry),
        company_size_band: size_band,
    }
}

fn cost_factor(country: &str) -> f64 {
    match country {
        "US" => 1.0,
        "GB" | "CA" => 0.75,
        "DE" | "NL" => 0.7,
        "FR" => 0.65,
        "IN" => 0.2,
        _ => 0.6,
    }
}

/// Compensation in the cohort's local currency. The title sets the level and
/// each member gets log-normal noise around it.
pub fn compensation(currencies: &CurrencyTable, cohort: &CohortKey, member_id: &str, seed: u64) -> CompensationData {
    let country = cohort.get(Attribute::Country).unwrap_or("US");
    let currency = currencies.local_currency(country).unwrap_or("USD").to_string();
    let per_usd = currencies.rate("USD", &currency).unwrap_or(1.0);
    let title = cohort.get(Attribute::Title).unwrap_or("");
    let level = 60_000.0 + rng_for(seed, "level", title).gen_range(0.0..190_000.0);
    let mut rng = rng_for(seed, "comp", member_id);
    let noise = LogNormal::new(0.0, 0.2).expect("valid sigma").sample(&mut rng);
    let units = |usd: f64| (usd * per_usd).round() as i64;
    let base = units(level * cost_factor(country) * noise).clamp(MIN_BASE_SALARY_UNITS, MAX_BASE_SALARY_UNITS);
    let mut c = CompensationData::base(currency, base * 100);
    if rng.gen_bool(0.6) {
        c.annual_bonus = Some(base * rng.gen_range(5..=20) / 100 * 100);
    }
    if rng.gen_bool(0.3) {
        c.stock_value = Some(base * rng.gen_range(10..=50) / 100 * 100);
    }
    if rng.gen_bool(0.1) {
        c.signon_bonus = Some(units(rng.gen_range(5_000.0..30_000.0)) * 100);
    }
    if rng.gen_bool(0.05) {
        c.commission = Some(base * rng.gen_range(5..=30) / 100 * 100);
    }
    c
}
