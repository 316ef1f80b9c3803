//! Shared vocabulary: members, compensation, cohorts, release policies.
//!
//! Everything here is plain data. Money is carried as integer minor units
//! (cents) and instants as whole Unix seconds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::timestamp::GeneralizedTimestamp;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Amount in minor currency units.
pub type Money = i64;

/// An instant at second resolution, serialized as RFC 3339.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_unix(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub fn unix(self) -> i64 {
        self.0
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.0, 0).unwrap_or_default()
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Timestamp(dt.timestamp())
    }

    pub fn plus_secs(self, secs: i64) -> Self {
        Timestamp(self.0 + secs)
    }

    pub fn plus_days(self, days: i64) -> Self {
        Timestamp(self.0 + days * SECONDS_PER_DAY)
    }

    pub fn to_rfc3339(self) -> String {
        self.to_datetime()
            .to_rfc3339_opts(SecondsFormat::Secs, true)
    }

    pub fn parse_rfc3339(s: &str) -> Result<Self, chrono::ParseError> {
        Ok(Timestamp(DateTime::parse_from_rfc3339(s)?.timestamp()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse_rfc3339(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("profile lacks attribute `{0}` required by slice type `{1}`")]
    MissingAttribute(Attribute, String),
    #[error("invalid slice type `{0}`: {1}")]
    InvalidSliceType(String, &'static str),
    #[error("invalid compensation: {0}")]
    InvalidCompensation(String),
    #[error("unknown currency `{0}`")]
    UnknownCurrency(String),
    #[error("malformed cohort key `{0}`")]
    MalformedCohortKey(String),
    #[error("invalid release policy for `{0}`: {1}")]
    InvalidPolicy(String, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompanySizeBand {
    Micro,
    Small,
    Medium,
    Large,
    Enterprise,
}

impl CompanySizeBand {
    pub fn as_str(self) -> &'static str {
        match self {
            CompanySizeBand::Micro => "micro",
            CompanySizeBand::Small => "small",
            CompanySizeBand::Medium => "medium",
            CompanySizeBand::Large => "large",
            CompanySizeBand::Enterprise => "enterprise",
        }
    }

    pub const ALL: [CompanySizeBand; 5] = [
        CompanySizeBand::Micro,
        CompanySizeBand::Small,
        CompanySizeBand::Medium,
        CompanySizeBand::Large,
        CompanySizeBand::Enterprise,
    ];
}

/// Years of experience bucketed into bands before keying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExperienceBand {
    #[serde(rename = "0-2")]
    Entry,
    #[serde(rename = "3-5")]
    Early,
    #[serde(rename = "6-10")]
    Mid,
    #[serde(rename = "11+")]
    Senior,
}

impl ExperienceBand {
    pub fn of_years(years: u32) -> Self {
        match years {
            0..=2 => ExperienceBand::Entry,
            3..=5 => ExperienceBand::Early,
            6..=10 => ExperienceBand::Mid,
            _ => ExperienceBand::Senior,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExperienceBand::Entry => "0-2",
            ExperienceBand::Early => "3-5",
            ExperienceBand::Mid => "6-10",
            ExperienceBand::Senior => "11+",
        }
    }
}

/// A member profile as it exists on the member's side: free-form strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberProfile {
    pub member_id: String,
    pub raw_title: String,
    #[serde(default)]
    pub raw_company: String,
    pub raw_region: String,
    pub country: String,
    pub years_experience: u32,
    #[serde(default)]
    pub industry: String,
    pub company_size_band: CompanySizeBand,
}

/// Profile attributes after standardization. This is what gets snapshotted,
/// encrypted under the attributes key, and published on the change stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalProfile {
    pub title: String,
    pub company: Option<String>,
    pub country: String,
    pub region: String,
    pub experience_band: ExperienceBand,
    pub industry: Option<String>,
    pub company_size_band: CompanySizeBand,
}

impl CanonicalProfile {
    pub fn attribute(&self, attr: Attribute) -> Option<&str> {
        match attr {
            Attribute::Title => Some(self.title.as_str()),
            Attribute::Company => self.company.as_deref(),
            Attribute::Country => Some(self.country.as_str()),
            Attribute::Region => Some(self.region.as_str()),
            Attribute::YearsExperienceBand => Some(self.experience_band.as_str()),
            Attribute::Industry => self.industry.as_deref(),
            Attribute::CompanySizeBand => Some(self.company_size_band.as_str()),
        }
        .filter(|v| !v.is_empty())
    }

    pub fn attributes(&self) -> BTreeMap<Attribute, String> {
        Attribute::ALL
            .iter()
            .filter_map(|&a| self.attribute(a).map(|v| (a, v.to_string())))
            .collect()
    }
}

/// Cohort-defining attribute names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Title,
    Company,
    Country,
    Region,
    YearsExperienceBand,
    Industry,
    CompanySizeBand,
}

impl Attribute {
    pub const ALL: [Attribute; 7] = [
        Attribute::Title,
        Attribute::Company,
        Attribute::Country,
        Attribute::Region,
        Attribute::YearsExperienceBand,
        Attribute::Industry,
        Attribute::CompanySizeBand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Title => "title",
            Attribute::Company => "company",
            Attribute::Country => "country",
            Attribute::Region => "region",
            Attribute::YearsExperienceBand => "years_experience_band",
            Attribute::Industry => "industry",
            Attribute::CompanySizeBand => "company_size_band",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attribute `{s}`"))
    }
}

/// Schema of a cohort family.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceType {
    pub name: String,
    pub attribute_set: Vec<Attribute>,
}

impl SliceType {
    pub fn new(name: impl Into<String>, attribute_set: Vec<Attribute>) -> Result<Self, ModelError> {
        let st = SliceType { name: name.into(), attribute_set };
        st.validate()?;
        Ok(st)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.attribute_set.is_empty() {
            return Err(ModelError::InvalidSliceType(self.name.clone(), "empty attribute set"));
        }
        if !self.attribute_set.contains(&Attribute::Title)
            || !self.attribute_set.contains(&Attribute::Country)
        {
            return Err(ModelError::InvalidSliceType(
                self.name.clone(),
                "title and country are mandatory",
            ));
        }
        let mut seen = self.attribute_set.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.attribute_set.len() {
            return Err(ModelError::InvalidSliceType(self.name.clone(), "duplicate attribute"));
        }
        Ok(())
    }

    pub fn has(&self, attr: Attribute) -> bool {
        self.attribute_set.contains(&attr)
    }
}

/// The default catalog: title-country-region plus its company, experience
/// and industry refinements.
pub fn default_slice_catalog() -> Vec<SliceType> {
    use Attribute::*;
    vec![
        SliceType { name: "title-country-region".into(), attribute_set: vec![Title, Country, Region] },
        SliceType {
            name: "title-company-country-region".into(),
            attribute_set: vec![Title, Company, Country, Region],
        },
        SliceType {
            name: "title-country-region-experience".into(),
            attribute_set: vec![Title, Country, Region, YearsExperienceBand],
        },
        SliceType {
            name: "title-country-region-industry".into(),
            attribute_set: vec![Title, Country, Region, Industry],
        },
    ]
}

/// Identifies one cohort: a slice type plus canonical values for exactly its
/// attributes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CohortKey {
    pub slice_type: String,
    pub values: BTreeMap<Attribute, String>,
}

impl CohortKey {
    pub fn get(&self, attr: Attribute) -> Option<&str> {
        self.values.get(&attr).map(String::as_str)
    }

    /// Stable content hash, used as the key of the slice and insight stores.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_string().as_bytes());
        hex::encode(h.finalize())
    }

    /// The key with `attr` removed, used for ancestor and sibling lookups.
    pub fn without(&self, attr: Attribute, slice_type: impl Into<String>) -> CohortKey {
        let mut values = self.values.clone();
        values.remove(&attr);
        CohortKey { slice_type: slice_type.into(), values }
    }

    pub fn attribute_set(&self) -> Vec<Attribute> {
        self.values.keys().copied().collect()
    }
}

/// `slice_type:attr=value,attr=value` with attributes in canonical order.
impl fmt::Display for CohortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.slice_type)?;
        for (i, (a, v)) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for CohortKey {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::MalformedCohortKey(s.to_string());
        let (slice_type, rest) = s.split_once(':').ok_or_else(bad)?;
        if slice_type.is_empty() {
            return Err(bad());
        }
        let mut values = BTreeMap::new();
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (a, v) = part.split_once('=').ok_or_else(bad)?;
            let attr: Attribute = a.parse().map_err(|_| bad())?;
            if v.is_empty() || values.insert(attr, v.to_string()).is_some() {
                return Err(bad());
            }
        }
        if values.is_empty() {
            return Err(bad());
        }
        Ok(CohortKey { slice_type: slice_type.to_string(), values })
    }
}

pub fn cohort_key_of(profile: &CanonicalProfile, slice_type: &SliceType) -> Result<CohortKey, ModelError> {
    let mut values = BTreeMap::new();
    for &attr in &slice_type.attribute_set {
        let v = profile
            .attribute(attr)
            .ok_or_else(|| ModelError::MissingAttribute(attr, slice_type.name.clone()))?;
        values.insert(attr, v.to_string());
    }
    Ok(CohortKey { slice_type: slice_type.name.clone(), values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationType {
    BaseSalary,
    AnnualBonus,
    SignonBonus,
    Commission,
    StockValue,
    Tips,
}

impl CompensationType {
    pub const ALL: [CompensationType; 6] = [
        CompensationType::BaseSalary,
        CompensationType::AnnualBonus,
        CompensationType::SignonBonus,
        CompensationType::Commission,
        CompensationType::StockValue,
        CompensationType::Tips,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompensationType::BaseSalary => "base_salary",
            CompensationType::AnnualBonus => "annual_bonus",
            CompensationType::SignonBonus => "signon_bonus",
            CompensationType::Commission => "commission",
            CompensationType::StockValue => "stock_value",
            CompensationType::Tips => "tips",
        }
    }
}

/// Yearly compensation in minor units of `currency`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompensationData {
    pub currency: String,
    pub base_salary: Money,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annual_bonus: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signon_bonus: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commission: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stock_value: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tips: Option<Money>,
}

impl CompensationData {
    pub fn base(currency: impl Into<String>, base_salary: Money) -> Self {
        CompensationData {
            currency: currency.into(),
            base_salary,
            annual_bonus: None,
            signon_bonus: None,
            commission: None,
            stock_value: None,
            tips: None,
        }
    }

    pub fn get(&self, ty: CompensationType) -> Option<Money> {
        match ty {
            CompensationType::BaseSalary => Some(self.base_salary),
            CompensationType::AnnualBonus => self.annual_bonus,
            CompensationType::SignonBonus => self.signon_bonus,
            CompensationType::Commission => self.commission,
            CompensationType::StockValue => self.stock_value,
            CompensationType::Tips => self.tips,
        }
    }

    /// Applies `f` to every present amount.
    pub fn map_amounts(&self, mut f: impl FnMut(CompensationType, Money) -> Money) -> Self {
        let mut out = self.clone();
        out.base_salary = f(CompensationType::BaseSalary, self.base_salary);
        out.annual_bonus = self.annual_bonus.map(|v| f(CompensationType::AnnualBonus, v));
        out.signon_bonus = self.signon_bonus.map(|v| f(CompensationType::SignonBonus, v));
        out.commission = self.commission.map(|v| f(CompensationType::Commission, v));
        out.stock_value = self.stock_value.map(|v| f(CompensationType::StockValue, v));
        out.tips = self.tips.map(|v| f(CompensationType::Tips, v));
        out
    }

    /// Checks the structural invariants: positive base, non-negative extras,
    /// known currency.
    pub fn validate(&self, currencies: &CurrencyTable) -> Result<(), ModelError> {
        if !currencies.contains(&self.currency) {
            return Err(ModelError::UnknownCurrency(self.currency.clone()));
        }
        if self.base_salary <= 0 {
            return Err(ModelError::InvalidCompensation("base_salary must be positive".into()));
        }
        for ty in &CompensationType::ALL[1..] {
            if let Some(v) = self.get(*ty) {
                if v < 0 {
                    return Err(ModelError::InvalidCompensation(format!(
                        "{} must be non-negative",
                        ty.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrencyInfo {
    /// Units of this currency per one US dollar.
    pub per_usd: f64,
}

/// Known currencies and the local currency of each country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrencyTable {
    pub currencies: BTreeMap<String, CurrencyInfo>,
    pub country_currency: BTreeMap<String, String>,
}

impl Default for CurrencyTable {
    fn default() -> Self {
        let currencies = [("USD", 1.0), ("EUR", 0.92), ("GBP", 0.79), ("INR", 83.0), ("CAD", 1.36)]
            .into_iter()
            .map(|(c, r)| (c.to_string(), CurrencyInfo { per_usd: r }))
            .collect();
        let country_currency = [
            ("US", "USD"),
            ("GB", "GBP"),
            ("DE", "EUR"),
            ("FR", "EUR"),
            ("NL", "EUR"),
            ("IN", "INR"),
            ("CA", "CAD"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        CurrencyTable { currencies, country_currency }
    }
}

impl CurrencyTable {
    pub fn contains(&self, code: &str) -> bool {
        self.currencies.contains_key(code)
    }

    pub fn local_currency(&self, country: &str) -> Option<&str> {
        self.country_currency.get(country).map(String::as_str)
    }

    /// Units of `to` per unit of `from`.
    pub fn rate(&self, from: &str, to: &str) -> Result<f64, ModelError> {
        let f = self.currencies.get(from).ok_or_else(|| ModelError::UnknownCurrency(from.into()))?;
        let t = self.currencies.get(to).ok_or_else(|| ModelError::UnknownCurrency(to.into()))?;
        Ok(t.per_usd / f.per_usd)
    }
}

/// Converts an amount with a snapshotted rate, rounding to the nearest
/// minor unit.
pub fn convert_amount(amount: Money, rate: f64) -> Money {
    (amount as f64 * rate).round() as Money
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampMode {
    RandomDelay,
    Hierarchical,
}

/// Release rules for one slice type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleasePolicy {
    pub slice_type: String,
    pub min_threshold: u32,
    pub batch_size: u32,
    pub timestamp_mode: TimestampMode,
    /// Upper bound of the random delay, in seconds.
    pub max_random_delay: i64,
}

impl ReleasePolicy {
    pub fn new(slice_type: impl Into<String>, k: u32) -> Self {
        ReleasePolicy {
            slice_type: slice_type.into(),
            min_threshold: k,
            batch_size: k,
            timestamp_mode: TimestampMode::Hierarchical,
            max_random_delay: 48 * 3600,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.min_threshold == 0 {
            return Err(ModelError::InvalidPolicy(self.slice_type.clone(), "min_threshold must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidPolicy(self.slice_type.clone(), "batch_size must be >= 1"));
        }
        if self.max_random_delay < 0 {
            return Err(ModelError::InvalidPolicy(self.slice_type.clone(), "negative max_random_delay"));
        }
        Ok(())
    }

    /// Size of the first batch released from a cohort.
    pub fn first_release_size(&self) -> u32 {
        self.min_threshold.max(self.batch_size)
    }
}

/// Default policies: k = 5 for plain slices, k = 10 where the company is part
/// of the key.
pub fn default_policy_for(slice_type: &SliceType) -> ReleasePolicy {
    let k = if slice_type.has(Attribute::Company) { 10 } else { 5 };
    ReleasePolicy::new(slice_type.name.clone(), k)
}

/// A released compensation record. It has no member or submission id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeidentifiedEntry {
    pub cohort: CohortKey,
    pub generalized_timestamp: GeneralizedTimestamp,
    pub compensation: CompensationData,
}
