//! Mapping free-form titles, companies, regions, and industries onto
//! canonical entities.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CanonicalProfile, ExperienceBand, MemberProfile};

#[derive(Debug, Error)]
pub enum StandardizeError {
    #[error("no canonical {kind} for `{raw}`")]
    Unmappable { kind: EntityKind, raw: String },
    #[error("taxonomy is inconsistent: {0}")]
    Invalid(String),
    #[error("failed to read taxonomy: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse taxonomy: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Title,
    Company,
    Region,
    Industry,
}

impl std::fmt::Display for EntityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntityKind::Title => "title",
            EntityKind::Company => "company",
            EntityKind::Region => "region",
            EntityKind::Industry => "industry",
        })
    }
}

/// Casefold, drop punctuation, collapse whitespace.
pub fn normalize(raw: &str) -> String {
    let kept: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub id: String,
    pub display: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyFile {
    kind: EntityKind,
    #[serde(default)]
    version: u32,
    entries: Vec<TaxonomyEntry>,
    synonyms: BTreeMap<String, String>,
}

/// One canonical vocabulary with its synonym table. Immutable once built.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    kind: EntityKind,
    version: u32,
    entries: Vec<TaxonomyEntry>,
    by_id: HashMap<String, usize>,
    lookup: HashMap<String, usize>,
}

impl Taxonomy {
    pub fn from_json(json: &str) -> Result<Self, StandardizeError> {
        let file: TaxonomyFile = serde_json::from_str(json)?;
        Self::build(file.kind, file.version, file.entries, file.synonyms)
    }

    pub fn load(path: &Path) -> Result<Self, StandardizeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build(
        kind: EntityKind,
        version: u32,
        entries: Vec<TaxonomyEntry>,
        synonyms: BTreeMap<String, String>,
    ) -> Result<Self, StandardizeError> {
        let mut by_id = HashMap::new();
        let mut lookup = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(StandardizeError::Invalid(format!("duplicate id `{}`", e.id)));
            }
            lookup.insert(normalize(&e.display), i);
            lookup.insert(normalize(&e.id), i);
        }
        for (syn, id) in synonyms {
            let &i = by_id
                .get(&id)
                .ok_or_else(|| StandardizeError::Invalid(format!("synonym `{syn}` maps to unknown id `{id}`")))?;
            lookup.insert(normalize(&syn), i);
        }
        Ok(Taxonomy { kind, version, entries, by_id, lookup })
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn entries(&self) -> &[TaxonomyEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &str) -> Option<&TaxonomyEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn display_name(&self, id: &str) -> Option<&str> {
        self.entry(id).map(|e| e.display.as_str())
    }

    pub fn standardize(&self, raw: &str) -> Result<&str, StandardizeError> {
        self.lookup
            .get(&normalize(raw))
            .map(|&i| self.entries[i].id.as_str())
            .ok_or_else(|| StandardizeError::Unmappable { kind: self.kind, raw: raw.to_string() })
    }
}

pub fn standardize<'t>(raw: &str, taxonomy: &'t Taxonomy) -> Result<&'t str, StandardizeError> {
    taxonomy.standardize(raw)
}

/// The four taxonomies a profile is canonicalized against.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub titles: Taxonomy,
    pub companies: Taxonomy,
    pub regions: Taxonomy,
    pub industries: Taxonomy,
}

impl Standardizer {
    /// Taxonomies shipped with the crate.
    pub fn builtin() -> Self {
        let load = |s: &str| Taxonomy::from_json(s).expect("bundled taxonomy is valid");
        Standardizer {
            titles: load(include_str!("../fixtures/titles.json")),
            companies: load(include_str!("../fixtures/companies.json")),
            regions: load(include_str!("../fixtures/regions.json")),
            industries: load(include_str!("../fixtures/industries.json")),
        }
    }

    pub fn load_dir(dir: &Path) -> Result<Self, StandardizeError> {
        Ok(Standardizer {
            titles: Taxonomy::load(&dir.join("titles.json"))?,
            companies: Taxonomy::load(&dir.join("companies.json"))?,
            regions: Taxonomy::load(&dir.join("regions.json"))?,
            industries: Taxonomy::load(&dir.join("industries.json"))?,
        })
    }

    /// Title and region must map. An unknown company or industry is dropped
    /// rather than passed through raw, so slices keyed on it do not apply.
    pub fn canonicalize(&self, profile: &MemberProfile) -> Result<CanonicalProfile, StandardizeError> {
        let title = self.titles.standardize(&profile.raw_title)?.to_string();
        let region = self.regions.standardize(&profile.raw_region)?.to_string();
        let company = self.companies.standardize(&profile.raw_company).ok().map(str::to_string);
        let industry = self.industries.standardize(&profile.industry).ok().map(str::to_string);
        Ok(CanonicalProfile {
            title,
            company,
            country: profile.country.trim().to_uppercase(),
            region,
            experience_band: ExperienceBand::of_years(profile.years_experience),
            industry,
            company_size_band: profile.company_size_band,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize("  Sr.   Software\tEngineer "), "sr software engineer");
        assert_eq!(normalize("Front-End"), normalize("frontend"));
    }

    #[test]
    fn synonym_lookup() {
        let s = Standardizer::builtin();
        assert_eq!(s.titles.standardize("Sr. Software Engineer").unwrap(), "software-engineer");
        assert_eq!(s.titles.standardize("Software Engineer").unwrap(), "software-engineer");
        assert_eq!(s.companies.standardize("Google, Inc.").unwrap(), "google");
        assert_eq!(s.regions.standardize("SF Bay Area").unwrap(), "san-francisco-bay-area");
    }

    #[test]
    fn unmappable_title() {
        let s = Standardizer::builtin();
        let err = s.titles.standardize("Chief Purple Officer").unwrap_err();
        assert!(matches!(err, StandardizeError::Unmappable { kind: EntityKind::Title, .. }));
    }

    #[test]
    fn fixture_sizes() {
        let s = Standardizer::builtin();
        assert_eq!(s.titles.entries().len(), 200);
        assert_eq!(s.companies.entries().len(), 50);
        assert_eq!(s.regions.entries().len(), 30);
        assert!(s.regions.entries().iter().all(|e| e.country.is_some()));
    }

    #[test]
    fn dangling_synonym_rejected() {
        let json = r#"{"kind":"title","entries":[{"id":"a","display":"A"}],"synonyms":{"b":"zzz"}}"#;
        assert!(matches!(Taxonomy::from_json(json), Err(StandardizeError::Invalid(_))));
    }

    #[test]
    fn unknown_company_is_dropped_not_passed_through() {
        let s = Standardizer::builtin();
        let p = MemberProfile {
            member_id: "m".into(),
            raw_title: "swe".into(),
            raw_company: "Tiny Startup 42".into(),
            raw_region: "Seattle".into(),
            country: "us".into(),
            years_experience: 7,
            industry: "tech".into(),
            company_size_band: crate::model::CompanySizeBand::Small,
        };
        let c = s.canonicalize(&p).unwrap();
        assert_eq!(c.company, None);
        assert_eq!(c.country, "US");
        assert_eq!(c.industry.as_deref(), Some("information-technology-services"));
        assert_eq!(c.experience_band, ExperienceBand::Mid);
    }

    fn any_synonym() -> impl Strategy<Value = String> {
        let s = Standardizer::builtin();
        let mut keys: Vec<String> = s.titles.lookup.keys().cloned().collect();
        keys.sort();
        prop::sample::select(keys)
    }

    proptest! {
        #[test]
        fn idempotent(raw in any_synonym()) {
            let s = Standardizer::builtin();
            let id = s.titles.standardize(&raw).unwrap();
            let display = s.titles.display_name(id).unwrap();
            prop_assert_eq!(s.titles.standardize(display).unwrap(), id);
        }

        #[test]
        fn invariant_under_case_space_punctuation(
            raw in any_synonym(),
            upper in prop::collection::vec(any::<bool>(), 0..64),
            noise in prop::collection::vec((0usize..64, prop::sample::select(vec!['.', ',', '-', '!', '\'', '/'])), 0..5),
            pad in 0usize..3,
        ) {
            let s = Standardizer::builtin();
            let mut chars: Vec<char> = raw
                .chars()
                .enumerate()
                .map(|(i, c)| if upper.get(i).copied().unwrap_or(false) { c.to_ascii_uppercase() } else { c })
                .collect();
            for (pos, p) in noise {
                let at = pos % (chars.len() + 1);
                chars.insert(at, p);
            }
            let noisy: String = chars.into_iter().collect::<String>().replace(' ', &" ".repeat(pad + 1));
            let noisy = format!("{}{}{}", " ".repeat(pad), noisy, "\t".repeat(pad));
            prop_assert_eq!(s.titles.standardize(&noisy).unwrap(), s.titles.standardize(&raw).unwrap());
        }
    }
}
