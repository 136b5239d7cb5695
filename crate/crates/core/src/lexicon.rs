//! Gendered names, gendered occupations and per-occupation descriptions.
//!
//! Occupations are partitioned by their male share: an occupation is male if
//! `male_share >= threshold`, female if `1 - male_share >= threshold`, and
//! unused otherwise. The default threshold is 0.70.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_SHARE_THRESHOLD: f64 = 0.70;

/// Words a descriptive preamble must never contain.
pub const GENDERED_WORDS: [&str; 8] = ["man", "woman", "male", "female", "he", "she", "his", "her"];

const BUNDLED_NAMES: &str = include_str!("../data/lexicon/names.csv");
const BUNDLED_OCCUPATIONS: &str = include_str!("../data/lexicon/occupations.csv");
const BUNDLED_DESCRIPTIONS: &str = include_str!("../data/lexicon/descriptions.csv");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("occupation `{0}` has no description row")]
    MissingDescription(String),
    #[error("duplicate {list} entry `{value}`")]
    DuplicateEntry { list: &'static str, value: String },
    #[error("male share {share} for `{occupation}` is outside [0, 1]")]
    ShareOutOfRange { occupation: String, share: f64 },
    #[error("share threshold {0} must lie in (0.5, 1]")]
    InvalidThreshold(f64),
    #[error("unknown gender `{0}` (expected male or female)")]
    UnknownGender(String),
    #[error("{file}: malformed CSV: {message}")]
    MalformedCsv { file: &'static str, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn opposite(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Gender {
    type Err = LexiconError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            _ => Err(LexiconError::UnknownGender(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationShareRow {
    pub occupation: String,
    pub male_share: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub simple: String,
    pub detailed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub male_names: Vec<String>,
    pub female_names: Vec<String>,
    pub male_occupations: Vec<String>,
    pub female_occupations: Vec<String>,
    pub descriptions: BTreeMap<String, Description>,
    pub plural_forms: BTreeMap<String, String>,
}

impl Lexicon {
    pub fn names(&self, gender: Gender) -> &[String] {
        match gender {
            Gender::Male => &self.male_names,
            Gender::Female => &self.female_names,
        }
    }

    pub fn occupations(&self, gender: Gender) -> &[String] {
        match gender {
            Gender::Male => &self.male_occupations,
            Gender::Female => &self.female_occupations,
        }
    }

    /// Which gendered list an occupation belongs to, if any.
    pub fn occupation_gender(&self, occupation: &str) -> Option<Gender> {
        if self.male_occupations.iter().any(|o| o == occupation) {
            Some(Gender::Male)
        } else if self.female_occupations.iter().any(|o| o == occupation) {
            Some(Gender::Female)
        } else {
            None
        }
    }

    pub fn name_gender(&self, name: &str) -> Option<Gender> {
        if self.male_names.iter().any(|n| n == name) {
            Some(Gender::Male)
        } else if self.female_names.iter().any(|n| n == name) {
            Some(Gender::Female)
        } else {
            None
        }
    }

    /// All gendered occupations, male list first.
    pub fn all_occupations(&self) -> impl Iterator<Item = &String> {
        self.male_occupations.iter().chain(&self.female_occupations)
    }

    /// Stable content hash, recorded in run provenance.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("lexicon serialises");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Splits occupations by male share.
pub fn filter_by_share(
    rows: &[OccupationShareRow],
    threshold: f64,
) -> Result<(Vec<String>, Vec<String>), LexiconError> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(LexiconError::InvalidThreshold(threshold));
    }
    let mut male = Vec::new();
    let mut female = Vec::new();
    for row in rows {
        if !(0.0..=1.0).contains(&row.male_share) {
            return Err(LexiconError::ShareOutOfRange {
                occupation: row.occupation.clone(),
                share: row.male_share,
            });
        }
        if row.male_share >= threshold {
            male.push(row.occupation.clone());
        } else if 1.0 - row.male_share >= threshold {
            female.push(row.occupation.clone());
        }
    }
    Ok((male, female))
}

/// Loads a lexicon from the three CSV files (headers required):
/// `name,gender`; `occupation,male_share,plural_form`;
/// `occupation,simple,detailed`.
pub fn load_lexicon(
    names_bytes: &[u8],
    occupations_bytes: &[u8],
    descriptions_bytes: &[u8],
) -> Result<Lexicon, LexiconError> {
    load_lexicon_with_threshold(
        names_bytes,
        occupations_bytes,
        descriptions_bytes,
        DEFAULT_SHARE_THRESHOLD,
    )
}

pub fn load_lexicon_with_threshold(
    names_bytes: &[u8],
    occupations_bytes: &[u8],
    descriptions_bytes: &[u8],
    threshold: f64,
) -> Result<Lexicon, LexiconError> {
    let mut male_names = Vec::new();
    let mut female_names = Vec::new();
    let mut seen_names = HashSet::new();
    for row in read_rows(names_bytes, "names", 2)? {
        let name = row[0].trim().to_string();
        if !seen_names.insert((name.to_lowercase(), row[1].trim().to_lowercase())) {
            return Err(LexiconError::DuplicateEntry { list: "name", value: name });
        }
        match row[1].parse::<Gender>()? {
            Gender::Male => male_names.push(name),
            Gender::Female => female_names.push(name),
        }
    }

    let mut shares = Vec::new();
    let mut plural_forms = BTreeMap::new();
    let mut seen_occ = HashSet::new();
    for row in read_rows(occupations_bytes, "occupations", 3)? {
        let occupation = row[0].trim().to_string();
        if !seen_occ.insert(occupation.to_lowercase()) {
            return Err(LexiconError::DuplicateEntry { list: "occupation", value: occupation });
        }
        let male_share: f64 = row[1].trim().parse().map_err(|_| LexiconError::MalformedCsv {
            file: "occupations",
            message: format!("male_share `{}` is not a number", row[1]),
        })?;
        plural_forms.insert(occupation.clone(), row[2].trim().to_string());
        shares.push(OccupationShareRow { occupation, male_share });
    }
    let (male_occupations, female_occupations) = filter_by_share(&shares, threshold)?;

    let mut descriptions = BTreeMap::new();
    for row in read_rows(descriptions_bytes, "descriptions", 3)? {
        let occupation = row[0].trim().to_string();
        let desc = Description {
            simple: row[1].trim().to_string(),
            detailed: row[2].trim().to_string(),
        };
        if descriptions.insert(occupation.clone(), desc).is_some() {
            return Err(LexiconError::DuplicateEntry { list: "description", value: occupation });
        }
    }

    for occ in male_occupations.iter().chain(&female_occupations) {
        if !descriptions.contains_key(occ) {
            return Err(LexiconError::MissingDescription(occ.clone()));
        }
    }
    // Unused occupations keep no plural form or description.
    let used: HashSet<&String> = male_occupations.iter().chain(&female_occupations).collect();
    plural_forms.retain(|k, _| used.contains(k));
    descriptions.retain(|k, _| used.contains(k));

    Ok(Lexicon {
        male_names,
        female_names,
        male_occupations,
        female_occupations,
        descriptions,
        plural_forms,
    })
}

pub fn load_lexicon_files(
    names: &Path,
    occupations: &Path,
    descriptions: &Path,
    threshold: f64,
) -> Result<Lexicon, LexiconError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| LexiconError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    load_lexicon_with_threshold(&read(names)?, &read(occupations)?, &read(descriptions)?, threshold)
}

/// The lexicon shipped with the crate: the published gendered name and
/// occupation lists with curated descriptions.
pub fn bundled() -> Lexicon {
    load_lexicon(
        BUNDLED_NAMES.as_bytes(),
        BUNDLED_OCCUPATIONS.as_bytes(),
        BUNDLED_DESCRIPTIONS.as_bytes(),
    )
    .expect("bundled lexicon is valid")
}

pub fn bundled_sources() -> [(&'static str, &'static str); 3] {
    [
        ("names.csv", BUNDLED_NAMES),
        ("occupations.csv", BUNDLED_OCCUPATIONS),
        ("descriptions.csv", BUNDLED_DESCRIPTIONS),
    ]
}

fn read_rows(
    bytes: &[u8],
    file: &'static str,
    width: usize,
) -> Result<Vec<Vec<String>>, LexiconError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| LexiconError::MalformedCsv { file, message: e.to_string() })?;
        if rec.len() < width {
            return Err(LexiconError::MalformedCsv {
                file,
                message: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        rows.push(rec.iter().take(width).map(str::to_string).collect());
    }
    Ok(rows)
}

pub const SIMPLE_WORDS: usize = 3;
pub const DETAILED_WORDS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionLevel {
    Simple,
    Detailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum ViolationKind {
    /// Description does not start with the occupation's plural form.
    PrefixMismatch { plural_form: String },
    MissingPeriod,
    WordCount { expected: usize, found: usize },
    GenderedWord { word: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub occupation: String,
    pub level: DescriptionLevel,
    pub text: String,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Counts descriptive words after the plural occupation phrase.
///
/// Splits on single spaces; hyphenated compounds are one word. Returns
/// `None` when `text` does not start with `plural_form`.
pub fn descriptive_word_count(text: &str, plural_form: &str) -> Option<usize> {
    let rest = text.strip_prefix(plural_form)?;
    let rest = rest.strip_suffix('.').unwrap_or(rest);
    Some(rest.split(' ').filter(|w| !w.is_empty()).count())
}

/// First word of `text` found in `words` (case-insensitive, punctuation
/// stripped), if any.
pub fn find_gendered_word<'a>(text: &str, words: &[&'a str]) -> Option<&'a str> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .find_map(|w| words.iter().copied().find(|g| *g == w))
}

/// Word-count and gender-neutrality check over every description. Never
/// mutates the lexicon.
pub fn validate_descriptions(lexicon: &Lexicon) -> ValidationReport {
    let mut report = ValidationReport::default();
    for occ in lexicon.all_occupations() {
        let Some(desc) = lexicon.descriptions.get(occ) else {
            continue;
        };
        let plural = lexicon.plural_forms.get(occ).map(String::as_str).unwrap_or("");
        for (level, text, expected) in [
            (DescriptionLevel::Simple, &desc.simple, SIMPLE_WORDS),
            (DescriptionLevel::Detailed, &desc.detailed, DETAILED_WORDS),
        ] {
            report.checked += 1;
            let mut push = |kind| {
                report.violations.push(Violation {
                    occupation: occ.clone(),
                    level,
                    text: text.clone(),
                    kind,
                })
            };
            if !text.ends_with('.') {
                push(ViolationKind::MissingPeriod);
            }
            match descriptive_word_count(text, plural) {
                None => push(ViolationKind::PrefixMismatch { plural_form: plural.to_string() }),
                Some(found) if found != expected => push(ViolationKind::WordCount { expected, found }),
                Some(_) => {}
            }
            if let Some(word) = find_gendered_word(text, &GENDERED_WORDS) {
                push(ViolationKind::GenderedWord { word: word.to_string() });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NAMES: &str = "name,gender\nAustin,male\nKelly,female\n";
    const DESCS: &str = "occupation,simple,detailed\n\
        dental hygienist,Dental hygienists ensure oral health.,Dental hygienists focus on promoting oral health and hygiene.\n\
        carpenter,Carpenters construct wooden structures.,\"Carpenters build, install, and repair wooden structures carefully.\"\n";

    fn row(o: &str, s: f64) -> OccupationShareRow {
        OccupationShareRow { occupation: o.into(), male_share: s }
    }

    #[test]
    fn loads_and_partitions() {
        let occ = "occupation,male_share,plural_form\n\
                   dental hygienist,0.05,Dental hygienists\n\
                   carpenter,0.96,Carpenters\n\
                   clerk,0.50,Clerks\n";
        let lex = load_lexicon(NAMES.as_bytes(), occ.as_bytes(), DESCS.as_bytes()).unwrap();
        assert_eq!(lex.female_occupations, ["dental hygienist"]);
        assert_eq!(lex.male_occupations, ["carpenter"]);
        assert!(lex.occupation_gender("clerk").is_none());
        assert_eq!(lex.plural_forms["dental hygienist"], "Dental hygienists");
        assert_eq!(lex.name_gender("Kelly"), Some(Gender::Female));
    }

    #[test]
    fn missing_description() {
        let occ = "occupation,male_share,plural_form\nroofer,0.98,Roofers\n";
        let err = load_lexicon(NAMES.as_bytes(), occ.as_bytes(), DESCS.as_bytes()).unwrap_err();
        assert!(matches!(err, LexiconError::MissingDescription(o) if o == "roofer"));
    }

    #[test]
    fn duplicate_and_range_errors() {
        let dup = "name,gender\nAustin,male\naustin,male\n";
        let occ = "occupation,male_share,plural_form\ncarpenter,0.96,Carpenters\n";
        assert!(matches!(
            load_lexicon(dup.as_bytes(), occ.as_bytes(), DESCS.as_bytes()).unwrap_err(),
            LexiconError::DuplicateEntry { list: "name", .. }
        ));
        let bad = "occupation,male_share,plural_form\ncarpenter,1.2,Carpenters\n";
        assert!(matches!(
            load_lexicon(NAMES.as_bytes(), bad.as_bytes(), DESCS.as_bytes()).unwrap_err(),
            LexiconError::ShareOutOfRange { .. }
        ));
    }

    #[test]
    fn share_threshold_examples() {
        let (m, f) = filter_by_share(
            &[row("carpenter", 0.96), row("registered nurse", 0.12), row("clerk", 0.69)],
            0.70,
        )
        .unwrap();
        assert_eq!(m, ["carpenter"]);
        assert_eq!(f, ["registered nurse"]);
        assert!(matches!(filter_by_share(&[], 0.5), Err(LexiconError::InvalidThreshold(_))));
        assert!(filter_by_share(&[], 1.0).is_ok());
    }

    #[test]
    fn word_counts_of_published_descriptions() {
        assert_eq!(
            descriptive_word_count("Dental hygienists ensure oral health.", "Dental hygienists"),
            Some(3)
        );
        assert_eq!(
            descriptive_word_count(
                "Dental hygienists focus on promoting oral health and hygiene.",
                "Dental hygienists"
            ),
            Some(7)
        );
        assert_eq!(
            descriptive_word_count("Phlebotomists collect blood samples.", "Phlebotomists"),
            Some(3)
        );
        assert_eq!(
            descriptive_word_count(
                "Speech-language pathologists assess and treat speech and swallowing disorders.",
                "Speech-language pathologists"
            ),
            Some(7)
        );
        assert_eq!(descriptive_word_count("Nurses care.", "Roofers"), None);
    }

    #[test]
    fn validator_reports_without_mutating() {
        let mut lex = bundled();
        let before = lex.clone();
        assert!(validate_descriptions(&lex).is_clean());
        lex.descriptions.get_mut("carpenter").unwrap().simple =
            "Carpenters build things for her.".into();
        let report = validate_descriptions(&lex);
        assert_eq!(report.violations.len(), 2);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::WordCount { expected: 3, found: 4 }));
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::GenderedWord { word: "her".into() }));
        assert_eq!(validate_descriptions(&before).checked, before.descriptions.len() * 2);
    }

    #[test]
    fn bundled_lexicon_shape() {
        let lex = bundled();
        assert_eq!(lex.male_names.len(), 54);
        assert_eq!(lex.female_names.len(), 73);
        assert_eq!(lex.male_occupations.len(), 48);
        assert_eq!(lex.female_occupations.len(), 45);
        assert!(lex.male_occupations.contains(&"plumber, pipefitter, and steamfitter".to_string()));
        assert!(lex.female_occupations.contains(&"office clerk, general".to_string()));
        for occ in lex.all_occupations() {
            assert!(lex.descriptions.contains_key(occ), "{occ}");
            assert!(lex.plural_forms.contains_key(occ), "{occ}");
        }
        assert_eq!(lex.content_hash(), bundled().content_hash());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint(shares in prop::collection::vec(0.0f64..=1.0, 0..40), t in 0.5001f64..=1.0) {
            let rows: Vec<_> = shares.iter().enumerate().map(|(i, s)| row(&format!("o{i}"), *s)).collect();
            let (m, f) = filter_by_share(&rows, t).unwrap();
            let ms: HashSet<_> = m.iter().collect();
            prop_assert!(f.iter().all(|o| !ms.contains(o)));
        }
    }
}
