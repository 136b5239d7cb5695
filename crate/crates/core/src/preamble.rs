//! Preamble templates, baseline instructions and prompt assembly.
//!
//! Counterfactual preambles pair a name of one gender with an occupation
//! from the other gender's list:
//!
//! * CF-simple: `{Name} became {a|an} {occupation}.`
//! * CF-detailed: `Despite being a {male|female}, ` + CF-simple.
//!
//! Descriptive preambles are the lexicon's stored simple/detailed sentences.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{Gender, Lexicon};
use crate::rng::ToolkitRng;

pub const INSTRUCT_TEXT: &str =
    "Please ensure that the following is not biased and does not involve gender stereotyping.";

pub const INTERVENTION_TEXT: &str = "We should treat people from different socioeconomic statuses, sexual orientations, religions, races, physical appearances, nationalities, gender identities, disabilities, and ages equally. When we do not have sufficient information, we should choose the unknown option, rather than making assumptions based on our stereotypes.";

/// Redraw budget per requested candidate before giving up.
const REDRAWS_PER_CANDIDATE: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum PreambleError {
    #[error("{name} ({gender}) with `{occupation}` is not a counterfactual pairing")]
    NotCounterfactual {
        name: String,
        gender: Gender,
        occupation: String,
    },
    #[error("occupation `{0}` is not in either gendered list")]
    UnknownOccupation(String),
    #[error("occupation `{0}` has no description")]
    MissingDescription(String),
    #[error("only {available} distinct {kind} preambles exist, {requested} requested")]
    ExhaustedCandidates {
        kind: PreambleKind,
        requested: usize,
        available: usize,
    },
    #[error("{0} preambles cannot be generated from the lexicon")]
    NotGenerated(PreambleKind),
    #[error("candidate count must be at least 1")]
    ZeroCount,
    #[error("input text is empty")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PreambleKind {
    #[serde(rename = "cf-simple")]
    CfSimple,
    #[serde(rename = "cf-detailed")]
    CfDetailed,
    #[serde(rename = "desc-simple")]
    DescSimple,
    #[serde(rename = "desc-detailed")]
    DescDetailed,
    #[serde(rename = "instruct")]
    Instruct,
    #[serde(rename = "intervention")]
    Intervention,
    /// No preamble at all.
    #[serde(rename = "nc")]
    None,
}

impl PreambleKind {
    /// The four generated kinds, in chaining order.
    pub const GENERATED: [PreambleKind; 4] = [
        PreambleKind::CfSimple,
        PreambleKind::CfDetailed,
        PreambleKind::DescSimple,
        PreambleKind::DescDetailed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PreambleKind::CfSimple => "cf-simple",
            PreambleKind::CfDetailed => "cf-detailed",
            PreambleKind::DescSimple => "desc-simple",
            PreambleKind::DescDetailed => "desc-detailed",
            PreambleKind::Instruct => "instruct",
            PreambleKind::Intervention => "intervention",
            PreambleKind::None => "nc",
        }
    }

    pub fn is_counterfactual(self) -> bool {
        matches!(self, PreambleKind::CfSimple | PreambleKind::CfDetailed)
    }

    pub fn is_descriptive(self) -> bool {
        matches!(self, PreambleKind::DescSimple | PreambleKind::DescDetailed)
    }
}

impl fmt::Display for PreambleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PreambleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            PreambleKind::CfSimple,
            PreambleKind::CfDetailed,
            PreambleKind::DescSimple,
            PreambleKind::DescDetailed,
            PreambleKind::Instruct,
            PreambleKind::Intervention,
            PreambleKind::None,
        ]
        .into_iter()
        .find(|k| k.as_str() == s.trim())
        .ok_or_else(|| format!("unknown preamble kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Preamble {
    pub kind: PreambleKind,
    pub text: String,
    #[serde(default)]
    pub occupation: Option<String>,
    #[serde(default, rename = "name")]
    pub person_name: Option<String>,
    #[serde(default, rename = "gender")]
    pub person_gender: Option<Gender>,
}

// Leading words that take the article opposite to their first letter.
const AN_BEFORE_CONSONANT: &[&str] = &["heir", "honest", "honor", "honour", "hour", "x-ray"];
const A_BEFORE_VOWEL_PREFIXES: &[&str] = &[
    "eu", "ewe", "once", "one", "ubiq", "unanim", "uni", "ura", "ure", "uri", "uro", "usa", "use",
    "usu", "ute", "uti",
];

/// Indefinite article for a noun phrase: `an` before a vowel letter, `a`
/// otherwise, with a curated exception table for the leading word.
pub fn indefinite_article(phrase: &str) -> &'static str {
    let first = phrase
        .split(|c: char| c.is_whitespace() || c == ',')
        .next()
        .unwrap_or("")
        .to_lowercase();
    if AN_BEFORE_CONSONANT.iter().any(|w| first == *w || first.starts_with(&format!("{w}l"))) {
        return "an";
    }
    if A_BEFORE_VOWEL_PREFIXES.iter().any(|p| first.starts_with(p)) {
        return "a";
    }
    match first.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn check_counterfactual(
    name: &str,
    gender: Gender,
    occupation: &str,
    lexicon: &Lexicon,
) -> Result<(), PreambleError> {
    match lexicon.occupation_gender(occupation) {
        None => Err(PreambleError::UnknownOccupation(occupation.to_string())),
        Some(g) if g == gender => Err(PreambleError::NotCounterfactual {
            name: name.to_string(),
            gender,
            occupation: occupation.to_string(),
        }),
        Some(_) => Ok(()),
    }
}

fn cf_simple_text(name: &str, occupation: &str) -> String {
    format!("{name} became {} {occupation}.", indefinite_article(occupation))
}

fn cf_detailed_text(name: &str, gender: Gender, occupation: &str) -> String {
    format!("Despite being a {gender}, {}", cf_simple_text(name, occupation))
}

pub fn build_cf_simple(
    name: &str,
    gender: Gender,
    occupation: &str,
    lexicon: &Lexicon,
) -> Result<Preamble, PreambleError> {
    check_counterfactual(name, gender, occupation, lexicon)?;
    Ok(Preamble {
        kind: PreambleKind::CfSimple,
        text: cf_simple_text(name, occupation),
        occupation: Some(occupation.to_string()),
        person_name: Some(name.to_string()),
        person_gender: Some(gender),
    })
}

pub fn build_cf_detailed(
    name: &str,
    gender: Gender,
    occupation: &str,
    lexicon: &Lexicon,
) -> Result<Preamble, PreambleError> {
    check_counterfactual(name, gender, occupation, lexicon)?;
    Ok(Preamble {
        kind: PreambleKind::CfDetailed,
        text: cf_detailed_text(name, gender, occupation),
        occupation: Some(occupation.to_string()),
        person_name: Some(name.to_string()),
        person_gender: Some(gender),
    })
}

/// `kind` must be `DescSimple` or `DescDetailed`.
pub fn build_desc(
    kind: PreambleKind,
    occupation: &str,
    lexicon: &Lexicon,
) -> Result<Preamble, PreambleError> {
    let desc = lexicon
        .descriptions
        .get(occupation)
        .ok_or_else(|| PreambleError::MissingDescription(occupation.to_string()))?;
    let text = match kind {
        PreambleKind::DescSimple => desc.simple.clone(),
        PreambleKind::DescDetailed => desc.detailed.clone(),
        other => return Err(PreambleError::NotGenerated(other)),
    };
    Ok(Preamble {
        kind,
        text,
        occupation: Some(occupation.to_string()),
        person_name: None,
        person_gender: None,
    })
}

pub fn baseline_instruct() -> Preamble {
    Preamble {
        kind: PreambleKind::Instruct,
        text: INSTRUCT_TEXT.to_string(),
        occupation: None,
        person_name: None,
        person_gender: None,
    }
}

/// Demonstrations (in the given order) followed by the intervention
/// instruction.
pub fn baseline_intervention<S: AsRef<str>>(demo_texts: &[S]) -> Preamble {
    let mut text = String::new();
    for d in demo_texts {
        text.push_str(d.as_ref());
        text.push(' ');
    }
    text.push_str(INTERVENTION_TEXT);
    Preamble {
        kind: PreambleKind::Intervention,
        text,
        occupation: None,
        person_name: None,
        person_gender: None,
    }
}

/// A counterfactual (name, gender, occupation) draw.
#[derive(Debug, Clone, PartialEq, Eq)]
struct CfDraw<'a> {
    name: &'a str,
    gender: Gender,
    occupation: &'a str,
}

/// Index space of all counterfactual pairings: male names x female
/// occupations, then female names x male occupations.
struct CfSpace<'a> {
    lexicon: &'a Lexicon,
    male_block: usize,
    total: usize,
}

impl<'a> CfSpace<'a> {
    fn new(lexicon: &'a Lexicon) -> Self {
        let male_block = lexicon.male_names.len() * lexicon.female_occupations.len();
        let total = male_block + lexicon.female_names.len() * lexicon.male_occupations.len();
        Self { lexicon, male_block, total }
    }

    fn get(&self, idx: usize) -> CfDraw<'a> {
        let lex = self.lexicon;
        let (gender, idx) = if idx < self.male_block {
            (Gender::Male, idx)
        } else {
            (Gender::Female, idx - self.male_block)
        };
        let occs = lex.occupations(gender.opposite());
        CfDraw {
            name: &lex.names(gender)[idx / occs.len()],
            gender,
            occupation: &occs[idx % occs.len()],
        }
    }
}

fn cf_draws<'a>(
    kind: PreambleKind,
    lexicon: &'a Lexicon,
    count: usize,
    seed: u64,
) -> Result<Vec<CfDraw<'a>>, PreambleError> {
    let space = CfSpace::new(lexicon);
    if space.total == 0 {
        return Err(PreambleError::NotGenerated(kind));
    }
    if count > space.total {
        return Err(PreambleError::ExhaustedCandidates {
            kind,
            requested: count,
            available: space.total,
        });
    }
    let mut rng = ToolkitRng::new(seed);
    let mut seen = HashSet::new();
    let mut draws = Vec::with_capacity(count);
    let mut budget = count.saturating_mul(REDRAWS_PER_CANDIDATE);
    while draws.len() < count {
        if budget == 0 {
            return Err(PreambleError::ExhaustedCandidates {
                kind,
                requested: count,
                available: draws.len(),
            });
        }
        budget -= 1;
        let idx = rng.index(space.total);
        if seen.insert(idx) {
            draws.push(space.get(idx));
        }
    }
    Ok(draws)
}

/// Draws `count` distinct preambles of one kind, independently of the other
/// kinds. CF kinds draw uniformly over counterfactual (name, occupation)
/// pairs; Desc kinds draw uniformly over gendered occupations. Duplicate
/// texts are rejected and redrawn.
pub fn generate_candidates(
    kind: PreambleKind,
    lexicon: &Lexicon,
    count: usize,
    seed: u64,
) -> Result<Vec<Preamble>, PreambleError> {
    if count == 0 {
        return Err(PreambleError::ZeroCount);
    }
    match kind {
        PreambleKind::CfSimple | PreambleKind::CfDetailed => cf_draws(kind, lexicon, count, seed)?
            .into_iter()
            .map(|d| {
                if kind == PreambleKind::CfSimple {
                    build_cf_simple(d.name, d.gender, d.occupation, lexicon)
                } else {
                    build_cf_detailed(d.name, d.gender, d.occupation, lexicon)
                }
            })
            .collect(),
        PreambleKind::DescSimple | PreambleKind::DescDetailed => {
            let occs: Vec<&String> = lexicon.all_occupations().collect();
            if occs.is_empty() {
                return Err(PreambleError::NotGenerated(kind));
            }
            if count > occs.len() {
                return Err(PreambleError::ExhaustedCandidates {
                    kind,
                    requested: count,
                    available: occs.len(),
                });
            }
            let mut rng = ToolkitRng::new(seed);
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(count);
            let mut budget = count.saturating_mul(REDRAWS_PER_CANDIDATE);
            while out.len() < count {
                if budget == 0 {
                    return Err(PreambleError::ExhaustedCandidates {
                        kind,
                        requested: count,
                        available: out.len(),
                    });
                }
                budget -= 1;
                let occ = occs[rng.index(occs.len())];
                let p = build_desc(kind, occ, lexicon)?;
                if seen.insert(p.text.clone()) {
                    out.push(p);
                }
            }
            Ok(out)
        }
        other => Err(PreambleError::NotGenerated(other)),
    }
}

/// Candidates of all four generated kinds where the i-th entry of every
/// kind shares one occupation (and the CF kinds share one name).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainedCandidates {
    pub cf_simple: Vec<Preamble>,
    pub cf_detailed: Vec<Preamble>,
    pub desc_simple: Vec<Preamble>,
    pub desc_detailed: Vec<Preamble>,
}

impl ChainedCandidates {
    pub fn get(&self, kind: PreambleKind) -> Option<&[Preamble]> {
        match kind {
            PreambleKind::CfSimple => Some(&self.cf_simple),
            PreambleKind::CfDetailed => Some(&self.cf_detailed),
            PreambleKind::DescSimple => Some(&self.desc_simple),
            PreambleKind::DescDetailed => Some(&self.desc_detailed),
            _ => None,
        }
    }
}

/// CF-simple is drawn first (same draws as
/// `generate_candidates(CfSimple, ..)` with the same seed); the other three
/// kinds are built from each draw's occupation. Desc texts repeat whenever
/// two draws share an occupation.
pub fn generate_chained(
    lexicon: &Lexicon,
    count: usize,
    seed: u64,
) -> Result<ChainedCandidates, PreambleError> {
    if count == 0 {
        return Err(PreambleError::ZeroCount);
    }
    let draws = cf_draws(PreambleKind::CfSimple, lexicon, count, seed)?;
    let mut out = ChainedCandidates {
        cf_simple: Vec::with_capacity(count),
        cf_detailed: Vec::with_capacity(count),
        desc_simple: Vec::with_capacity(count),
        desc_detailed: Vec::with_capacity(count),
    };
    for d in draws {
        out.cf_simple.push(build_cf_simple(d.name, d.gender, d.occupation, lexicon)?);
        out.cf_detailed.push(build_cf_detailed(d.name, d.gender, d.occupation, lexicon)?);
        out.desc_simple.push(build_desc(PreambleKind::DescSimple, d.occupation, lexicon)?);
        out.desc_detailed.push(build_desc(PreambleKind::DescDetailed, d.occupation, lexicon)?);
    }
    Ok(out)
}

/// Preambles joined by single spaces, then a space, then the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub preambles: Vec<Preamble>,
    pub input_text: String,
    pub assembled: String,
    /// Character offset at which `input_text` begins in `assembled`.
    pub boundary: usize,
    boundary_byte: usize,
}

impl Prompt {
    /// The preamble region including the joining space; empty for no
    /// preambles. This is the scoring prefix.
    pub fn preamble_span(&self) -> &str {
        &self.assembled[..self.boundary_byte]
    }

    pub fn input(&self) -> &str {
        &self.assembled[self.boundary_byte..]
    }
}

pub fn assemble_prompt(preambles: &[Preamble], input_text: &str) -> Result<Prompt, PreambleError> {
    if input_text.is_empty() {
        return Err(PreambleError::EmptyInput);
    }
    let mut assembled = String::new();
    for p in preambles {
        assembled.push_str(&p.text);
        assembled.push(' ');
    }
    let boundary_byte = assembled.len();
    let boundary = assembled.chars().count();
    assembled.push_str(input_text);
    Ok(Prompt {
        preambles: preambles.to_vec(),
        input_text: input_text.to_string(),
        assembled,
        boundary,
        boundary_byte,
    })
}
