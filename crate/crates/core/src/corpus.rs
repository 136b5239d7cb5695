//! Bias-pair and multiple-choice dataset loading.
//!
//! CrowsPairs rows are normalised so that `stereotypical` always holds the
//! sentence expressing the stereotype: for `antistereo` rows the two
//! sentence columns are swapped. Rows whose two sentences are identical
//! after trimming are skipped and counted in
//! [`PairDataset::skipped_degenerate`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng::ToolkitRng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("malformed CSV at line {line}: {message}")]
    MalformedCsv { line: u64, message: String },
    #[error("line {line}: unknown stereo_antistereo value `{value}`")]
    UnknownDirectionValue { line: u64, value: String },
    #[error("line {line}: unknown bias type `{value}`")]
    UnknownBiasType { line: u64, value: String },
    #[error("line {line}: empty sentence")]
    EmptySentence { line: u64 },
    #[error("malformed JSON at line {line}: {message}")]
    MalformedJson { line: u64, message: String },
    #[error("line {line}: expected {expected} choices, found {found}")]
    WrongChoiceCount { line: u64, expected: usize, found: usize },
    #[error("line {line}: label {label} out of range")]
    LabelOutOfRange { line: u64, label: i64 },
    #[error("requested {requested} items but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The nine CrowsPairs bias categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasType {
    Gender,
    RaceColor,
    Socioeconomic,
    Nationality,
    Religion,
    Age,
    SexualOrientation,
    PhysicalAppearance,
    Disability,
}

impl BiasType {
    pub const ALL: [BiasType; 9] = [
        BiasType::Gender,
        BiasType::RaceColor,
        BiasType::Socioeconomic,
        BiasType::Nationality,
        BiasType::Religion,
        BiasType::Age,
        BiasType::SexualOrientation,
        BiasType::PhysicalAppearance,
        BiasType::Disability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasType::Gender => "gender",
            BiasType::RaceColor => "race-color",
            BiasType::Socioeconomic => "socioeconomic",
            BiasType::Nationality => "nationality",
            BiasType::Religion => "religion",
            BiasType::Age => "age",
            BiasType::SexualOrientation => "sexual-orientation",
            BiasType::PhysicalAppearance => "physical-appearance",
            BiasType::Disability => "disability",
        }
    }
}

impl fmt::Display for BiasType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        if t == "race" {
            return Ok(BiasType::RaceColor);
        }
        BiasType::ALL
            .into_iter()
            .find(|b| b.as_str() == t)
            .ok_or_else(|| format!("unknown bias type `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub stereotypical: String,
    pub anti_stereotypical: String,
    pub bias_type: BiasType,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairDataset {
    pub pairs: Vec<SentencePair>,
    pub source_path: String,
    /// Rows dropped because both sentences were identical.
    pub skipped_degenerate: Vec<String>,
    /// Rows whose annotation direction was `antistereo` and were swapped.
    pub remapped_antistereo: usize,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

const COL_MORE: &str = "sent_more";
const COL_LESS: &str = "sent_less";
const COL_DIRECTION: &str = "stereo_antistereo";
const COL_BIAS: &str = "bias_type";

/// Parses the public CrowsPairs CSV schema.
pub fn parse_crows_pairs(csv_bytes: &[u8]) -> Result<PairDataset, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(csv_bytes);
    let headers = reader
        .headers()
        .map_err(|e| malformed_csv(&e, 1))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))
    };
    let i_more = column(COL_MORE)?;
    let i_less = column(COL_LESS)?;
    let i_dir = column(COL_DIRECTION)?;
    let i_bias = column(COL_BIAS)?;

    let mut dataset = PairDataset::default();
    for (ordinal, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed_csv(&e, ordinal as u64 + 2))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let more = field(i_more);
        let less = field(i_less);
        if more.trim().is_empty() || less.trim().is_empty() {
            return Err(CorpusError::EmptySentence { line });
        }
        let direction = field(i_dir).trim();
        let (s, a) = match direction {
            "stereo" => (more, less),
            "antistereo" => {
                dataset.remapped_antistereo += 1;
                (less, more)
            }
            other => {
                return Err(CorpusError::UnknownDirectionValue {
                    line,
                    value: other.to_string(),
                })
            }
        };
        let bias_type = BiasType::from_str(field(i_bias)).map_err(|_| {
            CorpusError::UnknownBiasType {
                line,
                value: field(i_bias).to_string(),
            }
        })?;
        let id = ordinal.to_string();
        if s.trim() == a.trim() {
            log::warn!("skipping CrowsPairs row {id} (line {line}): sentences are identical");
            dataset.skipped_degenerate.push(id);
            continue;
        }
        dataset.pairs.push(SentencePair {
            id,
            stereotypical: s.to_string(),
            anti_stereotypical: a.to_string(),
            bias_type,
        });
    }
    Ok(dataset)
}

fn malformed_csv(err: &csv::Error, fallback_line: u64) -> CorpusError {
    let line = err
        .position()
        .map(|p| p.line())
        .unwrap_or(fallback_line);
    CorpusError::MalformedCsv {
        line,
        message: err.to_string(),
    }
}

pub fn load_crows_pairs(path: &Path) -> Result<PairDataset, CorpusError> {
    let bytes = read(path)?;
    let mut ds = parse_crows_pairs(&bytes)?;
    ds.source_path = path.display().to_string();
    Ok(ds)
}

/// Serialises back to the CrowsPairs schema, every row in `stereo` direction.
pub fn to_crows_pairs_csv(dataset: &PairDataset) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([COL_MORE, COL_LESS, COL_DIRECTION, COL_BIAS])
        .expect("writing to a Vec cannot fail");
    for p in &dataset.pairs {
        w.write_record([
            p.stereotypical.as_str(),
            p.anti_stereotypical.as_str(),
            "stereo",
            p.bias_type.as_str(),
        ])
        .expect("writing to a Vec cannot fail");
    }
    w.into_inner().expect("flushing a Vec cannot fail")
}

pub fn filter_bias_type(dataset: &PairDataset, tag: BiasType) -> PairDataset {
    PairDataset {
        pairs: dataset
            .pairs
            .iter()
            .filter(|p| p.bias_type == tag)
            .cloned()
            .collect(),
        source_path: dataset.source_path.clone(),
        skipped_degenerate: dataset.skipped_degenerate.clone(),
        remapped_antistereo: dataset.remapped_antistereo,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChoiceSource {
    Copa,
    Hellaswag,
}

impl ChoiceSource {
    pub fn expected_choices(self) -> usize {
        match self {
            ChoiceSource::Copa => 2,
            ChoiceSource::Hellaswag => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChoiceSource::Copa => "copa",
            ChoiceSource::Hellaswag => "hellaswag",
        }
    }
}

impl FromStr for ChoiceSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "copa" => Ok(ChoiceSource::Copa),
            "hellaswag" => Ok(ChoiceSource::Hellaswag),
            other => Err(format!("unknown multiple-choice source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultipleChoiceItem {
    pub id: String,
    pub premise: String,
    pub choices: Vec<String>,
    pub gold_index: usize,
    pub source: ChoiceSource,
    /// COPA `cause`/`effect`; kept as metadata, never rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

/// Parses COPA or HellaSwag JSON lines.
///
/// COPA labels are 1-based (`1` or `2`, the original COPA convention);
/// HellaSwag labels are 0-based indices into `endings`.
pub fn parse_multiple_choice(
    jsonl_bytes: &[u8],
    source: ChoiceSource,
) -> Result<Vec<MultipleChoiceItem>, CorpusError> {
    let text = std::str::from_utf8(jsonl_bytes).map_err(|e| CorpusError::MalformedJson {
        line: 0,
        message: format!("input is not UTF-8: {e}"),
    })?;
    let mut items = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| CorpusError::MalformedJson {
            line,
            message: e.to_string(),
        })?;
        let ordinal = items.len();
        let item = match source {
            ChoiceSource::Copa => copa_item(&value, line, ordinal)?,
            ChoiceSource::Hellaswag => hellaswag_item(&value, line, ordinal)?,
        };
        if !seen.insert(item.id.clone()) {
            return Err(CorpusError::DuplicateId(item.id));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_multiple_choice(
    path: &Path,
    source: ChoiceSource,
) -> Result<Vec<MultipleChoiceItem>, CorpusError> {
    parse_multiple_choice(&read(path)?, source)
}

fn copa_item(v: &Value, line: u64, ordinal: usize) -> Result<MultipleChoiceItem, CorpusError> {
    let premise = str_field(v, "premise", line)?;
    let choices: Vec<String> = ["choice1", "choice2"]
        .iter()
        .filter_map(|k| v.get(*k).and_then(Value::as_str).map(str::to_string))
        .collect();
    if choices.len() != 2 {
        return Err(CorpusError::WrongChoiceCount {
            line,
            expected: 2,
            found: choices.len(),
        });
    }
    let label = label_field(v, line)?;
    if !(1..=2).contains(&label) {
        return Err(CorpusError::LabelOutOfRange { line, label });
    }
    Ok(MultipleChoiceItem {
        id: id_field(v, &["idx", "id"], ordinal),
        premise,
        choices,
        gold_index: (label - 1) as usize,
        source: ChoiceSource::Copa,
        question: v.get("question").and_then(Value::as_str).map(str::to_string),
    })
}

fn hellaswag_item(
    v: &Value,
    line: u64,
    ordinal: usize,
) -> Result<MultipleChoiceItem, CorpusError> {
    let premise = str_field(v, "ctx", line)?;
    let endings = v
        .get("endings")
        .and_then(Value::as_array)
        .ok_or_else(|| CorpusError::MalformedJson {
            line,
            message: "missing array field `endings`".into(),
        })?;
    let choices = endings
        .iter()
        .map(|e| {
            e.as_str().map(str::to_string).ok_or_else(|| CorpusError::MalformedJson {
                line,
                message: "non-string ending".into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if choices.len() != 4 {
        return Err(CorpusError::WrongChoiceCount {
            line,
            expected: 4,
            found: choices.len(),
        });
    }
    let label = label_field(v, line)?;
    if !(0..4).contains(&label) {
        return Err(CorpusError::LabelOutOfRange { line, label });
    }
    Ok(MultipleChoiceItem {
        id: id_field(v, &["ind", "id"], ordinal),
        premise,
        choices,
        gold_index: label as usize,
        source: ChoiceSource::Hellaswag,
        question: None,
    })
}

fn str_field(v: &Value, key: &str, line: u64) -> Result<String, CorpusError> {
    v.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| CorpusError::MalformedJson {
            line,
            message: format!("missing string field `{key}`"),
        })
}

// Labels show up both as numbers and as numeric strings in public dumps.
fn label_field(v: &Value, line: u64) -> Result<i64, CorpusError> {
    let bad = || CorpusError::MalformedJson {
        line,
        message: "missing or non-integer `label`".into(),
    };
    match v.get("label") {
        Some(Value::Number(n)) => n.as_i64().ok_or_else(bad),
        Some(Value::String(s)) => s.trim().parse().map_err(|_| bad()),
        _ => Err(bad()),
    }
}

fn id_field(v: &Value, keys: &[&str], ordinal: usize) -> String {
    for k in keys {
        match v.get(*k) {
            Some(Value::String(s)) => return s.clone(),
            Some(Value::Number(n)) => return n.to_string(),
            _ => {}
        }
    }
    ordinal.to_string()
}

/// Draws `n` items without replacement with the toolkit PRNG.
pub fn sample_items<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>, CorpusError> {
    if n > items.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: items.len(),
        });
    }
    Ok(ToolkitRng::new(seed)
        .sample_indices(items.len(), n)
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

/// Canonical dump: one JSON object per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("dataset rows serialise"));
        out.push('\n');
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}
