//! Deterministic word-level language model defined by probability tables.
//!
//! Text is split on whitespace. Each word is looked up by its key: lowercase
//! with leading and trailing non-alphanumeric characters removed. The next
//! word's distribution is the override of the most recent trigger word in
//! the context (prefix words, then preceding target words), or the base
//! distribution when no trigger has occurred. Words outside the vocabulary
//! score as `<unk>` when the vocabulary contains it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendDescriptor, BackendKind, ScoreError, ScoreRequest, SequenceScore, ScoredToken};

pub const UNK: &str = "<unk>";
const ROW_TOLERANCE: f64 = 1e-9;

/// Serialised form of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub vocabulary: Vec<String>,
    pub base: BTreeMap<String, f64>,
    #[serde(default)]
    pub triggers: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone)]
pub struct TableLm {
    spec: TableSpec,
    vocab: BTreeSet<String>,
    base: BTreeMap<String, f64>,
    triggers: BTreeMap<String, BTreeMap<String, f64>>,
    descriptor: BackendDescriptor,
}

/// Lookup key for a word.
pub fn word_key(word: &str) -> String {
    if word == UNK {
        return UNK.to_string();
    }
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Splits `text` into whitespace-delimited tokens whose texts concatenate
/// back to `text`: leading whitespace belongs to the following word and
/// trailing whitespace to the last word.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut word_ends = Vec::new();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && in_word {
            word_ends.push(i);
        }
        in_word = !ws;
    }
    if in_word {
        word_ends.push(text.len());
    }
    let n = word_ends.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for (k, &end) in word_ends.iter().enumerate() {
        let end = if k + 1 == n { text.len() } else { end };
        out.push(&text[start..end]);
        start = end;
    }
    out
}

fn check_row(name: &str, row: &BTreeMap<String, f64>, vocab: &BTreeSet<String>) -> Result<BTreeMap<String, f64>, ScoreError> {
    let mut out = BTreeMap::new();
    let mut total = 0.0;
    for (word, &p) in row {
        let key = word_key(word);
        if !vocab.contains(&key) {
            return Err(ScoreError::InvalidDistribution(format!(
                "{name}: `{word}` is not in the vocabulary"
            )));
        }
        if !p.is_finite() || p < 0.0 {
            return Err(ScoreError::InvalidDistribution(format!("{name}: P(`{word}`) = {p}")));
        }
        if out.insert(key, p).is_some() {
            return Err(ScoreError::InvalidDistribution(format!("{name}: `{word}` listed twice")));
        }
        total += p;
    }
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(ScoreError::InvalidDistribution(format!("{name} sums to {total}")));
    }
    Ok(out)
}

impl TableLm {
    pub fn new(spec: TableSpec) -> Result<Self, ScoreError> {
        let mut vocab = BTreeSet::new();
        for w in &spec.vocabulary {
            let key = word_key(w);
            if key.is_empty() {
                return Err(ScoreError::InvalidDistribution(format!("vocabulary word `{w}` has no key")));
            }
            if !vocab.insert(key) {
                return Err(ScoreError::InvalidDistribution(format!("vocabulary word `{w}` listed twice")));
            }
        }
        let base = check_row("base", &spec.base, &vocab)?;
        let mut triggers = BTreeMap::new();
        for (trigger, row) in &spec.triggers {
            let key = word_key(trigger);
            let row = check_row(&format!("trigger `{trigger}`"), row, &vocab)?;
            if triggers.insert(key, row).is_some() {
                return Err(ScoreError::InvalidDistribution(format!("trigger `{trigger}` listed twice")));
            }
        }
        let canonical = serde_json::to_vec(&(&vocab, &base, &triggers)).expect("table serialises");
        let descriptor = BackendDescriptor {
            backend_id: format!("table-lm:{}", hex::encode(Sha256::digest(&canonical))),
            kind: BackendKind::Synthetic,
        };
        Ok(Self { spec, vocab, base, triggers, descriptor })
    }

    /// Base distribution only, no triggers.
    pub fn from_base<S: AsRef<str>>(base: &[(S, f64)]) -> Result<Self, ScoreError> {
        Self::new(TableSpec {
            vocabulary: base.iter().map(|(w, _)| w.as_ref().to_string()).collect(),
            base: base.iter().map(|(w, p)| (w.as_ref().to_string(), *p)).collect(),
            triggers: BTreeMap::new(),
        })
    }

    /// Equal probability for every word.
    pub fn uniform<S: AsRef<str>>(vocabulary: &[S]) -> Result<Self, ScoreError> {
        let p = 1.0 / vocabulary.len() as f64;
        let rows: Vec<(&str, f64)> = vocabulary.iter().map(|w| (w.as_ref(), p)).collect();
        Self::from_base(&rows)
    }

    pub fn with_trigger<S: AsRef<str>>(mut self, trigger: &str, row: &[(S, f64)]) -> Result<Self, ScoreError> {
        self.spec.triggers.insert(
            trigger.to_string(),
            row.iter().map(|(w, p)| (w.as_ref().to_string(), *p)).collect(),
        );
        Self::new(self.spec)
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn from_json(text: &str) -> Result<Self, ScoreError> {
        let spec: TableSpec = serde_json::from_str(text)
            .map_err(|e| ScoreError::InvalidDistribution(format!("table JSON: {e}")))?;
        Self::new(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScoreError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn distribution(&self, context: &[String]) -> &BTreeMap<String, f64> {
        context
            .iter()
            .rev()
            .find_map(|k| self.triggers.get(k))
            .unwrap_or(&self.base)
    }

    fn probability(&self, dist: &BTreeMap<String, f64>, word: &str) -> Result<f64, ScoreError> {
        let key = word_key(word);
        let key = if self.vocab.contains(&key) {
            key
        } else if self.vocab.contains(UNK) {
            UNK.to_string()
        } else {
            return Err(ScoreError::UnknownToken(word.trim().to_string()));
        };
        match dist.get(&key).copied().unwrap_or(0.0) {
            p if p > 0.0 => Ok(p),
            _ => Err(ScoreError::ZeroProbability(word.trim().to_string())),
        }
    }
}

impl Backend for TableLm {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn score(&self, request: &ScoreRequest) -> Result<SequenceScore, ScoreError> {
        let pieces = split_tokens(&request.target);
        if pieces.is_empty() {
            return Err(ScoreError::EmptyTarget);
        }
        let mut context: Vec<String> = request.prefix.split_whitespace().map(word_key).collect();
        let mut tokens = Vec::with_capacity(pieces.len());
        for piece in pieces {
            let p = self.probability(self.distribution(&context), piece)?;
            tokens.push(ScoredToken { text: piece.to_string(), logprob: p.ln() });
            context.push(word_key(piece.trim()));
        }
        Ok(SequenceScore { tokens })
    }
}
