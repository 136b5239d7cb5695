//! Perplexity ranking of candidate preambles and the random baseline.
//!
//! Each candidate is scored on its own (empty prefix, target = its text).
//! Ranking is a stable ascending sort, so equal perplexities keep candidate
//! order. `top_n` returns the leading `n`, lowest perplexity first, which is
//! the left-to-right order used when concatenating preambles.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{try_map_ordered, ExecMode};
use crate::preamble::Preamble;
use crate::rng::sample_indices;
use crate::scoring::{per_token_perplexity, Backend, ScoreError, ScoreRequest};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("no candidates")]
    EmptyCandidates,
    #[error("N must be at least 1")]
    ZeroN,
    #[error("N = {n} exceeds the {available} available candidates")]
    NTooLarge { n: usize, available: usize },
    #[error("{candidates} candidates but {perplexities} perplexities")]
    LengthMismatch { candidates: usize, perplexities: usize },
    #[error("candidate {index} ({text:?}): {source}")]
    Scoring {
        index: usize,
        text: String,
        #[source]
        source: ScoreError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPreamble {
    /// 1-based.
    pub rank: usize,
    pub perplexity: f64,
    #[serde(flatten)]
    pub preamble: Preamble,
}

/// Standalone per-token perplexity of each candidate, in input order.
pub fn standalone_perplexities<B: Backend + ?Sized>(
    candidates: &[Preamble],
    backend: &B,
    exec: ExecMode,
) -> Result<Vec<f64>, SelectionError> {
    let indexed: Vec<(usize, &Preamble)> = candidates.iter().enumerate().collect();
    try_map_ordered(&indexed, exec, |(index, p)| {
        ScoreRequest::new("", p.text.as_str())
            .and_then(|req| backend.score(&req))
            .map(|s| per_token_perplexity(&s))
            .map_err(|source| SelectionError::Scoring { index: *index, text: p.text.clone(), source })
    })
}

/// Stable ascending sort of `candidates` by `perplexities`.
pub fn rank_from_perplexities(
    candidates: &[Preamble],
    perplexities: &[f64],
) -> Result<Vec<RankedPreamble>, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::EmptyCandidates);
    }
    if candidates.len() != perplexities.len() {
        return Err(SelectionError::LengthMismatch {
            candidates: candidates.len(),
            perplexities: perplexities.len(),
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| perplexities[a].total_cmp(&perplexities[b]));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(r, i)| RankedPreamble { rank: r + 1, perplexity: perplexities[i], preamble: candidates[i].clone() })
        .collect())
}

/// Scores and ranks `candidates`. Takes no dataset: ranking depends only on
/// the preamble texts.
pub fn rank_by_perplexity<B: Backend + ?Sized>(
    candidates: &[Preamble],
    backend: &B,
    exec: ExecMode,
) -> Result<Vec<RankedPreamble>, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::EmptyCandidates);
    }
    let ppl = standalone_perplexities(candidates, backend, exec)?;
    rank_from_perplexities(candidates, &ppl)
}

fn check_n(n: usize, available: usize) -> Result<(), SelectionError> {
    if n == 0 {
        Err(SelectionError::ZeroN)
    } else if n > available {
        Err(SelectionError::NTooLarge { n, available })
    } else {
        Ok(())
    }
}

/// The `n` lowest-perplexity preambles, lowest first.
pub fn top_n(ranked: &[RankedPreamble], n: usize) -> Result<Vec<Preamble>, SelectionError> {
    check_n(n, ranked.len())?;
    Ok(ranked[..n].iter().map(|r| r.preamble.clone()).collect())
}

/// Indices of `n` candidates drawn without replacement with the toolkit
/// PRNG. Applying the same indices to chained candidate lists keeps the
/// i-th pick of every kind on one occupation.
pub fn random_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>, SelectionError> {
    check_n(n, len)?;
    Ok(sample_indices(len, n, seed))
}

pub fn random_select(candidates: &[Preamble], n: usize, seed: u64) -> Result<Vec<Preamble>, SelectionError> {
    Ok(random_indices(candidates.len(), n, seed)?
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

/// Keeps the first occurrence of each text.
pub fn dedup_by_text(candidates: &[Preamble]) -> Vec<Preamble> {
    let mut seen = HashSet::new();
    candidates.iter().filter(|p| seen.insert(p.text.as_str())).cloned().collect()
}
