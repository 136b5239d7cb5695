//! Zero-shot multiple-choice evaluation by per-token perplexity.
//!
//! For each choice the scored span is `premise + " " + choice`, conditioned
//! on the preamble span. The choice with the lowest per-token perplexity is
//! predicted; exact ties go to the lowest index and are counted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MultipleChoiceItem;
use crate::exec::{try_map_ordered, ExecMode};
use crate::metrics::condition_of;
use crate::preamble::{assemble_prompt, Preamble, PreambleError, PreambleKind};
use crate::scoring::{per_token_perplexity, Backend, ScoreError, ScoreRequest};

#[derive(Debug, Error, PartialEq)]
pub enum DownstreamError {
    #[error("no items")]
    EmptyDataset,
    #[error("item {item_id} has no choices")]
    NoChoices { item_id: String },
    #[error("item {item_id}, choice {choice}: {source}")]
    Scoring {
        item_id: String,
        choice: usize,
        #[source]
        source: ScoreError,
    },
    #[error("item {item_id}: {source}")]
    Prompt {
        item_id: String,
        #[source]
        source: PreambleError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPrediction {
    pub item_id: String,
    pub chosen_index: usize,
    pub gold_index: usize,
    pub per_choice_perplexity: Vec<f64>,
    pub correct: bool,
    /// Another choice had exactly the winning perplexity.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub condition: PreambleKind,
    pub n_preambles: usize,
    pub accuracy: f64,
    /// Percentage points against the reference accuracy, when one is given.
    pub delta_acc: Option<f64>,
    pub item_count: usize,
    pub tie_count: usize,
    pub backend_id: String,
    pub predictions: Vec<ItemPrediction>,
}

/// The scored span for one choice.
pub fn scored_text(premise: &str, choice: &str) -> String {
    format!("{premise} {choice}")
}

/// Index of the first minimum and whether another index ties it.
pub fn argmin_first(values: &[f64]) -> Option<(usize, bool)> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best.map(|b| (b, values.iter().enumerate().any(|(i, v)| i != b && *v == values[b])))
}

pub fn evaluate_item<B: Backend + ?Sized>(
    item: &MultipleChoiceItem,
    backend: &B,
    preambles: &[Preamble],
) -> Result<ItemPrediction, DownstreamError> {
    let mut ppl = Vec::with_capacity(item.choices.len());
    for (choice, text) in item.choices.iter().enumerate() {
        let prompt = assemble_prompt(preambles, &scored_text(&item.premise, text))
            .map_err(|source| DownstreamError::Prompt { item_id: item.id.clone(), source })?;
        let score = ScoreRequest::new(prompt.preamble_span(), prompt.input())
            .and_then(|req| backend.score(&req))
            .map_err(|source| DownstreamError::Scoring { item_id: item.id.clone(), choice, source })?;
        ppl.push(per_token_perplexity(&score));
    }
    let (chosen_index, tie) =
        argmin_first(&ppl).ok_or_else(|| DownstreamError::NoChoices { item_id: item.id.clone() })?;
    Ok(ItemPrediction {
        item_id: item.id.clone(),
        chosen_index,
        gold_index: item.gold_index,
        per_choice_perplexity: ppl,
        correct: chosen_index == item.gold_index,
        tie,
    })
}

/// Accuracy over `items`. With `nc_accuracy`, `delta_acc` is
/// `100 * (accuracy - nc_accuracy)`.
pub fn evaluate_dataset<B: Backend + ?Sized>(
    items: &[MultipleChoiceItem],
    backend: &B,
    preambles: &[Preamble],
    nc_accuracy: Option<f64>,
    exec: ExecMode,
) -> Result<DownstreamReport, DownstreamError> {
    if items.is_empty() {
        return Err(DownstreamError::EmptyDataset);
    }
    let predictions = try_map_ordered(items, exec, |item| evaluate_item(item, backend, preambles))?;
    let correct = predictions.iter().filter(|p| p.correct).count();
    let accuracy = correct as f64 / predictions.len() as f64;
    Ok(DownstreamReport {
        condition: condition_of(preambles),
        n_preambles: preambles.len(),
        accuracy,
        delta_acc: nc_accuracy.map(|nc| 100.0 * (accuracy - nc)),
        item_count: predictions.len(),
        tie_count: predictions.iter().filter(|p| p.tie).count(),
        backend_id: backend.backend_id().to_string(),
        predictions,
    })
}
