//! Corpus-level generation metrics: BLEU-1..4, ROUGE-L, and micro-averaged
//! label-efficacy precision/recall/F1.
//!
//! BLEU aggregates clipped n-gram counts over the whole corpus before taking
//! ratios; ROUGE-L averages per-pair F-measures; efficacy counts are
//! micro-averaged over every category slot.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::{label_report, Category, LabelLexicon, UncertaintyPolicy};
use crate::text::tokenize;

/// Recall weighting for the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

/// Highest n-gram order reported.
pub const BLEU_MAX_ORDER: usize = 4;

/// Optional add-one smoothing on orders above 1, off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuSmoothing {
    #[default]
    None,
    AddOne,
}

fn check_corpus(candidates: &[String], references: &[String]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1f}")).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU at the given order: geometric mean of clipped n-gram
/// precisions over orders `1..=order`, times the brevity penalty
/// `exp(1 − r/c)` when `c < r`. Any zero precision gives zero unless add-one
/// smoothing is on.
pub fn bleu(
    candidates: &[String],
    references: &[String],
    order: usize,
    smoothing: BleuSmoothing,
) -> Result<f64> {
    check_corpus(candidates, references)?;
    if order == 0 || order > BLEU_MAX_ORDER {
        return Err(Error::InvalidArgument(format!(
            "BLEU order must be in 1..={BLEU_MAX_ORDER}, got {order}"
        )));
    }
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let candidate_len: usize = cand_tokens.iter().map(Vec::len).sum();
    let reference_len: usize = ref_tokens.iter().map(Vec::len).sum();
    if candidate_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=order {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, reference) in cand_tokens.iter().zip(&ref_tokens) {
            total += cand.len().saturating_sub(n - 1).min(cand.len());
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched += count.min(ref_counts.get(&gram).copied().unwrap_or(0));
            }
        }
        let (matched, total) = match smoothing {
            BleuSmoothing::AddOne if n > 1 => (matched + 1, total + 1),
            _ => (matched, total),
        };
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched as f64 / total as f64).ln();
    }
    let brevity = if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    Ok(brevity * (log_precision_sum / order as f64).exp())
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for ai in a {
        let mut diagonal = 0;
        for (j, bj) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if ai == bj {
                diagonal + 1
            } else {
                up.max(row[j])
            };
            diagonal = up;
        }
    }
    row[b.len()]
}

fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let beta_sq = ROUGE_BETA * ROUGE_BETA;
    (1.0 + beta_sq) * precision * recall / (recall + beta_sq * precision)
}

/// Mean over pairs of the LCS F-measure with recall weighting
/// [`ROUGE_BETA`].
pub fn rouge_l(candidates: &[String], references: &[String]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(&tokenize(c), &tokenize(r)))
        .sum();
    Ok(total / candidates.len() as f64)
}

fn precision_recall_f1(tp: usize, fp: usize, fn_count: usize) -> (f64, f64, f64) {
    if tp + fp + fn_count == 0 {
        return (1.0, 1.0, 1.0);
    }
    let tp_f = tp as f64;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp_f / (tp + fp) as f64
    };
    let recall = if tp + fn_count == 0 {
        0.0
    } else {
        tp_f / (tp + fn_count) as f64
    };
    let f1 = 2.0 * tp_f / (2 * tp + fp + fn_count) as f64;
    (precision, recall, f1)
}

fn efficacy_counts(
    candidate: &str,
    reference: &str,
    lexicon: &LabelLexicon,
    policy: UncertaintyPolicy,
) -> (usize, usize, usize) {
    let predicted = label_report(candidate, lexicon).binary(policy);
    let actual = label_report(reference, lexicon).binary(policy);
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_count = 0;
    for category in Category::ALL {
        match (predicted[category.index()], actual[category.index()]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_count += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_count)
}

/// Micro-averaged precision/recall/F1 of labeler output on candidates
/// against labeler output on references.
pub fn clinical_efficacy(
    candidates: &[String],
    references: &[String],
    lexicon: &LabelLexicon,
    policy: UncertaintyPolicy,
) -> Result<(f64, f64, f64)> {
    check_corpus(candidates, references)?;
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_count = 0;
    for (candidate, reference) in candidates.iter().zip(references) {
        let (t, f, m) = efficacy_counts(candidate, reference, lexicon, policy);
        tp += t;
        fp += f;
        fn_count += m;
    }
    Ok(precision_recall_f1(tp, fp, fn_count))
}

/// Per-pair detail retained alongside the corpus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleBreakdown {
    pub index: usize,
    pub rouge_l: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Full evaluation over one candidate/reference corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub per_example: Vec<ExampleBreakdown>,
}

impl EvalReport {
    pub fn bleu(&self, order: usize) -> f64 {
        [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4][order - 1]
    }
}

/// Computes every metric in one pass over the corpus.
pub fn evaluate_corpus(
    candidates: &[String],
    references: &[String],
    lexicon: &LabelLexicon,
    policy: UncertaintyPolicy,
    smoothing: BleuSmoothing,
) -> Result<EvalReport> {
    check_corpus(candidates, references)?;
    let mut per_example = Vec::with_capacity(candidates.len());
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_count = 0;
    for (index, (candidate, reference)) in candidates.iter().zip(references).enumerate() {
        let (t, f, m) = efficacy_counts(candidate, reference, lexicon, policy);
        tp += t;
        fp += f;
        fn_count += m;
        per_example.push(ExampleBreakdown {
            index,
            rouge_l: rouge_l_pair(&tokenize(candidate), &tokenize(reference)),
            true_positives: t,
            false_positives: f,
            false_negatives: m,
        });
    }
    let (ce_precision, ce_recall, ce_f1) = precision_recall_f1(tp, fp, fn_count);
    Ok(EvalReport {
        bleu_1: bleu(candidates, references, 1, smoothing)?,
        bleu_2: bleu(candidates, references, 2, smoothing)?,
        bleu_3: bleu(candidates, references, 3, smoothing)?,
        bleu_4: bleu(candidates, references, 4, smoothing)?,
        rouge_l: rouge_l(candidates, references)?,
        ce_precision,
        ce_recall,
        ce_f1,
        per_example,
    })
}
