//! Experiment harness: held-out evaluation with a fixed reward yardstick,
//! the six-row ablation grid, and the alpha sweep.
//!
//! Evaluation always measures the full blended reward and the complete
//! metric suite regardless of which components a row trained with, so rows
//! stay comparable; the training counters carried in each row are what prove
//! disabled components never ran.

use serde::{Deserialize, Serialize};

use crate::corpus::KnowledgeCorpus;
use crate::embedding::HashingEmbedder;
use crate::error::{Error, Result};
use crate::labeler::LabelLexicon;
use crate::metrics::{evaluate_corpus, BleuSmoothing, EvalReport};
use crate::policy::{condition, sample, PolicyParams, Vocabulary};
use crate::retrieval::{mke, RetrievalIndex};
use crate::rewards::{compute_reward, RewardConfig, RewardCounters, RewardMode};
use crate::seeding::stage_rng;
use crate::text::detokenize;
use crate::trainer::{
    action_token_strings, init_policy, train, TrainCounters, TrainingConfig, TrainingRecord,
};

/// Held-out measurement of one model.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub mean_reward: f64,
    pub report: EvalReport,
    pub decoded: Vec<String>,
}

/// Splits off the trailing fraction as the held-out set; both sides stay
/// non-empty.
pub fn split_dataset(
    records: &[TrainingRecord],
    held_out_fraction: f64,
) -> Result<(&[TrainingRecord], &[TrainingRecord])> {
    if !(held_out_fraction.is_finite() && 0.0 < held_out_fraction && held_out_fraction < 1.0) {
        return Err(Error::InvalidArgument(
            "held_out_fraction must be in (0, 1)".into(),
        ));
    }
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two records to split".into(),
        ));
    }
    let held = ((records.len() as f64 * held_out_fraction).round() as usize)
        .clamp(1, records.len() - 1);
    let cut = records.len() - held;
    Ok((&records[..cut], &records[cut..]))
}

/// Decodes `config.eval_samples` sequences per record, scores the full
/// blended reward against the reference, and runs the metric suite on the
/// decoded corpus (each sample paired with its record's reference).
/// Conditioning honors `config.use_mke`; the reward yardstick is always
/// the full blend.
pub fn evaluate_policy(
    params: &PolicyParams,
    vocab: &Vocabulary,
    dataset: &[TrainingRecord],
    corpus: Option<&KnowledgeCorpus>,
    index: Option<&RetrievalIndex>,
    lexicon: &LabelLexicon,
    config: &TrainingConfig,
) -> Result<EvalOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let embedder = HashingEmbedder::new(config.embed_dim);
    let yardstick = RewardConfig {
        alpha: config.alpha,
        mode: RewardMode::Blend,
        uncertainty_policy: config.uncertainty_policy,
        judge: config.judge.clone(),
    };
    let mut counters = RewardCounters::default();
    let mut rng = stage_rng(config.seed, "eval-decode");
    let mut decoded = Vec::with_capacity(dataset.len() * config.eval_samples);
    let mut references = Vec::with_capacity(dataset.len() * config.eval_samples);
    let mut reward_sum = 0.0;
    for record in dataset {
        let facts = if config.use_mke {
            let index = index.ok_or_else(|| {
                Error::InvalidArgument("use_mke requires a retrieval index".into())
            })?;
            let corpus = corpus.ok_or_else(|| {
                Error::InvalidArgument("use_mke requires a knowledge corpus".into())
            })?;
            mke(
                &record.image,
                &record.context,
                index,
                corpus,
                &embedder,
                &config.mke,
            )?
            .facts
        } else {
            Vec::new()
        };
        let cond = condition(
            &record.image,
            &facts,
            &embedder,
            config.mke.noise_sigma,
            config.mke.seed,
        )?;
        // Decode by sampling at the evaluation temperature (default 1):
        // the mean blended reward below is then a Monte Carlo estimate of
        // the expected-reward objective the policy-gradient term optimises,
        // and drawing several samples per record tightens it. Greedy argmax
        // (temperature 0) is available but degenerates on lightly trained
        // models, whose mode is the most frequent token.
        for _ in 0..config.eval_samples {
            let outcome = sample(
                params,
                &cond,
                config.max_sample_len,
                config.eval_temperature,
                &mut rng,
            )?;
            let body = action_token_strings(vocab, &outcome.sequence);
            let trace = compute_reward(
                &body,
                true,
                &record.reference,
                lexicon,
                &yardstick,
                &mut counters,
            )?;
            reward_sum += trace.mean_token_reward();
            decoded.push(detokenize(&vocab.decode_body(&outcome.sequence)));
            references.push(record.reference.clone());
        }
    }
    let report = evaluate_corpus(
        &decoded,
        &references,
        lexicon,
        config.uncertainty_policy,
        BleuSmoothing::None,
    )?;
    Ok(EvalOutcome {
        mean_reward: reward_sum / decoded.len() as f64,
        report,
        decoded,
    })
}

/// The six ablation configurations, in table order.
pub const ABLATION_GRID: [(&str, bool, bool, bool, bool); 6] = [
    ("base", false, false, true, true),
    ("mke_only", true, false, true, true),
    ("rl_only", false, true, true, true),
    ("mke_rsen", true, true, false, true),
    ("mke_rdis", true, true, true, false),
    ("full", true, true, true, true),
];

/// One trained-and-measured ablation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub use_mke: bool,
    pub use_rl: bool,
    pub use_r_dis: bool,
    pub use_r_sen: bool,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub mean_reward: f64,
    pub counters: TrainCounters,
}

fn row_config(base: &TrainingConfig, switches: (&str, bool, bool, bool, bool)) -> TrainingConfig {
    let (_, use_mke, use_rl, use_r_dis, use_r_sen) = switches;
    TrainingConfig {
        use_mke,
        use_rl,
        use_r_dis,
        use_r_sen,
        ..base.clone()
    }
}

/// Trains and evaluates all six rows with the shared seed from `base`. The
/// callback fires after each completed row so partial results can be
/// persisted before a later row fails.
pub fn ablate(
    train_set: &[TrainingRecord],
    eval_set: &[TrainingRecord],
    corpus: &KnowledgeCorpus,
    index: &RetrievalIndex,
    lexicon: &LabelLexicon,
    base: &TrainingConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for switches in ABLATION_GRID {
        let config = row_config(base, switches);
        let outcome = train(train_set, Some(corpus), Some(index), lexicon, &config)?;
        let eval = evaluate_policy(
            &outcome.params,
            &outcome.vocab,
            eval_set,
            Some(corpus),
            Some(index),
            lexicon,
            &config,
        )?;
        let row = AblationRow {
            name: switches.0.to_string(),
            use_mke: switches.1,
            use_rl: switches.2,
            use_r_dis: switches.3,
            use_r_sen: switches.4,
            ce_precision: eval.report.ce_precision,
            ce_recall: eval.report.ce_recall,
            ce_f1: eval.report.ce_f1,
            bleu_4: eval.report.bleu_4,
            rouge_l: eval.report.rouge_l,
            mean_reward: eval.mean_reward,
            counters: outcome.counters,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// One point of the blend-weight sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub ce_f1: f64,
    pub bleu_4: f64,
}

/// Default sweep grid.
pub const DEFAULT_ALPHA_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Trains the full configuration once per alpha value on shared seeds and
/// measures CE-F1 and BLEU-4 on the held-out set.
pub fn sweep_alpha(
    train_set: &[TrainingRecord],
    eval_set: &[TrainingRecord],
    corpus: &KnowledgeCorpus,
    index: &RetrievalIndex,
    lexicon: &LabelLexicon,
    base: &TrainingConfig,
    values: &[f64],
    mut on_point: impl FnMut(&AlphaPoint),
) -> Result<Vec<AlphaPoint>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty alpha grid".into()));
    }
    for &alpha in values {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
    }
    let mut points = Vec::with_capacity(values.len());
    for &alpha in values {
        let config = TrainingConfig {
            alpha,
            ..base.clone()
        };
        let outcome = train(train_set, Some(corpus), Some(index), lexicon, &config)?;
        let eval = evaluate_policy(
            &outcome.params,
            &outcome.vocab,
            eval_set,
            Some(corpus),
            Some(index),
            lexicon,
            &config,
        )?;
        let point = AlphaPoint {
            alpha,
            ce_f1: eval.report.ce_f1,
            bleu_4: eval.report.bleu_4,
        };
        on_point(&point);
        points.push(point);
    }
    Ok(points)
}

/// Builds the initialized (untrained) model for a dataset, for
/// before/after-training comparisons.
pub fn initial_model(
    dataset: &[TrainingRecord],
    config: &TrainingConfig,
) -> Result<(PolicyParams, Vocabulary)> {
    init_policy(dataset, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;
    use crate::labeler::default_lexicon;
    use crate::retrieval::build_index;
    use crate::trainer::make_synthetic_dataset;

    struct Fixture {
        records: Vec<TrainingRecord>,
        corpus: KnowledgeCorpus,
        index: RetrievalIndex,
        lexicon: LabelLexicon,
    }

    fn fixture(n: usize, seed: u64) -> Fixture {
        let lexicon = default_lexicon();
        let records = make_synthetic_dataset(n, seed, &lexicon).unwrap().records;
        let references: Vec<String> = records.iter().map(|r| r.reference.clone()).collect();
        let corpus = build_corpus(&references).unwrap();
        let index = build_index(&corpus, &HashingEmbedder::default()).unwrap();
        Fixture {
            records,
            corpus,
            index,
            lexicon,
        }
    }

    fn quick_config(seed: u64) -> TrainingConfig {
        TrainingConfig {
            seed,
            max_sample_len: 20,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn split_takes_the_trailing_fraction() {
        let records = make_synthetic_dataset(10, 1, &default_lexicon())
            .unwrap()
            .records;
        let (train_set, held) = split_dataset(&records, 0.2).unwrap();
        assert_eq!(train_set.len(), 8);
        assert_eq!(held.len(), 2);
        assert_eq!(held[0], records[8]);
        assert_eq!(held[1], records[9]);
        assert!(split_dataset(&records, 0.0).is_err());
        assert!(split_dataset(&records, 1.0).is_err());
        assert!(split_dataset(&records[..1], 0.5).is_err());
        // Extreme fractions still leave both sides non-empty.
        let (train_set, held) = split_dataset(&records, 0.999).unwrap();
        assert_eq!(train_set.len(), 1);
        assert_eq!(held.len(), 9);
    }

    #[test]
    fn evaluation_reports_are_well_formed() {
        let fx = fixture(12, 2);
        let (train_set, eval_set) = split_dataset(&fx.records, 0.25).unwrap();
        let config = quick_config(4);
        let outcome = train(
            train_set,
            Some(&fx.corpus),
            Some(&fx.index),
            &fx.lexicon,
            &config,
        )
        .unwrap();
        let eval = evaluate_policy(
            &outcome.params,
            &outcome.vocab,
            eval_set,
            Some(&fx.corpus),
            Some(&fx.index),
            &fx.lexicon,
            &config,
        )
        .unwrap();
        assert_eq!(eval.decoded.len(), eval_set.len() * config.eval_samples);
        assert!((0.0..=1.0).contains(&eval.mean_reward));
        for value in [
            eval.report.bleu_4,
            eval.report.rouge_l,
            eval.report.ce_f1,
        ] {
            assert!((0.0..=1.0).contains(&value));
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let fx = fixture(8, 3);
        let (train_set, eval_set) = split_dataset(&fx.records, 0.25).unwrap();
        let config = quick_config(9);
        let (params, vocab) = initial_model(train_set, &config).unwrap();
        let a = evaluate_policy(
            &params, &vocab, eval_set, Some(&fx.corpus), Some(&fx.index), &fx.lexicon, &config,
        )
        .unwrap();
        let b = evaluate_policy(
            &params, &vocab, eval_set, Some(&fx.corpus), Some(&fx.index), &fx.lexicon, &config,
        )
        .unwrap();
        assert_eq!(a.decoded, b.decoded);
        assert_eq!(a.mean_reward.to_bits(), b.mean_reward.to_bits());
    }

    #[test]
    fn ablation_grid_produces_six_gated_rows() {
        let fx = fixture(14, 5);
        let (train_set, eval_set) = split_dataset(&fx.records, 0.2).unwrap();
        let config = quick_config(6);
        let mut seen = Vec::new();
        let rows = ablate(
            train_set,
            eval_set,
            &fx.corpus,
            &fx.index,
            &fx.lexicon,
            &config,
            |row| seen.push(row.name.clone()),
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            ["base", "mke_only", "rl_only", "mke_rsen", "mke_rdis", "full"]
        );
        assert_eq!(seen, names);
        for row in &rows {
            if !row.use_mke {
                assert_eq!(row.counters.mke_calls, 0, "row {}", row.name);
            } else {
                assert!(row.counters.mke_calls > 0, "row {}", row.name);
            }
            if !row.use_rl {
                assert_eq!(row.counters.rl_grad_calls, 0, "row {}", row.name);
                assert_eq!(row.counters.reward, RewardCounters::default());
            }
            if row.use_rl && !row.use_r_dis {
                assert_eq!(row.counters.reward.disease_label_calls, 0, "row {}", row.name);
            }
            if row.use_rl && !row.use_r_sen {
                assert_eq!(row.counters.reward.offline_judge_calls, 0, "row {}", row.name);
                assert_eq!(row.counters.reward.remote_judge_requests, 0, "row {}", row.name);
            }
            assert!((0.0..=1.0).contains(&row.ce_f1), "row {}", row.name);
        }
    }

    #[test]
    fn alpha_sweep_echoes_the_grid() {
        let fx = fixture(10, 8);
        let (train_set, eval_set) = split_dataset(&fx.records, 0.2).unwrap();
        let config = quick_config(2);
        let values = [0.0, 0.5, 1.0];
        let points = sweep_alpha(
            train_set,
            eval_set,
            &fx.corpus,
            &fx.index,
            &fx.lexicon,
            &config,
            &values,
            |_| {},
        )
        .unwrap();
        assert_eq!(points.len(), 3);
        for (point, expected) in points.iter().zip(values) {
            assert_eq!(point.alpha, expected);
            assert!((0.0..=1.0).contains(&point.ce_f1));
            assert!((0.0..=1.0).contains(&point.bleu_4));
        }
        assert!(matches!(
            sweep_alpha(
                train_set,
                eval_set,
                &fx.corpus,
                &fx.index,
                &fx.lexicon,
                &config,
                &[0.4, 1.2],
                |_| {},
            ),
            Err(Error::AlphaOutOfRange(_))
        ));
    }

    #[test]
    fn zero_alpha_training_logs_constant_per_sequence_rewards() {
        let fx = fixture(8, 12);
        let config = TrainingConfig {
            alpha: 0.0,
            ..quick_config(3)
        };
        let outcome = train(
            &fx.records,
            Some(&fx.corpus),
            Some(&fx.index),
            &fx.lexicon,
            &config,
        )
        .unwrap();
        for row in &outcome.log {
            assert_eq!(row.r_tok_spread, 0.0, "step {}", row.step);
        }
    }
}
