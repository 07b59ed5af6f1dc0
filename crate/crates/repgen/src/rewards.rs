//! Report-level rewards: disease-label F1, judged sentence similarity, and
//! their per-token blend.
//!
//! The disease reward broadcasts over the whole sequence; each sentence score
//! applies to the tokens of that sentence. The judge is either the built-in
//! token F-measure or a remote endpoint that falls back to the built-in one.

use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::{label_report, LabelLexicon, UncertaintyPolicy, CATEGORY_COUNT};
use crate::text::{detokenize, split_sentences, tokenize, PERIOD_TOKEN};

/// Default blend weight for the sentence reward.
pub const DEFAULT_ALPHA: f64 = 0.4;

/// Call counts for the scoring paths; ablations assert on these.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardCounters {
    pub disease_label_calls: u64,
    pub offline_judge_calls: u64,
    pub remote_judge_requests: u64,
}

/// Micro-averaged F1 between the binary disease labels of two reports.
/// Returns 1.0 when neither report has a positive category.
pub fn disease_reward(
    generated: &str,
    reference: &str,
    lexicon: &LabelLexicon,
    policy: UncertaintyPolicy,
) -> f64 {
    let gen = label_report(generated, lexicon).binary(policy);
    let refr = label_report(reference, lexicon).binary(policy);
    let mut tp = 0u32;
    let mut fp = 0u32;
    let mut fn_ = 0u32;
    for i in 0..CATEGORY_COUNT {
        match (gen[i], refr[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * f64::from(tp) / f64::from(denom)
    }
}

/// Token-multiset F-measure between two sentences. Both empty scores 1.0,
/// exactly one empty scores 0.0; symmetric and unit-interval by construction.
pub fn token_f_measure(a: &str, b: &str) -> f64 {
    let ta = tokenize(a);
    let tb = tokenize(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: std::collections::HashMap<&str, i64> = std::collections::HashMap::new();
    for tok in &ta {
        *counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for tok in &tb {
        if let Some(c) = counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    2.0 * overlap as f64 / (ta.len() + tb.len()) as f64
}

/// Which scorer produces sentence scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    #[default]
    Offline,
    Remote,
}

/// Sentence judge settings. Remote mode posts one prompt per sentence pair
/// and falls back to the offline judge when the endpoint misbehaves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub mode: JudgeMode,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub prompt_template: String,
}

/// Default prompt; `{generated}` and `{reference}` are substituted per pair.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "You compare two radiology report sentences. \
Rate how similar their clinical meaning is on a scale from 0 to 1, where 1 means \
identical meaning. Reply with only the number.\nSentence A: {generated}\nSentence B: \
{reference}\nScore:";

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            mode: JudgeMode::Offline,
            endpoint: None,
            timeout_secs: 10,
            retries: 2,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }
}

/// One generated sentence, its best-matching reference sentence, and the
/// judge's score for the pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub generated: String,
    pub matched: Option<String>,
    pub score: f64,
}

/// All sentence scores for one report, with remote-judge health flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScores {
    pub pairs: Vec<SentencePair>,
    pub degraded: bool,
    pub clamped: bool,
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    prompt: &'a str,
}

fn score_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("valid regex"))
}

fn parse_judge_reply(reply: &serde_json::Value) -> Option<f64> {
    let text = reply.get("text")?.as_str()?;
    score_regex()
        .find(text)
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

struct RemoteJudge {
    agent: ureq::Agent,
    endpoint: String,
    retries: u32,
    template: String,
}

impl RemoteJudge {
    fn new(config: &JudgeConfig) -> Result<RemoteJudge> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| Error::InvalidArgument("remote judge requires an endpoint".into()))?;
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build();
        Ok(RemoteJudge {
            agent: agent_config.new_agent(),
            endpoint,
            retries: config.retries,
            template: config.prompt_template.clone(),
        })
    }

    /// One judged score, or None after all attempts fail.
    fn score(
        &self,
        generated: &str,
        reference: &str,
        counters: &mut RewardCounters,
    ) -> Option<f64> {
        let prompt = self
            .template
            .replace("{generated}", generated)
            .replace("{reference}", reference);
        for _ in 0..=self.retries {
            counters.remote_judge_requests += 1;
            let reply = self
                .agent
                .post(&self.endpoint)
                .send_json(JudgeRequest { prompt: &prompt })
                .and_then(|mut resp| resp.body_mut().read_json::<serde_json::Value>());
            if let Ok(value) = reply {
                if let Some(score) = parse_judge_reply(&value) {
                    return Some(score);
                }
            }
        }
        None
    }
}

/// Pairs each generated sentence with the reference sentence of maximal
/// offline lexical similarity (references reusable, lowest index on ties) and
/// scores each pair with the configured judge.
pub fn score_sentences(
    generated_sentences: &[String],
    reference: &str,
    config: &JudgeConfig,
    counters: &mut RewardCounters,
) -> Result<SentenceScores> {
    let reference_sentences = split_sentences(reference);
    let remote = match config.mode {
        JudgeMode::Remote => Some(RemoteJudge::new(config)?),
        JudgeMode::Offline => None,
    };
    let mut pairs = Vec::with_capacity(generated_sentences.len());
    let mut degraded = false;
    let mut clamped = false;
    for generated in generated_sentences {
        if tokenize(generated).is_empty() || reference_sentences.is_empty() {
            pairs.push(SentencePair {
                generated: generated.clone(),
                matched: None,
                score: 0.0,
            });
            continue;
        }
        let mut best_idx = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (idx, candidate) in reference_sentences.iter().enumerate() {
            let sim = token_f_measure(generated, candidate);
            if sim > best_sim {
                best_sim = sim;
                best_idx = idx;
            }
        }
        let matched = &reference_sentences[best_idx];
        let score = match &remote {
            None => {
                counters.offline_judge_calls += 1;
                best_sim
            }
            Some(judge) => match judge.score(generated, matched, counters) {
                Some(raw) => {
                    if !(0.0..=1.0).contains(&raw) {
                        clamped = true;
                    }
                    raw.clamp(0.0, 1.0)
                }
                None => {
                    degraded = true;
                    counters.offline_judge_calls += 1;
                    best_sim
                }
            },
        };
        pairs.push(SentencePair {
            generated: generated.clone(),
            matched: Some(matched.clone()),
            score,
        });
    }
    Ok(SentenceScores {
        pairs,
        degraded,
        clamped,
    })
}

/// Report-level convenience wrapper over [`score_sentences`].
pub fn sentence_reward(
    generated: &str,
    reference: &str,
    config: &JudgeConfig,
    counters: &mut RewardCounters,
) -> Result<SentenceScores> {
    score_sentences(&split_sentences(generated), reference, config, counters)
}

/// Sentence segmentation of a policy token stream. Terminator tokens belong
/// to the sentence they close; a trailing fragment forms its own sentence, so
/// every token maps to exactly one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAlignment {
    pub sentences: Vec<String>,
    pub token_sentence: Vec<usize>,
}

pub fn align_tokens(tokens: &[String]) -> TokenAlignment {
    let mut sentences = Vec::new();
    let mut token_sentence = Vec::with_capacity(tokens.len());
    let mut words: Vec<&str> = Vec::new();
    for token in tokens {
        token_sentence.push(sentences.len());
        if token == PERIOD_TOKEN {
            sentences.push(words.join(" "));
            words.clear();
        } else {
            words.push(token);
        }
    }
    if !words.is_empty() {
        sentences.push(words.join(" "));
    }
    TokenAlignment {
        sentences,
        token_sentence,
    }
}

/// Per-token blended reward: (1 − α)·r_dis + α·score of the token's sentence.
pub fn blend(
    r_dis: f64,
    sentence_scores: &[f64],
    token_sentence: &[usize],
    alpha: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    token_sentence
        .iter()
        .map(|&s| {
            let score = sentence_scores.get(s).copied().ok_or_else(|| {
                Error::LengthMismatch(format!(
                    "token aligned to sentence {s} but only {} scores",
                    sentence_scores.len()
                ))
            })?;
            Ok((1.0 - alpha) * r_dis + alpha * score)
        })
        .collect()
}

/// Which reward components feed the per-token values. The single-component
/// modes use the surviving reward at full weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Blend,
    DiseaseOnly,
    SentenceOnly,
}

/// Reward computation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub mode: RewardMode,
    pub uncertainty_policy: UncertaintyPolicy,
    pub judge: JudgeConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: DEFAULT_ALPHA,
            mode: RewardMode::Blend,
            uncertainty_policy: UncertaintyPolicy::default(),
            judge: JudgeConfig::default(),
        }
    }
}

/// Everything scored for one generated report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    pub r_dis: f64,
    pub sentence_scores: Vec<SentencePair>,
    pub per_token_reward: Vec<f64>,
    pub alpha: f64,
    pub labeler_policy: UncertaintyPolicy,
    pub mode: RewardMode,
    pub judge_mode: JudgeMode,
    pub degraded: bool,
    pub clamped: bool,
}

impl RewardTrace {
    /// Mean sentence score, 0.0 when no sentences were scored.
    pub fn mean_sentence_score(&self) -> f64 {
        if self.sentence_scores.is_empty() {
            0.0
        } else {
            self.sentence_scores.iter().map(|p| p.score).sum::<f64>()
                / self.sentence_scores.len() as f64
        }
    }

    /// Mean per-token reward, 0.0 for empty sequences.
    pub fn mean_token_reward(&self) -> f64 {
        if self.per_token_reward.is_empty() {
            0.0
        } else {
            self.per_token_reward.iter().sum::<f64>() / self.per_token_reward.len() as f64
        }
    }
}

/// Scores one generated token stream against a reference report. Disabled
/// components are never computed. With `append_stop` an extra trailing reward
/// slot is added for a stop action, attached to the last sentence.
pub fn compute_reward(
    body_tokens: &[String],
    append_stop: bool,
    reference: &str,
    lexicon: &LabelLexicon,
    config: &RewardConfig,
    counters: &mut RewardCounters,
) -> Result<RewardTrace> {
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(Error::AlphaOutOfRange(config.alpha));
    }
    let alignment = align_tokens(body_tokens);
    let r_dis = if config.mode != RewardMode::SentenceOnly {
        counters.disease_label_calls += 2;
        disease_reward(
            &detokenize(body_tokens),
            reference,
            lexicon,
            config.uncertainty_policy,
        )
    } else {
        0.0
    };
    let scores = if config.mode != RewardMode::DiseaseOnly {
        score_sentences(&alignment.sentences, reference, &config.judge, counters)?
    } else {
        SentenceScores {
            pairs: Vec::new(),
            degraded: false,
            clamped: false,
        }
    };
    let pair_scores: Vec<f64> = scores.pairs.iter().map(|p| p.score).collect();
    let mut per_token_reward = match config.mode {
        RewardMode::Blend => blend(r_dis, &pair_scores, &alignment.token_sentence, config.alpha)?,
        RewardMode::DiseaseOnly => vec![r_dis; body_tokens.len()],
        RewardMode::SentenceOnly => alignment
            .token_sentence
            .iter()
            .map(|&s| pair_scores[s])
            .collect(),
    };
    if append_stop {
        let stop_reward = per_token_reward.last().copied().unwrap_or(match config.mode {
            RewardMode::Blend => (1.0 - config.alpha) * r_dis,
            RewardMode::DiseaseOnly => r_dis,
            RewardMode::SentenceOnly => 0.0,
        });
        per_token_reward.push(stop_reward);
    }
    Ok(RewardTrace {
        r_dis,
        sentence_scores: scores.pairs,
        per_token_reward,
        alpha: config.alpha,
        labeler_policy: config.uncertainty_policy,
        mode: config.mode,
        judge_mode: config.judge.mode,
        degraded: scores.degraded,
        clamped: scores.clamped,
    })
}
