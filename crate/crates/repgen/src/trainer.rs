//! Combined-objective training: per step, cross-entropy on the reference
//! plus a reward-weighted surrogate on a sampled sequence, optimized with
//! decoupled weight decay and a warmup-then-cosine schedule.
//!
//! Every ablation switch gates the code path itself, not just the loss
//! weight, and counters record what actually ran. All randomness fans out
//! from one seed by stage name, so identical configs replay identically.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::KnowledgeCorpus;
use crate::embedding::{embed_image, HashingEmbedder, ImageRecord, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::labeler::{
    render_mention_sentence, Category, DiseaseLabels, LabelLexicon, Mention, UncertaintyPolicy,
};
use crate::policy::{
    ce_loss_and_grad, condition, rl_loss_and_grad, sample, PolicyParams, Vocabulary,
    DEFAULT_EMB_DIM, UNK_TOKEN,
};
use crate::retrieval::{mke, ClinicalContext, MkeConfig, RetrievalIndex};
use crate::rewards::{
    compute_reward, JudgeConfig, RewardConfig, RewardCounters, RewardMode, DEFAULT_ALPHA,
};
use crate::seeding::{stage_rng, stage_seed};

/// All training knobs. Every field has a default, so config files may be
/// partial.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_mke: bool,
    pub use_rl: bool,
    pub use_r_dis: bool,
    pub use_r_sen: bool,
    pub use_baseline: bool,
    pub embed_dim: usize,
    pub policy_emb_dim: usize,
    pub max_sample_len: usize,
    pub sample_temperature: f64,
    pub eval_temperature: f64,
    pub eval_samples: usize,
    pub rl_weight: f64,
    pub samples_per_step: usize,
    pub uncertainty_policy: UncertaintyPolicy,
    pub mke: MkeConfig,
    pub judge: JudgeConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: DEFAULT_ALPHA,
            learning_rate: 2e-4,
            weight_decay: 0.02,
            warmup_ratio: 0.03,
            epochs: 1,
            batch_size: 1,
            seed: 0,
            use_mke: true,
            use_rl: true,
            use_r_dis: true,
            use_r_sen: true,
            use_baseline: false,
            embed_dim: DEFAULT_DIM,
            policy_emb_dim: DEFAULT_EMB_DIM,
            max_sample_len: 30,
            sample_temperature: 1.0,
            eval_temperature: 1.0,
            eval_samples: 10,
            rl_weight: 1.0,
            samples_per_step: 1,
            uncertainty_policy: UncertaintyPolicy::default(),
            mke: MkeConfig::default(),
            judge: JudgeConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::AlphaOutOfRange(self.alpha));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "weight_decay must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidArgument(
                "warmup_ratio must be in [0, 1)".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_step == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch_size, and samples_per_step must be positive".into(),
            ));
        }
        if self.max_sample_len == 0 {
            return Err(Error::InvalidArgument(
                "max_sample_len must be positive".into(),
            ));
        }
        if !(self.sample_temperature.is_finite() && self.sample_temperature >= 0.0) {
            return Err(Error::InvalidArgument(
                "sample_temperature must be finite and nonnegative".into(),
            ));
        }
        if !(self.eval_temperature.is_finite() && self.eval_temperature >= 0.0) {
            return Err(Error::InvalidArgument(
                "eval_temperature must be finite and nonnegative".into(),
            ));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidArgument(
                "eval_samples must be positive".into(),
            ));
        }
        if !self.rl_weight.is_finite() {
            return Err(Error::InvalidArgument("rl_weight must be finite".into()));
        }
        if self.use_rl && !self.use_r_dis && !self.use_r_sen {
            return Err(Error::InvalidArgument(
                "use_rl requires at least one of use_r_dis/use_r_sen".into(),
            ));
        }
        if self.embed_dim == 0 || self.policy_emb_dim == 0 {
            return Err(Error::InvalidArgument(
                "embed_dim and policy_emb_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Reward settings implied by the ablation switches.
    pub fn reward_config(&self) -> RewardConfig {
        let mode = match (self.use_r_dis, self.use_r_sen) {
            (true, true) => RewardMode::Blend,
            (true, false) => RewardMode::DiseaseOnly,
            (false, true) => RewardMode::SentenceOnly,
            (false, false) => RewardMode::Blend, // unreachable after validate()
        };
        RewardConfig {
            alpha: self.alpha,
            mode,
            uncertainty_policy: self.uncertainty_policy,
            judge: self.judge.clone(),
        }
    }
}

/// One training example: an image, its clinical context, and the reference
/// report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub image: ImageRecord,
    pub context: ClinicalContext,
    pub reference: String,
}

/// Writes a dataset as JSON Lines, one record per line.
pub fn save_dataset(records: &[TrainingRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Reads a dataset, rejecting records with empty references.
pub fn load_dataset(path: &Path) -> Result<Vec<TrainingRecord>> {
    let raw = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut records = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainingRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if record.reference.trim().is_empty() {
            return Err(Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                msg: "empty reference report".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Adaptive-moment optimizer with decoupled weight decay.
pub struct AdamW {
    m: PolicyParams,
    v: PolicyParams,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(template: &PolicyParams, weight_decay: f64) -> AdamW {
        AdamW {
            m: template.zeros_like(),
            v: template.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update with bias correction; weight decay is applied directly to
    /// the parameters, scaled by the same learning rate.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut param_tensors = params.tensors_mut();
        let grad_tensors = grad.tensors();
        let mut m_tensors = self.m.tensors_mut();
        let mut v_tensors = self.v.tensors_mut();
        for idx in 0..3 {
            let p = &mut param_tensors[idx];
            let g = grad_tensors[idx];
            let m = &mut m_tensors[idx];
            let v = &mut v_tensors[idx];
            assert_eq!(p.len(), g.len(), "gradient shape mismatch");
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
    }
}

/// Learning-rate multiplier: linear warmup to 1 over the first
/// `warmup_ratio` of steps, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_ratio: f64) -> f64 {
    assert!(total_steps > 0, "schedule needs at least one step");
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if warmup > 0 && step < warmup {
        return step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l: f64,
    pub l_ce: f64,
    pub l_rl: f64,
    pub mean_r_dis: f64,
    pub mean_r_sen: f64,
    pub r_tok_spread: f64,
    pub lr: f64,
}

/// Writes a training log as JSON Lines.
pub fn save_training_log(log: &[StepLog], path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in log {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

pub fn load_training_log(path: &Path) -> Result<Vec<StepLog>> {
    let raw = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    raw.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(lineno, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Invocation counts proving which components actually ran.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCounters {
    pub mke_calls: u64,
    pub ce_grad_calls: u64,
    pub rl_grad_calls: u64,
    pub sampled_sequences: u64,
    pub reward: RewardCounters,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub vocab: Vocabulary,
    pub log: Vec<StepLog>,
    pub counters: TrainCounters,
}

/// Vocabulary and seeded initial parameters for a dataset, exactly as
/// [`train`] would create them.
pub fn init_policy(
    dataset: &[TrainingRecord],
    config: &TrainingConfig,
) -> Result<(PolicyParams, Vocabulary)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = Vocabulary::build(dataset.iter().map(|r| r.reference.as_str()));
    let params = PolicyParams::init(
        vocab.len(),
        config.policy_emb_dim,
        config.embed_dim,
        stage_seed(config.seed, "policy-init"),
    );
    Ok((params, vocab))
}

pub(crate) fn action_token_strings(vocab: &Vocabulary, sequence: &[usize]) -> Vec<String> {
    sequence[1..sequence.len() - 1]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN).to_string())
        .collect()
}

/// Runs the full loop. `corpus` and `index` are required when `use_mke`.
pub fn train(
    dataset: &[TrainingRecord],
    corpus: Option<&KnowledgeCorpus>,
    index: Option<&RetrievalIndex>,
    lexicon: &LabelLexicon,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (corpus, index) = if config.use_mke {
        let corpus = corpus.ok_or_else(|| {
            Error::InvalidArgument("use_mke requires a knowledge corpus".into())
        })?;
        let index = index.ok_or_else(|| {
            Error::InvalidArgument("use_mke requires a retrieval index".into())
        })?;
        if index.dim() != config.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: config.embed_dim,
                got: index.dim(),
            });
        }
        (Some(corpus), Some(index))
    } else {
        (None, None)
    };
    let embedder = HashingEmbedder::new(config.embed_dim);
    let reward_config = config.reward_config();
    let (mut params, vocab) = init_policy(dataset, config)?;
    let mut optimizer = AdamW::new(&params, config.weight_decay);
    let mut counters = TrainCounters::default();
    let mut log = Vec::new();
    let mut sample_rng = stage_rng(config.seed, "sampling");
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut baseline_mean = 0.0;
    let mut baseline_count = 0u64;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stage_rng(config.seed, &format!("epoch-order-{epoch}")));
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad = params.zeros_like();
            let mut l_ce = 0.0;
            let mut l_rl = 0.0;
            let mut l_total = 0.0;
            let mut r_dis_sum = 0.0;
            let mut r_sen_sum = 0.0;
            let mut spread: f64 = 0.0;
            let mut sample_count = 0u64;
            for &example_idx in batch {
                let record = &dataset[example_idx];
                let facts = if config.use_mke {
                    counters.mke_calls += 1;
                    mke(
                        &record.image,
                        &record.context,
                        index.unwrap(),
                        corpus.unwrap(),
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
                let (reference_seq, _) = vocab.encode_sequence(&record.reference);
                let (ce_loss, ce_grad) = ce_loss_and_grad(&params, &cond, &reference_seq)?;
                counters.ce_grad_calls += 1;
                l_ce += scale * ce_loss;
                l_total += scale * ce_loss;
                grad.add_scaled(&ce_grad, scale);
                if config.use_rl {
                    let sample_scale = scale / config.samples_per_step as f64;
                    for _ in 0..config.samples_per_step {
                        let outcome = sample(
                            &params,
                            &cond,
                            config.max_sample_len,
                            config.sample_temperature,
                            &mut sample_rng,
                        )?;
                        counters.sampled_sequences += 1;
                        let body = action_token_strings(&vocab, &outcome.sequence);
                        let trace = compute_reward(
                            &body,
                            true,
                            &record.reference,
                            lexicon,
                            &reward_config,
                            &mut counters.reward,
                        )?;
                        r_dis_sum += trace.r_dis;
                        r_sen_sum += trace.mean_sentence_score();
                        let lo = trace
                            .per_token_reward
                            .iter()
                            .cloned()
                            .fold(f64::INFINITY, f64::min);
                        let hi = trace
                            .per_token_reward
                            .iter()
                            .cloned()
                            .fold(f64::NEG_INFINITY, f64::max);
                        spread = spread.max(hi - lo);
                        sample_count += 1;
                        let rewards = if config.use_baseline {
                            let advantage: Vec<f64> = trace
                                .per_token_reward
                                .iter()
                                .map(|r| r - baseline_mean)
                                .collect();
                            let seq_mean = trace.mean_token_reward();
                            baseline_count += 1;
                            baseline_mean += (seq_mean - baseline_mean) / baseline_count as f64;
                            advantage
                        } else {
                            trace.per_token_reward.clone()
                        };
                        let (rl_loss, rl_grad) =
                            rl_loss_and_grad(&params, &cond, &outcome.sequence, &rewards)?;
                        counters.rl_grad_calls += 1;
                        let weighted = config.rl_weight * sample_scale;
                        l_rl += weighted * rl_loss;
                        l_total += weighted * rl_loss;
                        grad.add_scaled(&rl_grad, weighted);
                    }
                }
            }
            if !l_ce.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    component: "l_ce".into(),
                });
            }
            if !l_rl.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    component: "l_rl".into(),
                });
            }
            let lr = config.learning_rate * lr_schedule(step, total_steps, config.warmup_ratio);
            optimizer.step(&mut params, &grad, lr);
            log.push(StepLog {
                step,
                l: l_total,
                l_ce,
                l_rl,
                mean_r_dis: if sample_count == 0 {
                    0.0
                } else {
                    r_dis_sum / sample_count as f64
                },
                mean_r_sen: if sample_count == 0 {
                    0.0
                } else {
                    r_sen_sum / sample_count as f64
                },
                r_tok_spread: spread,
                lr,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        vocab,
        log,
        counters,
    })
}

/// Per-category mention probabilities for the synthetic task.
pub const SYNTH_POSITIVE_P: f64 = 0.22;
pub const SYNTH_NEGATIVE_P: f64 = 0.08;
pub const SYNTH_UNCERTAIN_P: f64 = 0.04;

/// Noise level baked into synthetic image features.
pub const SYNTH_SIGMA: f64 = 0.1;

const FILLERS: [&str; 3] = [
    "comparison is made to the prior study",
    "the examination is otherwise stable",
    "portable upright views were obtained",
];

/// Synthetic triples plus the labels each report was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub records: Vec<TrainingRecord>,
    pub labels: Vec<DiseaseLabels>,
}

/// Generates `n` image/context/report triples whose reports are rendered
/// from label templates, so labeling a report recovers its generating
/// labels. Image features are the report embedding plus seeded noise.
pub fn make_synthetic_dataset(
    n: usize,
    seed: u64,
    lexicon: &LabelLexicon,
) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let embedder = HashingEmbedder::default();
    let mut rng = stage_rng(seed, "synth-data");
    let mut records = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut expected = DiseaseLabels::all_unmentioned();
        let mut sentences: Vec<String> = Vec::new();
        for category in Category::ALL {
            if category == Category::NoFinding {
                continue;
            }
            let draw: f64 = rand::Rng::random(&mut rng);
            let mention = if draw < SYNTH_POSITIVE_P {
                Mention::Positive
            } else if draw < SYNTH_POSITIVE_P + SYNTH_NEGATIVE_P {
                Mention::Negative
            } else if draw < SYNTH_POSITIVE_P + SYNTH_NEGATIVE_P + SYNTH_UNCERTAIN_P {
                Mention::Uncertain
            } else {
                Mention::Unmentioned
            };
            if mention != Mention::Unmentioned {
                sentences.push(render_mention_sentence(lexicon, category, mention, &mut rng));
                expected.set(category, mention);
            }
        }
        // Findings restated as an impression: each mention sentence appears
        // twice, mirroring the two-section shape of real reports.
        let mut impression = sentences.clone();
        if sentences.is_empty() || rand::Rng::random::<f64>(&mut rng) < 0.3 {
            sentences.push(FILLERS[rand::Rng::random_range(&mut rng, 0..FILLERS.len())].into());
        }
        sentences.shuffle(&mut rng);
        impression.shuffle(&mut rng);
        sentences.extend(impression);
        let report = sentences
            .iter()
            .map(|s| format!("{s}."))
            .collect::<Vec<_>>()
            .join(" ");
        let clear = Category::DISEASES
            .iter()
            .all(|c| matches!(expected.get(*c), Mention::Negative | Mention::Unmentioned));
        if clear {
            expected.set(Category::NoFinding, Mention::Positive);
        }
        let flagged: Vec<Category> = Category::ALL
            .into_iter()
            .filter(|c| {
                *c != Category::NoFinding
                    && matches!(expected.get(*c), Mention::Positive | Mention::Uncertain)
            })
            .collect();
        let indication = if flagged.is_empty() {
            "routine examination".to_string()
        } else {
            let pick = flagged[rand::Rng::random_range(&mut rng, 0..flagged.len())];
            format!("evaluate for {}", lexicon.generation_phrases(pick)[0])
        };
        let history = if rand::Rng::random::<f64>(&mut rng) < 0.4 {
            "prior imaging available for comparison".to_string()
        } else {
            String::new()
        };
        let id = format!("synth-{i}");
        let source = ImageRecord {
            id: id.clone(),
            features: None,
            paired_report: Some(report.clone()),
        };
        let features = embed_image(
            &source,
            &embedder,
            SYNTH_SIGMA,
            stage_seed(seed, "synth-image"),
        )?;
        records.push(TrainingRecord {
            image: ImageRecord {
                id,
                features: Some(features.values().to_vec()),
                paired_report: None,
            },
            context: ClinicalContext {
                indication,
                history,
            },
            reference: report,
        });
        labels.push(expected);
    }
    Ok(SyntheticDataset { records, labels })
}
