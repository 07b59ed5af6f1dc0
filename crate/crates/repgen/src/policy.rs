//! Conditional autoregressive generation policy, small enough for exact
//! gradient verification.
//!
//! Step logits are `W_out' * (emb(prev) + W_cond' * cond)`. Cross-entropy and
//! the reward-weighted surrogate share one closed-form backward pass; the
//! surrogate treats the sampled sequence as fixed, so its gradient is the
//! score-function estimator.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Fact;
use crate::embedding::{embed_image, Embedder, Embedding, ImageRecord};
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::seeding::fnv1a64;
use crate::text::policy_tokens;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Default token embedding width.
pub const DEFAULT_EMB_DIM: usize = 32;

/// Standard deviation of the seeded Gaussian init.
pub const INIT_STD: f64 = 0.02;

/// Token/id bijection with fixed reserved ids 0..=2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from texts in first-occurrence token order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut vocab = Vocabulary::from_tokens(Vec::new()).expect("reserved tokens only");
        for text in texts {
            for token in policy_tokens(text) {
                if !vocab.index.contains_key(&token) {
                    vocab.index.insert(token.clone(), vocab.tokens.len());
                    vocab.tokens.push(token);
                }
            }
        }
        vocab
    }

    /// Reassembles a vocabulary from its non-reserved token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let mut all = vec![
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (id, token) in all.iter().enumerate() {
            if index.insert(token.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary token {token:?}"
                )));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Body token ids for a report (no BOS/EOS) and the count of tokens that
    /// fell back to UNK.
    pub fn encode_body(&self, text: &str) -> (Vec<usize>, usize) {
        let mut unk_count = 0;
        let ids = policy_tokens(text)
            .iter()
            .map(|tok| {
                self.id(tok).unwrap_or_else(|| {
                    unk_count += 1;
                    UNK
                })
            })
            .collect();
        (ids, unk_count)
    }

    /// Full training sequence `[BOS, body..., EOS]` plus the UNK count.
    pub fn encode_sequence(&self, text: &str) -> (Vec<usize>, usize) {
        let (body, unk_count) = self.encode_body(text);
        let mut seq = Vec::with_capacity(body.len() + 2);
        seq.push(BOS);
        seq.extend(body);
        seq.push(EOS);
        (seq, unk_count)
    }

    /// Token strings for body ids; reserved markers are skipped except UNK.
    pub fn decode_body(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// Content hash used to bind checkpoints to their vocabulary.
    pub fn hash(&self) -> u64 {
        let joined = self.tokens.join("\u{1f}");
        fnv1a64(joined.as_bytes())
    }
}

/// Dense model parameters. `w_emb` is V×E row-major, `w_cond` D×E, `w_out`
/// E×V.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub cond_dim: usize,
    pub w_emb: Vec<f64>,
    pub w_cond: Vec<f64>,
    pub w_out: Vec<f64>,
}

impl PolicyParams {
    /// Seeded Gaussian init, N(0, [`INIT_STD`]).
    pub fn init(vocab_size: usize, emb_dim: usize, cond_dim: usize, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        PolicyParams {
            vocab_size,
            emb_dim,
            cond_dim,
            w_emb: fill(vocab_size * emb_dim),
            w_cond: fill(cond_dim * emb_dim),
            w_out: fill(emb_dim * vocab_size),
        }
    }

    pub fn zeros(vocab_size: usize, emb_dim: usize, cond_dim: usize) -> PolicyParams {
        PolicyParams {
            vocab_size,
            emb_dim,
            cond_dim,
            w_emb: vec![0.0; vocab_size * emb_dim],
            w_cond: vec![0.0; cond_dim * emb_dim],
            w_out: vec![0.0; emb_dim * vocab_size],
        }
    }

    pub fn zeros_like(&self) -> PolicyParams {
        PolicyParams::zeros(self.vocab_size, self.emb_dim, self.cond_dim)
    }

    pub fn tensors(&self) -> [&Vec<f64>; 3] {
        [&self.w_emb, &self.w_cond, &self.w_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.w_emb, &mut self.w_cond, &mut self.w_out]
    }

    /// `self += scale * other`, in fixed tensor order.
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (mine, theirs) in self.tensors_mut().into_iter().zip(other.tensors()) {
            assert_eq!(mine.len(), theirs.len(), "parameter shapes differ");
            for (x, y) in mine.iter_mut().zip(theirs) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for tensor in self.tensors_mut() {
            for x in tensor.iter_mut() {
                *x *= factor;
            }
        }
    }

    fn emb_row(&self, id: usize) -> &[f64] {
        &self.w_emb[id * self.emb_dim..(id + 1) * self.emb_dim]
    }
}

/// Pools the image embedding with the selected fact embeddings: mean, then
/// renormalize. An empty fact list returns the image embedding unchanged.
pub fn pool_conditioning(image: &Embedding, facts: &[Embedding]) -> Result<Embedding> {
    if facts.is_empty() {
        return Ok(image.clone());
    }
    let dim = image.dim();
    let mut mean = image.values().to_vec();
    for fact in facts {
        if fact.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: fact.dim(),
            });
        }
        for (m, v) in mean.iter_mut().zip(fact.values()) {
            *m += v;
        }
    }
    let count = (facts.len() + 1) as f64;
    for m in mean.iter_mut() {
        *m /= count;
    }
    Embedding::from_raw(mean)
}

/// Conditioning vector for one image and its selected facts.
pub fn condition(
    image: &ImageRecord,
    facts: &[Fact],
    embedder: &dyn Embedder,
    sigma: f64,
    seed: u64,
) -> Result<Embedding> {
    let image_embedding = embed_image(image, embedder, sigma, seed)?;
    let fact_embeddings = facts
        .iter()
        .map(|f| embedder.embed_text(&f.text))
        .collect::<Result<Vec<_>>>()?;
    pool_conditioning(&image_embedding, &fact_embeddings)
}

fn check_cond(params: &PolicyParams, cond: &Embedding) -> Result<()> {
    if cond.dim() != params.cond_dim {
        return Err(Error::DimensionMismatch {
            expected: params.cond_dim,
            got: cond.dim(),
        });
    }
    Ok(())
}

fn check_sequence(params: &PolicyParams, sequence: &[usize]) -> Result<()> {
    if sequence.len() < 2 || sequence[0] != BOS || *sequence.last().unwrap() != EOS {
        return Err(Error::InvalidArgument(
            "sequence must start with BOS and end with EOS".into(),
        ));
    }
    if let Some(&bad) = sequence.iter().find(|&&id| id >= params.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary of size {}",
            params.vocab_size
        )));
    }
    Ok(())
}

fn cond_projection(params: &PolicyParams, cond: &Embedding) -> Vec<f64> {
    let e = params.emb_dim;
    let mut proj = vec![0.0; e];
    for (d, c) in cond.values().iter().enumerate() {
        let row = &params.w_cond[d * e..(d + 1) * e];
        for (p, w) in proj.iter_mut().zip(row) {
            *p += c * w;
        }
    }
    proj
}

fn hidden_state(params: &PolicyParams, prev: usize, cond_proj: &[f64]) -> Vec<f64> {
    params
        .emb_row(prev)
        .iter()
        .zip(cond_proj)
        .map(|(a, b)| a + b)
        .collect()
}

fn logits_from_hidden(params: &PolicyParams, hidden: &[f64]) -> Vec<f64> {
    let v = params.vocab_size;
    let mut logits = vec![0.0; v];
    for (e, h) in hidden.iter().enumerate() {
        let row = &params.w_out[e * v..(e + 1) * v];
        for (l, w) in logits.iter_mut().zip(row) {
            *l += h * w;
        }
    }
    logits
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_sum).collect()
}

/// Log-probabilities over the vocabulary for the step after `prev`.
pub fn step_log_probs(params: &PolicyParams, cond: &Embedding, prev: usize) -> Result<Vec<f64>> {
    check_cond(params, cond)?;
    if prev >= params.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "token id {prev} outside vocabulary of size {}",
            params.vocab_size
        )));
    }
    let cond_proj = cond_projection(params, cond);
    let hidden = hidden_state(params, prev, &cond_proj);
    Ok(log_softmax(&logits_from_hidden(params, &hidden)))
}

/// Total and per-step log-probability of a `[BOS, ..., EOS]` sequence.
pub fn logprob(
    params: &PolicyParams,
    cond: &Embedding,
    sequence: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_cond(params, cond)?;
    check_sequence(params, sequence)?;
    let cond_proj = cond_projection(params, cond);
    let mut per_token = Vec::with_capacity(sequence.len() - 1);
    for step in 1..sequence.len() {
        let hidden = hidden_state(params, sequence[step - 1], &cond_proj);
        let log_probs = log_softmax(&logits_from_hidden(params, &hidden));
        per_token.push(log_probs[sequence[step]]);
    }
    Ok((per_token.iter().sum(), per_token))
}

/// Shared backward pass: loss = Σ_i w_i · (−log p(y_i | y_{1:i−1}, cond)).
fn weighted_nll_and_grad(
    params: &PolicyParams,
    cond: &Embedding,
    sequence: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, PolicyParams)> {
    check_cond(params, cond)?;
    check_sequence(params, sequence)?;
    if let Some(w) = weights {
        if w.len() != sequence.len() - 1 {
            return Err(Error::LengthMismatch(format!(
                "{} weights for {} actions",
                w.len(),
                sequence.len() - 1
            )));
        }
    }
    let e = params.emb_dim;
    let v = params.vocab_size;
    let cond_proj = cond_projection(params, cond);
    let mut grad = params.zeros_like();
    let mut cond_proj_grad = vec![0.0; e];
    let mut loss = 0.0;
    for step in 1..sequence.len() {
        let prev = sequence[step - 1];
        let target = sequence[step];
        let weight = weights.map_or(1.0, |w| w[step - 1]);
        let hidden = hidden_state(params, prev, &cond_proj);
        let log_probs = log_softmax(&logits_from_hidden(params, &hidden));
        loss += weight * -log_probs[target];
        // dlogits = w · (softmax − onehot(target))
        let mut dhidden = vec![0.0; e];
        for (tok, lp) in log_probs.iter().enumerate() {
            let mut dl = weight * lp.exp();
            if tok == target {
                dl -= weight;
            }
            if dl == 0.0 {
                continue;
            }
            for (ei, h) in hidden.iter().enumerate() {
                grad.w_out[ei * v + tok] += h * dl;
                dhidden[ei] += params.w_out[ei * v + tok] * dl;
            }
        }
        let emb_grad = &mut grad.w_emb[prev * e..(prev + 1) * e];
        for (ei, dh) in dhidden.iter().enumerate() {
            emb_grad[ei] += dh;
            cond_proj_grad[ei] += dh;
        }
    }
    for (d, c) in cond.values().iter().enumerate() {
        let row = &mut grad.w_cond[d * e..(d + 1) * e];
        for (g, dp) in row.iter_mut().zip(&cond_proj_grad) {
            *g += c * dp;
        }
    }
    Ok((loss, grad))
}

/// Cross-entropy loss and exact gradient for a reference sequence.
pub fn ce_loss_and_grad(
    params: &PolicyParams,
    cond: &Embedding,
    reference: &[usize],
) -> Result<(f64, PolicyParams)> {
    weighted_nll_and_grad(params, cond, reference, None)
}

/// Reward-weighted surrogate `−Σ_t R_t · log p(a_t | s_t)` and its gradient,
/// with the sampled sequence held fixed.
pub fn rl_loss_and_grad(
    params: &PolicyParams,
    cond: &Embedding,
    sampled: &[usize],
    rewards: &[f64],
) -> Result<(f64, PolicyParams)> {
    weighted_nll_and_grad(params, cond, sampled, Some(rewards))
}

/// One sampled sequence with the temperature-1 log-probability of every
/// action, so re-scoring with [`logprob`] reproduces the recorded values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub sequence: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub forced_stop: bool,
}

/// Ancestral sampling until EOS or `max_len` actions. Temperature scales the
/// logits; zero means greedy argmax with lowest-id tie-breaking. If EOS is
/// not drawn within `max_len` actions it is appended, flagged `forced_stop`,
/// so sequences are always well-formed.
pub fn sample<R: Rng>(
    params: &PolicyParams,
    cond: &Embedding,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<SampleOutcome> {
    check_cond(params, cond)?;
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(Error::InvalidArgument(
            "temperature must be finite and nonnegative".into(),
        ));
    }
    let cond_proj = cond_projection(params, cond);
    let mut sequence = vec![BOS];
    let mut logprobs = Vec::new();
    let mut forced_stop = false;
    for _ in 0..max_len {
        let prev = *sequence.last().unwrap();
        let hidden = hidden_state(params, prev, &cond_proj);
        let logits = logits_from_hidden(params, &hidden);
        let unit_log_probs = log_softmax(&logits);
        let action = if temperature == 0.0 {
            let mut best = 0;
            for (tok, l) in logits.iter().enumerate() {
                if *l > logits[best] {
                    best = tok;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).iter().map(|lp| lp.exp()).collect();
            let draw = rng.random::<f64>();
            let mut cumulative = 0.0;
            let mut chosen = probs.len() - 1;
            for (tok, p) in probs.iter().enumerate() {
                cumulative += p;
                if draw < cumulative {
                    chosen = tok;
                    break;
                }
            }
            chosen
        };
        sequence.push(action);
        logprobs.push(unit_log_probs[action]);
        if action == EOS {
            break;
        }
    }
    if *sequence.last().unwrap() != EOS {
        let prev = *sequence.last().unwrap();
        let hidden = hidden_state(params, prev, &cond_proj);
        let unit_log_probs = log_softmax(&logits_from_hidden(params, &hidden));
        sequence.push(EOS);
        logprobs.push(unit_log_probs[EOS]);
        forced_stop = true;
    }
    Ok(SampleOutcome {
        sequence,
        logprobs,
        forced_stop,
    })
}

/// Current on-disk format version for checkpoints.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    vocab_hash: u64,
    vocab: Vec<String>,
    seed: u64,
    vocab_size: usize,
    emb_dim: usize,
    cond_dim: usize,
    w_emb: Vec<f64>,
    w_cond: Vec<f64>,
    w_out: Vec<f64>,
}

/// Writes a JSON checkpoint binding the parameters to the vocabulary hash.
pub fn save_checkpoint(
    params: &PolicyParams,
    vocab: &Vocabulary,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        vocab_hash: vocab.hash(),
        vocab: vocab.tokens()[3..].to_vec(),
        seed,
        vocab_size: params.vocab_size,
        emb_dim: params.emb_dim,
        cond_dim: params.cond_dim,
        w_emb: params.w_emb.clone(),
        w_cond: params.w_cond.clone(),
        w_out: params.w_out.clone(),
    };
    atomic_write(path, serde_json::to_string(&file)?.as_bytes())?;
    Ok(())
}

/// Loads a checkpoint, refusing on any vocabulary-hash mismatch.
pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, Vocabulary, u64)> {
    let raw = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&raw)?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported checkpoint format version {}",
            file.format_version
        )));
    }
    let vocab = Vocabulary::from_tokens(file.vocab)?;
    if vocab.hash() != file.vocab_hash {
        return Err(Error::VocabHashMismatch {
            expected: format!("{:016x}", file.vocab_hash),
            found: format!("{:016x}", vocab.hash()),
        });
    }
    let params = PolicyParams {
        vocab_size: file.vocab_size,
        emb_dim: file.emb_dim,
        cond_dim: file.cond_dim,
        w_emb: file.w_emb,
        w_cond: file.w_cond,
        w_out: file.w_out,
    };
    if params.vocab_size != vocab.len()
        || params.w_emb.len() != params.vocab_size * params.emb_dim
        || params.w_cond.len() != params.cond_dim * params.emb_dim
        || params.w_out.len() != params.emb_dim * params.vocab_size
    {
        return Err(Error::InvalidArgument(
            "checkpoint shapes are inconsistent".into(),
        ));
    }
    Ok((params, vocab, file.seed))
}
