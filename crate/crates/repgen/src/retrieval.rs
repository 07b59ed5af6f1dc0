//! Exact cosine top-k retrieval over the fact corpus, plus purification:
//! re-ranking retrieved facts against the clinical context.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Fact, KnowledgeCorpus};
use crate::embedding::{cosine, embed_image, Embedder, Embedding, ImageRecord};
use crate::error::{Error, Result};
use crate::fsio::atomic_write;

/// Current on-disk format version for index files.
pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Default number of facts kept by retrieval.
pub const DEFAULT_RETRIEVE_K: usize = 10;

/// Default number of facts kept by purification.
pub const DEFAULT_PURIFY_M: usize = 5;

/// Fact embeddings aligned with fact ids, tied to one corpus by fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    corpus_fingerprint: String,
    dim: usize,
    keys: Vec<Embedding>,
}

/// Free-text conditioning inputs for purification.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalContext {
    #[serde(default)]
    pub indication: String,
    #[serde(default)]
    pub history: String,
}

impl ClinicalContext {
    /// True when neither field carries text, which disables purification.
    pub fn is_empty(&self) -> bool {
        self.indication.trim().is_empty() && self.history.trim().is_empty()
    }

    /// Single query string: indication and history concatenated and trimmed.
    pub fn combined_text(&self) -> String {
        format!("{} {}", self.indication, self.history)
            .trim()
            .to_string()
    }
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFact {
    pub fact_id: usize,
    pub score: f64,
}

/// One purification survivor. `score` is the context similarity used for
/// ranking; the original retrieval score is kept for diagnostics only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifiedFact {
    pub fact_id: usize,
    pub score: f64,
    pub retrieval_score: f64,
}

/// Purification result. `context_free` marks the bypass path taken when both
/// context fields are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifyOutcome {
    pub facts: Vec<PurifiedFact>,
    pub context_free: bool,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    corpus_fingerprint: String,
    dim: usize,
}

fn rank_order(score_a: f64, id_a: usize, score_b: f64, id_b: usize) -> Ordering {
    score_b
        .partial_cmp(&score_a)
        .unwrap_or(Ordering::Equal)
        .then(id_a.cmp(&id_b))
}

impl RetrievalIndex {
    pub fn corpus_fingerprint(&self) -> &str {
        &self.corpus_fingerprint
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keys(&self) -> &[Embedding] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Embeds every fact as a search key, in id order.
pub fn build_index(corpus: &KnowledgeCorpus, embedder: &dyn Embedder) -> Result<RetrievalIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpusSource);
    }
    let dim = embedder.dim();
    let mut keys = Vec::with_capacity(corpus.len());
    for fact in corpus.facts() {
        let key = embedder.embed_text(&fact.text)?;
        if key.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: key.dim(),
            });
        }
        keys.push(key);
    }
    Ok(RetrievalIndex {
        corpus_fingerprint: corpus.fingerprint().to_string(),
        dim,
        keys,
    })
}

/// Returns the min(k, corpus size) highest-cosine facts, scores descending,
/// ties broken by ascending fact id.
pub fn retrieve(index: &RetrievalIndex, query: &Embedding, k: usize) -> Result<Vec<ScoredFact>> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            got: query.dim(),
        });
    }
    let mut scored: Vec<ScoredFact> = index
        .keys
        .iter()
        .enumerate()
        .map(|(fact_id, key)| ScoredFact {
            fact_id,
            score: cosine(query, key),
        })
        .collect();
    scored.sort_by(|a, b| rank_order(a.score, a.fact_id, b.score, b.fact_id));
    scored.truncate(k.min(index.keys.len()));
    Ok(scored)
}

/// Re-ranks candidates by cosine against the embedded context and keeps the
/// top min(m, candidates). With an empty context the first m candidates pass
/// through unchanged and the outcome is flagged context-free.
pub fn purify(
    candidates: &[ScoredFact],
    context: &ClinicalContext,
    corpus: &KnowledgeCorpus,
    embedder: &dyn Embedder,
    m: usize,
) -> Result<PurifyOutcome> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".into()));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate list".into()));
    }
    let keep = m.min(candidates.len());
    if context.is_empty() {
        let facts = candidates[..keep]
            .iter()
            .map(|c| PurifiedFact {
                fact_id: c.fact_id,
                score: c.score,
                retrieval_score: c.score,
            })
            .collect();
        return Ok(PurifyOutcome {
            facts,
            context_free: true,
        });
    }
    let context_key = embedder.embed_text(&context.combined_text())?;
    let mut rescored = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let fact = corpus.facts().get(candidate.fact_id).ok_or_else(|| {
            Error::InvalidArgument(format!("fact id {} not in corpus", candidate.fact_id))
        })?;
        rescored.push(PurifiedFact {
            fact_id: candidate.fact_id,
            score: cosine(&context_key, &embedder.embed_text(&fact.text)?),
            retrieval_score: candidate.score,
        });
    }
    rescored.sort_by(|a, b| rank_order(a.score, a.fact_id, b.score, b.fact_id));
    rescored.truncate(keep);
    Ok(PurifyOutcome {
        facts: rescored,
        context_free: false,
    })
}

/// Knobs for the retrieve-then-purify composition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MkeConfig {
    pub k: usize,
    pub m: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for MkeConfig {
    fn default() -> Self {
        MkeConfig {
            k: DEFAULT_RETRIEVE_K,
            m: DEFAULT_PURIFY_M,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Facts selected for one image, with ranking diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MkeOutcome {
    pub facts: Vec<Fact>,
    pub ranked: Vec<PurifiedFact>,
    pub context_free: bool,
}

/// Full knowledge-selection pass for one image: embed, retrieve top-k,
/// purify down to m against the clinical context.
pub fn mke(
    image: &ImageRecord,
    context: &ClinicalContext,
    index: &RetrievalIndex,
    corpus: &KnowledgeCorpus,
    embedder: &dyn Embedder,
    config: &MkeConfig,
) -> Result<MkeOutcome> {
    let query = embed_image(image, embedder, config.noise_sigma, config.seed)?;
    let candidates = retrieve(index, &query, config.k)?;
    let outcome = purify(&candidates, context, corpus, embedder, config.m)?;
    let facts = outcome
        .facts
        .iter()
        .map(|p| corpus.facts()[p.fact_id].clone())
        .collect();
    Ok(MkeOutcome {
        facts,
        ranked: outcome.facts,
        context_free: outcome.context_free,
    })
}

/// Writes an index as JSON Lines: a header, then one key vector per line.
pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    let header = IndexHeader {
        format_version: INDEX_FORMAT_VERSION,
        corpus_fingerprint: index.corpus_fingerprint.clone(),
        dim: index.dim,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for key in &index.keys {
        out.push_str(&serde_json::to_string(key.values())?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Loads an index file, validating dimensions and unit norms.
pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    let raw = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: display.clone(),
        line,
        msg,
    };
    let mut lines = raw.lines().enumerate();
    let header: IndexHeader = match lines.next() {
        Some((_, text)) => serde_json::from_str(text)
            .map_err(|e| parse_err(1, format!("invalid header: {e}")))?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    if header.format_version != INDEX_FORMAT_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let mut keys = Vec::new();
    for (idx, text) in lines {
        let line_no = idx + 1;
        let values: Vec<f64> = serde_json::from_str(text)
            .map_err(|e| parse_err(line_no, format!("invalid key row: {e}")))?;
        if values.len() != header.dim {
            return Err(parse_err(
                line_no,
                format!("expected {} entries, found {}", header.dim, values.len()),
            ));
        }
        let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
            return Err(parse_err(line_no, format!("key row norm {norm} is not 1")));
        }
        keys.push(Embedding::from_raw(values)?);
    }
    if keys.is_empty() {
        return Err(parse_err(1, "index has no key rows".into()));
    }
    Ok(RetrievalIndex {
        corpus_fingerprint: header.corpus_fingerprint,
        dim: header.dim,
        keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;
    use crate::embedding::HashingEmbedder;
    use proptest::prelude::*;
    use rand::seq::IndexedRandom;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus_of(sentences: &[&str]) -> KnowledgeCorpus {
        let docs: Vec<String> = sentences.iter().map(|s| format!("{s}.")).collect();
        build_corpus(&docs).unwrap()
    }

    fn random_corpus(n: usize, rng: &mut ChaCha8Rng) -> KnowledgeCorpus {
        let words: Vec<String> = (0..150).map(|i| format!("term{i}")).collect();
        let docs: Vec<String> = (0..n)
            .map(|i| {
                let body: Vec<String> = (0..6)
                    .map(|_| words.choose(rng).unwrap().clone())
                    .collect();
                format!("entry {i} {}.", body.join(" "))
            })
            .collect();
        build_corpus(&docs).unwrap()
    }

    #[test]
    fn index_rows_follow_fact_ids() {
        let embedder = HashingEmbedder::default();
        let corpus = corpus_of(&["alpha one", "beta two", "gamma three"]);
        let index = build_index(&corpus, &embedder).unwrap();
        assert_eq!(index.len(), 3);
        for (i, fact) in corpus.facts().iter().enumerate() {
            assert_eq!(index.keys()[i], embedder.embed_text(&fact.text).unwrap());
        }
        assert_eq!(index.corpus_fingerprint(), corpus.fingerprint());
    }

    #[test]
    fn rebuilt_index_serializes_to_identical_bytes() {
        let embedder = HashingEmbedder::default();
        let corpus = corpus_of(&["alpha one", "beta two", "gamma three"]);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_index(&build_index(&corpus, &embedder).unwrap(), &a).unwrap();
        save_index(&build_index(&corpus, &embedder).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn all_rows_of_a_large_index_are_unit_norm() {
        let embedder = HashingEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let corpus = random_corpus(5000, &mut rng);
        assert!(corpus.len() >= 4900, "dedup removed too much");
        let index = build_index(&corpus, &embedder).unwrap();
        for key in index.keys() {
            let norm: f64 = key.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn empty_corpus_cannot_be_indexed() {
        let embedder = HashingEmbedder::default();
        // Blank documents are skipped, leaving a corpus with zero facts.
        let corpus = build_corpus(&["   ".to_string()]).unwrap();
        match build_index(&corpus, &embedder) {
            Err(Error::EmptyCorpusSource) => {}
            other => panic!("expected empty corpus error, got {other:?}"),
        }
    }

    #[test]
    fn self_query_ranks_its_own_fact_first() {
        let embedder = HashingEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let corpus = random_corpus(50, &mut rng);
        let index = build_index(&corpus, &embedder).unwrap();
        let query = embedder.embed_text(&corpus.facts()[7].text).unwrap();
        let hits = retrieve(&index, &query, 10).unwrap();
        assert_eq!(hits[0].fact_id, 7);
        assert!((hits[0].score - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn oversized_k_returns_the_whole_corpus_sorted() {
        let embedder = HashingEmbedder::default();
        let corpus = corpus_of(&["alpha one", "beta two", "gamma three"]);
        let index = build_index(&corpus, &embedder).unwrap();
        let query = embedder.embed_text("beta two").unwrap();
        let hits = retrieve(&index, &query, 100).unwrap();
        assert_eq!(hits.len(), 3);
        for pair in hits.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn zero_k_is_rejected() {
        let embedder = HashingEmbedder::default();
        let corpus = corpus_of(&["alpha one"]);
        let index = build_index(&corpus, &embedder).unwrap();
        let query = embedder.embed_text("alpha one").unwrap();
        match retrieve(&index, &query, 0) {
            Err(Error::InvalidK) => {}
            other => panic!("expected k error, got {other:?}"),
        }
    }

    #[test]
    fn retrieval_matches_brute_force_oracle() {
        let embedder = HashingEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let corpus = random_corpus(2000, &mut rng);
        let index = build_index(&corpus, &embedder).unwrap();
        let words: Vec<String> = (0..150).map(|i| format!("term{i}")).collect();
        for _ in 0..200 {
            let text: Vec<String> = (0..5)
                .map(|_| words.choose(&mut rng).unwrap().clone())
                .collect();
            let query = embedder.embed_text(&text.join(" ")).unwrap();
            let got = retrieve(&index, &query, 10).unwrap();
            // Oracle: score every fact with an explicit dot product loop and
            // argsort the full list.
            let mut all: Vec<(usize, f64)> = index
                .keys()
                .iter()
                .enumerate()
                .map(|(id, key)| {
                    let mut dot = 0.0;
                    for (x, y) in query.values().iter().zip(key.values()) {
                        dot += x * y;
                    }
                    (id, dot)
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (hit, (id, score)) in got.iter().zip(&all) {
                assert_eq!(hit.fact_id, *id);
                assert!((hit.score - score).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn context_matching_a_fact_ranks_it_first() {
        let embedder = HashingEmbedder::default();
        let corpus = corpus_of(&["alpha one", "beta two", "gamma three", "delta four"]);
        let index = build_index(&corpus, &embedder).unwrap();
        let query = embedder.embed_text("alpha beta gamma delta").unwrap();
        let candidates = retrieve(&index, &query, 4).unwrap();
        let context = ClinicalContext {
            indication: "gamma three".into(),
            history: String::new(),
        };
        let outcome = purify(&candidates, &context, &corpus, &embedder, 2).unwrap();
        assert!(!outcome.context_free);
        assert_eq!(outcome.facts[0].fact_id, 2);
        assert!((outcome.facts[0].score - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn empty_context_bypasses_reranking() {
        let embedder = HashingEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let corpus = random_corpus(30, &mut rng);
        let index = build_index(&corpus, &embedder).unwrap();
        let query = embedder.embed_text("term1 term2 term3").unwrap();
        let candidates = retrieve(&index, &query, 10).unwrap();
        let outcome = purify(
            &candidates,
            &ClinicalContext::default(),
            &corpus,
            &embedder,
            5,
        )
        .unwrap();
        assert!(outcome.context_free);
        assert_eq!(outcome.facts.len(), 5);
        for (got, want) in outcome.facts.iter().zip(&candidates) {
            assert_eq!(got.fact_id, want.fact_id);
            assert_eq!(got.retrieval_score, want.score);
        }
    }

    #[test]
    fn purify_matches_brute_force_rerank_oracle() {
        let embedder = HashingEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let corpus = random_corpus(300, &mut rng);
        let index = build_index(&corpus, &embedder).unwrap();
        let words: Vec<String> = (0..150).map(|i| format!("term{i}")).collect();
        for _ in 0..100 {
            let mut pick = |n: usize| -> String {
                (0..n)
                    .map(|_| words.choose(&mut rng).unwrap().clone())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let query = embedder.embed_text(&pick(5)).unwrap();
            let context = ClinicalContext {
                indication: pick(3),
                history: pick(2),
            };
            let candidates = retrieve(&index, &query, 10).unwrap();
            let got = purify(&candidates, &context, &corpus, &embedder, 5).unwrap();
            let context_key = embedder.embed_text(&context.combined_text()).unwrap();
            let mut oracle: Vec<(usize, f64)> = candidates
                .iter()
                .map(|c| {
                    let key = embedder
                        .embed_text(&corpus.facts()[c.fact_id].text)
                        .unwrap();
                    let mut dot = 0.0;
                    for (x, y) in context_key.values().iter().zip(key.values()) {
                        dot += x * y;
                    }
                    (c.fact_id, dot)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(5);
            assert_eq!(got.facts.len(), oracle.len());
            for (hit, (id, score)) in got.facts.iter().zip(&oracle) {
                assert_eq!(hit.fact_id, *id);
                assert!((hit.score - score).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn singleton_corpus_flows_through_mke() {
        let embedder = HashingEmbedder::default();
        let corpus = corpus_of(&["heart size is normal"]);
        let index = build_index(&corpus, &embedder).unwrap();
        let image = ImageRecord {
            id: "img0".into(),
            features: None,
            paired_report: Some("heart size is normal".into()),
        };
        let context = ClinicalContext {
            indication: "cardiac evaluation".into(),
            history: String::new(),
        };
        let outcome = mke(
            &image,
            &context,
            &index,
            &corpus,
            &embedder,
            &MkeConfig::default(),
        )
        .unwrap();
        assert_eq!(outcome.facts.len(), 1);
        assert_eq!(outcome.facts[0].text, "heart size is normal");
    }

    #[test]
    fn mke_equals_manual_chain() {
        let embedder = HashingEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let corpus = random_corpus(100, &mut rng);
        let index = build_index(&corpus, &embedder).unwrap();
        let image = ImageRecord {
            id: "img9".into(),
            features: None,
            paired_report: Some("term1 term2 term3 term4".into()),
        };
        let context = ClinicalContext {
            indication: "term5 term6".into(),
            history: "term7".into(),
        };
        let config = MkeConfig::default();
        let composed = mke(&image, &context, &index, &corpus, &embedder, &config).unwrap();
        let query = embed_image(&image, &embedder, config.noise_sigma, config.seed).unwrap();
        let candidates = retrieve(&index, &query, config.k).unwrap();
        let manual = purify(&candidates, &context, &corpus, &embedder, config.m).unwrap();
        assert_eq!(composed.ranked, manual.facts);
        assert_eq!(composed.context_free, manual.context_free);
    }

    #[test]
    fn index_round_trip_preserves_contents() {
        let embedder = HashingEmbedder::default();
        let corpus = corpus_of(&["alpha one", "beta two"]);
        let index = build_index(&corpus, &embedder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        save_index(&index, &path).unwrap();
        assert_eq!(load_index(&path).unwrap(), index);
    }

    #[test]
    fn corrupt_index_row_reports_line_number() {
        let embedder = HashingEmbedder::default();
        let corpus = corpus_of(&["alpha one", "beta two"]);
        let index = build_index(&corpus, &embedder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        save_index(&index, &path).unwrap();
        let mut raw = std::fs::read_to_string(&path).unwrap();
        raw.push_str("[1.0, oops\n");
        std::fs::write(&path, raw).unwrap();
        let err = load_index(&path).unwrap_err();
        assert!(err.to_string().contains(":4:"), "got: {err}");
    }

    #[test]
    fn constant_embedder_degenerates_to_corpus_order() {
        struct ConstantEmbedder;
        impl Embedder for ConstantEmbedder {
            fn dim(&self) -> usize {
                4
            }
            fn embed_text(&self, _text: &str) -> crate::error::Result<Embedding> {
                Embedding::from_raw(vec![1.0, 1.0, 1.0, 1.0])
            }
        }
        let corpus = corpus_of(&["alpha one", "beta two", "gamma three", "delta four"]);
        let index = build_index(&corpus, &ConstantEmbedder).unwrap();
        let query = ConstantEmbedder.embed_text("anything").unwrap();
        let hits = retrieve(&index, &query, 3).unwrap();
        let ids: Vec<usize> = hits.iter().map(|h| h.fact_id).collect();
        assert_eq!(ids, [0, 1, 2]);
    }

    #[test]
    fn wrong_dimension_embedder_is_rejected() {
        struct SkewedEmbedder;
        impl Embedder for SkewedEmbedder {
            fn dim(&self) -> usize {
                8
            }
            fn embed_text(&self, _text: &str) -> crate::error::Result<Embedding> {
                Embedding::from_raw(vec![1.0; 4])
            }
        }
        let corpus = corpus_of(&["alpha one"]);
        match build_index(&corpus, &SkewedEmbedder) {
            Err(Error::DimensionMismatch { expected, got }) => {
                assert_eq!((expected, got), (8, 4));
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    fn arb_corpus_and_query() -> impl Strategy<Value = (Vec<String>, String, u64)> {
        (
            proptest::collection::vec("[a-h]{1,4}( [a-h]{1,4}){1,4}", 3..20),
            "[a-h]{1,4}( [a-h]{1,4}){1,4}",
            any::<u64>(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn purify_output_is_a_subset_of_candidates(
            (sentences, context_text, _) in arb_corpus_and_query(),
        ) {
            let embedder = HashingEmbedder::new(64);
            let docs: Vec<String> = sentences.iter().map(|s| format!("{s}.")).collect();
            let corpus = build_corpus(&docs).unwrap();
            let index = build_index(&corpus, &embedder).unwrap();
            let query = embedder.embed_text(&context_text).unwrap();
            let candidates = retrieve(&index, &query, 10).unwrap();
            let context = ClinicalContext { indication: context_text, history: String::new() };
            let outcome = purify(&candidates, &context, &corpus, &embedder, 5).unwrap();
            let candidate_ids: std::collections::HashSet<usize> =
                candidates.iter().map(|c| c.fact_id).collect();
            prop_assert!(outcome.facts.iter().all(|f| candidate_ids.contains(&f.fact_id)));
            prop_assert!(outcome.facts.len() <= 5);
        }

        #[test]
        fn growing_k_extends_the_result_without_reordering(
            (sentences, query_text, _) in arb_corpus_and_query(),
            k in 1usize..8,
        ) {
            let embedder = HashingEmbedder::new(64);
            let docs: Vec<String> = sentences.iter().map(|s| format!("{s}.")).collect();
            let corpus = build_corpus(&docs).unwrap();
            let index = build_index(&corpus, &embedder).unwrap();
            let query = embedder.embed_text(&query_text).unwrap();
            let smaller = retrieve(&index, &query, k).unwrap();
            let larger = retrieve(&index, &query, k + 1).unwrap();
            prop_assert_eq!(&larger[..smaller.len()], &smaller[..]);
        }

        #[test]
        fn positive_scaling_leaves_the_ranking_unchanged(
            (sentences, query_text, _) in arb_corpus_and_query(),
            scale in prop_oneof![Just(0.25f64), Just(0.5), Just(2.0), Just(8.0)],
        ) {
            let embedder = HashingEmbedder::new(64);
            let docs: Vec<String> = sentences.iter().map(|s| format!("{s}.")).collect();
            let corpus = build_corpus(&docs).unwrap();
            let index = build_index(&corpus, &embedder).unwrap();
            let base = embedder.embed_text(&query_text).unwrap();
            let scaled = Embedding::from_raw(
                base.values().iter().map(|v| v * scale).collect(),
            ).unwrap();
            let a = retrieve(&index, &base, 10).unwrap();
            let b = retrieve(&index, &scaled, 10).unwrap();
            let ids_a: Vec<usize> = a.iter().map(|h| h.fact_id).collect();
            let ids_b: Vec<usize> = b.iter().map(|h| h.fact_id).collect();
            prop_assert_eq!(ids_a, ids_b);
        }
    }
}
