//! Shared similarity space for texts and image records.
//!
//! The built-in encoder hashes word unigrams and bigrams into a fixed number
//! of signed buckets and L2-normalizes. Anything satisfying [`Embedder`] can
//! replace it; downstream code only relies on determinism and unit norm.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{fnv1a64, stage_seed};
use crate::text::tokenize;

/// Default embedding width.
pub const DEFAULT_DIM: usize = 256;

/// Unit-norm real vector. Construction normalizes, so cosine similarity
/// between two embeddings is their dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes a raw vector to unit norm.
    pub fn from_raw(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding entries must be finite".into(),
            ));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument(
                "cannot normalize a zero vector".into(),
            ));
        }
        Ok(Embedding {
            values: values.iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Cosine similarity; equals the dot product because embeddings are unit-norm.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    assert_eq!(a.dim(), b.dim(), "embedding dimensions differ");
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum()
}

/// Text encoder contract. External encoders plug in here; the pipeline checks
/// dimensions at every boundary and otherwise treats the encoder as opaque.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Embedding>;
}

/// Signed feature hashing over word unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }

    fn bucket(&self, key: &str, raw: &mut [f64]) {
        let h = fnv1a64(key.as_bytes());
        let idx = ((h >> 1) % self.dim as u64) as usize;
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
        raw[idx] += sign;
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_DIM)
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut raw = vec![0.0; self.dim];
        for token in &tokens {
            self.bucket(&format!("u:{token}"), &mut raw);
        }
        for pair in tokens.windows(2) {
            self.bucket(&format!("b:{} {}", pair[0], pair[1]), &mut raw);
        }
        if raw.iter().all(|v| *v == 0.0) {
            // Signed buckets can cancel exactly; keep the map total.
            let idx = (fnv1a64(tokens.join(" ").as_bytes()) % self.dim as u64) as usize;
            raw[idx] = 1.0;
        }
        Embedding::from_raw(raw)
    }
}

/// One image's worth of input: a stored feature vector, a paired report to
/// synthesize features from, or both (stored features win).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_report: Option<String>,
}

/// Embeds an image record. Stored features are normalized as-is; otherwise
/// the paired report is embedded and perturbed with seeded Gaussian noise
/// (deterministic per record id), then renormalized.
pub fn embed_image(
    record: &ImageRecord,
    embedder: &dyn Embedder,
    sigma: f64,
    seed: u64,
) -> Result<Embedding> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise sigma must be finite and nonnegative".into(),
        ));
    }
    if let Some(features) = &record.features {
        if features.len() != embedder.dim() {
            return Err(Error::DimensionMismatch {
                expected: embedder.dim(),
                got: features.len(),
            });
        }
        return Embedding::from_raw(features.clone());
    }
    let Some(report) = record.paired_report.as_deref() else {
        return Err(Error::UnembeddableImage(record.id.clone()));
    };
    let base = embedder.embed_text(report)?;
    if sigma == 0.0 {
        return Ok(base);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, &format!("image:{}", record.id)));
    let noise = Normal::new(0.0, sigma).expect("sigma validated above");
    let perturbed: Vec<f64> = base
        .values()
        .iter()
        .map(|v| v + noise.sample(&mut rng))
        .collect();
    Embedding::from_raw(perturbed)
}

/// Loads image records from a JSON Lines file, one record per line.
pub fn load_image_records(path: &Path) -> Result<Vec<ImageRecord>> {
    let raw = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut records = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            msg: format!("invalid image record: {e}"),
        })?;
        records.push(record);
    }
    Ok(records)
}
