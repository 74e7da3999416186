//! Question embedding, cosine similarity and paraphrase filtering.
//!
//! The embedder is a pluggable interface. The bundled [`TokenHashEmbedder`]
//! is a deterministic bag-of-tokens encoder: every lowercase whitespace token
//! is hashed onto a signed basis vector, the vectors are summed and the sum
//! is normalized to unit length.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Maps question text onto the unit sphere.
///
/// Implementations must be deterministic and return vectors of length
/// [`QuestionEmbedder::dim`] with unit L2 norm.
pub trait QuestionEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub const DEFAULT_QUESTION_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenHashEmbedder {
    dim: usize,
}

impl TokenHashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "embedding dimension must be positive"));
        }
        Ok(Self { dim })
    }
}

impl Default for TokenHashEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_QUESTION_DIM,
        }
    }
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl QuestionEmbedder for TokenHashEmbedder {
    fn name(&self) -> &str {
        "token-hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let lowered = text.trim().to_lowercase();
        if lowered.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        for token in lowered.split_whitespace() {
            let h = fnv1a(token.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = l2_norm(&v);
        if norm == 0.0 {
            // Tokens cancelled out exactly; fall back to a basis vector keyed by the whole text.
            let h = fnv1a(lowered.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
            return Ok(v);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `uᵀv / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "cosine similarity operands".into(),
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn embed_question(text: &str, embedder: &dyn QuestionEmbedder) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    embedder.embed(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub threshold: f64,
    pub max_keep: usize,
    pub rng_seed: u64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            max_keep: 3,
            rng_seed: 0,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(invalid("threshold", format!("{} not in (0, 1]", self.threshold)));
        }
        if self.max_keep == 0 {
            return Err(invalid("max_keep", "must be at least 1"));
        }
        Ok(())
    }
}

fn dedup_key(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Candidates that survive deduplication and the similarity threshold, in
/// input order, before any subsampling.
pub fn paraphrase_survivors(
    original: &str,
    candidates: &[String],
    threshold: f64,
    embedder: &dyn QuestionEmbedder,
) -> Result<Vec<String>> {
    let reference = embed_question(original, embedder)?;
    let mut seen = HashSet::new();
    seen.insert(dedup_key(original));
    let mut survivors = Vec::new();
    for candidate in candidates {
        let trimmed = candidate.trim();
        if trimmed.is_empty() || !seen.insert(dedup_key(trimmed)) {
            continue;
        }
        let emb = embedder.embed(trimmed)?;
        if cosine_similarity(&reference, &emb)? >= threshold {
            survivors.push(trimmed.to_string());
        }
    }
    Ok(survivors)
}

/// Deduplicates `candidates`, keeps those at least `policy.threshold`
/// similar to `original`, then draws `policy.max_keep` of them uniformly
/// without replacement. Survivors keep their input order.
pub fn filter_paraphrases(
    original: &str,
    candidates: &[String],
    policy: &FilterPolicy,
    embedder: &dyn QuestionEmbedder,
) -> Result<Vec<String>> {
    policy.validate()?;
    let survivors = paraphrase_survivors(original, candidates, policy.threshold, embedder)?;
    if survivors.len() <= policy.max_keep {
        return Ok(survivors);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
    let mut picked = rand::seq::index::sample(&mut rng, survivors.len(), policy.max_keep).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| survivors[i].clone()).collect())
}
