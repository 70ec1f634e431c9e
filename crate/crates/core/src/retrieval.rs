//! CAD candidate retrieval: appearance similarity between track detections
//! and rendered model views, gated by the semantic similarity of their
//! category labels.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::tracking::{cosine, Track};

pub const VIEWS_PER_MODEL: usize = 10;
pub const MAX_CANDIDATES: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("model {model_id}: {reason}")]
    BadModel { model_id: String, reason: String },
    #[error("track has no descriptors")]
    EmptyTrack,
    #[error("descriptor database is empty")]
    EmptyDatabase,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ModelViewDescriptors {
    pub model_id: String,
    pub category: String,
    pub view_descriptors: Vec<Vec<f32>>,
}

impl ModelViewDescriptors {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |reason: String| RetrievalError::BadModel {
            model_id: self.model_id.clone(),
            reason,
        };
        if self.view_descriptors.len() != VIEWS_PER_MODEL {
            return Err(bad(alloc::format!(
                "expected {VIEWS_PER_MODEL} view descriptors, got {}",
                self.view_descriptors.len()
            )));
        }
        for (k, d) in self.view_descriptors.iter().enumerate() {
            let norm = libm::sqrt(d.iter().map(|&x| (x as f64) * (x as f64)).sum());
            if (norm - 1.0).abs() > 1e-6 {
                return Err(bad(alloc::format!("view {k} has norm {norm}")));
            }
        }
        Ok(())
    }
}

/// Maps class labels into a shared semantic space. Implementations must be
/// deterministic and return unit-norm vectors.
pub trait EmbeddingProvider {
    fn embed(&self, label: &str) -> Vec<f32>;
}

/// Stand-in embedder: a pseudo-random unit vector seeded by a hash of the
/// label. Distinct labels are nearly orthogonal in high dimension.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedding {
    pub dim: usize,
}

impl Default for HashEmbedding {
    fn default() -> Self {
        HashEmbedding { dim: 64 }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit vector of dimension `dim` with Gaussian direction, seeded.
pub fn random_unit_vector(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
    v.iter().map(|x| (x / norm) as f32).collect()
}

impl EmbeddingProvider for HashEmbedding {
    fn embed(&self, label: &str) -> Vec<f32> {
        random_unit_vector(self.dim, fnv1a(label.as_bytes()))
    }
}

/// Cosine similarity of the two label embeddings, in `[-1, 1]`.
pub fn category_similarity(a: &str, b: &str, emb: &dyn EmbeddingProvider) -> f64 {
    if a == b {
        return 1.0;
    }
    cosine(&emb.embed(a), &emb.embed(b)).clamp(-1.0, 1.0)
}

/// Product of appearance and category similarity, with negative values of
/// either floored at zero.
pub fn combined_similarity(appearance: f64, category: f64) -> f64 {
    appearance.max(0.0) * category.clamp(0.0, 1.0)
}

/// Mean of [`combined_similarity`] over a matrix of appearance cosines
/// sharing one category similarity.
pub fn aggregate_scores(appearance_cosines: &[f64], category: f64) -> f64 {
    if appearance_cosines.is_empty() {
        return 0.0;
    }
    appearance_cosines
        .iter()
        .map(|&a| combined_similarity(a, category))
        .sum::<f64>()
        / appearance_cosines.len() as f64
}

/// Mean combined similarity over all (track frame, model view) pairs.
pub fn track_model_score(
    track_descriptors: &[&[f32]],
    track_category: &str,
    model: &ModelViewDescriptors,
    emb: &dyn EmbeddingProvider,
) -> Result<f64, RetrievalError> {
    if track_descriptors.is_empty() {
        return Err(RetrievalError::EmptyTrack);
    }
    let cat = category_similarity(track_category, &model.category, emb);
    let cosines: Vec<f64> = track_descriptors
        .iter()
        .flat_map(|d| model.view_descriptors.iter().map(move |v| cosine(d, v)))
        .collect();
    Ok(aggregate_scores(&cosines, cat))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Candidate {
    pub model_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CandidateList {
    pub track_id: String,
    /// At most [`MAX_CANDIDATES`], by descending score.
    pub entries: Vec<Candidate>,
}

fn by_score_then_id(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.model_id.cmp(&b.model_id))
}

/// Top models for a track by [`track_model_score`]; equal scores are
/// ordered by model id.
pub fn rank_candidates(
    track: &Track,
    database: &[ModelViewDescriptors],
    emb: &dyn EmbeddingProvider,
) -> Result<CandidateList, RetrievalError> {
    if database.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    let descs: Vec<&[f32]> = track.detections.iter().map(|d| d.descriptor.as_slice()).collect();
    let mut entries = database
        .iter()
        .map(|m| {
            Ok(Candidate {
                model_id: m.model_id.clone(),
                score: track_model_score(&descs, &track.category, m, emb)?,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    entries.sort_by(by_score_then_id);
    entries.truncate(MAX_CANDIDATES);
    Ok(CandidateList {
        track_id: track.track_id.clone(),
        entries,
    })
}
