//! Grouping per-frame detections into object tracks by clique partitioning.
//!
//! The partition objective is `Σ (similarity − θ)` over all pairs of
//! detections that share a cluster. [`partition_tracks`] approximates it by
//! greedy agglomeration; [`exact_partition_oracle`] enumerates every
//! partition for small inputs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackingError {
    #[error("detections are both in frame {0}")]
    SameFrame(u32),
    #[error("exact partitioning supports at most {max} detections, got {got}")]
    TooLarge { max: usize, got: usize },
    #[error("invalid detection: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = BoundingBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        }
        .area();
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Detection {
    pub frame_id: u32,
    #[cfg_attr(feature = "serde", serde(rename = "box"))]
    pub bbox: BoundingBox,
    pub category: String,
    pub score: f64,
    pub descriptor: Vec<f32>,
}

impl Detection {
    pub fn validate(&self) -> Result<(), TrackingError> {
        let b = &self.bbox;
        if !(b.x_min < b.x_max && b.y_min < b.y_max) {
            return Err(TrackingError::Invalid(format!(
                "frame {}: empty box {b:?}",
                self.frame_id
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(TrackingError::Invalid(format!(
                "frame {}: score {} outside [0,1]",
                self.frame_id, self.score
            )));
        }
        let norm = libm::sqrt(self.descriptor.iter().map(|&x| (x as f64) * (x as f64)).sum());
        if (norm - 1.0).abs() > 1e-6 {
            return Err(TrackingError::Invalid(format!(
                "frame {}: descriptor norm {norm}",
                self.frame_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "lowercase"))]
pub enum TrackSource {
    Automatic,
    Manual,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Track {
    pub track_id: String,
    /// One per frame, ordered by frame.
    pub detections: Vec<Detection>,
    pub category: String,
    pub source: TrackSource,
}

impl Track {
    /// Build a track from detections, sorting them by frame and taking the
    /// majority category.
    pub fn from_detections(
        track_id: String,
        mut detections: Vec<Detection>,
        source: TrackSource,
    ) -> Result<Self, TrackingError> {
        if detections.is_empty() {
            return Err(TrackingError::Invalid(format!("track {track_id} is empty")));
        }
        detections.sort_by_key(|d| d.frame_id);
        if let Some(w) = detections.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
            return Err(TrackingError::SameFrame(w[0].frame_id));
        }
        let category = majority_category(&detections);
        Ok(Track {
            track_id,
            detections,
            category,
            source,
        })
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.detections.iter().map(|d| d.frame_id)
    }

    pub fn detection_in(&self, frame_id: u32) -> Option<&Detection> {
        self.detections
            .binary_search_by_key(&frame_id, |d| d.frame_id)
            .ok()
            .map(|i| &self.detections[i])
    }
}

/// Most frequent category; ties go to the lexicographically smallest.
fn majority_category(detections: &[Detection]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in detections {
        *counts.entry(d.category.as_str()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (cat, n) in counts {
        if best.map_or(true, |(_, m)| n > m) {
            best = Some((cat, n));
        }
    }
    best.map(|(c, _)| String::from(c)).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SimilarityWeights {
    pub appearance: f64,
    pub category: f64,
    pub spatial: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        SimilarityWeights {
            appearance: 1.0,
            category: 0.5,
            spatial: 0.5,
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.6;

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / libm::sqrt(na * nb)
}

/// Weighted sum of descriptor cosine, category agreement, and box overlap
/// (the latter only between consecutive frames).
pub fn pairwise_similarity(
    a: &Detection,
    b: &Detection,
    w: &SimilarityWeights,
) -> Result<f64, TrackingError> {
    if a.frame_id == b.frame_id {
        return Err(TrackingError::SameFrame(a.frame_id));
    }
    let appearance = cosine(&a.descriptor, &b.descriptor);
    let category = if a.category == b.category { 1.0 } else { 0.0 };
    let spatial = if a.frame_id.abs_diff(b.frame_id) == 1 {
        a.bbox.iou(&b.bbox)
    } else {
        0.0
    };
    Ok(w.appearance * appearance + w.category * category + w.spatial * spatial)
}

/// Pairwise gains `sim − θ`, `None` for pairs sharing a frame.
fn gain_matrix(detections: &[Detection], w: &SimilarityWeights, threshold: f64) -> Vec<Vec<Option<f64>>> {
    let n = detections.len();
    let mut g = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = pairwise_similarity(&detections[i], &detections[j], w).ok();
            let v = s.map(|s| s - threshold);
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    g
}

/// Clique-partitioning objective of `clusters` (lists of detection indices).
pub fn partition_objective(
    detections: &[Detection],
    clusters: &[Vec<usize>],
    w: &SimilarityWeights,
    threshold: f64,
) -> f64 {
    let mut total = 0.0;
    for c in clusters {
        for (k, &i) in c.iter().enumerate() {
            for &j in &c[k + 1..] {
                match pairwise_similarity(&detections[i], &detections[j], w) {
                    Ok(s) => total += s - threshold,
                    Err(_) => return f64::NEG_INFINITY,
                }
            }
        }
    }
    total
}

/// Greedy agglomerative clustering: repeatedly merge the pair of clusters
/// with the largest positive gain, never joining two detections from the
/// same frame. Ties go to the pair with the lowest detection indices.
/// Afterwards single detections and pairs sharing a cluster are moved to
/// whichever cluster (or a new one) raises the objective most, until none
/// moves.
///
/// Returns clusters as sorted detection indices, ordered by their first
/// index.
pub fn greedy_clusters(
    detections: &[Detection],
    w: &SimilarityWeights,
    threshold: f64,
) -> Vec<Vec<usize>> {
    let n = detections.len();
    let pair_gain = gain_matrix(detections, w, threshold);
    let mut gain = pair_gain.clone();
    // cluster slot i is alive while members[i] is non-empty; its id is i,
    // which is also its smallest member
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if members[a].is_empty() {
                continue;
            }
            for b in a + 1..n {
                if members[b].is_empty() {
                    continue;
                }
                if let Some(g) = gain[a][b] {
                    if g > 0.0 && best.map_or(true, |(bg, _, _)| g > bg) {
                        best = Some((g, a, b));
                    }
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let moved = core::mem::take(&mut members[b]);
        members[a].extend(moved);
        members[a].sort_unstable();
        for c in 0..n {
            if c == a || c == b || members[c].is_empty() {
                continue;
            }
            let merged = match (gain[a][c], gain[b][c]) {
                (Some(x), Some(y)) => Some(x + y),
                _ => None,
            };
            gain[a][c] = merged;
            gain[c][a] = merged;
        }
    }
    members.retain(|m| !m.is_empty());
    relocate(&pair_gain, &mut members);
    members
}

/// Gain of adding `group` to `cluster` (ignoring members of the group
/// itself), `None` if a frame clashes.
fn join_gain(gain: &[Vec<Option<f64>>], group: &[usize], cluster: &[usize]) -> Option<f64> {
    let mut total = 0.0;
    for &i in group {
        for &j in cluster {
            if !group.contains(&j) {
                total += gain[i][j]?;
            }
        }
    }
    Some(total)
}

/// Best improving destination for `group`, taken out of cluster `from`:
/// another cluster, or `None` for a cluster of its own.
fn best_move(
    gain: &[Vec<Option<f64>>],
    clusters: &[Vec<usize>],
    group: &[usize],
    from: usize,
) -> Option<Option<usize>> {
    const EPS: f64 = 1e-12;
    let stay = join_gain(gain, group, &clusters[from]).expect("clusters are feasible");
    let mut best: (f64, Option<usize>) = (-stay, None);
    if clusters[from].len() == group.len() {
        best.0 = 0.0;
    }
    for (c, m) in clusters.iter().enumerate() {
        if c == from || m.is_empty() {
            continue;
        }
        if let Some(g) = join_gain(gain, group, m) {
            if g - stay > best.0 + EPS {
                best = (g - stay, Some(c));
            }
        }
    }
    (best.0 > EPS).then_some(best.1)
}

/// Move single detections, then same-cluster pairs, to wherever they raise
/// the objective most, until nothing moves.
fn relocate(gain: &[Vec<Option<f64>>], clusters: &mut Vec<Vec<usize>>) {
    let n = gain.len();
    let mut home: Vec<usize> = vec![0; n];
    for (c, m) in clusters.iter().enumerate() {
        for &i in m {
            home[i] = c;
        }
    }
    let mut moved = true;
    while moved {
        moved = false;
        let singles = (0..n).map(|i| vec![i]);
        let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| vec![i, j]));
        for group in singles.chain(pairs) {
            let from = home[group[0]];
            if group.iter().any(|&g| home[g] != from) {
                continue;
            }
            let Some(dest) = best_move(gain, clusters, &group, from) else {
                continue;
            };
            clusters[from].retain(|j| !group.contains(j));
            let to = dest.unwrap_or_else(|| {
                clusters.push(Vec::new());
                clusters.len() - 1
            });
            for &g in &group {
                clusters[to].push(g);
                home[g] = to;
            }
            moved = true;
        }
    }
    clusters.retain(|m| !m.is_empty());
    for m in clusters.iter_mut() {
        m.sort_unstable();
    }
    clusters.sort_unstable_by_key(|m| m[0]);
}

fn clusters_to_tracks(detections: &[Detection], clusters: Vec<Vec<usize>>) -> Vec<Track> {
    clusters
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let dets = c.iter().map(|&i| detections[i].clone()).collect();
            Track::from_detections(format!("track-{k:04}"), dets, TrackSource::Automatic)
                .expect("clusters never share a frame")
        })
        .collect()
}

/// Cluster detections into automatic tracks with [`greedy_clusters`].
pub fn partition_tracks(
    detections: &[Detection],
    w: &SimilarityWeights,
    threshold: f64,
) -> Vec<Track> {
    clusters_to_tracks(detections, greedy_clusters(detections, w, threshold))
}

pub const EXACT_LIMIT: usize = 10;

/// Best partition by exhaustive search over set partitions. Among equal
/// objectives the first one found in restricted-growth order wins.
pub fn exact_clusters(
    detections: &[Detection],
    w: &SimilarityWeights,
    threshold: f64,
) -> Result<(Vec<Vec<usize>>, f64), TrackingError> {
    let n = detections.len();
    if n > EXACT_LIMIT {
        return Err(TrackingError::TooLarge {
            max: EXACT_LIMIT,
            got: n,
        });
    }
    let gain = gain_matrix(detections, w, threshold);
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    search(0, n, &gain, &mut clusters, 0.0, &mut best);
    if n == 0 {
        best.1 = 0.0;
    }
    Ok(best)
}

fn search(
    i: usize,
    n: usize,
    gain: &[Vec<Option<f64>>],
    clusters: &mut Vec<Vec<usize>>,
    value: f64,
    best: &mut (Vec<Vec<usize>>, f64),
) {
    if i == n {
        if value > best.1 {
            *best = (clusters.clone(), value);
        }
        return;
    }
    for c in 0..clusters.len() {
        let mut delta = 0.0;
        let mut feasible = true;
        for &j in &clusters[c] {
            match gain[i][j] {
                Some(g) => delta += g,
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if feasible {
            clusters[c].push(i);
            search(i + 1, n, gain, clusters, value + delta, best);
            clusters[c].pop();
        }
    }
    clusters.push(vec![i]);
    search(i + 1, n, gain, clusters, value, best);
    clusters.pop();
}

/// Exhaustive counterpart of [`partition_tracks`] for at most
/// [`EXACT_LIMIT`] detections.
pub fn exact_partition_oracle(
    detections: &[Detection],
    w: &SimilarityWeights,
    threshold: f64,
) -> Result<Vec<Track>, TrackingError> {
    let (clusters, _) = exact_clusters(detections, w, threshold)?;
    Ok(clusters_to_tracks(detections, clusters))
}
