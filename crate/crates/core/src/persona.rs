//! Clusters user-profile embeddings into personas with seeded KMeans++
//! and picks the cluster count by the maximum-curvature knee of the
//! inertia curve. Also provides the persona-vocabulary analysis (the
//! words exclusive to each cluster's profiles).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UserId;
use crate::distill::UserProfile;
use crate::gateway::EmbeddingVector;
use crate::rng;

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("cannot fit {k} clusters to {n} users")]
    TooManyClusters { k: usize, n: usize },
    #[error("no embeddings to cluster")]
    EmptyInput,
    #[error("embedding dim mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid k range: {0}")]
    InvalidKRange(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

/// A fitted clustering: every cohort user is assigned to exactly one of
/// `k` centroids, and each assignment is its user's nearest centroid
/// (squared Euclidean, ties to the lowest cluster index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaModel {
    pub k: usize,
    /// Centroid coordinates in f64 (cluster means of f32 embeddings).
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<UserId, usize>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations_run: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (idx, centroid) in centroids.iter().enumerate() {
        let d2 = squared_distance(point, centroid);
        if d2 < best.1 {
            best = (idx, d2);
        }
    }
    best
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for point in points {
        let (label, d2) = nearest_centroid(point, centroids);
        labels.push(label);
        inertia += d2;
    }
    (labels, inertia)
}

/// Gives every empty cluster the in-scope point currently farthest from
/// its own centroid (ties to the lowest point index), keeping k live
/// clusters so each persona can back one adapter. Returns true when any
/// repair happened.
fn repair_empty_clusters(
    points: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    labels: &mut [usize],
) -> bool {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &label in labels.iter() {
        sizes[label] += 1;
    }
    let mut repaired = false;
    for cluster in 0..k {
        if sizes[cluster] > 0 {
            continue;
        }
        let mut farthest = (0usize, -1.0f64);
        for (idx, point) in points.iter().enumerate() {
            // stealing from a singleton would just move the hole
            if sizes[labels[idx]] <= 1 {
                continue;
            }
            let d2 = squared_distance(point, &centroids[labels[idx]]);
            if d2 > farthest.1 {
                farthest = (idx, d2);
            }
        }
        if farthest.1 < 0.0 {
            log::warn!("cluster {cluster} is empty and no donor cluster has spare points");
            continue;
        }
        let (idx, _) = farthest;
        sizes[labels[idx]] -= 1;
        labels[idx] = cluster;
        sizes[cluster] = 1;
        centroids[cluster] = points[idx].clone();
        repaired = true;
    }
    repaired
}

fn cluster_means(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (point, &label) in points.iter().zip(labels) {
        counts[label] += 1;
        for (acc, v) in sums[label].iter_mut().zip(point) {
            *acc += v;
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        if count > 0 {
            for v in sum.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    sums
}

/// KMeans++ seeding (first centroid by uniform seeded draw, later ones
/// drawn with probability proportional to squared distance to the nearest
/// chosen centroid) followed by Lloyd iterations until the largest
/// centroid displacement drops under `tol` or `max_iter` passes run.
/// Deterministic for a fixed seed. Lloyd steps never increase inertia
/// (asserted).
pub fn kmeans(
    embeddings: &BTreeMap<UserId, EmbeddingVector>,
    k: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<PersonaModel, PersonaError> {
    let n = embeddings.len();
    if n == 0 {
        return Err(PersonaError::EmptyInput);
    }
    if k < 1 || k > n {
        return Err(PersonaError::TooManyClusters { k, n });
    }
    let users: Vec<&UserId> = embeddings.keys().collect();
    let dim = embeddings.values().next().unwrap().dim;
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
    for vector in embeddings.values() {
        if vector.dim != dim {
            return Err(PersonaError::DimMismatch {
                expected: dim,
                got: vector.dim,
            });
        }
        points.push(vector.values.iter().map(|&v| f64::from(v)).collect());
    }

    let mut rng = rng::substream(seed, "kmeans");
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rand::Rng::random_range(&mut rng, 0..n)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let choice = if total > 0.0 {
            rng::weighted_index(&mut rng, &d2)
        } else {
            // every remaining point coincides with a centroid
            rand::Rng::random_range(&mut rng, 0..n)
        };
        centroids.push(points[choice].clone());
        for (dist, point) in d2.iter_mut().zip(&points) {
            *dist = dist.min(squared_distance(point, centroids.last().unwrap()));
        }
    }

    let mut prev_inertia = f64::INFINITY;
    let mut iterations_run = 0;
    loop {
        let (mut labels, mut inertia) = assign_all(&points, &centroids);
        if repair_empty_clusters(&points, &mut centroids, &mut labels) {
            inertia = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| squared_distance(p, &centroids[l]))
                .sum();
        }
        assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-9,
            "Lloyd iteration increased inertia: {prev_inertia} -> {inertia}"
        );
        prev_inertia = inertia;
        if iterations_run >= max_iter {
            break;
        }
        let updated = cluster_means(&points, &labels, k, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centroids = updated;
        iterations_run += 1;
        if shift < tol {
            break;
        }
    }

    // Settle on labels that are honest nearest-centroid assignments for the
    // final centroids. Repairs re-run assignment; when duplicates make a
    // cluster unfillable (two identical centroids always tie to the lower
    // index) the empty cluster is accepted with a warning.
    let (mut labels, mut inertia) = assign_all(&points, &centroids);
    for _ in 0..k {
        if !repair_empty_clusters(&points, &mut centroids, &mut labels) {
            break;
        }
        let settled = assign_all(&points, &centroids);
        labels = settled.0;
        inertia = settled.1;
    }
    let mut sizes = vec![0usize; k];
    for &label in &labels {
        sizes[label] += 1;
    }
    if sizes.contains(&0) {
        log::warn!("{} of {k} clusters ended empty (duplicate-dominated input)",
            sizes.iter().filter(|&&s| s == 0).count());
    }

    let assignments: BTreeMap<UserId, usize> = users
        .into_iter()
        .cloned()
        .zip(labels.iter().copied())
        .collect();
    Ok(PersonaModel {
        k,
        centroids,
        assignments,
        inertia,
        seed,
        iterations_run,
    })
}

/// The maximum-curvature knee of an inertia curve: the interior position
/// with the largest second difference inertia[i-1] - 2*inertia[i] +
/// inertia[i+1], ties to the smaller k.
pub fn knee_of(curve: &[(usize, f64)]) -> usize {
    assert!(curve.len() >= 3, "knee needs at least 3 curve points");
    let mut best = (curve[1].0, f64::NEG_INFINITY);
    for window in curve.windows(3) {
        let second_diff = window[0].1 - 2.0 * window[1].1 + window[2].1;
        if second_diff > best.1 {
            best = (window[1].0, second_diff);
        }
    }
    best.0
}

/// Runs [`kmeans`] for each k in `k_range` (sorted ascending, at least 3
/// entries) and selects k_star at the inertia curve's knee. The full curve
/// comes back for plotting. Inertia should fall as k grows; up to one
/// local-minimum violation is tolerated with a warning.
pub fn elbow_select(
    embeddings: &BTreeMap<UserId, EmbeddingVector>,
    k_range: &[usize],
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<(usize, Vec<(usize, f64)>), PersonaError> {
    if k_range.len() < 3 {
        return Err(PersonaError::InvalidKRange(format!(
            "need at least 3 candidate values, got {}",
            k_range.len()
        )));
    }
    if k_range.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PersonaError::InvalidKRange(
            "candidates must be strictly ascending".to_string(),
        ));
    }
    let mut curve = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let model = kmeans(embeddings, k, seed, tol, max_iter)?;
        curve.push((k, model.inertia));
    }
    let violations = curve
        .windows(2)
        .filter(|w| w[1].1 > w[0].1 + 1e-9)
        .count();
    if violations > 0 {
        log::warn!("inertia rose {violations} time(s) along the elbow curve (local minima)");
        if violations > 1 {
            log::error!("elbow curve is unreliable: {violations} inertia increases");
        }
    }
    Ok((knee_of(&curve), curve))
}

/// Default candidate range scanned by the elbow when none is configured.
pub fn default_k_range() -> Vec<usize> {
    (2..=10).collect()
}

/// Lowercase alphabetic tokens of length ≥ 3 with stopwords removed.
fn tokenize(text: &str, stopwords: &HashSet<String>) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|t| t.len() >= 3 && !stopwords.contains(*t))
        .map(String::from)
        .collect()
}

/// Per cluster, the words appearing in that cluster's profile texts but in
/// no other cluster's (one-vs-all set difference), ranked by in-cluster
/// count (ties alphabetical), top_n retained. A stopword filter stands in
/// for part-of-speech tagging.
pub fn persona_vocabulary(
    texts_by_cluster: &BTreeMap<usize, Vec<String>>,
    top_n: usize,
    stopwords: &HashSet<String>,
) -> BTreeMap<usize, Vec<(String, usize)>> {
    let mut counts: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for (&cluster, texts) in texts_by_cluster {
        let entry = counts.entry(cluster).or_default();
        for text in texts {
            for token in tokenize(text, stopwords) {
                *entry.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut result = BTreeMap::new();
    for (&cluster, words) in &counts {
        let mut exclusive: Vec<(String, usize)> = words
            .iter()
            .filter(|(word, _)| {
                counts
                    .iter()
                    .all(|(&other, other_words)| other == cluster || !other_words.contains_key(*word))
            })
            .map(|(word, &count)| (word.clone(), count))
            .collect();
        exclusive.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        exclusive.truncate(top_n);
        result.insert(cluster, exclusive);
    }
    result
}

/// Groups profile full texts by their assigned cluster.
pub fn group_profile_texts(
    profiles: &[UserProfile],
    model: &PersonaModel,
) -> BTreeMap<usize, Vec<String>> {
    let mut grouped: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for cluster in 0..model.k {
        grouped.entry(cluster).or_default();
    }
    for profile in profiles {
        if let Some(&cluster) = model.assignments.get(&profile.user_id) {
            grouped.entry(cluster).or_default().push(profile.full_text());
        }
    }
    grouped
}

/// Common English function words filtered out of the vocabulary analysis.
pub fn default_stopwords() -> HashSet<String> {
    [
        "the", "and", "for", "are", "but", "not", "you", "all", "any", "can", "had", "her",
        "was", "one", "our", "out", "day", "get", "has", "him", "his", "how", "man", "new",
        "now", "old", "see", "two", "way", "who", "boy", "did", "its", "let", "put", "say",
        "she", "too", "use", "that", "with", "have", "this", "will", "your", "from", "they",
        "know", "want", "been", "good", "much", "some", "time", "very", "when", "come",
        "here", "just", "like", "long", "make", "many", "more", "most", "only", "over",
        "such", "take", "than", "them", "well", "were", "what", "while", "also", "after",
        "before", "about", "into", "through", "their", "there", "these", "those", "which",
        "would", "could", "should", "being", "does", "doing", "other", "others", "between",
        "because", "where", "each", "both", "even", "often", "although", "however", "toward",
        "towards", "within", "without", "among", "every", "though", "still", "then", "once",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// On-disk form of a fitted clustering plus the elbow curve behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaArtifact {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<UserId, usize>,
    pub inertia: f64,
    pub inertia_curve: Vec<(usize, f64)>,
}

impl PersonaArtifact {
    pub fn from_model(model: &PersonaModel, inertia_curve: Vec<(usize, f64)>) -> Self {
        PersonaArtifact {
            k: model.k,
            seed: model.seed,
            centroids: model.centroids.clone(),
            assignments: model.assignments.clone(),
            inertia: model.inertia,
            inertia_curve,
        }
    }
}

pub fn save_personas(artifact: &PersonaArtifact, path: &Path) -> Result<(), PersonaError> {
    let bytes = serde_json::to_vec_pretty(artifact).expect("artifact serializes");
    crate::jsonl::atomic_write(path, &bytes).map_err(|e| PersonaError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_personas(path: &Path) -> Result<PersonaArtifact, PersonaError> {
    let bytes = std::fs::read(path).map_err(|e| PersonaError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| PersonaError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes the vocabulary report as CSV rows (cluster, rank, word, count).
pub fn write_vocabulary_csv(
    vocabulary: &BTreeMap<usize, Vec<(String, usize)>>,
    path: &Path,
) -> Result<(), PersonaError> {
    let mut out = String::from("cluster,rank,word,count\n");
    for (cluster, words) in vocabulary {
        for (rank, (word, count)) in words.iter().enumerate() {
            out.push_str(&format!("{cluster},{},{word},{count}\n", rank + 1));
        }
    }
    crate::jsonl::atomic_write(path, out.as_bytes()).map_err(|e| PersonaError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
