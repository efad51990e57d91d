//! Embedding index over long-term memories with cosine top-k retrieval
//! under a similarity threshold, used both for retrieval-augmented
//! prompting and for retrieval-augmented dataset construction.
//!
//! The index is an exact exhaustive scan. At cohort scale (tens of
//! thousands of memories) this is fast, and exactness lets tests pin the
//! results against a brute-force oracle.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ItemCard, ItemId, UserId};
use crate::distill::{EnrichedInteraction, UserProfile};
use crate::gateway::EmbeddingVector;
use crate::prompt::render_item_card;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding dim mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("memory ({user_id}, {item_id}) has no embedding attached")]
    MissingEmbedding { user_id: UserId, item_id: ItemId },
    #[error("duplicate memory key ({user_id}, {item_id})")]
    DuplicateKey { user_id: UserId, item_id: ItemId },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: String, message: String },
}

/// Cosine similarity in f64, in [-1, 1] up to rounding. Errors on
/// mismatched dims and on zero vectors (undefined).
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MemoryError> {
    if a.dim != b.dim {
        return Err(MemoryError::DimMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(MemoryError::ZeroVector);
    }
    Ok(dot / (norm_a.sqrt() * norm_b.sqrt()))
}

/// Where a query is allowed to look.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalScope {
    /// Only the querying user's own memories. The default: memories are
    /// first-person rationales, so cross-user memories read incoherently.
    SameUser,
    /// Memories of every user assigned to the querying user's persona.
    SamePersona,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    /// Minimum cosine similarity a hit must reach.
    pub delta: f64,
    pub scope: RetrievalScope,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 1,
            delta: 0.0,
            scope: RetrievalScope::SameUser,
        }
    }
}

/// Identifies the querying (user, target item) pair: scopes the scan and
/// names the key excluded from results (no self-retrieval when building
/// training rows for that same pair).
#[derive(Debug, Clone)]
pub struct QueryKey {
    pub user_id: UserId,
    pub item_id: ItemId,
    /// The querying user's persona, when one is assigned.
    pub cluster: Option<usize>,
}

/// Immutable exact-scan index over enriched memories. Entries are sorted
/// by (user_id, item_id) at build time so persistence and tie-breaks are
/// order-independent.
#[derive(Debug, Clone)]
pub struct MemoryIndex {
    entries: Vec<EnrichedInteraction>,
    dim: usize,
    /// user -> persona cluster, required only for same-persona scope.
    personas: BTreeMap<UserId, usize>,
}

impl MemoryIndex {
    /// Builds the index, validating that every entry carries an embedding,
    /// dims agree, no embedding is all-zero, and keys are unique.
    pub fn build(mut memories: Vec<EnrichedInteraction>) -> Result<MemoryIndex, MemoryError> {
        memories.sort_by(|a, b| (&a.user_id, &a.item_id).cmp(&(&b.user_id, &b.item_id)));
        let mut dim: Option<usize> = None;
        for pair in memories.windows(2) {
            if pair[0].user_id == pair[1].user_id && pair[0].item_id == pair[1].item_id {
                return Err(MemoryError::DuplicateKey {
                    user_id: pair[0].user_id.clone(),
                    item_id: pair[0].item_id.clone(),
                });
            }
        }
        for memory in &memories {
            let embedding =
                memory
                    .embedding
                    .as_ref()
                    .ok_or_else(|| MemoryError::MissingEmbedding {
                        user_id: memory.user_id.clone(),
                        item_id: memory.item_id.clone(),
                    })?;
            match dim {
                None => dim = Some(embedding.dim),
                Some(expected) if expected != embedding.dim => {
                    return Err(MemoryError::DimMismatch {
                        expected,
                        got: embedding.dim,
                    })
                }
                _ => {}
            }
            if embedding.values.iter().all(|&v| v == 0.0) {
                return Err(MemoryError::ZeroVector);
            }
        }
        Ok(MemoryIndex {
            entries: memories,
            dim: dim.unwrap_or(0),
            personas: BTreeMap::new(),
        })
    }

    /// Attaches the user -> persona assignment used by same-persona scope.
    pub fn set_personas(&mut self, personas: BTreeMap<UserId, usize>) {
        self.personas = personas;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[EnrichedInteraction] {
        &self.entries
    }

    /// Exhaustive top-k scan: entries in scope (minus the query's own key)
    /// with similarity ≥ delta, sorted by similarity descending, ties by
    /// ascending (user_id, item_id). An empty result is valid.
    pub fn retrieve_topk(
        &self,
        query: &EmbeddingVector,
        cfg: &RetrievalConfig,
        key: &QueryKey,
    ) -> Result<Vec<(EnrichedInteraction, f64)>, MemoryError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.dim != self.dim {
            return Err(MemoryError::DimMismatch {
                expected: self.dim,
                got: query.dim,
            });
        }
        if cfg.scope == RetrievalScope::SamePersona && key.cluster.is_none() {
            log::warn!(
                "same-persona retrieval for user {} without a persona assignment; returning nothing",
                key.user_id
            );
            return Ok(Vec::new());
        }
        let mut hits: Vec<(f64, usize)> = Vec::new();
        for (idx, entry) in self.entries.iter().enumerate() {
            if entry.user_id == key.user_id && entry.item_id == key.item_id {
                continue;
            }
            let in_scope = match cfg.scope {
                RetrievalScope::Global => true,
                RetrievalScope::SameUser => entry.user_id == key.user_id,
                RetrievalScope::SamePersona => {
                    self.personas.get(&entry.user_id).copied() == key.cluster
                }
            };
            if !in_scope {
                continue;
            }
            let similarity = cosine_similarity(query, entry.embedding.as_ref().unwrap())?;
            if similarity >= cfg.delta {
                hits.push((similarity, idx));
            }
        }
        // entries are key-sorted, so equal similarities order by index
        hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        hits.truncate(cfg.k);
        Ok(hits
            .into_iter()
            .map(|(similarity, idx)| (self.entries[idx].clone(), similarity))
            .collect())
    }

    /// Writes the index as memories.jsonl (payload rows, embeddings
    /// stripped) plus embeddings.bin, a binary sidecar of packed
    /// little-endian f32 rows behind a JSON header {dim, count, checksum}.
    pub fn save(&self, dir: &Path) -> Result<(), MemoryError> {
        let io_err = |path: &Path, source: std::io::Error| MemoryError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

        let stripped: Vec<EnrichedInteraction> = self
            .entries
            .iter()
            .map(|m| EnrichedInteraction {
                embedding: None,
                ..m.clone()
            })
            .collect();
        let jsonl_path = dir.join("memories.jsonl");
        crate::jsonl::write_jsonl(&jsonl_path, &stripped).map_err(|e| io_err(&jsonl_path, e))?;

        let mut packed = Vec::with_capacity(self.entries.len() * self.dim * 4);
        for entry in &self.entries {
            for &v in &entry.embedding.as_ref().unwrap().values {
                packed.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = SidecarHeader {
            dim: self.dim,
            count: self.entries.len(),
            checksum: hex::encode(Sha256::digest(&packed)),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut blob = Vec::with_capacity(4 + header_bytes.len() + packed.len());
        blob.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        blob.extend_from_slice(&header_bytes);
        blob.extend_from_slice(&packed);
        let bin_path = dir.join("embeddings.bin");
        crate::jsonl::atomic_write(&bin_path, &blob).map_err(|e| io_err(&bin_path, e))
    }

    /// Loads an index saved by [`MemoryIndex::save`], verifying the
    /// sidecar checksum and row count against the jsonl payloads.
    pub fn load(dir: &Path) -> Result<MemoryIndex, MemoryError> {
        let jsonl_path = dir.join("memories.jsonl");
        let mut payloads: Vec<EnrichedInteraction> = crate::jsonl::read_jsonl(&jsonl_path)
            .map_err(|e| MemoryError::Io {
                path: jsonl_path.display().to_string(),
                source: e,
            })?;

        let bin_path = dir.join("embeddings.bin");
        let corrupt = |message: &str| MemoryError::Corrupt {
            path: bin_path.display().to_string(),
            message: message.to_string(),
        };
        let mut file = std::fs::File::open(&bin_path).map_err(|e| MemoryError::Io {
            path: bin_path.display().to_string(),
            source: e,
        })?;
        let mut blob = Vec::new();
        file.read_to_end(&mut blob).map_err(|e| MemoryError::Io {
            path: bin_path.display().to_string(),
            source: e,
        })?;
        if blob.len() < 4 {
            return Err(corrupt("missing header length"));
        }
        let header_len = u32::from_le_bytes(blob[..4].try_into().unwrap()) as usize;
        let body_at = 4 + header_len;
        if blob.len() < body_at {
            return Err(corrupt("truncated header"));
        }
        let header: SidecarHeader = serde_json::from_slice(&blob[4..body_at])
            .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
        let packed = &blob[body_at..];
        if packed.len() != header.count * header.dim * 4 {
            return Err(corrupt("vector payload length disagrees with header"));
        }
        if hex::encode(Sha256::digest(packed)) != header.checksum {
            return Err(corrupt("checksum mismatch"));
        }
        if payloads.len() != header.count {
            return Err(corrupt("row count disagrees with memories.jsonl"));
        }

        for (row, payload) in payloads.iter_mut().enumerate() {
            let at = row * header.dim * 4;
            let values: Vec<f32> = packed[at..at + header.dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload.embedding = Some(EmbeddingVector::new(values, "loaded"));
        }
        MemoryIndex::build(payloads)
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarHeader {
    dim: usize,
    count: usize,
    checksum: String,
}

/// What text gets embedded as the retrieval query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Just the target item's card.
    ItemOnly,
    /// Profile description plus the target card, blank-line separated.
    UserPlusItem,
}

/// Builds the text fed to the embedding backend for retrieval. An empty
/// profile description degrades user_plus_item to item_only with a warning.
pub fn build_query(profile: &UserProfile, target: &ItemCard, mode: QueryMode) -> String {
    let item_text = render_item_card(target, true);
    match mode {
        QueryMode::ItemOnly => item_text,
        QueryMode::UserPlusItem => {
            if profile.profile_description.is_empty() {
                log::warn!(
                    "user {} has an empty profile description; query degrades to the item text",
                    profile.user_id
                );
                item_text
            } else {
                format!("{}\n\n{}", profile.profile_description, item_text)
            }
        }
    }
}
