//! Distills each user's chronological rating history into a textual profile
//! (short-term memory) and per-interaction rationale memories (long-term
//! memory) via a chat-completion backend.
//!
//! Profiles are built hierarchically: the first batch seeds a profile, every
//! later batch is presented together with the current profile in a
//! reflection prompt that revises it.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{InteractionRecord, ItemCard, ItemId, Rating, UserHistory, UserId};
use crate::gateway::{ChatRequest, EmbeddingVector, Gateway, GatewayError};
use crate::prompt::{fill, render_item_card};

const SEED_TEMPLATE: &str = include_str!("templates/profile_seed.txt");
const REFLECT_TEMPLATE: &str = include_str!("templates/profile_reflect.txt");
const ENRICH_TEMPLATE: &str = include_str!("templates/enrich.txt");

const PROFILE_SYSTEM: &str =
    "You are an expert analyst of movie-watcher behavior. You write concise, structured user profiles.";
const ENRICH_SYSTEM: &str = "You write short first-person memories explaining movie ratings.";

/// A user's distilled short-term memory: three trait sentences plus a
/// free-form preference description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub activity_trait: String,
    pub conformity_trait: String,
    pub diversity_trait: String,
    pub profile_description: String,
    /// Attached after distillation via the embedding backend.
    pub embedding: Option<EmbeddingVector>,
    /// Number of distillation passes applied (1 seed + reflections).
    pub revision: u32,
    /// Generations rejected along the way (word cap or unparseable).
    pub regens: u32,
}

impl UserProfile {
    /// Text embedded and clustered (all four sections).
    pub fn full_text(&self) -> String {
        format!(
            "{}\n{}\n{}\n{}",
            self.activity_trait,
            self.conformity_trait,
            self.diversity_trait,
            self.profile_description
        )
    }

    pub fn word_count(&self) -> usize {
        self.full_text().split_whitespace().count()
    }
}

/// One long-term memory: the item's summary and cast fused with a
/// first-person rationale for the observed rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedInteraction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: Rating,
    pub memory_text: String,
    pub embedding: Option<EmbeddingVector>,
}

/// One chronological slice of a user's history, at most `batch_cap` long.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub user_id: UserId,
    pub index: usize,
    pub interactions: Vec<(InteractionRecord, ItemCard)>,
}

/// Backend and policy knobs for the distillation stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillOptions {
    pub model_tag: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_k: u32,
    /// Generations longer than this many words are rejected.
    pub word_cap: usize,
    /// Rejected generations are retried at most this many times.
    pub max_regens: u32,
    pub batch_cap: usize,
    /// Worker threads for per-interaction enrichment.
    pub workers: usize,
}

impl Default for DistillOptions {
    fn default() -> Self {
        DistillOptions {
            model_tag: String::new(),
            max_tokens: 2048,
            temperature: 0.3,
            top_k: 50,
            word_cap: 2000,
            max_regens: 3,
            batch_cap: 10,
            workers: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("no item card for item {item_id}")]
    MissingCard { item_id: ItemId },
    #[error("batch_cap must be >= 1")]
    InvalidBatchCap,
    #[error("user {user_id} has no interactions to distill")]
    EmptyHistory { user_id: UserId },
    #[error("backend failure for user {user_id}: {message}")]
    Backend { user_id: UserId, message: String },
    #[error("profile for user {user_id} unparseable after {attempts} attempts")]
    Unparseable { user_id: UserId, attempts: u32 },
    #[error("embedding missing on {what}; attach embeddings before persisting")]
    MissingEmbedding { what: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Slices a user's chronological history into batches of at most
/// `batch_cap` interactions, resolving each item to its card.
pub fn batch_history(
    history: &UserHistory,
    cards: &HashMap<ItemId, ItemCard>,
    batch_cap: usize,
) -> Result<Vec<DistillBatch>, DistillError> {
    if batch_cap < 1 {
        return Err(DistillError::InvalidBatchCap);
    }
    let mut paired = Vec::with_capacity(history.len());
    for record in &history.interactions {
        let card = cards
            .get(&record.item_id)
            .ok_or_else(|| DistillError::MissingCard {
                item_id: record.item_id.clone(),
            })?;
        paired.push((record.clone(), card.clone()));
    }
    Ok(paired
        .chunks(batch_cap)
        .enumerate()
        .map(|(index, chunk)| DistillBatch {
            user_id: history.user_id.clone(),
            index,
            interactions: chunk.to_vec(),
        })
        .collect())
}

fn render_interaction_lines(interactions: &[(InteractionRecord, ItemCard)]) -> String {
    interactions
        .iter()
        .map(|(record, card)| {
            format!(
                "- {} ({}), genres: {}, historical average rating {}: the user rated it {}/5",
                card.title,
                card.release_year,
                card.genres.join(", "),
                card.historical_avg_rating.as_str(),
                record.rating.value()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone)]
struct ProfileFields {
    activity: String,
    conformity: String,
    diversity: String,
    description: String,
}

impl ProfileFields {
    fn word_count(&self) -> usize {
        [
            &self.activity,
            &self.conformity,
            &self.diversity,
            &self.description,
        ]
        .iter()
        .map(|f| f.split_whitespace().count())
        .sum()
    }
}

/// Parses the tagged four-section profile structure. Sections may span
/// multiple lines; leading chatter before the first tag is ignored.
fn parse_profile_text(text: &str) -> Option<ProfileFields> {
    const TAGS: [&str; 4] = ["ACTIVITY:", "CONFORMITY:", "DIVERSITY:", "DESCRIPTION:"];
    let mut sections: HashMap<&str, String> = HashMap::new();
    let mut current: Option<&str> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(tag) = TAGS.iter().find(|t| trimmed.starts_with(**t)) {
            let value = trimmed[tag.len()..].trim().to_string();
            sections.insert(tag, value);
            current = Some(tag);
        } else if let Some(tag) = current {
            if !trimmed.is_empty() {
                let section = sections.get_mut(tag).unwrap();
                if !section.is_empty() {
                    section.push(' ');
                }
                section.push_str(trimmed);
            }
        }
    }
    let get = |tag: &str| -> Option<String> {
        let value = sections.get(tag)?.clone();
        if value.is_empty() {
            None
        } else {
            Some(value)
        }
    };
    Some(ProfileFields {
        activity: get("ACTIVITY:")?,
        conformity: get("CONFORMITY:")?,
        diversity: get("DIVERSITY:")?,
        description: get("DESCRIPTION:")?,
    })
}

/// Cuts the description back to the last sentence boundary that brings the
/// total under the cap. Last-resort fallback after regeneration attempts.
fn truncate_to_cap(fields: &mut ProfileFields, word_cap: usize) {
    while fields.word_count() > word_cap {
        let description = fields.description.trim_end();
        match description[..description.len().saturating_sub(1)].rfind(". ") {
            Some(pos) => fields.description = description[..pos + 1].to_string(),
            None => {
                let fixed = fields.word_count()
                    - fields.description.split_whitespace().count();
                let keep = word_cap.saturating_sub(fixed);
                fields.description = fields
                    .description
                    .split_whitespace()
                    .take(keep)
                    .collect::<Vec<_>>()
                    .join(" ");
                break;
            }
        }
    }
}

/// Distills one user's profile from chronological batches: the first batch
/// seeds it, each later batch revises it through a reflection prompt.
/// Generations over the word cap or missing sections are regenerated up to
/// `max_regens` times (then over-long output is truncated at a sentence
/// boundary; still-unparseable output is an error).
pub fn distill_profile(
    gateway: &Gateway,
    user_id: &UserId,
    batches: &[DistillBatch],
    opts: &DistillOptions,
) -> Result<UserProfile, DistillError> {
    if batches.is_empty() {
        return Err(DistillError::EmptyHistory {
            user_id: user_id.clone(),
        });
    }

    let mut fields: Option<ProfileFields> = None;
    let mut regens: u32 = 0;

    for batch in batches {
        let interactions = render_interaction_lines(&batch.interactions);
        let user_prompt = match &fields {
            None => fill(SEED_TEMPLATE, &[("interactions", &interactions)]),
            Some(f) => fill(
                REFLECT_TEMPLATE,
                &[
                    ("activity", &f.activity),
                    ("conformity", &f.conformity),
                    ("diversity", &f.diversity),
                    ("description", &f.description),
                    ("interactions", &interactions),
                ],
            ),
        };

        let mut attempt: u32 = 0;
        let accepted = loop {
            let req = ChatRequest {
                system_prompt: PROFILE_SYSTEM.to_string(),
                user_prompt: user_prompt.clone(),
                max_tokens: opts.max_tokens,
                temperature: opts.temperature,
                top_k: opts.top_k,
                model_tag: opts.model_tag.clone(),
                cache_salt: u64::from(attempt),
            };
            let resp = gateway.complete(&req)?;
            if resp.is_error() {
                return Err(DistillError::Backend {
                    user_id: user_id.clone(),
                    message: resp.text,
                });
            }
            match parse_profile_text(&resp.text) {
                Some(parsed) if parsed.word_count() <= opts.word_cap => break parsed,
                outcome => {
                    if attempt >= opts.max_regens {
                        match outcome {
                            Some(mut over_cap) => {
                                truncate_to_cap(&mut over_cap, opts.word_cap);
                                break over_cap;
                            }
                            None => {
                                return Err(DistillError::Unparseable {
                                    user_id: user_id.clone(),
                                    attempts: attempt + 1,
                                })
                            }
                        }
                    }
                    regens += 1;
                    attempt += 1;
                }
            }
        };
        fields = Some(accepted);
    }

    let fields = fields.expect("at least one batch");
    Ok(UserProfile {
        user_id: user_id.clone(),
        activity_trait: fields.activity,
        conformity_trait: fields.conformity,
        diversity_trait: fields.diversity,
        profile_description: fields.description,
        embedding: None,
        revision: batches.len() as u32,
        regens,
    })
}

/// Joins an item's summary, cast, and the generated rationale into the
/// memory text stored in the long-term index.
pub fn compose_memory_text(card: &ItemCard, rationale: &str) -> String {
    let cast = card.cast.join(", ");
    match (!card.summary.is_empty(), !cast.is_empty()) {
        (true, true) => format!(
            "{}. The cast of the movie is as follows: {}. {}",
            card.summary, cast, rationale
        ),
        (true, false) => format!("{}. {}", card.summary, rationale),
        (false, true) => format!("The cast of the movie is as follows: {}. {}", cast, rationale),
        (false, false) => rationale.to_string(),
    }
}

/// Result of enriching one user's train-side interactions.
#[derive(Debug, Clone)]
pub struct EnrichOutcome {
    pub memories: Vec<EnrichedInteraction>,
    /// Items whose rationale never matched the recorded rating.
    pub excluded: Vec<ItemId>,
    pub regens: u32,
}

/// Generates one rationale memory per train-side interaction, conditioned
/// on the distilled profile. A rationale must begin with the exact phrase
/// `I rated movie {title} ({year}) as {rating} because`; disagreeing
/// generations are retried up to `max_regens`, then the interaction is
/// excluded with a warning.
pub fn enrich_interactions(
    gateway: &Gateway,
    pairs: &[(InteractionRecord, ItemCard)],
    profile: &UserProfile,
    opts: &DistillOptions,
) -> Result<EnrichOutcome, DistillError> {
    enum ItemOutcome {
        Kept(EnrichedInteraction, u32),
        Excluded(ItemId, u32),
        Failed(DistillError),
    }

    let results = crate::parallel::bounded_map(pairs, opts.workers, |_, (record, card)| {
        let expected_prefix = format!(
            "I rated movie {} ({}) as {} because",
            card.title,
            card.release_year,
            record.rating.value()
        );
        let movie = render_item_card(card, !card.summary.is_empty());
        let rating = record.rating.value().to_string();
        let year = card.release_year.to_string();
        let user_prompt = fill(
            ENRICH_TEMPLATE,
            &[
                ("description", &profile.profile_description),
                ("movie", &movie),
                ("rating", &rating),
                ("title", &card.title),
                ("year", &year),
            ],
        );

        let mut attempt: u32 = 0;
        loop {
            let req = ChatRequest {
                system_prompt: ENRICH_SYSTEM.to_string(),
                user_prompt: user_prompt.clone(),
                max_tokens: opts.max_tokens,
                temperature: opts.temperature,
                top_k: opts.top_k,
                model_tag: opts.model_tag.clone(),
                cache_salt: u64::from(attempt),
            };
            let resp = match gateway.complete(&req) {
                Ok(resp) => resp,
                Err(e) => return ItemOutcome::Failed(e.into()),
            };
            if resp.is_error() {
                return ItemOutcome::Failed(DistillError::Backend {
                    user_id: record.user_id.clone(),
                    message: resp.text,
                });
            }
            let rationale = resp.text.trim();
            if rationale.starts_with(&expected_prefix) {
                return ItemOutcome::Kept(
                    EnrichedInteraction {
                        user_id: record.user_id.clone(),
                        item_id: record.item_id.clone(),
                        rating: record.rating,
                        memory_text: compose_memory_text(card, rationale),
                        embedding: None,
                    },
                    attempt,
                );
            }
            if attempt >= opts.max_regens {
                log::warn!(
                    "rationale for user {} item {} never matched rating {}; excluding",
                    record.user_id,
                    record.item_id,
                    record.rating.value()
                );
                return ItemOutcome::Excluded(record.item_id.clone(), attempt + 1);
            }
            attempt += 1;
        }
    });

    let mut outcome = EnrichOutcome {
        memories: Vec::new(),
        excluded: Vec::new(),
        regens: 0,
    };
    for result in results {
        match result {
            ItemOutcome::Kept(memory, regens) => {
                outcome.regens += regens;
                outcome.memories.push(memory);
            }
            ItemOutcome::Excluded(item_id, regens) => {
                outcome.regens += regens;
                outcome.excluded.push(item_id);
            }
            ItemOutcome::Failed(err) => return Err(err),
        }
    }
    Ok(outcome)
}

/// Embeds each profile's full text and attaches the vectors.
pub fn attach_profile_embeddings(
    gateway: &Gateway,
    model_tag: &str,
    profiles: &mut [UserProfile],
) -> Result<(), DistillError> {
    if profiles.is_empty() {
        return Ok(());
    }
    let texts: Vec<String> = profiles.iter().map(|p| p.full_text()).collect();
    let vectors = gateway.embed_batch(model_tag, &texts)?;
    for (profile, vector) in profiles.iter_mut().zip(vectors) {
        profile.embedding = Some(vector);
    }
    Ok(())
}

/// Embeds each memory's text and attaches the vectors.
pub fn attach_memory_embeddings(
    gateway: &Gateway,
    model_tag: &str,
    memories: &mut [EnrichedInteraction],
) -> Result<(), DistillError> {
    if memories.is_empty() {
        return Ok(());
    }
    let texts: Vec<String> = memories.iter().map(|m| m.memory_text.clone()).collect();
    let vectors = gateway.embed_batch(model_tag, &texts)?;
    for (memory, vector) in memories.iter_mut().zip(vectors) {
        memory.embedding = Some(vector);
    }
    Ok(())
}

/// Counts and provenance for one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillManifest {
    pub users: usize,
    pub memories: usize,
    pub dim: usize,
    pub template_digest: String,
}

/// Digest over every distillation prompt template and system prompt,
/// recorded in manifests so runs are traceable to exact prompt text.
pub fn template_digest() -> String {
    let mut hasher = Sha256::new();
    for text in [
        SEED_TEMPLATE,
        REFLECT_TEMPLATE,
        ENRICH_TEMPLATE,
        PROFILE_SYSTEM,
        ENRICH_SYSTEM,
    ] {
        hasher.update(text.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// Writes profiles.jsonl, memories.jsonl, and manifest.json under
/// `out_dir`, sorted by user id (memories keep chronological order within a
/// user). Writes are atomic; requires embeddings attached.
pub fn persist_memories(
    profiles: &[UserProfile],
    memories: &[EnrichedInteraction],
    out_dir: &Path,
) -> Result<DistillManifest, DistillError> {
    let mut dim: Option<usize> = None;
    for profile in profiles {
        let embedding = profile
            .embedding
            .as_ref()
            .ok_or_else(|| DistillError::MissingEmbedding {
                what: format!("profile of user {}", profile.user_id),
            })?;
        check_dim(&mut dim, embedding.dim, "profile")?;
    }
    for memory in memories {
        let embedding = memory
            .embedding
            .as_ref()
            .ok_or_else(|| DistillError::MissingEmbedding {
                what: format!("memory ({}, {})", memory.user_id, memory.item_id),
            })?;
        check_dim(&mut dim, embedding.dim, "memory")?;
    }

    let mut profiles: Vec<&UserProfile> = profiles.iter().collect();
    profiles.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let mut memories: Vec<&EnrichedInteraction> = memories.iter().collect();
    memories.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    let io_err = |path: &Path, source: std::io::Error| DistillError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let profiles_path = out_dir.join("profiles.jsonl");
    crate::jsonl::write_jsonl(&profiles_path, &profiles).map_err(|e| io_err(&profiles_path, e))?;
    let memories_path = out_dir.join("memories.jsonl");
    crate::jsonl::write_jsonl(&memories_path, &memories).map_err(|e| io_err(&memories_path, e))?;

    let manifest = DistillManifest {
        users: profiles.len(),
        memories: memories.len(),
        dim: dim.unwrap_or(0),
        template_digest: template_digest(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    crate::jsonl::atomic_write(&manifest_path, &bytes).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

fn check_dim(dim: &mut Option<usize>, got: usize, what: &str) -> Result<(), DistillError> {
    match dim {
        None => {
            *dim = Some(got);
            Ok(())
        }
        Some(expected) if *expected == got => Ok(()),
        Some(expected) => {
            log::error!("{what} embedding dim mismatch");
            Err(GatewayError::DimMismatch {
                expected: *expected,
                got,
            }
            .into())
        }
    }
}
