//! Materializes fine-tuning datasets: one per persona plus single-adapter
//! variants subsampled to the smallest or largest persona size, each in
//! short-term-only or memory-augmented form, together with trainer
//! configuration files for an external fine-tuning harness.
//!
//! Train rows come from the train side of the temporal split; test files
//! hold the test-side rows rendered the same way (their completion is the
//! ground-truth rating). Persona test files shard the common test set by
//! cluster; single adapters evaluate on the full test set.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{InteractionRecord, ItemCard, ItemId, SplitCorpus, UserId};
use crate::distill::UserProfile;
use crate::gateway::{Gateway, GatewayError};
use crate::memory::{build_query, MemoryError, MemoryIndex, QueryKey, QueryMode, RetrievalConfig};
use crate::persona::PersonaModel;
use crate::prompt::{render_within_budget, PromptVariant};
use crate::rng;

/// One supervised pair: the rendered prompt and the ground-truth rating as
/// a single-token completion. Serialized rows carry exactly the five
/// fields an instruction-tuning harness needs; the cluster tag is
/// adapter-level bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub system: String,
    pub user: String,
    pub completion: String,
    pub user_id: UserId,
    pub item_id: ItemId,
    #[serde(skip)]
    pub cluster: Option<usize>,
}

/// Low-rank adapter hyperparameters emitted into trainer configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub rank: u32,
    pub alpha: u32,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: u32,
    pub target_projections: Vec<String>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            rank: 256,
            alpha: 32,
            dropout: 0.1,
            learning_rate: 3e-4,
            epochs: 2,
            target_projections: vec!["key".to_string(), "query".to_string()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Persona,
    SingleMin,
    SingleMax,
}

/// One adapter to be trained externally: where its train/test files live
/// and how to configure the trainer. Persona adapters carry their cluster
/// index; single adapters none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub name: String,
    pub kind: AdapterKind,
    pub cluster: Option<usize>,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub hyperparams: Hyperparams,
}

/// An adapter spec plus the row counts actually written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltAdapter {
    pub spec: AdapterSpec,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Provenance for one dataset build: per-adapter row counts plus digests
/// of everything the rows depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub variant: PromptVariant,
    pub adapters: Vec<BuiltAdapter>,
    pub retrieval_digest: String,
    pub template_digest: String,
    pub split_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    Min,
    Max,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cluster {cluster} has no users; repair clustering upstream")]
    EmptyCluster { cluster: usize },
    #[error("no profile for user {user_id}")]
    MissingProfile { user_id: UserId },
    #[error("no persona assignment for user {user_id}")]
    MissingAssignment { user_id: UserId },
    #[error("no item card for item {item_id}")]
    MissingCard { item_id: ItemId },
    #[error("refusing to emit an empty dataset to {path}")]
    EmptyDataset { path: String },
    #[error("subsample target {target} exceeds the {available} available train rows")]
    TargetExceedsAvailable { target: usize, available: usize },
    #[error("no persona sizes given; build persona datasets first")]
    NoPersonaSizes,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Everything a dataset build reads. The index must hold the train-side
/// memories embedded with the same model the gateway will embed queries
/// with.
pub struct DatasetInputs<'a> {
    pub split: &'a SplitCorpus,
    pub profiles: &'a [UserProfile],
    pub cards: &'a HashMap<ItemId, ItemCard>,
    pub index: &'a MemoryIndex,
}

/// Build-time knobs shared by the persona and single variants.
#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub variant: PromptVariant,
    pub retrieval: RetrievalConfig,
    pub query_mode: QueryMode,
    pub char_budget: usize,
    pub embed_model: String,
    pub out_dir: PathBuf,
    pub hyperparams: Hyperparams,
}

fn profile_map(profiles: &[UserProfile]) -> BTreeMap<&UserId, &UserProfile> {
    profiles.iter().map(|p| (&p.user_id, p)).collect()
}

fn card_of<'a>(
    cards: &'a HashMap<ItemId, ItemCard>,
    item_id: &ItemId,
) -> Result<&'a ItemCard, DatasetError> {
    cards.get(item_id).ok_or_else(|| DatasetError::MissingCard {
        item_id: item_id.clone(),
    })
}

/// Renders one example row. For the memory-augmented variant the target's
/// query is embedded, top-k memories are retrieved (the row's own key can
/// never come back), and the prompt is kept under the character budget. A
/// row whose retrieval comes back empty falls back to the short-term-only
/// layout.
fn build_examples(
    gateway: &Gateway,
    inputs: &DatasetInputs,
    records: &[&InteractionRecord],
    cluster: Option<usize>,
    opts: &DatasetOptions,
) -> Result<Vec<TrainingExample>, DatasetError> {
    let profiles = profile_map(inputs.profiles);
    let mut rows = Vec::with_capacity(records.len());

    // embed all queries in one batch; the gateway dedupes and chunks
    let query_embeddings = if opts.variant == PromptVariant::MsMl {
        let mut texts = Vec::with_capacity(records.len());
        for record in records {
            let profile = profiles
                .get(&record.user_id)
                .ok_or_else(|| DatasetError::MissingProfile {
                    user_id: record.user_id.clone(),
                })?;
            let card = card_of(inputs.cards, &record.item_id)?;
            texts.push(build_query(profile, card, opts.query_mode));
        }
        Some(gateway.embed_batch(&opts.embed_model, &texts)?)
    } else {
        None
    };

    for (row_idx, record) in records.iter().enumerate() {
        let profile = profiles
            .get(&record.user_id)
            .ok_or_else(|| DatasetError::MissingProfile {
                user_id: record.user_id.clone(),
            })?;
        let card = card_of(inputs.cards, &record.item_id)?;

        let mut memory_pairs = Vec::new();
        if let Some(embeddings) = &query_embeddings {
            let key = QueryKey {
                user_id: record.user_id.clone(),
                item_id: record.item_id.clone(),
                cluster,
            };
            let hits = inputs
                .index
                .retrieve_topk(&embeddings[row_idx], &opts.retrieval, &key)?;
            for (memory, _) in hits {
                let memory_card = card_of(inputs.cards, &memory.item_id)?.clone();
                memory_pairs.push((memory_card, memory));
            }
        }

        let borrowed: Vec<(&ItemCard, &crate::distill::EnrichedInteraction)> = memory_pairs
            .iter()
            .map(|(card, memory)| (card, memory))
            .collect();
        let variant = if opts.variant == PromptVariant::MsMl && borrowed.is_empty() {
            log::debug!(
                "no memory retrievable for ({}, {}); emitting a short-term-only row",
                record.user_id,
                record.item_id
            );
            PromptVariant::MsOnly
        } else {
            opts.variant
        };
        let outcome =
            render_within_budget(profile, card, &borrowed, variant, opts.char_budget);
        if outcome.over_budget {
            log::warn!(
                "row ({}, {}) exceeds the prompt budget even after truncation",
                record.user_id,
                record.item_id
            );
        }
        rows.push(TrainingExample {
            system: outcome.prompt.system_text,
            user: outcome.prompt.user_text,
            completion: record.rating.value().to_string(),
            user_id: record.user_id.clone(),
            item_id: record.item_id.clone(),
            cluster,
        });
    }
    Ok(rows)
}

/// Writes examples one JSON object per line (stable field order, newline
/// terminated). Refuses empty datasets.
pub fn emit_jsonl(examples: &[TrainingExample], path: &Path) -> Result<usize, DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::EmptyDataset {
            path: path.display().to_string(),
        });
    }
    crate::jsonl::write_jsonl(path, examples).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(examples.len())
}

#[allow(clippy::too_many_arguments)]
fn build_and_emit(
    gateway: &Gateway,
    inputs: &DatasetInputs,
    name: &str,
    kind: AdapterKind,
    cluster: Option<usize>,
    train_records: &[&InteractionRecord],
    test_records: &[&InteractionRecord],
    opts: &DatasetOptions,
) -> Result<BuiltAdapter, DatasetError> {
    let train = build_examples(gateway, inputs, train_records, cluster, opts)?;
    let test = build_examples(gateway, inputs, test_records, cluster, opts)?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| DatasetError::Io {
        path: opts.out_dir.display().to_string(),
        source: e,
    })?;
    let train_path = opts.out_dir.join(format!("{name}.train.jsonl"));
    let test_path = opts.out_dir.join(format!("{name}.test.jsonl"));
    let train_rows = emit_jsonl(&train, &train_path)?;
    let test_rows = emit_jsonl(&test, &test_path)?;
    Ok(BuiltAdapter {
        spec: AdapterSpec {
            name: name.to_string(),
            kind,
            cluster,
            train_path,
            test_path,
            hyperparams: opts.hyperparams.clone(),
        },
        train_rows,
        test_rows,
    })
}

/// Builds one train/test dataset pair per persona: each cluster's train
/// file holds its users' train-side rows and its test file shards the
/// common test set ("each persona adapter evaluates only its own users").
pub fn build_persona_datasets(
    gateway: &Gateway,
    inputs: &DatasetInputs,
    personas: &PersonaModel,
    opts: &DatasetOptions,
) -> Result<Vec<BuiltAdapter>, DatasetError> {
    for record in inputs.split.train.iter().chain(&inputs.split.test) {
        if !personas.assignments.contains_key(&record.user_id) {
            return Err(DatasetError::MissingAssignment {
                user_id: record.user_id.clone(),
            });
        }
    }
    let mut built = Vec::with_capacity(personas.k);
    for cluster in 0..personas.k {
        let members: Vec<&UserId> = personas
            .assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(user, _)| user)
            .collect();
        if members.is_empty() {
            return Err(DatasetError::EmptyCluster { cluster });
        }
        let in_cluster = |record: &&InteractionRecord| {
            personas.assignments.get(&record.user_id) == Some(&cluster)
        };
        let train: Vec<&InteractionRecord> =
            inputs.split.train.iter().filter(in_cluster).collect();
        let test: Vec<&InteractionRecord> = inputs.split.test.iter().filter(in_cluster).collect();
        built.push(build_and_emit(
            gateway,
            inputs,
            &format!("persona-{cluster}"),
            AdapterKind::Persona,
            Some(cluster),
            &train,
            &test,
            opts,
        )?);
    }
    Ok(built)
}

/// Largest-remainder per-user quotas in pure integer arithmetic: user u
/// gets floor(target*n_u/total), then the users with the largest
/// remainders absorb the shortfall, so quotas sum to target exactly.
fn per_user_quotas(per_user: &[(UserId, usize)], target: usize) -> Vec<(UserId, usize)> {
    let total: usize = per_user.iter().map(|(_, n)| n).sum();
    let mut quotas: Vec<(UserId, usize, usize)> = per_user
        .iter()
        .map(|(user, n)| {
            let base = target * n / total;
            let remainder = target * n % total;
            (user.clone(), base, remainder)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|(_, base, _)| base).sum();
    let mut shortfall = target - assigned;
    // stable sort: remainder descending, ties keep user order (ascending)
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.cmp(&quotas[a].2));
    for idx in order {
        if shortfall == 0 {
            break;
        }
        // a positive remainder guarantees base < n for that user
        if quotas[idx].2 > 0 {
            quotas[idx].1 += 1;
            shortfall -= 1;
        }
    }
    quotas
        .into_iter()
        .map(|(user, quota, _)| (user, quota))
        .collect()
}

/// Builds the single-adapter dataset: every user's train rows are
/// subsampled at a fixed per-user fraction (seeded draws, largest-remainder
/// rounding) so the aggregate matches the smallest or largest persona
/// dataset; the test file is the full shared test set.
pub fn build_single_dataset(
    gateway: &Gateway,
    inputs: &DatasetInputs,
    opts: &DatasetOptions,
    size_mode: SizeMode,
    persona_sizes: &[usize],
    seed: u64,
) -> Result<BuiltAdapter, DatasetError> {
    if persona_sizes.is_empty() {
        return Err(DatasetError::NoPersonaSizes);
    }
    let target = match size_mode {
        SizeMode::Min => *persona_sizes.iter().min().unwrap(),
        SizeMode::Max => *persona_sizes.iter().max().unwrap(),
    };
    let mut per_user: BTreeMap<UserId, Vec<&InteractionRecord>> = BTreeMap::new();
    for record in &inputs.split.train {
        per_user
            .entry(record.user_id.clone())
            .or_default()
            .push(record);
    }
    let available: usize = per_user.values().map(Vec::len).sum();
    if target > available {
        return Err(DatasetError::TargetExceedsAvailable { target, available });
    }

    let counts: Vec<(UserId, usize)> = per_user
        .iter()
        .map(|(user, records)| (user.clone(), records.len()))
        .collect();
    let mut train_records: Vec<&InteractionRecord> = Vec::with_capacity(target);
    for (user, quota) in per_user_quotas(&counts, target) {
        let records = &per_user[&user];
        let mut rng = rng::substream(seed, &format!("subsample:{user}"));
        let mut picked = rng::sample_indices(&mut rng, records.len(), quota);
        picked.sort_unstable();
        train_records.extend(picked.into_iter().map(|i| records[i]));
    }

    let test_records: Vec<&InteractionRecord> = inputs.split.test.iter().collect();
    let name = match size_mode {
        SizeMode::Min => "single-min",
        SizeMode::Max => "single-max",
    };
    let kind = match size_mode {
        SizeMode::Min => AdapterKind::SingleMin,
        SizeMode::Max => AdapterKind::SingleMax,
    };
    build_and_emit(
        gateway, inputs, name, kind, None, &train_records, &test_records, opts,
    )
}

/// Digest over the split rows, freezing which interactions fed the build.
pub fn split_digest(split: &SplitCorpus) -> String {
    let bytes = serde_json::to_vec(split).expect("split serializes");
    hex::encode(Sha256::digest(&bytes))
}

fn retrieval_digest(opts: &DatasetOptions) -> String {
    let payload = serde_json::json!({
        "retrieval": opts.retrieval,
        "query_mode": opts.query_mode,
        "variant": opts.variant,
        "char_budget": opts.char_budget,
        "embed_model": opts.embed_model,
    });
    hex::encode(Sha256::digest(payload.to_string().as_bytes()))
}

/// Assembles the manifest tying built adapters to the exact templates,
/// retrieval settings, and split they came from.
pub fn dataset_manifest(
    built: &[BuiltAdapter],
    split: &SplitCorpus,
    opts: &DatasetOptions,
) -> DatasetManifest {
    DatasetManifest {
        variant: opts.variant,
        adapters: built.to_vec(),
        retrieval_digest: retrieval_digest(opts),
        template_digest: crate::prompt::template_digest(),
        split_digest: split_digest(split),
    }
}

/// Writes a flat, trainer-agnostic key-value config for one adapter.
/// Schema: one `key: value` per line; `target_projections` is a
/// bracketed comma list; `cluster` appears only for persona adapters.
pub fn emit_trainer_config(
    spec: &AdapterSpec,
    base_model: &str,
    path: &Path,
) -> Result<(), DatasetError> {
    let kind = match spec.kind {
        AdapterKind::Persona => "persona",
        AdapterKind::SingleMin => "single_min",
        AdapterKind::SingleMax => "single_max",
    };
    let mut out = String::new();
    out.push_str(&format!("name: {}\n", spec.name));
    out.push_str(&format!("kind: {kind}\n"));
    if let Some(cluster) = spec.cluster {
        out.push_str(&format!("cluster: {cluster}\n"));
    }
    out.push_str(&format!("base_model: {base_model}\n"));
    out.push_str("optimizer: AdamW\n");
    let h = &spec.hyperparams;
    out.push_str(&format!("rank: {}\n", h.rank));
    out.push_str(&format!("alpha: {}\n", h.alpha));
    out.push_str(&format!("dropout: {}\n", h.dropout));
    out.push_str(&format!("learning_rate: {}\n", h.learning_rate));
    out.push_str(&format!("epochs: {}\n", h.epochs));
    out.push_str(&format!(
        "target_projections: [{}]\n",
        h.target_projections.join(", ")
    ));
    out.push_str(&format!("train_path: {}\n", spec.train_path.display()));
    out.push_str(&format!("test_path: {}\n", spec.test_path.display()));
    crate::jsonl::atomic_write(path, out.as_bytes()).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Parses a config written by [`emit_trainer_config`] back into its
/// hyperparameters (round-trip check support).
pub fn parse_trainer_config(path: &Path) -> Result<Hyperparams, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in text.lines() {
        if let Some((key, value)) = line.split_once(": ") {
            fields.insert(key, value);
        }
    }
    let get = |key: &str| {
        fields.get(key).copied().ok_or_else(|| DatasetError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("missing key {key}"),
            ),
        })
    };
    let parse_err = |message: String| DatasetError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, message),
    };
    Ok(Hyperparams {
        rank: get("rank")?.parse().map_err(|e| parse_err(format!("rank: {e}")))?,
        alpha: get("alpha")?.parse().map_err(|e| parse_err(format!("alpha: {e}")))?,
        dropout: get("dropout")?.parse().map_err(|e| parse_err(format!("dropout: {e}")))?,
        learning_rate: get("learning_rate")?
            .parse()
            .map_err(|e| parse_err(format!("learning_rate: {e}")))?,
        epochs: get("epochs")?.parse().map_err(|e| parse_err(format!("epochs: {e}")))?,
        target_projections: get("target_projections")?
            .trim_start_matches('[')
            .trim_end_matches(']')
            .split(", ")
            .map(String::from)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AvgRating, Rating, UserHistory};
    use crate::distill::EnrichedInteraction;
    use crate::gateway::{BackendConfig, MockTransport};
    use std::collections::HashSet;
    use std::sync::Arc;

    fn gateway() -> Gateway {
        let mock = Arc::new(MockTransport::new(8, 99));
        Gateway::new(BackendConfig::default(), mock).unwrap()
    }

    struct Fixture {
        split: SplitCorpus,
        profiles: Vec<UserProfile>,
        cards: HashMap<ItemId, ItemCard>,
        index: MemoryIndex,
        personas: PersonaModel,
    }

    /// 6 users (3 per cluster), 10 interactions each, 6:4 split. Memories
    /// cover every train-side row so retrieval always has candidates.
    fn fixture(gateway: &Gateway) -> Fixture {
        let users = 6;
        let per_user = 10;
        let mut cards = HashMap::new();
        let mut histories = Vec::new();
        let mut profiles = Vec::new();
        for u in 0..users {
            let user = format!("user-{u}");
            let mut records = Vec::new();
            for i in 0..per_user {
                let item = format!("item-{u}-{i}");
                cards.insert(
                    ItemId(item.clone()),
                    ItemCard {
                        item_id: item.clone().into(),
                        title: format!("Film {u}-{i}"),
                        release_year: 1980 + i as i32,
                        genres: vec!["Drama".into()],
                        cast: vec!["Some Actor".into()],
                        historical_avg_rating: AvgRating::from_value(3.2).unwrap(),
                        summary: format!("Story number {i} for viewer {u}."),
                    },
                );
                records.push(InteractionRecord {
                    user_id: user.clone().into(),
                    item_id: item.into(),
                    rating: Rating::new(((u + i) % 5 + 1) as u8).unwrap(),
                    timestamp: i as i64,
                });
            }
            histories.push(UserHistory::new(user.clone().into(), records));
            profiles.push(UserProfile {
                user_id: user.into(),
                activity_trait: format!("Viewer archetype {u}."),
                conformity_trait: "A Balanced Evaluator.".into(),
                diversity_trait: "A Selective Viewer.".into(),
                profile_description: format!("I am synthetic user {u} and I like drama."),
                embedding: None,
                revision: 1,
                regens: 0,
            });
        }
        let split = crate::corpus::temporal_split(&histories, 0.6).unwrap().corpus;

        let mut memories = Vec::new();
        for record in &split.train {
            let card = &cards[&record.item_id];
            memories.push(EnrichedInteraction {
                user_id: record.user_id.clone(),
                item_id: record.item_id.clone(),
                rating: record.rating,
                memory_text: format!(
                    "{}. I rated movie {} ({}) as {} because it suited me.",
                    card.summary,
                    card.title,
                    card.release_year,
                    record.rating.value()
                ),
                embedding: None,
            });
        }
        let texts: Vec<String> = memories.iter().map(|m| m.memory_text.clone()).collect();
        let vectors = gateway.embed_batch("embedder", &texts).unwrap();
        for (memory, vector) in memories.iter_mut().zip(vectors) {
            memory.embedding = Some(vector);
        }
        let index = MemoryIndex::build(memories).unwrap();

        let assignments: BTreeMap<UserId, usize> = (0..users)
            .map(|u| (UserId(format!("user-{u}")), u % 2))
            .collect();
        let personas = PersonaModel {
            k: 2,
            centroids: vec![vec![0.0; 8], vec![1.0; 8]],
            assignments,
            inertia: 0.0,
            seed: 0,
            iterations_run: 1,
        };
        Fixture {
            split,
            profiles,
            cards,
            index,
            personas,
        }
    }

    fn options(dir: &Path, variant: PromptVariant) -> DatasetOptions {
        DatasetOptions {
            variant,
            retrieval: RetrievalConfig::default(),
            query_mode: QueryMode::UserPlusItem,
            char_budget: crate::prompt::DEFAULT_CHAR_BUDGET,
            embed_model: "embedder".into(),
            out_dir: dir.to_path_buf(),
            hyperparams: Hyperparams::default(),
        }
    }

    fn read_rows(path: &Path) -> Vec<TrainingExample> {
        crate::jsonl::read_jsonl(path).unwrap()
    }

    #[test]
    fn persona_test_files_partition_the_test_set() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let dir = tempfile::tempdir().unwrap();
        let opts = options(dir.path(), PromptVariant::MsOnly);
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        let built = build_persona_datasets(&gateway, &inputs, &fx.personas, &opts).unwrap();
        assert_eq!(built.len(), 2);

        let mut seen: HashSet<(UserId, ItemId)> = HashSet::new();
        let mut union = 0;
        for adapter in &built {
            for row in read_rows(&adapter.spec.test_path) {
                assert!(
                    seen.insert((row.user_id.clone(), row.item_id.clone())),
                    "test shards overlap"
                );
                union += 1;
            }
        }
        assert_eq!(union, fx.split.test.len());
        let full: HashSet<(UserId, ItemId)> = fx
            .split
            .test
            .iter()
            .map(|r| (r.user_id.clone(), r.item_id.clone()))
            .collect();
        assert_eq!(seen, full);
    }

    #[test]
    fn train_rows_never_contain_test_interactions() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let dir = tempfile::tempdir().unwrap();
        let opts = options(dir.path(), PromptVariant::MsOnly);
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        let built = build_persona_datasets(&gateway, &inputs, &fx.personas, &opts).unwrap();
        let test_keys: HashSet<(UserId, ItemId)> = fx
            .split
            .test
            .iter()
            .map(|r| (r.user_id.clone(), r.item_id.clone()))
            .collect();
        for adapter in &built {
            for row in read_rows(&adapter.spec.train_path) {
                assert!(!test_keys.contains(&(row.user_id.clone(), row.item_id.clone())));
            }
        }
    }

    #[test]
    fn ms_only_rows_have_no_memory_section() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let dir = tempfile::tempdir().unwrap();
        let opts = options(dir.path(), PromptVariant::MsOnly);
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        let built = build_persona_datasets(&gateway, &inputs, &fx.personas, &opts).unwrap();
        for adapter in &built {
            for row in read_rows(&adapter.spec.train_path) {
                assert!(!row.user.contains("YOUR MEMORIES"));
            }
        }
    }

    #[test]
    fn ms_ml_rows_retrieve_without_self_leakage() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let dir = tempfile::tempdir().unwrap();
        let opts = options(dir.path(), PromptVariant::MsMl);
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        let built = build_persona_datasets(&gateway, &inputs, &fx.personas, &opts).unwrap();
        let mut with_memories = 0;
        for adapter in &built {
            for row in read_rows(&adapter.spec.train_path) {
                if row.user.contains("YOUR MEMORIES") {
                    with_memories += 1;
                }
                // the label's own rationale must never be retrieved
                let card = &fx.cards[&row.item_id];
                let self_marker =
                    format!("I rated movie {} ({}) as", card.title, card.release_year);
                assert!(
                    !row.user.contains(&self_marker),
                    "row ({}, {}) leaked its own memory",
                    row.user_id,
                    row.item_id
                );
            }
        }
        // every user has other train memories, so retrieval always found one
        assert!(with_memories > 0);
    }

    #[test]
    fn completions_match_ground_truth() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let dir = tempfile::tempdir().unwrap();
        let opts = options(dir.path(), PromptVariant::MsOnly);
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        let built = build_persona_datasets(&gateway, &inputs, &fx.personas, &opts).unwrap();
        let truth: HashMap<(UserId, ItemId), u8> = fx
            .split
            .train
            .iter()
            .chain(&fx.split.test)
            .map(|r| ((r.user_id.clone(), r.item_id.clone()), r.rating.value()))
            .collect();
        for adapter in &built {
            for path in [&adapter.spec.train_path, &adapter.spec.test_path] {
                for row in read_rows(path) {
                    assert!(matches!(row.completion.as_str(), "1" | "2" | "3" | "4" | "5"));
                    let expected = truth[&(row.user_id.clone(), row.item_id.clone())];
                    assert_eq!(row.completion, expected.to_string());
                }
            }
        }
    }

    #[test]
    fn row_counts_match_file_lines() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let dir = tempfile::tempdir().unwrap();
        let opts = options(dir.path(), PromptVariant::MsOnly);
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        let built = build_persona_datasets(&gateway, &inputs, &fx.personas, &opts).unwrap();
        let manifest = dataset_manifest(&built, &fx.split, &opts);
        for adapter in &manifest.adapters {
            assert_eq!(
                adapter.train_rows,
                read_rows(&adapter.spec.train_path).len()
            );
            assert_eq!(adapter.test_rows, read_rows(&adapter.spec.test_path).len());
        }
        assert_eq!(manifest.template_digest, crate::prompt::template_digest());
    }

    #[test]
    fn single_dataset_hits_min_and_max_targets_exactly() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let dir = tempfile::tempdir().unwrap();
        let opts = options(dir.path(), PromptVariant::MsOnly);
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        let persona_sizes = [14usize, 22];
        let min = build_single_dataset(&gateway, &inputs, &opts, SizeMode::Min, &persona_sizes, 7)
            .unwrap();
        assert_eq!(min.train_rows, 14);
        assert_eq!(min.spec.kind, AdapterKind::SingleMin);
        assert!(min.spec.cluster.is_none());
        assert_eq!(min.test_rows, fx.split.test.len());

        let max = build_single_dataset(&gateway, &inputs, &opts, SizeMode::Max, &persona_sizes, 7)
            .unwrap();
        assert_eq!(max.train_rows, 22);

        let err = build_single_dataset(&gateway, &inputs, &opts, SizeMode::Max, &[9999], 7)
            .unwrap_err();
        assert!(matches!(err, DatasetError::TargetExceedsAvailable { .. }));
    }

    #[test]
    fn single_dataset_sampling_is_seed_deterministic() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let dir_c = tempfile::tempdir().unwrap();
        let run = |dir: &Path, seed: u64| {
            let opts = options(dir, PromptVariant::MsOnly);
            let built =
                build_single_dataset(&gateway, &inputs, &opts, SizeMode::Min, &[20], seed)
                    .unwrap();
            std::fs::read(&built.spec.train_path).unwrap()
        };
        assert_eq!(run(dir_a.path(), 7), run(dir_b.path(), 7));
        assert_ne!(run(dir_a.path(), 7), run(dir_c.path(), 8));
    }

    #[test]
    fn quotas_follow_largest_remainder() {
        let counts: Vec<(UserId, usize)> = [("u1", 10), ("u2", 10), ("u3", 5)]
            .into_iter()
            .map(|(u, n)| (UserId(u.into()), n))
            .collect();
        let quotas = per_user_quotas(&counts, 13);
        let total: usize = quotas.iter().map(|(_, q)| q).sum();
        assert_eq!(total, 13);
        // 13*10/25 = 5.2 -> 5, 13*5/25 = 2.6 -> 2; the .6 remainder wins the spare row
        assert_eq!(
            quotas,
            vec![
                (UserId("u1".into()), 5),
                (UserId("u2".into()), 5),
                (UserId("u3".into()), 3),
            ]
        );
    }

    #[test]
    fn jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let examples: Vec<TrainingExample> = (0..3)
            .map(|i| TrainingExample {
                system: format!("system {i}"),
                user: format!("user text {i}"),
                completion: "4".into(),
                user_id: format!("u{i}").into(),
                item_id: format!("i{i}").into(),
                cluster: Some(1),
            })
            .collect();
        assert_eq!(emit_jsonl(&examples, &path).unwrap(), 3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.ends_with('\n'));
        let parsed = read_rows(&path);
        // cluster is adapter bookkeeping and is not serialized
        for (a, b) in examples.iter().zip(&parsed) {
            assert_eq!(a.system, b.system);
            assert_eq!(a.user, b.user);
            assert_eq!(a.completion, b.completion);
            assert_eq!(a.user_id, b.user_id);
            assert_eq!(a.item_id, b.item_id);
            assert_eq!(b.cluster, None);
        }
        // field order in the raw bytes is the declared struct order
        let first_line = text.lines().next().unwrap();
        let positions: Vec<usize> = ["\"system\":", "\"user\":", "\"completion\":", "\"user_id\":", "\"item_id\":"]
            .iter()
            .map(|k| first_line.find(k).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(first_line.starts_with("{\"system\":"));

        assert!(matches!(
            emit_jsonl(&[], &path).unwrap_err(),
            DatasetError::EmptyDataset { .. }
        ));
    }

    #[test]
    fn trainer_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = AdapterSpec {
            name: "persona-0".into(),
            kind: AdapterKind::Persona,
            cluster: Some(0),
            train_path: dir.path().join("persona-0.train.jsonl"),
            test_path: dir.path().join("persona-0.test.jsonl"),
            hyperparams: Hyperparams::default(),
        };
        let path = dir.path().join("persona-0.trainer.yaml");
        emit_trainer_config(&spec, "phi-3-mini-4k-instruct", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("rank: 256\n"));
        assert!(text.contains("alpha: 32\n"));
        assert!(text.contains("dropout: 0.1\n"));
        assert!(text.contains("learning_rate: 0.0003\n"));
        assert!(text.contains("epochs: 2\n"));
        assert!(text.contains("target_projections: [key, query]\n"));
        assert!(text.contains("optimizer: AdamW\n"));
        assert!(text.contains("cluster: 0\n"));
        assert!(text.contains("base_model: phi-3-mini-4k-instruct\n"));
        assert_eq!(parse_trainer_config(&path).unwrap(), spec.hyperparams);

        let single = AdapterSpec {
            name: "single-min".into(),
            kind: AdapterKind::SingleMin,
            cluster: None,
            ..spec
        };
        let single_path = dir.path().join("single-min.trainer.yaml");
        emit_trainer_config(&single, "phi-3-mini-4k-instruct", &single_path).unwrap();
        assert!(!std::fs::read_to_string(&single_path)
            .unwrap()
            .contains("cluster:"));
    }

    #[test]
    fn missing_assignment_is_an_error() {
        let gateway = gateway();
        let fx = fixture(&gateway);
        let dir = tempfile::tempdir().unwrap();
        let opts = options(dir.path(), PromptVariant::MsOnly);
        let mut personas = fx.personas.clone();
        personas.assignments.remove(&UserId("user-3".into()));
        let inputs = DatasetInputs {
            split: &fx.split,
            profiles: &fx.profiles,
            cards: &fx.cards,
            index: &fx.index,
        };
        assert!(matches!(
            build_persona_datasets(&gateway, &inputs, &personas, &opts).unwrap_err(),
            DatasetError::MissingAssignment { .. }
        ));
    }
}
