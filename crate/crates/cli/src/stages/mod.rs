//! Stage implementations behind the `uasim` subcommands.
//!
//! Every stage follows the same shape: in dry-run mode it prints its plan
//! and stops; otherwise it verifies the manifest chain back to `ingest`,
//! does its work under `out_root/<stage>/`, and writes a manifest linking
//! to its predecessor. Stages are idempotent: re-running one on unchanged
//! inputs rewrites identical artifacts and an identical manifest.

mod cluster;
mod datasets;
mod distill;
mod evaluate;
mod index;
mod ingest;
mod report;
mod simulate;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::errors::CliError;
use crate::manifest::{self, StageManifest};
use uasim_core::corpus::{ItemCard, ItemId, SplitCorpus};
use uasim_core::datasets::{AdapterKind, DatasetManifest};
use uasim_core::distill::UserProfile;
use uasim_core::persona::{load_personas, PersonaArtifact};
use uasim_core::prompt::PromptVariant;
use uasim_core::simeval::MetricsReport;

pub struct StageCtx {
    pub config: RunConfig,
    pub out_root: PathBuf,
    pub dry_run: bool,
}

impl StageCtx {
    pub fn new(config: RunConfig, dry_run: bool) -> Self {
        let out_root = config.corpus.out_root.clone();
        StageCtx {
            config,
            out_root,
            dry_run,
        }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        manifest::stage_dir(&self.out_root, stage)
    }
}

pub fn run_stage(stage: &str, ctx: &StageCtx) -> Result<(), CliError> {
    match stage {
        "ingest" => ingest::run(ctx),
        "distill" => distill::run(ctx),
        "cluster" => cluster::run(ctx),
        "index" => index::run(ctx),
        "datasets" => datasets::run(ctx),
        "simulate" => simulate::run(ctx),
        "evaluate" => evaluate::run(ctx),
        "report" => report::run(ctx),
        other => Err(CliError::Internal(format!("unknown stage {other}"))),
    }
}

/// What a stage is about to do; printed verbatim under `--dry-run`.
pub struct Plan {
    pub stage: &'static str,
    pub reads: Vec<String>,
    pub writes: Vec<String>,
    pub params: Vec<String>,
}

impl Plan {
    pub fn print(&self, ctx: &StageCtx) {
        println!("plan: {}", self.stage);
        match manifest::predecessor_of(self.stage) {
            None => println!("  predecessor: none"),
            Some(pred) => {
                let status = if manifest::manifest_path(&ctx.out_root, pred).exists() {
                    "present"
                } else {
                    "missing; run it first"
                };
                println!("  predecessor: {pred} ({status})");
            }
        }
        for read in &self.reads {
            println!("  read:  {read}");
        }
        for write in &self.writes {
            println!("  write: {write}");
        }
        for param in &self.params {
            println!("  param: {param}");
        }
        println!("  (dry run: nothing was executed)");
    }
}

pub(crate) fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Hashes the stage's artifacts, links it to its predecessor, and writes
/// the manifest. `output_files` are paths relative to the stage directory.
pub(crate) fn finish_stage(
    ctx: &StageCtx,
    stage: &str,
    params: serde_json::Value,
    non_default_params: Vec<String>,
    summary: serde_json::Value,
    output_files: &[String],
) -> Result<(), CliError> {
    let dir = ctx.stage_dir(stage);
    let mut outputs = BTreeMap::new();
    for rel in output_files {
        outputs.insert(rel.clone(), manifest::hash_file(&dir.join(rel))?);
    }
    let (predecessor, chain_root) = if stage == "ingest" {
        (None, None)
    } else {
        let (link, root) = manifest::chain_link(&ctx.out_root, stage)?;
        (Some(link), Some(root))
    };
    let stage_manifest = StageManifest {
        stage: stage.to_string(),
        predecessor,
        chain_root,
        params,
        non_default_params,
        summary,
        outputs,
    };
    let digest = manifest::write_stage_manifest(&ctx.out_root, &stage_manifest)?;
    log::info!("stage {stage} complete (manifest {})", &digest[..12]);
    Ok(())
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", path.display())))
}

/// Reads a JSONL artifact a verified upstream stage wrote. The chain check
/// already re-hashed the file, so failure here is a bug, not staleness.
pub(crate) fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    uasim_core::jsonl::read_jsonl(path)
        .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    uasim_core::jsonl::atomic_write(path, text.as_bytes())
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

/// Reconstructs the split corpus from the ingest artifacts, taking the
/// ratio from the ingest manifest rather than trusting the config in hand.
pub(crate) fn load_split(ctx: &StageCtx) -> Result<SplitCorpus, CliError> {
    let dir = ctx.stage_dir("ingest");
    let train = read_artifact(&dir.join("train.jsonl"))?;
    let test = read_artifact(&dir.join("test.jsonl"))?;
    let ingest = manifest::load_manifest(&ctx.out_root, "ingest")?;
    let ratio = ingest
        .params
        .pointer("/split/train_fraction")
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| {
            CliError::Upstream("ingest manifest lacks split.train_fraction".to_string())
        })?;
    Ok(SplitCorpus { train, test, ratio })
}

pub(crate) fn load_cards(ctx: &StageCtx) -> Result<HashMap<ItemId, ItemCard>, CliError> {
    let cards: Vec<ItemCard> = read_artifact(&ctx.stage_dir("ingest").join("cards.jsonl"))?;
    Ok(cards.into_iter().map(|c| (c.item_id.clone(), c)).collect())
}

pub(crate) fn load_profiles(ctx: &StageCtx) -> Result<Vec<UserProfile>, CliError> {
    read_artifact(&ctx.stage_dir("distill").join("profiles.jsonl"))
}

pub(crate) fn load_persona_artifact(ctx: &StageCtx) -> Result<PersonaArtifact, CliError> {
    let path = ctx.stage_dir("cluster").join("personas.json");
    load_personas(&path).map_err(CliError::from)
}

/// The dataset build record embedded in the datasets stage manifest.
pub(crate) fn load_dataset_manifest(manifest: &StageManifest) -> Result<DatasetManifest, CliError> {
    serde_json::from_value(manifest.summary.clone()).map_err(|e| {
        CliError::Upstream(format!("datasets manifest summary is unreadable: {e}"))
    })
}

/// Per-adapter bookkeeping in the simulate stage manifest summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub adapters: BTreeMap<String, SimAdapterSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimAdapterSummary {
    pub rows: usize,
    /// Transcript path relative to the simulate stage directory.
    pub transcript: String,
}

/// Human-readable label for the memory regime a dataset variant encodes.
pub fn memories_label(variant: PromptVariant) -> &'static str {
    match variant {
        PromptVariant::MsOnly => "profile only",
        PromptVariant::MsMl => "profile + retrieved memories",
    }
}

/// Final cross-adapter report written by the report stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalReport {
    /// Digest of the ingest manifest every artifact descends from.
    pub chain_root: String,
    pub variant: PromptVariant,
    pub adapters: Vec<AdapterOutcome>,
    /// All persona transcripts pooled and rescored (the persona shards
    /// partition the test set, so this covers every held-out row).
    pub combined: Option<CombinedOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterOutcome {
    pub name: String,
    pub kind: AdapterKind,
    pub cluster: Option<usize>,
    pub train_rows: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinedOutcome {
    pub name: String,
    pub metrics: MetricsReport,
}
