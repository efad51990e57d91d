//! Stage 4: pack the train-side memories into the retrieval index
//! (payload rows plus a binary embedding sidecar).

use serde_json::json;

use super::{create_dir, display, finish_stage, read_artifact, Plan, StageCtx};
use crate::config::RunConfig;
use crate::errors::CliError;
use crate::manifest::verify_chain;
use uasim_core::distill::EnrichedInteraction;
use uasim_core::memory::MemoryIndex;

pub fn run(ctx: &StageCtx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dir = ctx.stage_dir("index");
    if ctx.dry_run {
        Plan {
            stage: "index",
            reads: vec![display(&ctx.stage_dir("distill").join("memories.jsonl"))],
            writes: ["memories.jsonl", "embeddings.bin", "manifest.json"]
                .iter()
                .map(|f| display(&dir.join(f)))
                .collect(),
            params: vec![format!("embed model: {}", cfg.distill.embed_model)],
        }
        .print(ctx);
        return Ok(());
    }

    verify_chain(&ctx.out_root, "cluster")?;
    let memories: Vec<EnrichedInteraction> =
        read_artifact(&ctx.stage_dir("distill").join("memories.jsonl"))?;
    let index = MemoryIndex::build(memories)?;
    create_dir(&dir)?;
    index.save(&dir)?;
    log::info!("indexed {} memories at dim {}", index.len(), index.dim());

    let params = json!({ "embed_model": cfg.distill.embed_model });
    let summary = json!({ "memories": index.len(), "dim": index.dim() });
    finish_stage(
        ctx,
        "index",
        params,
        non_default(cfg),
        summary,
        &["memories.jsonl".to_string(), "embeddings.bin".to_string()],
    )
}

fn non_default(cfg: &RunConfig) -> Vec<String> {
    let protocol = |c: &RunConfig| json!({ "embed_model": c.distill.embed_model });
    crate::manifest::non_default_keys(&protocol(cfg), &protocol(&RunConfig::default()))
}
