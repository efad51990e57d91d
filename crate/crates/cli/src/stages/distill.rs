//! Stage 2: distill each cohort user's train-side history into a
//! behavioral profile and per-interaction first-person memories, then
//! embed both. Test-side interactions are never shown to the backend.

use std::collections::BTreeMap;

use serde_json::json;

use super::{create_dir, display, finish_stage, load_cards, load_split, Plan, StageCtx};
use crate::config::RunConfig;
use crate::errors::CliError;
use crate::manifest::verify_chain;
use uasim_core::corpus::{InteractionRecord, UserHistory, UserId};
use uasim_core::distill::{
    attach_memory_embeddings, attach_profile_embeddings, batch_history, distill_profile,
    enrich_interactions, persist_memories, DistillOptions,
};

pub fn run(ctx: &StageCtx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dir = ctx.stage_dir("distill");
    if ctx.dry_run {
        Plan {
            stage: "distill",
            reads: vec![
                display(&ctx.stage_dir("ingest").join("train.jsonl")),
                display(&ctx.stage_dir("ingest").join("cards.jsonl")),
            ],
            writes: ["profiles.jsonl", "memories.jsonl", "manifest.json"]
                .iter()
                .map(|f| display(&dir.join(f)))
                .collect(),
            params: vec![
                format!(
                    "batches of {} interactions, word cap {}, max regens {}",
                    cfg.distill.batch_cap, cfg.distill.word_cap, cfg.distill.max_regens
                ),
                format!("chat backend: {}", cfg.backends.chat.describe()),
                format!("embed backend: {}", cfg.backends.embed.describe()),
            ],
        }
        .print(ctx);
        return Ok(());
    }

    verify_chain(&ctx.out_root, "ingest")?;
    let split = load_split(ctx)?;
    let cards = load_cards(ctx)?;
    let chat = cfg.backends.chat.build_gateway()?;
    let embed = cfg.backends.embed.build_gateway()?;
    let opts = DistillOptions {
        model_tag: cfg.distill.model_tag.clone(),
        max_tokens: cfg.distill.max_tokens,
        temperature: cfg.distill.temperature,
        top_k: cfg.distill.top_k,
        word_cap: cfg.distill.word_cap,
        max_regens: cfg.distill.max_regens,
        batch_cap: cfg.distill.batch_cap,
        workers: cfg.distill.workers,
    };

    let mut by_user: BTreeMap<UserId, Vec<InteractionRecord>> = BTreeMap::new();
    for record in &split.train {
        by_user
            .entry(record.user_id.clone())
            .or_default()
            .push(record.clone());
    }

    // Users run sequentially (rationales already fan out across workers
    // within a user), which keeps backend call order reproducible.
    let mut profiles = Vec::with_capacity(by_user.len());
    let mut memories = Vec::new();
    let mut excluded_items = 0usize;
    let mut rationale_regens = 0u32;
    let total = by_user.len();
    for (done, (user_id, records)) in by_user.into_iter().enumerate() {
        let history = UserHistory::new(user_id.clone(), records);
        let batches = batch_history(&history, &cards, opts.batch_cap)?;
        let profile = distill_profile(&chat, &user_id, &batches, &opts)?;
        let pairs: Vec<_> = batches.into_iter().flat_map(|b| b.interactions).collect();
        let outcome = enrich_interactions(&chat, &pairs, &profile, &opts)?;
        excluded_items += outcome.excluded.len();
        rationale_regens += outcome.regens;
        log::info!(
            "distilled user {user_id} ({}/{total}): {} memories, {} excluded",
            done + 1,
            outcome.memories.len(),
            outcome.excluded.len()
        );
        profiles.push(profile);
        memories.extend(outcome.memories);
    }

    attach_profile_embeddings(&embed, &cfg.distill.embed_model, &mut profiles)?;
    attach_memory_embeddings(&embed, &cfg.distill.embed_model, &mut memories)?;
    create_dir(&dir)?;
    let persisted = persist_memories(&profiles, &memories, &dir)?;

    let profile_regens: u32 = profiles.iter().map(|p| p.regens).sum();
    let params = serde_json::to_value(&cfg.distill).expect("distill config serializes");
    let summary = json!({
        "users": persisted.users,
        "memories": persisted.memories,
        "dim": persisted.dim,
        "template_digest": persisted.template_digest,
        "excluded_items": excluded_items,
        "profile_regens": profile_regens,
        "rationale_regens": rationale_regens,
    });
    finish_stage(
        ctx,
        "distill",
        params,
        non_default(cfg),
        summary,
        &["profiles.jsonl".to_string(), "memories.jsonl".to_string()],
    )
}

fn non_default(cfg: &RunConfig) -> Vec<String> {
    let protocol = |c: &RunConfig| json!({ "distill": c.distill });
    crate::manifest::non_default_keys(&protocol(cfg), &protocol(&RunConfig::default()))
}
