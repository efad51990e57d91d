//! Stage 1: parse the interaction log, select the cohort, split each
//! user's history in time, and assemble the item cards the prompts need.

use std::collections::BTreeSet;

use serde_json::json;

use super::{create_dir, display, finish_stage, Plan, StageCtx};
use crate::config::RunConfig;
use crate::errors::CliError;
use uasim_core::corpus::{
    assemble_item_cards, item_average_ratings, parse_interactions_with_budget, read_item_supplement,
    read_movies, select_cohort, temporal_split,
};
use uasim_core::jsonl::write_jsonl;

pub fn run(ctx: &StageCtx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dir = ctx.stage_dir("ingest");
    if ctx.dry_run {
        let mut reads = vec![display(&cfg.corpus.ratings), display(&cfg.corpus.movies)];
        if let Some(supplement) = &cfg.corpus.supplement {
            reads.push(display(supplement));
        }
        Plan {
            stage: "ingest",
            reads,
            writes: ["train.jsonl", "test.jsonl", "cards.jsonl", "manifest.json"]
                .iter()
                .map(|f| display(&dir.join(f)))
                .collect(),
            params: vec![
                format!(
                    "cohort: {} users with {}..={} interactions, seed {}",
                    cfg.cohort.n_users,
                    cfg.cohort.min_interactions,
                    cfg.cohort.max_interactions,
                    cfg.cohort.seed
                ),
                format!("split: train fraction {}", cfg.split.train_fraction),
                format!("format: {:?}", ctx.config.corpus_format()),
            ],
        }
        .print(ctx);
        return Ok(());
    }

    let format = cfg.corpus_format();
    let outcome =
        parse_interactions_with_budget(&cfg.corpus.ratings, format, cfg.corpus.error_budget)?;
    for issue in &outcome.issues {
        log::warn!("{}: {issue}", cfg.corpus.ratings.display());
    }
    log::info!(
        "parsed {} interactions ({} malformed lines tolerated)",
        outcome.records.len(),
        outcome.issues.len()
    );

    let cohort = select_cohort(
        &outcome.records,
        cfg.cohort.min_interactions,
        cfg.cohort.max_interactions,
        cfg.cohort.n_users,
        cfg.cohort.seed,
    )?;
    if cohort.shortfall > 0 {
        log::warn!(
            "cohort shortfall: only {} of {} requested users are eligible",
            cohort.histories.len(),
            cfg.cohort.n_users
        );
    }

    let split = temporal_split(&cohort.histories, cfg.split.train_fraction)?;
    for user in &split.excluded {
        log::warn!("user {user} has too few interactions to split; excluded");
    }

    // Cards come from the full log's observed averages, not the cohort's,
    // so an item's historical rating does not depend on who was sampled.
    let (movies, movie_issues) = read_movies(&cfg.corpus.movies)?;
    for issue in &movie_issues {
        log::warn!("{}: {issue}", cfg.corpus.movies.display());
    }
    let supplement = match &cfg.corpus.supplement {
        Some(path) => read_item_supplement(path)?,
        None => Default::default(),
    };
    let observed = item_average_ratings(&outcome.records);
    let (all_cards, skipped) = assemble_item_cards(&movies, &supplement, &observed)?;
    let by_id: std::collections::HashMap<_, _> =
        all_cards.iter().map(|c| (c.item_id.clone(), c)).collect();

    let referenced: BTreeSet<_> = split
        .corpus
        .train
        .iter()
        .chain(&split.corpus.test)
        .map(|r| r.item_id.clone())
        .collect();
    let mut cards = Vec::with_capacity(referenced.len());
    for item_id in &referenced {
        match by_id.get(item_id) {
            Some(card) => cards.push((*card).clone()),
            None => {
                return Err(CliError::Config(format!(
                    "no movie metadata for item {item_id}, which the cohort rated; \
                     add it to {}",
                    cfg.corpus.movies.display()
                )))
            }
        }
    }

    create_dir(&dir)?;
    let io = |name: &str, e: std::io::Error| {
        CliError::Internal(format!("cannot write {}: {e}", dir.join(name).display()))
    };
    write_jsonl(&dir.join("train.jsonl"), &split.corpus.train).map_err(|e| io("train.jsonl", e))?;
    write_jsonl(&dir.join("test.jsonl"), &split.corpus.test).map_err(|e| io("test.jsonl", e))?;
    write_jsonl(&dir.join("cards.jsonl"), &cards).map_err(|e| io("cards.jsonl", e))?;

    let params = json!({
        "ratings": display(&cfg.corpus.ratings),
        "movies": display(&cfg.corpus.movies),
        "supplement": cfg.corpus.supplement.as_deref().map(display),
        "format": format,
        "error_budget": cfg.corpus.error_budget,
        "cohort": cfg.cohort,
        "split": cfg.split,
    });
    let summary = json!({
        "parsed_rows": outcome.records.len(),
        "parse_issues": outcome.issues.len(),
        "eligible_users": cohort.eligible,
        "cohort_users": cohort.histories.len(),
        "cohort_shortfall": cohort.shortfall,
        "split_excluded_users": split.excluded.len(),
        "train_rows": split.corpus.train.len(),
        "test_rows": split.corpus.test.len(),
        "cards": cards.len(),
        "cards_skipped_no_average": skipped,
    });
    finish_stage(
        ctx,
        "ingest",
        params,
        non_default(cfg),
        summary,
        &[
            "train.jsonl".to_string(),
            "test.jsonl".to_string(),
            "cards.jsonl".to_string(),
        ],
    )
}

/// Protocol knobs that differ from the shipped defaults. Input paths are
/// always run-specific, so they stay out of the diff.
fn non_default(cfg: &RunConfig) -> Vec<String> {
    let protocol = |c: &RunConfig| {
        json!({
            "cohort": c.cohort,
            "split": c.split,
            "corpus": {"format": c.corpus.format, "error_budget": c.corpus.error_budget},
        })
    };
    crate::manifest::non_default_keys(&protocol(cfg), &protocol(&RunConfig::default()))
}
