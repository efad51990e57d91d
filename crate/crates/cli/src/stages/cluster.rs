//! Stage 3: cluster profile embeddings into personas, either at a fixed k
//! or by scanning a k range and taking the inertia curve's knee.

use std::collections::BTreeMap;

use serde_json::json;

use super::{create_dir, display, finish_stage, load_profiles, Plan, StageCtx};
use crate::config::RunConfig;
use crate::errors::CliError;
use crate::manifest::verify_chain;
use uasim_core::gateway::EmbeddingVector;
use uasim_core::corpus::UserId;
use uasim_core::persona::{
    default_stopwords, elbow_select, group_profile_texts, kmeans, persona_vocabulary,
    save_personas, write_vocabulary_csv, PersonaArtifact,
};

pub fn run(ctx: &StageCtx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dir = ctx.stage_dir("cluster");
    if ctx.dry_run {
        let k_param = match cfg.clustering.k_range {
            Some([lo, hi]) => format!("k from elbow over {lo}..={hi}"),
            None => format!("fixed k = {}", cfg.clustering.k.unwrap_or(0)),
        };
        Plan {
            stage: "cluster",
            reads: vec![display(&ctx.stage_dir("distill").join("profiles.jsonl"))],
            writes: ["personas.json", "vocabulary.csv", "manifest.json"]
                .iter()
                .map(|f| display(&dir.join(f)))
                .collect(),
            params: vec![
                k_param,
                format!(
                    "seed {}, tol {}, max {} Lloyd iterations",
                    cfg.clustering.seed, cfg.clustering.tol, cfg.clustering.max_iter
                ),
            ],
        }
        .print(ctx);
        return Ok(());
    }

    verify_chain(&ctx.out_root, "distill")?;
    let profiles = load_profiles(ctx)?;
    let mut embeddings: BTreeMap<UserId, EmbeddingVector> = BTreeMap::new();
    for profile in &profiles {
        let embedding = profile.embedding.clone().ok_or_else(|| {
            CliError::Upstream(format!(
                "profile of user {} has no embedding; re-run `uasim distill`",
                profile.user_id
            ))
        })?;
        embeddings.insert(profile.user_id.clone(), embedding);
    }

    let cc = &cfg.clustering;
    let (model, curve, used_elbow) = match cc.k_range {
        Some([lo, hi]) => {
            let candidates: Vec<usize> = (lo..=hi).collect();
            let (k_star, curve) = elbow_select(&embeddings, &candidates, cc.seed, cc.tol, cc.max_iter)?;
            log::info!("elbow over {lo}..={hi} picked k = {k_star}");
            let model = kmeans(&embeddings, k_star, cc.seed, cc.tol, cc.max_iter)?;
            (model, curve, true)
        }
        None => {
            let k = cc.k.expect("validated: k or k_range is set");
            let model = kmeans(&embeddings, k, cc.seed, cc.tol, cc.max_iter)?;
            let curve = vec![(k, model.inertia)];
            (model, curve, false)
        }
    };

    let mut sizes = vec![0usize; model.k];
    for &cluster in model.assignments.values() {
        sizes[cluster] += 1;
    }

    create_dir(&dir)?;
    let artifact = PersonaArtifact::from_model(&model, curve);
    save_personas(&artifact, &dir.join("personas.json"))?;
    let grouped = group_profile_texts(&profiles, &model);
    let vocabulary = persona_vocabulary(&grouped, cc.top_words, &default_stopwords());
    write_vocabulary_csv(&vocabulary, &dir.join("vocabulary.csv"))?;

    let params = serde_json::to_value(&cfg.clustering).expect("clustering config serializes");
    let summary = json!({
        "k": model.k,
        "elbow": used_elbow,
        "inertia": model.inertia,
        "iterations_run": model.iterations_run,
        "cluster_sizes": sizes,
    });
    finish_stage(
        ctx,
        "cluster",
        params,
        non_default(cfg),
        summary,
        &["personas.json".to_string(), "vocabulary.csv".to_string()],
    )
}

fn non_default(cfg: &RunConfig) -> Vec<String> {
    let protocol = |c: &RunConfig| json!({ "clustering": c.clustering });
    crate::manifest::non_default_keys(&protocol(cfg), &protocol(&RunConfig::default()))
}
