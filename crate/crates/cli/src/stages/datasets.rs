//! Stage 5: render retrieval-augmented fine-tuning datasets, one
//! train/test pair per persona plus size-matched single-adapter controls,
//! and emit a trainer config per adapter. Training itself happens outside
//! this pipeline; the configs printed here are its input.

use serde_json::json;

use super::{
    create_dir, display, finish_stage, load_cards, load_persona_artifact, load_profiles,
    load_split, Plan, StageCtx,
};
use crate::config::RunConfig;
use crate::errors::CliError;
use crate::manifest::verify_chain;
use uasim_core::datasets::{
    build_persona_datasets, build_single_dataset, dataset_manifest, emit_trainer_config,
    DatasetInputs, DatasetOptions, SizeMode,
};
use uasim_core::memory::MemoryIndex;
use uasim_core::persona::PersonaModel;

pub fn run(ctx: &StageCtx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dir = ctx.stage_dir("datasets");
    if ctx.dry_run {
        Plan {
            stage: "datasets",
            reads: vec![
                display(&ctx.stage_dir("ingest").join("train.jsonl")),
                display(&ctx.stage_dir("ingest").join("test.jsonl")),
                display(&ctx.stage_dir("ingest").join("cards.jsonl")),
                display(&ctx.stage_dir("distill").join("profiles.jsonl")),
                display(&ctx.stage_dir("cluster").join("personas.json")),
                display(&ctx.stage_dir("index")),
            ],
            writes: vec![
                display(&dir.join("<adapter>.train.jsonl")),
                display(&dir.join("<adapter>.test.jsonl")),
                display(&dir.join("trainer-configs/<adapter>.cfg")),
                display(&dir.join("manifest.json")),
            ],
            params: vec![
                format!("variant: {:?}", cfg.datasets.variant),
                format!(
                    "retrieval: top-{} (threshold {}, {:?} scope, {:?} query)",
                    cfg.retrieval.k, cfg.retrieval.delta, cfg.retrieval.scope, cfg.retrieval.query
                ),
                format!("prompt budget: {} chars", cfg.datasets.char_budget),
                format!("embed backend: {}", cfg.backends.embed.describe()),
            ],
        }
        .print(ctx);
        return Ok(());
    }

    verify_chain(&ctx.out_root, "index")?;
    let split = load_split(ctx)?;
    let profiles = load_profiles(ctx)?;
    let cards = load_cards(ctx)?;
    let artifact = load_persona_artifact(ctx)?;
    let mut index = MemoryIndex::load(&ctx.stage_dir("index"))?;
    index.set_personas(artifact.assignments.clone());
    let model = PersonaModel {
        k: artifact.k,
        centroids: artifact.centroids.clone(),
        assignments: artifact.assignments.clone(),
        inertia: artifact.inertia,
        seed: artifact.seed,
        iterations_run: 0,
    };
    let gateway = cfg.backends.embed.build_gateway()?;

    create_dir(&dir)?;
    let opts = DatasetOptions {
        variant: cfg.datasets.variant,
        retrieval: cfg.retrieval.to_core(),
        query_mode: cfg.retrieval.query,
        char_budget: cfg.datasets.char_budget,
        embed_model: cfg.distill.embed_model.clone(),
        out_dir: dir.clone(),
        hyperparams: cfg.datasets.hyperparams.clone(),
    };
    let inputs = DatasetInputs {
        split: &split,
        profiles: &profiles,
        cards: &cards,
        index: &index,
    };

    let mut built = build_persona_datasets(&gateway, &inputs, &model, &opts)?;
    let persona_sizes: Vec<usize> = built.iter().map(|b| b.train_rows).collect();
    built.push(build_single_dataset(
        &gateway,
        &inputs,
        &opts,
        SizeMode::Min,
        &persona_sizes,
        cfg.datasets.subsample_seed,
    )?);
    built.push(build_single_dataset(
        &gateway,
        &inputs,
        &opts,
        SizeMode::Max,
        &persona_sizes,
        cfg.datasets.subsample_seed,
    )?);

    let configs_dir = dir.join("trainer-configs");
    create_dir(&configs_dir)?;
    let mut output_files = Vec::new();
    println!("datasets are ready; train one adapter per config below, then");
    println!("list the serving endpoints under [[simulate.endpoints]] and run `uasim simulate`.");
    for adapter in &built {
        let config_rel = format!("trainer-configs/{}.cfg", adapter.spec.name);
        emit_trainer_config(&adapter.spec, &cfg.datasets.base_model, &dir.join(&config_rel))?;
        let text = std::fs::read_to_string(dir.join(&config_rel))
            .map_err(|e| CliError::Internal(format!("cannot re-read {config_rel}: {e}")))?;
        println!("\n--- trainer config: {} ---", adapter.spec.name);
        print!("{text}");
        log::info!(
            "adapter {}: {} train rows, {} test rows",
            adapter.spec.name,
            adapter.train_rows,
            adapter.test_rows
        );
        output_files.push(format!("{}.train.jsonl", adapter.spec.name));
        output_files.push(format!("{}.test.jsonl", adapter.spec.name));
        output_files.push(config_rel);
    }

    let built_manifest = dataset_manifest(&built, &split, &opts);
    let params = json!({
        "datasets": cfg.datasets,
        "retrieval": cfg.retrieval,
        "base_model": cfg.datasets.base_model,
    });
    let summary = serde_json::to_value(&built_manifest).expect("dataset manifest serializes");
    finish_stage(ctx, "datasets", params, non_default(cfg), summary, &output_files)
}

fn non_default(cfg: &RunConfig) -> Vec<String> {
    let protocol = |c: &RunConfig| json!({ "datasets": c.datasets, "retrieval": c.retrieval });
    crate::manifest::non_default_keys(&protocol(cfg), &protocol(&RunConfig::default()))
}
