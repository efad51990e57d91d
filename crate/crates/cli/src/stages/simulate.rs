//! Stage 6: replay each adapter's held-out prompts against its serving
//! endpoint, appending to a per-adapter transcript. Transcripts double as
//! checkpoints: an interrupted run resumes where the contiguous prefix
//! ends, and a completed run re-verifies instead of re-calling.

use std::collections::BTreeMap;

use serde_json::json;

use super::{
    create_dir, display, finish_stage, load_dataset_manifest, load_persona_artifact,
    read_artifact, Plan, SimAdapterSummary, SimulateSummary, StageCtx,
};
use crate::config::{EndpointCfg, RunConfig};
use crate::errors::CliError;
use crate::manifest::verify_chain;
use uasim_core::corpus::Rating;
use uasim_core::datasets::{BuiltAdapter, TrainingExample};
use uasim_core::simeval::{simulate, SimulationJob, TestRow};

pub fn run(ctx: &StageCtx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dir = ctx.stage_dir("simulate");
    if ctx.dry_run {
        let endpoints: Vec<String> = cfg
            .simulate
            .endpoints
            .iter()
            .map(|e| format!("{} -> {}", e.name, e.backend.describe()))
            .collect();
        Plan {
            stage: "simulate",
            reads: vec![display(&ctx.stage_dir("datasets").join("<adapter>.test.jsonl"))],
            writes: vec![
                display(&dir.join("<adapter>/predictions.jsonl")),
                display(&dir.join("manifest.json")),
            ],
            params: [
                format!(
                    "decode: max {} tokens, temperature {}, top_k {}",
                    cfg.decode.max_tokens, cfg.decode.temperature, cfg.decode.top_k
                ),
                format!("workers: {}", cfg.simulate.workers),
            ]
            .into_iter()
            .chain(endpoints)
            .collect(),
        }
        .print(ctx);
        return Ok(());
    }

    let chain = verify_chain(&ctx.out_root, "datasets")?;
    let dataset_manifest = load_dataset_manifest(&chain.manifests["datasets"])?;
    let artifact = load_persona_artifact(ctx)?;

    let selected: Vec<&BuiltAdapter> = match &cfg.simulate.adapters {
        None => dataset_manifest.adapters.iter().collect(),
        Some(names) => {
            for name in names {
                if !dataset_manifest.adapters.iter().any(|a| &a.spec.name == name) {
                    return Err(CliError::Config(format!(
                        "simulate.adapters names \"{name}\", which the dataset build does not contain"
                    )));
                }
            }
            dataset_manifest
                .adapters
                .iter()
                .filter(|a| names.contains(&a.spec.name))
                .collect()
        }
    };

    let mut adapters = BTreeMap::new();
    let mut output_files = Vec::new();
    for adapter in selected {
        let name = &adapter.spec.name;
        let endpoint = endpoint_for(cfg, name)?;
        let rows = test_rows(adapter, &artifact.assignments)?;
        let adapter_dir = dir.join(name);
        create_dir(&adapter_dir)?;
        let job = SimulationJob {
            model_tag: endpoint.model_tag.clone().unwrap_or_else(|| name.clone()),
            rows,
            decode: cfg.decode.to_core(),
            workers: cfg.simulate.workers,
            transcript_path: adapter_dir.join("predictions.jsonl"),
        };
        let gateway = endpoint.backend.build_gateway()?;
        log::info!(
            "simulating adapter {name} against {} ({} rows)",
            endpoint.backend.describe(),
            job.rows.len()
        );
        let records = simulate(&gateway, &job)?;
        let transcript_rel = format!("{name}/predictions.jsonl");
        adapters.insert(
            name.clone(),
            SimAdapterSummary {
                rows: records.len(),
                transcript: transcript_rel.clone(),
            },
        );
        output_files.push(transcript_rel);
    }

    let endpoint_notes: BTreeMap<&str, String> = cfg
        .simulate
        .endpoints
        .iter()
        .map(|e| (e.name.as_str(), e.backend.describe()))
        .collect();
    let params = json!({
        "decode": cfg.decode,
        "workers": cfg.simulate.workers,
        "adapters": cfg.simulate.adapters,
        "endpoints": endpoint_notes,
    });
    let summary =
        serde_json::to_value(SimulateSummary { adapters }).expect("summary serializes");
    finish_stage(ctx, "simulate", params, non_default(cfg), summary, &output_files)
}

fn endpoint_for<'a>(cfg: &'a RunConfig, name: &str) -> Result<&'a EndpointCfg, CliError> {
    cfg.simulate
        .endpoints
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| {
            CliError::Config(format!(
                "no endpoint configured for adapter \"{name}\"; train it, then add \
                 [[simulate.endpoints]] with name = \"{name}\" and its URL"
            ))
        })
}

/// Turns an adapter's emitted test file back into simulation rows. The
/// completion holds the ground-truth rating; persona rows carry the
/// adapter's cluster, single-adapter rows each user's assignment so the
/// per-persona breakdown stays available.
fn test_rows(
    adapter: &BuiltAdapter,
    assignments: &BTreeMap<uasim_core::corpus::UserId, usize>,
) -> Result<Vec<TestRow>, CliError> {
    let examples: Vec<TrainingExample> = read_artifact(&adapter.spec.test_path)?;
    let mut rows = Vec::with_capacity(examples.len());
    for example in examples {
        let value: u8 = example.completion.trim().parse().map_err(|_| {
            CliError::Upstream(format!(
                "test row for ({}, {}) in {} has non-rating completion {:?}",
                example.user_id,
                example.item_id,
                adapter.spec.test_path.display(),
                example.completion
            ))
        })?;
        let truth = Rating::new(value).map_err(|e| CliError::Upstream(e.to_string()))?;
        let cluster = adapter
            .spec
            .cluster
            .or_else(|| assignments.get(&example.user_id).copied());
        rows.push(TestRow {
            system: example.system,
            user: example.user,
            truth,
            user_id: example.user_id,
            item_id: example.item_id,
            cluster,
        });
    }
    Ok(rows)
}

fn non_default(cfg: &RunConfig) -> Vec<String> {
    let protocol = |c: &RunConfig| {
        json!({
            "decode": c.decode,
            "simulate": {"workers": c.simulate.workers, "adapters": c.simulate.adapters},
        })
    };
    crate::manifest::non_default_keys(&protocol(cfg), &protocol(&RunConfig::default()))
}
