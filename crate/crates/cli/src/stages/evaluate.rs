//! Stage 7: score each adapter's transcript into error and unrelatedness
//! metrics, one report pair (JSON + markdown) per adapter.

use std::collections::BTreeMap;

use serde_json::json;

use super::{
    create_dir, display, finish_stage, read_artifact, write_text, Plan, SimulateSummary, StageCtx,
};
use crate::config::RunConfig;
use crate::errors::CliError;
use crate::manifest::verify_chain;
use uasim_core::simeval::{report_json, report_markdown, score, MetricsReport, PredictionRecord};

pub fn run(ctx: &StageCtx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let dir = ctx.stage_dir("evaluate");
    if ctx.dry_run {
        Plan {
            stage: "evaluate",
            reads: vec![display(&ctx.stage_dir("simulate").join("<adapter>/predictions.jsonl"))],
            writes: vec![
                display(&dir.join("<adapter>/report.json")),
                display(&dir.join("<adapter>/report.md")),
                display(&dir.join("manifest.json")),
            ],
            params: vec![format!("group by persona: {}", cfg.simulate.group_by_cluster)],
        }
        .print(ctx);
        return Ok(());
    }

    let chain = verify_chain(&ctx.out_root, "simulate")?;
    let simulated: SimulateSummary =
        serde_json::from_value(chain.manifests["simulate"].summary.clone()).map_err(|e| {
            CliError::Upstream(format!("simulate manifest summary is unreadable: {e}"))
        })?;

    let mut reports: BTreeMap<String, MetricsReport> = BTreeMap::new();
    let mut output_files = Vec::new();
    for (name, run) in &simulated.adapters {
        let records: Vec<PredictionRecord> =
            read_artifact(&ctx.stage_dir("simulate").join(&run.transcript))?;
        let report = score(&records, cfg.simulate.group_by_cluster)?;
        log::info!(
            "adapter {name}: {} rows, {} related, unrelated rate {:.2}%",
            report.n_total,
            report.n_related,
            report.urr_percent
        );
        create_dir(&dir.join(name))?;
        write_text(&dir.join(name).join("report.json"), &report_json(&report))?;
        write_text(&dir.join(name).join("report.md"), &report_markdown(name, &report))?;
        output_files.push(format!("{name}/report.json"));
        output_files.push(format!("{name}/report.md"));
        reports.insert(name.clone(), report);
    }

    let params = json!({ "group_by_cluster": cfg.simulate.group_by_cluster });
    let summary = serde_json::to_value(&reports).expect("reports serialize");
    finish_stage(ctx, "evaluate", params, non_default(cfg), summary, &output_files)
}

fn non_default(cfg: &RunConfig) -> Vec<String> {
    let protocol = |c: &RunConfig| json!({ "group_by_cluster": c.simulate.group_by_cluster });
    crate::manifest::non_default_keys(&protocol(cfg), &protocol(&RunConfig::default()))
}
