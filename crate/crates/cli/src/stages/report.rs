//! Stage 8: cross-adapter comparison. Renders the markdown table (best
//! displayed value per memory regime bolded), pools the persona
//! transcripts into one combined score, and charts error against
//! training-set size. Refuses to combine artifacts from different ingest
//! runs; the chain root check catches that.

use serde_json::json;

use super::{
    create_dir, display, finish_stage, load_dataset_manifest, memories_label, read_artifact,
    write_text, AdapterOutcome, CombinedOutcome, FinalReport, Plan, SimulateSummary, StageCtx,
};
use crate::errors::CliError;
use crate::manifest::verify_chain;
use uasim_core::datasets::AdapterKind;
use uasim_core::simeval::{
    comparison_table, score, size_performance_report, ComparisonRow, MetricsReport,
    PredictionRecord, SimEvalError,
};

const POOLED_NAME: &str = "personas (pooled)";

pub fn run(ctx: &StageCtx) -> Result<(), CliError> {
    let dir = ctx.stage_dir("report");
    if ctx.dry_run {
        Plan {
            stage: "report",
            reads: vec![
                display(&ctx.stage_dir("evaluate").join("<adapter>/report.json")),
                display(&ctx.stage_dir("simulate").join("<adapter>/predictions.jsonl")),
            ],
            writes: [
                "comparison.md",
                "report.json",
                "size_report.csv",
                "size_chart.svg",
                "manifest.json",
            ]
            .iter()
            .map(|f| display(&dir.join(f)))
            .collect(),
            params: vec![],
        }
        .print(ctx);
        return Ok(());
    }

    let chain = verify_chain(&ctx.out_root, "evaluate")?;
    let dataset_manifest = load_dataset_manifest(&chain.manifests["datasets"])?;
    let simulated: SimulateSummary =
        serde_json::from_value(chain.manifests["simulate"].summary.clone()).map_err(|e| {
            CliError::Upstream(format!("simulate manifest summary is unreadable: {e}"))
        })?;
    let reports: std::collections::BTreeMap<String, MetricsReport> =
        serde_json::from_value(chain.manifests["evaluate"].summary.clone()).map_err(|e| {
            CliError::Upstream(format!("evaluate manifest summary is unreadable: {e}"))
        })?;

    let label = memories_label(dataset_manifest.variant);
    let mut rows = Vec::new();
    let mut adapters = Vec::new();
    let mut size_points = Vec::new();
    let mut pooled: Vec<PredictionRecord> = Vec::new();
    for adapter in &dataset_manifest.adapters {
        let name = &adapter.spec.name;
        let Some(report) = reports.get(name) else {
            log::warn!("adapter {name} was never simulated; leaving it out of the comparison");
            continue;
        };
        rows.push(ComparisonRow {
            name: name.clone(),
            memories: label.to_string(),
            report: report.clone(),
        });
        adapters.push(AdapterOutcome {
            name: name.clone(),
            kind: adapter.spec.kind,
            cluster: adapter.spec.cluster,
            train_rows: adapter.train_rows,
            metrics: report.clone(),
        });
        if adapter.spec.kind == AdapterKind::Persona {
            if report.rmse.is_some() && report.mae.is_some() {
                size_points.push((adapter.train_rows, report.clone()));
            }
            if let Some(run) = simulated.adapters.get(name) {
                pooled.extend(read_artifact::<PredictionRecord>(
                    &ctx.stage_dir("simulate").join(&run.transcript),
                )?);
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Upstream(
            "no scored adapters to report on; run `uasim simulate` and `uasim evaluate`".into(),
        ));
    }

    let combined = if pooled.is_empty() {
        None
    } else {
        let report = score(&pooled, true)?;
        rows.push(ComparisonRow {
            name: POOLED_NAME.to_string(),
            memories: label.to_string(),
            report: report.clone(),
        });
        Some(CombinedOutcome {
            name: POOLED_NAME.to_string(),
            metrics: report,
        })
    };

    create_dir(&dir)?;
    let table = comparison_table(&rows);
    write_text(&dir.join("comparison.md"), &format!("# Model comparison\n\n{table}"))?;
    println!("{table}");

    let final_report = FinalReport {
        chain_root: chain.root.clone(),
        variant: dataset_manifest.variant,
        adapters,
        combined,
    };
    let mut report_bytes =
        serde_json::to_vec_pretty(&final_report).expect("final report serializes");
    report_bytes.push(b'\n');
    uasim_core::jsonl::atomic_write(&dir.join("report.json"), &report_bytes)
        .map_err(|e| CliError::Internal(format!("cannot write report.json: {e}")))?;

    let mut output_files = vec!["comparison.md".to_string(), "report.json".to_string()];
    match size_performance_report(&size_points) {
        Ok(size_report) => {
            size_report.write(&dir.join("size_report.csv"), &dir.join("size_chart.svg"))?;
            output_files.push("size_report.csv".to_string());
            output_files.push("size_chart.svg".to_string());
        }
        Err(SimEvalError::NeedTwoPoints(n)) => {
            log::warn!(
                "size-performance chart skipped: need >= 2 persona adapters with error \
                 metrics, have {n}"
            );
        }
        Err(other) => return Err(other.into()),
    }

    let params = json!({});
    let summary = json!({
        "adapters": final_report.adapters.len(),
        "pooled_rows": pooled.len(),
        "chain_root": chain.root,
    });
    finish_stage(ctx, "report", params, Vec::new(), summary, &output_files)
}
