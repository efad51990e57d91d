//! Rating simulation and scoring.
//!
//! [`simulate`] replays a dataset's held-out prompts against a
//! chat-completion endpoint (a fine-tuned adapter or a frozen base model)
//! and records one [`PredictionRecord`] per row, in row order, in an
//! append-only transcript that doubles as a resume checkpoint. [`score`]
//! turns records into a [`MetricsReport`]: root-mean-squared error and
//! mean absolute error over the responses that parse to a rating, plus
//! the unrelated-response rate over everything. Report helpers render
//! the size-vs-accuracy table and the cross-model comparison table.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ItemId, Rating, UserId};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::jsonl;
use crate::prompt::{parse_rating, ParsedRating, RatingPrompt};

/// Consecutive backend failures, in transcript order, after which a run is
/// declared dead and aborted with its partial transcript intact. Isolated
/// failures stay in the transcript as unrelated responses.
const ABORT_AFTER_CONSECUTIVE_FAILURES: usize = 10;

#[derive(Debug, Error)]
pub enum SimEvalError {
    #[error("no prediction records to score")]
    EmptyRecords,
    #[error("need >= 2 points, got {0}")]
    NeedTwoPoints(usize),
    #[error("size report point for train_size {train_size} has no error metrics (no related records)")]
    MissingErrorMetrics { train_size: usize },
    #[error("transcript {path} does not belong to this job: {detail}")]
    TranscriptMismatch { path: PathBuf, detail: String },
    #[error("endpoint unavailable after {completed} rows; transcript saved, re-run to resume")]
    EndpointDown { completed: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("transcript serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Decode settings forwarded to the endpoint. Defaults match the
/// simulation protocol: 4 generated tokens are enough for a rating digit,
/// temperature 0.3 keeps answers near-greedy, top_k 50.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_k: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            max_tokens: 4,
            temperature: 0.3,
            top_k: 50,
        }
    }
}

/// One held-out interaction to replay: the rendered prompt plus the
/// ground-truth rating the agent is asked to reproduce.
#[derive(Debug, Clone)]
pub struct TestRow {
    pub system: String,
    pub user: String,
    pub truth: Rating,
    pub user_id: UserId,
    pub item_id: ItemId,
    pub cluster: Option<usize>,
}

impl TestRow {
    pub fn from_prompt(prompt: RatingPrompt, truth: Rating, cluster: Option<usize>) -> Self {
        TestRow {
            system: prompt.system_text,
            user: prompt.user_text,
            truth,
            user_id: prompt.user_id,
            item_id: prompt.item_id,
            cluster,
        }
    }
}

/// A full simulation run against one endpoint-side model.
#[derive(Debug, Clone)]
pub struct SimulationJob {
    /// Adapter name or frozen-model tag as the endpoint knows it.
    pub model_tag: String,
    pub rows: Vec<TestRow>,
    pub decode: DecodeParams,
    /// Upper bound on in-flight requests.
    pub workers: usize,
    /// Append-only transcript; an existing prefix is validated against
    /// `rows` and skipped, which is what makes interrupted runs resumable.
    pub transcript_path: PathBuf,
}

/// One simulated rating. `raw` is the verbatim endpoint reply, or the
/// failure message when retries were exhausted; failed rows never reach
/// the rating parser, so digits inside error text cannot leak in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub truth: Rating,
    pub parsed: ParsedRating,
    pub raw: String,
    pub latency_ms: u64,
    pub cluster: Option<usize>,
}

/// Error metrics for one cluster's slice of the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mae: Option<f64>,
    pub urr_percent: f64,
}

/// Scored simulation results. `rmse` and `mae` cover related responses
/// only and are absent when nothing parsed; `urr_percent` covers all
/// records. When `n_related > 0`, `rmse >= mae` holds (Cauchy-Schwarz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_total: usize,
    pub n_related: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mae: Option<f64>,
    pub urr_percent: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_cluster: Option<BTreeMap<usize, ClusterMetrics>>,
}

/// Replays every row of `job` through `gateway`, appending each finished
/// record to the transcript in row order. Requests fan out over
/// `job.workers` threads; a single writer re-establishes input order and
/// flushes only the contiguous prefix, so a killed process leaves a valid
/// transcript that the next run resumes from. Rows whose retries are
/// exhausted become unrelated records carrying the error text; a run of
/// [`ABORT_AFTER_CONSECUTIVE_FAILURES`] such rows aborts the job.
pub fn simulate(
    gateway: &Gateway,
    job: &SimulationJob,
) -> Result<Vec<PredictionRecord>, SimEvalError> {
    let mut records = load_transcript(&job.transcript_path, &job.rows)?;
    let start = records.len();
    if start == job.rows.len() {
        return Ok(records);
    }
    if start > 0 {
        log::info!(
            "resuming simulation of {} at row {start} of {}",
            job.model_tag,
            job.rows.len()
        );
    }
    if let Some(dir) = job.transcript_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&job.transcript_path)?;
    let mut writer = BufWriter::new(file);

    let next = AtomicUsize::new(start);
    let stop = AtomicBool::new(false);
    let fatal: Mutex<Option<GatewayError>> = Mutex::new(None);
    let (tx, rx) = mpsc::channel::<(usize, PredictionRecord, bool)>();
    let workers = job.workers.clamp(1, job.rows.len() - start);

    let mut flush_error: Option<SimEvalError> = None;
    let mut aborted = false;
    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, fatal) = (&next, &stop, &fatal);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= job.rows.len() {
                    break;
                }
                let row = &job.rows[idx];
                let request = ChatRequest {
                    system_prompt: row.system.clone(),
                    user_prompt: row.user.clone(),
                    max_tokens: job.decode.max_tokens,
                    temperature: job.decode.temperature,
                    top_k: job.decode.top_k,
                    model_tag: job.model_tag.clone(),
                    cache_salt: 0,
                };
                match gateway.complete(&request) {
                    Ok(resp) => {
                        let failed = resp.is_error();
                        let parsed = if failed {
                            ParsedRating {
                                value: None,
                                raw_text: resp.text.clone(),
                                related: false,
                            }
                        } else {
                            parse_rating(&resp.text)
                        };
                        let record = PredictionRecord {
                            user_id: row.user_id.clone(),
                            item_id: row.item_id.clone(),
                            truth: row.truth,
                            parsed,
                            raw: resp.text,
                            latency_ms: resp.latency_ms,
                            cluster: row.cluster,
                        };
                        if tx.send((idx, record, failed)).is_err() {
                            break;
                        }
                    }
                    Err(err) => {
                        *fatal.lock().unwrap() = Some(err);
                        stop.store(true, Ordering::SeqCst);
                        break;
                    }
                }
            });
        }
        drop(tx);

        // Single writer: buffer out-of-order completions, flush the
        // contiguous prefix. Failure runs are counted in flush order so
        // the abort decision is deterministic.
        let mut pending: BTreeMap<usize, (PredictionRecord, bool)> = BTreeMap::new();
        let mut next_flush = start;
        let mut consecutive_failures = 0usize;
        'drain: for (idx, record, failed) in rx {
            pending.insert(idx, (record, failed));
            while let Some((record, failed)) = pending.remove(&next_flush) {
                match serde_json::to_string(&record) {
                    Ok(line) => {
                        if let Err(err) = writer
                            .write_all(line.as_bytes())
                            .and_then(|()| writer.write_all(b"\n"))
                            .and_then(|()| writer.flush())
                        {
                            flush_error = Some(err.into());
                            stop.store(true, Ordering::SeqCst);
                            break 'drain;
                        }
                    }
                    Err(err) => {
                        flush_error = Some(err.into());
                        stop.store(true, Ordering::SeqCst);
                        break 'drain;
                    }
                }
                records.push(record);
                next_flush += 1;
                if failed {
                    consecutive_failures += 1;
                } else {
                    consecutive_failures = 0;
                }
                if consecutive_failures >= ABORT_AFTER_CONSECUTIVE_FAILURES {
                    aborted = true;
                    stop.store(true, Ordering::SeqCst);
                    break 'drain;
                }
            }
        }
    });
    writer.flush()?;

    if let Some(err) = flush_error {
        return Err(err);
    }
    if let Some(err) = fatal.into_inner().unwrap() {
        return Err(err.into());
    }
    if records.len() < job.rows.len() {
        debug_assert!(aborted, "short run without an abort flag");
        return Err(SimEvalError::EndpointDown {
            completed: records.len(),
        });
    }
    Ok(records)
}

/// Reads a transcript prefix and checks it against the job's rows. A torn
/// final line (process killed mid-append) is dropped and the file is
/// rewritten to the valid prefix; any other divergence is an error rather
/// than a silent mixed transcript.
fn load_transcript(path: &Path, rows: &[TestRow]) -> Result<Vec<PredictionRecord>, SimEvalError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mismatch = |detail: String| SimEvalError::TranscriptMismatch {
        path: path.to_path_buf(),
        detail,
    };
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut records: Vec<PredictionRecord> = Vec::with_capacity(lines.len());
    let mut torn = false;
    for (idx, line) in lines.iter().enumerate() {
        match serde_json::from_str::<PredictionRecord>(line) {
            Ok(record) => records.push(record),
            Err(err) if idx + 1 == lines.len() => {
                log::warn!("dropping torn final transcript line in {}: {err}", path.display());
                torn = true;
            }
            Err(err) => return Err(mismatch(format!("line {}: {err}", idx + 1))),
        }
    }
    if records.len() > rows.len() {
        return Err(mismatch(format!(
            "{} records for {} rows",
            records.len(),
            rows.len()
        )));
    }
    for (i, (record, row)) in records.iter().zip(rows).enumerate() {
        if record.user_id != row.user_id
            || record.item_id != row.item_id
            || record.truth != row.truth
        {
            return Err(mismatch(format!("row {i} identity differs")));
        }
    }
    if torn {
        jsonl::write_jsonl(path, &records)?;
    }
    Ok(records)
}

/// Integer error accumulator. Squared and absolute differences of 1-5
/// ratings are summed exactly, so scoring is permutation-invariant and
/// floating point enters only in the final division.
#[derive(Default)]
struct Tally {
    n: usize,
    n_related: usize,
    sum_sq: u64,
    sum_abs: u64,
}

impl Tally {
    fn add(&mut self, record: &PredictionRecord) {
        self.n += 1;
        debug_assert_eq!(record.parsed.related, record.parsed.value.is_some());
        if let Some(value) = record.parsed.value {
            self.n_related += 1;
            let diff = i64::from(value.value()) - i64::from(record.truth.value());
            self.sum_sq += (diff * diff) as u64;
            self.sum_abs += diff.unsigned_abs();
        }
    }

    fn rmse(&self) -> Option<f64> {
        (self.n_related > 0).then(|| (self.sum_sq as f64 / self.n_related as f64).sqrt())
    }

    fn mae(&self) -> Option<f64> {
        (self.n_related > 0).then(|| self.sum_abs as f64 / self.n_related as f64)
    }

    fn urr_percent(&self) -> f64 {
        ((self.n - self.n_related) * 100) as f64 / self.n as f64
    }
}

/// Scores records into a [`MetricsReport`]. RMSE and MAE cover related
/// records only; unrelated responses surface through `urr_percent` so a
/// refusal cannot masquerade as a rating error. With `group_by_cluster`,
/// records carrying a cluster id get per-cluster sub-reports (records
/// without one still count in the global numbers).
pub fn score(
    records: &[PredictionRecord],
    group_by_cluster: bool,
) -> Result<MetricsReport, SimEvalError> {
    if records.is_empty() {
        return Err(SimEvalError::EmptyRecords);
    }
    let mut global = Tally::default();
    for record in records {
        global.add(record);
    }
    let per_cluster = group_by_cluster.then(|| {
        let mut groups: BTreeMap<usize, Tally> = BTreeMap::new();
        for record in records {
            if let Some(cluster) = record.cluster {
                groups.entry(cluster).or_default().add(record);
            }
        }
        groups
            .into_iter()
            .map(|(cluster, tally)| {
                (
                    cluster,
                    ClusterMetrics {
                        n: tally.n,
                        rmse: tally.rmse(),
                        mae: tally.mae(),
                        urr_percent: tally.urr_percent(),
                    },
                )
            })
            .collect()
    });
    let report = MetricsReport {
        n_total: global.n,
        n_related: global.n_related,
        rmse: global.rmse(),
        mae: global.mae(),
        urr_percent: global.urr_percent(),
        per_cluster,
    };
    if let (Some(rmse), Some(mae)) = (report.rmse, report.mae) {
        debug_assert!(rmse >= mae - 1e-12, "rmse {rmse} < mae {mae}");
    }
    Ok(report)
}

/// The size-vs-accuracy deliverable: a CSV table plus a rendered chart.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub csv: String,
    pub svg: String,
}

impl SizeReport {
    pub fn write(&self, csv_path: &Path, svg_path: &Path) -> Result<(), SimEvalError> {
        jsonl::atomic_write(csv_path, self.csv.as_bytes())?;
        jsonl::atomic_write(svg_path, self.svg.as_bytes())?;
        Ok(())
    }
}

/// Tabulates RMSE and MAE against training-set size, one point per
/// adapter, sorted by size descending. A single point is rejected: one
/// measurement is not a trend.
pub fn size_performance_report(
    per_adapter: &[(usize, MetricsReport)],
) -> Result<SizeReport, SimEvalError> {
    if per_adapter.len() < 2 {
        return Err(SimEvalError::NeedTwoPoints(per_adapter.len()));
    }
    let mut points = Vec::with_capacity(per_adapter.len());
    for (train_size, report) in per_adapter {
        match (report.rmse, report.mae) {
            (Some(rmse), Some(mae)) => points.push((*train_size, rmse, mae)),
            _ => {
                return Err(SimEvalError::MissingErrorMetrics {
                    train_size: *train_size,
                })
            }
        }
    }
    points.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then_with(|| a.1.total_cmp(&b.1))
            .then_with(|| a.2.total_cmp(&b.2))
    });
    let mut csv = String::from("train_size,rmse,mae\n");
    for (size, rmse, mae) in &points {
        csv.push_str(&format!("{size},{rmse:.6},{mae:.6}\n"));
    }
    Ok(SizeReport {
        csv,
        svg: size_chart_svg(&points),
    })
}

/// Renders the size-vs-error chart as a self-contained SVG string. Output
/// depends only on the points, so re-renders are byte-identical.
fn size_chart_svg(points_desc: &[(usize, f64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const MARGIN: f64 = 60.0;
    let mut points: Vec<_> = points_desc.to_vec();
    points.sort_by_key(|p| p.0);

    let x_min = points.first().map(|p| p.0).unwrap_or(0) as f64;
    let x_max = points.last().map(|p| p.0).unwrap_or(1) as f64;
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, rmse, mae) in &points {
        y_min = y_min.min(*rmse).min(*mae);
        y_max = y_max.max(*rmse).max(*mae);
    }
    let pad = ((y_max - y_min) * 0.08).max(0.05);
    y_min -= pad;
    y_max += pad;
    let y_span = y_max - y_min;

    let x_of = |size: f64| MARGIN + (size - x_min) / x_span * (W - 2.0 * MARGIN);
    let y_of = |v: f64| H - MARGIN - (v - y_min) / y_span * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.0}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">\
         Error by training-set size</text>\n",
        W / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b:.0}\" x2=\"{r:.0}\" y2=\"{b:.0}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b:.0}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
    ));
    for (size, _, _) in &points {
        let x = x_of(*size as f64);
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.0}\" text-anchor=\"middle\">{size}</text>\n",
            H - MARGIN + 18.0
        ));
    }
    for i in 0..=4 {
        let v = y_min + y_span * f64::from(i) / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{:.2}\" text-anchor=\"end\">{v:.3}</text>\n",
            MARGIN - 8.0,
            y_of(v) + 4.0
        ));
    }
    let rmse_series: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mae_series: Vec<f64> = points.iter().map(|p| p.2).collect();
    for (label, color, series, legend_y) in [
        ("RMSE", "#d62728", &rmse_series, 50),
        ("MAE", "#1f77b4", &mae_series, 68),
    ] {
        let line = points
            .iter()
            .zip(series)
            .map(|(p, v)| format!("{:.2},{:.2}", x_of(p.0 as f64), y_of(*v)))
            .collect::<Vec<_>>()
            .join(" ");
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{line}\"/>\n"
        ));
        for (p, v) in points.iter().zip(series) {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x_of(p.0 as f64),
                y_of(*v)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{legend_y}\" fill=\"{color}\">{label}</text>\n",
            W - MARGIN + 8.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// One row of the cross-model comparison: a display name, the memory
/// regime the model was built on (rows sharing a regime compete for the
/// bold marks), and its scored metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub memories: String,
    pub report: MetricsReport,
}

/// Renders the comparison as a markdown table with columns (model,
/// memories, RMSE, MAE, URR). RMSE and MAE are shown to three decimals,
/// URR to two; displayed values follow the binary value's nearest decimal
/// expansion, so ties round half to even. Within each memory regime the
/// best (lowest) displayed value per column is bolded, ties included.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let cells: Vec<(Option<String>, Option<String>, String)> = rows
        .iter()
        .map(|row| {
            (
                row.report.rmse.map(|v| format!("{v:.3}")),
                row.report.mae.map(|v| format!("{v:.3}")),
                format!("{:.2}%", row.report.urr_percent),
            )
        })
        .collect();

    // Minima compare the displayed strings numerically: two values that
    // render identically must be bolded together or the table lies.
    let best_in_category = |extract: &dyn Fn(usize) -> Option<f64>| -> Vec<bool> {
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for (i, row) in rows.iter().enumerate() {
            if let Some(v) = extract(i) {
                best.entry(row.memories.as_str())
                    .and_modify(|b| *b = b.min(v))
                    .or_insert(v);
            }
        }
        rows.iter()
            .enumerate()
            .map(|(i, row)| extract(i) == best.get(row.memories.as_str()).copied())
            .collect()
    };
    let parse = |s: &Option<String>| s.as_ref().map(|v| v.parse::<f64>().expect("own format"));
    let bold_rmse = best_in_category(&|i| parse(&cells[i].0));
    let bold_mae = best_in_category(&|i| parse(&cells[i].1));
    let bold_urr =
        best_in_category(&|i| Some(cells[i].2.trim_end_matches('%').parse().expect("own format")));

    let mut out = String::from("| model | memories | RMSE | MAE | URR |\n| --- | --- | --- | --- | --- |\n");
    for (i, row) in rows.iter().enumerate() {
        let mark = |text: Option<&String>, bold: bool| match text {
            Some(t) if bold => format!("**{t}**"),
            Some(t) => t.clone(),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            row.name,
            row.memories,
            mark(cells[i].0.as_ref(), bold_rmse[i]),
            mark(cells[i].1.as_ref(), bold_mae[i]),
            mark(Some(&cells[i].2), bold_urr[i]),
        ));
    }
    out
}

/// Pretty-printed JSON for `report.json`.
pub fn report_json(report: &MetricsReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

/// Human-readable summary for `report.md`.
pub fn report_markdown(name: &str, report: &MetricsReport) -> String {
    let fmt3 = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    let mut out = format!(
        "# Simulation report: {name}\n\n\
         | metric | value |\n| --- | --- |\n\
         | rows scored | {} |\n\
         | related responses | {} |\n\
         | RMSE | {} |\n\
         | MAE | {} |\n\
         | unrelated response rate | {:.2}% |\n",
        report.n_total,
        report.n_related,
        fmt3(report.rmse),
        fmt3(report.mae),
        report.urr_percent,
    );
    if let Some(per_cluster) = &report.per_cluster {
        if !per_cluster.is_empty() {
            out.push_str(
                "\n## Per-persona breakdown\n\n\
                 | cluster | rows | RMSE | MAE | URR |\n| --- | --- | --- | --- | --- |\n",
            );
            for (cluster, m) in per_cluster {
                out.push_str(&format!(
                    "| {cluster} | {} | {} | {} | {:.2}% |\n",
                    m.n,
                    fmt3(m.rmse),
                    fmt3(m.mae),
                    m.urr_percent,
                ));
            }
        }
    }
    out
}
