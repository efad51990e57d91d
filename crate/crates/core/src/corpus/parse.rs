//! Parsers for rating logs, movie tables, and the item-metadata supplement.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AvgRating, CorpusError, InteractionRecord, ItemCard, ItemId, Rating, UserId};

/// Supported interaction-log layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// `UserID::MovieID::Rating::Timestamp`
    MovielensDat,
    /// CSV with header `user_id,item_id,rating,timestamp`
    Csv,
}

/// A malformed input line: where it was, which field broke, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineIssue {
    /// 1-based line number.
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for LineIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at line {}", self.message, self.line)
    }
}

/// Valid records plus every malformed line encountered.
#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub records: Vec<InteractionRecord>,
    pub issues: Vec<LineIssue>,
}

/// Parses an interaction log in strict mode (error budget 0): any malformed
/// line fails the whole parse, reporting the first offender.
pub fn parse_interactions(
    path: &Path,
    format: CorpusFormat,
) -> Result<Vec<InteractionRecord>, CorpusError> {
    let outcome = parse_interactions_with_budget(path, format, 0)?;
    Ok(outcome.records)
}

/// Parses an interaction log, tolerating up to `error_budget` malformed
/// lines. Malformed lines are collected, not fatal, until the budget is
/// exceeded.
pub fn parse_interactions_with_budget(
    path: &Path,
    format: CorpusFormat,
    error_budget: usize,
) -> Result<ParseOutcome, CorpusError> {
    let text = read_text_lossy(path)?;
    let outcome = parse_interaction_text(&text, format);
    if outcome.issues.len() > error_budget {
        return Err(CorpusError::TooManyErrors {
            count: outcome.issues.len(),
            budget: error_budget,
            first: outcome.issues[0].clone(),
        });
    }
    Ok(outcome)
}

/// Parses interaction-log text. Exposed for in-memory corpora.
pub fn parse_interaction_text(text: &str, format: CorpusFormat) -> ParseOutcome {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen: HashSet<(UserId, ItemId, i64)> = HashSet::new();

    let mut lines = text.lines().enumerate();
    if format == CorpusFormat::Csv {
        match lines.next() {
            Some((_, header)) if header.trim() == "user_id,item_id,rating,timestamp" => {}
            Some((_, header)) => {
                issues.push(LineIssue {
                    line: 1,
                    field: "header".into(),
                    message: format!(
                        "expected header 'user_id,item_id,rating,timestamp', got {header:?}"
                    ),
                });
                return ParseOutcome { records, issues };
            }
            None => return ParseOutcome { records, issues },
        }
    }

    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            CorpusFormat::MovielensDat => line.split("::").collect(),
            CorpusFormat::Csv => line.split(',').collect(),
        };
        if fields.len() != 4 {
            issues.push(LineIssue {
                line: line_no,
                field: "line".into(),
                message: format!("expected 4 fields, got {}", fields.len()),
            });
            continue;
        }
        match parse_record_fields(&fields) {
            Ok(record) => {
                let key = (
                    record.user_id.clone(),
                    record.item_id.clone(),
                    record.timestamp,
                );
                if !seen.insert(key) {
                    issues.push(LineIssue {
                        line: line_no,
                        field: "line".into(),
                        message: "duplicate (user_id, item_id, timestamp)".into(),
                    });
                    continue;
                }
                records.push(record);
            }
            Err((field, message)) => issues.push(LineIssue {
                line: line_no,
                field: field.into(),
                message,
            }),
        }
    }

    ParseOutcome { records, issues }
}

fn parse_record_fields(fields: &[&str]) -> Result<InteractionRecord, (&'static str, String)> {
    let user = fields[0].trim();
    let item = fields[1].trim();
    if user.is_empty() {
        return Err(("user_id", "empty user_id".into()));
    }
    if item.is_empty() {
        return Err(("item_id", "empty item_id".into()));
    }
    let raw_rating = fields[2].trim();
    let rating_value: i64 = raw_rating
        .parse()
        .map_err(|_| ("rating", format!("non-integer rating {raw_rating:?}")))?;
    if !(1..=5).contains(&rating_value) {
        return Err(("rating", "rating out of range [1,5]".into()));
    }
    let raw_ts = fields[3].trim();
    let timestamp: i64 = raw_ts
        .parse()
        .map_err(|_| ("timestamp", format!("non-integer timestamp {raw_ts:?}")))?;
    if timestamp < 0 {
        return Err(("timestamp", format!("negative timestamp {timestamp}")));
    }
    Ok(InteractionRecord {
        user_id: UserId(user.to_string()),
        item_id: ItemId(item.to_string()),
        rating: Rating::new(rating_value as u8).expect("range checked"),
        timestamp,
    })
}

/// One row of a `MovieID::Title (Year)::Genre|Genre` movie table.
#[derive(Debug, Clone, PartialEq)]
pub struct MovieRow {
    pub item_id: ItemId,
    pub title: String,
    pub release_year: i32,
    pub genres: Vec<String>,
}

/// Parses movie-table text; malformed rows become issues.
pub fn parse_movie_lines(text: &str) -> (Vec<MovieRow>, Vec<LineIssue>) {
    let mut rows = Vec::new();
    let mut issues = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 3 {
            issues.push(LineIssue {
                line: line_no,
                field: "line".into(),
                message: format!("expected 3 fields, got {}", fields.len()),
            });
            continue;
        }
        let titled = fields[1].trim();
        let Some((title, year)) = split_title_year(titled) else {
            issues.push(LineIssue {
                line: line_no,
                field: "title".into(),
                message: format!("missing (year) suffix in {titled:?}"),
            });
            continue;
        };
        let genres: Vec<String> = fields[2]
            .trim()
            .split('|')
            .filter(|g| !g.is_empty())
            .map(|g| g.to_string())
            .collect();
        if genres.is_empty() {
            issues.push(LineIssue {
                line: line_no,
                field: "genres".into(),
                message: "empty genre list".into(),
            });
            continue;
        }
        rows.push(MovieRow {
            item_id: ItemId(fields[0].trim().to_string()),
            title: title.to_string(),
            release_year: year,
            genres,
        });
    }
    (rows, issues)
}

/// Reads and parses a movie table from disk (UTF-8 with Latin-1 fallback;
/// older dumps ship Latin-1 titles).
pub fn read_movies(path: &Path) -> Result<(Vec<MovieRow>, Vec<LineIssue>), CorpusError> {
    let text = read_text_lossy(path)?;
    Ok(parse_movie_lines(&text))
}

fn split_title_year(titled: &str) -> Option<(&str, i32)> {
    let open = titled.rfind('(')?;
    let close = titled.rfind(')')?;
    if close < open {
        return None;
    }
    let year: i32 = titled[open + 1..close].trim().parse().ok()?;
    Some((titled[..open].trim_end(), year))
}

/// Per-item metadata supplied alongside the raw log: summary text, cast,
/// and optionally a pre-computed historical average rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSupplement {
    pub item_id: ItemId,
    #[serde(default)]
    pub summary: Option<String>,
    #[serde(default)]
    pub cast: Option<Vec<String>>,
    #[serde(default)]
    pub historical_avg_rating: Option<AvgRating>,
}

/// Reads the supplemental JSON-lines metadata keyed by item id.
pub fn read_item_supplement(path: &Path) -> Result<HashMap<ItemId, ItemSupplement>, CorpusError> {
    let items: Vec<ItemSupplement> =
        crate::jsonl::read_jsonl(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(items
        .into_iter()
        .map(|s| (s.item_id.clone(), s))
        .collect())
}

/// Mean observed rating per item, to two decimals, for items lacking a
/// supplied historical average.
pub fn item_average_ratings(records: &[InteractionRecord]) -> HashMap<ItemId, f64> {
    let mut sums: HashMap<ItemId, (u64, u64)> = HashMap::new();
    for r in records {
        let entry = sums.entry(r.item_id.clone()).or_insert((0, 0));
        entry.0 += u64::from(r.rating.value());
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(item, (sum, n))| {
            let mean = sum as f64 / n as f64;
            (item, (mean * 100.0).round() / 100.0)
        })
        .collect()
}

/// Joins movie rows with the supplement into validated item cards.
///
/// Items with neither a supplied nor a computable historical average are
/// skipped (they were never rated in this corpus); the count of skipped
/// rows is returned alongside the cards.
pub fn assemble_item_cards(
    movies: &[MovieRow],
    supplement: &HashMap<ItemId, ItemSupplement>,
    observed_avg: &HashMap<ItemId, f64>,
) -> Result<(Vec<ItemCard>, usize), CorpusError> {
    let mut cards = Vec::new();
    let mut skipped = 0usize;
    for movie in movies {
        let extra = supplement.get(&movie.item_id);
        let avg = match extra.and_then(|s| s.historical_avg_rating.clone()) {
            Some(avg) => avg,
            None => match observed_avg.get(&movie.item_id) {
                Some(value) => AvgRating::from_value(*value)?,
                None => {
                    skipped += 1;
                    continue;
                }
            },
        };
        let card = ItemCard {
            item_id: movie.item_id.clone(),
            title: movie.title.clone(),
            release_year: movie.release_year,
            genres: movie.genres.clone(),
            cast: extra.and_then(|s| s.cast.clone()).unwrap_or_default(),
            historical_avg_rating: avg,
            summary: extra.and_then(|s| s.summary.clone()).unwrap_or_default(),
        };
        card.validate()?;
        cards.push(card);
    }
    Ok((cards, skipped))
}

fn read_text_lossy(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(match String::from_utf8(bytes) {
        Ok(text) => text,
        // Latin-1: each byte maps to the code point of the same value.
        Err(err) => err.as_bytes().iter().map(|&b| b as char).collect(),
    })
}
