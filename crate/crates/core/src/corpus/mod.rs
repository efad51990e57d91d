//! Interaction-log parsing, cohort selection, and temporal splitting.
//!
//! The corpus is the tabular record of who rated what, when. This module
//! validates raw rating logs (the `::`-delimited format or a CSV
//! equivalent), joins item metadata from a supplemental JSON-lines file,
//! draws the experimental user cohort, and splits each user's history
//! chronologically into train/test sides.

mod cohort;
mod parse;
mod split;

pub use cohort::{select_cohort, CohortSelection};
pub use parse::{
    assemble_item_cards, item_average_ratings, parse_interaction_text, parse_interactions,
    parse_interactions_with_budget, parse_movie_lines, read_item_supplement, read_movies,
    CorpusFormat, ItemSupplement, LineIssue, MovieRow, ParseOutcome,
};
pub use split::{temporal_split, SplitResult};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque user identifier. Ordered lexicographically for determinism.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

/// Opaque item identifier. Ordered lexicographically for determinism.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_string())
    }
}

impl From<String> for UserId {
    fn from(s: String) -> Self {
        UserId(s)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_string())
    }
}

impl From<String> for ItemId {
    fn from(s: String) -> Self {
        ItemId(s)
    }
}

/// A rating on the 1-5 Likert scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Rating(u8);

impl Rating {
    pub fn new(value: u8) -> Result<Self, CorpusError> {
        if (1..=5).contains(&value) {
            Ok(Rating(value))
        } else {
            Err(CorpusError::RatingOutOfRange { value })
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Rating {
    type Error = CorpusError;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Rating::new(value)
    }
}

impl From<Rating> for u8 {
    fn from(r: Rating) -> u8 {
        r.0
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One row of the interaction log: user `u` rated item `i` at a time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: Rating,
    /// Seconds since the Unix epoch; never negative.
    pub timestamp: i64,
}

/// Historical average rating, kept at source precision.
///
/// The raw string is preserved so prompt rendering reproduces upstream data
/// exactly (e.g. `3.74` stays `3.74`, never `3.7400`). Accepts a JSON string
/// or number; numbers are formatted to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AvgRatingRepr", into = "String")]
pub struct AvgRating(String);

#[derive(Deserialize)]
#[serde(untagged)]
enum AvgRatingRepr {
    Text(String),
    Number(f64),
}

impl AvgRating {
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let value: f64 = text
            .trim()
            .parse()
            .map_err(|_| CorpusError::InvalidAverageRating {
                value: text.to_string(),
            })?;
        if !(1.0..=5.0).contains(&value) {
            return Err(CorpusError::InvalidAverageRating {
                value: text.to_string(),
            });
        }
        Ok(AvgRating(text.trim().to_string()))
    }

    pub fn from_value(value: f64) -> Result<Self, CorpusError> {
        Self::parse(&format!("{value:.2}"))
    }

    /// The source-precision text, used verbatim in prompts.
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn value(&self) -> f64 {
        self.0.parse().expect("validated on construction")
    }
}

impl TryFrom<AvgRatingRepr> for AvgRating {
    type Error = CorpusError;
    fn try_from(repr: AvgRatingRepr) -> Result<Self, Self::Error> {
        match repr {
            AvgRatingRepr::Text(s) => AvgRating::parse(&s),
            AvgRatingRepr::Number(v) => AvgRating::from_value(v),
        }
    }
}

impl From<AvgRating> for String {
    fn from(a: AvgRating) -> String {
        a.0
    }
}

/// Item metadata used in prompts: title, year, genres, cast, crowd average,
/// and a one-paragraph summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCard {
    pub item_id: ItemId,
    pub title: String,
    pub release_year: i32,
    pub genres: Vec<String>,
    #[serde(default)]
    pub cast: Vec<String>,
    pub historical_avg_rating: AvgRating,
    #[serde(default)]
    pub summary: String,
}

impl ItemCard {
    /// Checks the structural invariants: non-empty title and genres.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.title.trim().is_empty() {
            return Err(CorpusError::InvalidCard {
                item_id: self.item_id.clone(),
                reason: "empty title".into(),
            });
        }
        if self.genres.is_empty() {
            return Err(CorpusError::InvalidCard {
                item_id: self.item_id.clone(),
                reason: "empty genre list".into(),
            });
        }
        Ok(())
    }
}

/// A user's interactions in chronological order, ties broken by item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: UserId,
    pub interactions: Vec<InteractionRecord>,
}

impl UserHistory {
    /// Builds a history from unordered records, establishing the canonical
    /// (timestamp, item_id) order.
    pub fn new(user_id: UserId, mut interactions: Vec<InteractionRecord>) -> Self {
        interactions.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.item_id.cmp(&b.item_id))
        });
        UserHistory {
            user_id,
            interactions,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Train/test partition of the cohort's interactions.
///
/// For every user, no test interaction precedes any train interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCorpus {
    pub train: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    /// Train fraction the split was built with.
    pub ratio: f64,
}

impl SplitCorpus {
    pub fn train_for(&self, user: &UserId) -> Vec<&InteractionRecord> {
        self.train.iter().filter(|r| &r.user_id == user).collect()
    }

    pub fn test_for(&self, user: &UserId) -> Vec<&InteractionRecord> {
        self.test.iter().filter(|r| &r.user_id == user).collect()
    }
}

/// Errors from corpus parsing and preparation.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rating {value} out of range [1,5]")]
    RatingOutOfRange { value: u8 },
    #[error("invalid historical average rating {value:?} (expected decimal in [1.0,5.0])")]
    InvalidAverageRating { value: String },
    #[error("invalid item card for {item_id}: {reason}")]
    InvalidCard { item_id: ItemId, reason: String },
    #[error("{count} malformed line(s) exceed error budget {budget}; first: {first}")]
    TooManyErrors {
        count: usize,
        budget: usize,
        first: LineIssue,
    },
    #[error("train fraction {value} outside (0,1)")]
    InvalidTrainFraction { value: f64 },
    #[error("cohort bounds invalid: min {min} > max {max}")]
    InvalidCohortBounds { min: usize, max: usize },
}
