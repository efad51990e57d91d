//! Bit-exact rendering of the rating prompts (short-term-only and
//! memory-augmented variants) and parsing of rating responses.
//!
//! Templates live as text files with `{name}` placeholders; the rendered
//! output is frozen by golden-file tests, whitespace included. The persona
//! block keeps every quirk of the reference prompts (the bare
//! "social traits:." sentence, doubled periods after trait sentences, the
//! stray `."` after the description, and the trait glosses repeated at the
//! end); none of that is accidental.

use serde::{Deserialize, Serialize};

use crate::corpus::{ItemCard, ItemId, Rating, UserId};
use crate::distill::{EnrichedInteraction, UserProfile};

const SYSTEM_TEMPLATE: &str = include_str!("templates/rating_system.txt");
const TASK_TEMPLATE: &str = include_str!("templates/rating_task.txt");
const PREAMBLE_TEMPLATE: &str = include_str!("templates/memory_preamble.txt");
const ITEM_CARD_TEMPLATE: &str = include_str!("templates/item_card.txt");
const ITEM_SUMMARY_TEMPLATE: &str = include_str!("templates/item_summary.txt");
const MEMORY_BLOCK_TEMPLATE: &str = include_str!("templates/memory_block.txt");

/// Default prompt-size ceiling in characters: a 4092-token context window
/// at the usual ~4 characters per token.
pub const DEFAULT_CHAR_BUDGET: usize = 16368;

/// Which prompt layout to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// Persona block plus the target movie only.
    MsOnly,
    /// Persona block plus retrieved long-term memories, then the target.
    MsMl,
}

/// A fully rendered rating prompt addressed to one (user, item) pair.
/// The persona block goes out as the system message, everything else as
/// the user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPrompt {
    pub system_text: String,
    pub user_text: String,
    pub variant: PromptVariant,
    pub user_id: UserId,
    pub item_id: ItemId,
}

impl RatingPrompt {
    /// System and user text joined the way the golden files record them.
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.user_text)
    }
}

/// Substitutes `{name}` placeholders in a single left-to-right pass, so a
/// substituted value is never re-scanned for further placeholders.
/// Unknown placeholders and stray braces pass through untouched. Template
/// files carry one trailing newline; it is stripped here.
pub(crate) fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let template = template.trim_end_matches('\n');
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if let Some(close) = rest[open..].find('}') {
            let name = &rest[open + 1..open + close];
            if let Some((_, value)) = pairs.iter().find(|(n, _)| *n == name) {
                out.push_str(&rest[..open]);
                out.push_str(value);
                rest = &rest[open + close + 1..];
                continue;
            }
        }
        out.push_str(&rest[..=open]);
        rest = &rest[open + 1..];
    }
    out.push_str(rest);
    out
}

/// Renders the one-line movie card, optionally followed by the SUMMARY
/// line. Numeric fields keep their source precision ("3.74" stays "3.74").
/// A missing summary or cast drops only its own clause; with neither, the
/// SUMMARY line is omitted entirely.
pub fn render_item_card(card: &ItemCard, with_summary: bool) -> String {
    let year = card.release_year.to_string();
    let genres = card.genres.join(", ");
    let line = fill(
        ITEM_CARD_TEMPLATE,
        &[
            ("title", &card.title),
            ("year", &year),
            ("genres", &genres),
            ("avg", card.historical_avg_rating.as_str()),
        ],
    );
    if !with_summary {
        return line;
    }
    let cast = card.cast.join(", ");
    let summary_line = match (!card.summary.is_empty(), !cast.is_empty()) {
        (true, true) => fill(
            ITEM_SUMMARY_TEMPLATE,
            &[("summary", &card.summary), ("cast", &cast)],
        ),
        (true, false) => format!("SUMMARY: {}.", card.summary),
        (false, true) => format!("SUMMARY: The cast of the movie is as follows: {cast}"),
        (false, false) => return line,
    };
    format!("{line}\n{summary_line}")
}

fn render_persona(profile: &UserProfile) -> String {
    fill(
        SYSTEM_TEMPLATE,
        &[
            ("activity", &profile.activity_trait),
            ("conformity", &profile.conformity_trait),
            ("diversity", &profile.diversity_trait),
            ("description", &profile.profile_description),
        ],
    )
}

/// Renders the rating prompt for `card`. Memories arrive in retrieval-rank
/// order (most similar first) and are rendered in that order; each pairs the
/// memory's own item card with the enriched interaction. `MsOnly` ignores
/// them, `MsMl` requires at least one.
pub fn render_rating_prompt(
    profile: &UserProfile,
    card: &ItemCard,
    memories: &[(&ItemCard, &EnrichedInteraction)],
    variant: PromptVariant,
) -> RatingPrompt {
    assert!(
        variant == PromptVariant::MsOnly || !memories.is_empty(),
        "memory-augmented prompts require at least one memory"
    );
    let system_text = render_persona(profile);
    let task = TASK_TEMPLATE.trim_end_matches('\n');
    let target_block = format!("MOVIE: {}", render_item_card(card, true));
    let user_text = match variant {
        PromptVariant::MsOnly => format!("{task}\n\n{target_block}\n\nRATING:"),
        PromptVariant::MsMl => {
            let preamble = PREAMBLE_TEMPLATE.trim_end_matches('\n');
            let blocks: Vec<String> = memories
                .iter()
                .map(|(memory_card, memory)| {
                    fill(
                        MEMORY_BLOCK_TEMPLATE,
                        &[
                            ("movie", &render_item_card(memory_card, false)),
                            ("memory", &memory.memory_text),
                        ],
                    )
                })
                .collect();
            format!(
                "{preamble}\n\nYOUR MEMORIES\n\n{}\n\n{task}\n\n{target_block}\n\nRATING:",
                blocks.join("\n\n")
            )
        }
    };
    RatingPrompt {
        system_text,
        user_text,
        variant,
        user_id: profile.user_id.clone(),
        item_id: card.item_id.clone(),
    }
}

/// Result of rendering under a character budget.
#[derive(Debug, Clone)]
pub struct BudgetOutcome {
    pub prompt: RatingPrompt,
    /// Memories removed from the tail of the rank order.
    pub dropped_memories: usize,
    /// True when the last remaining memory's text had to be cut.
    pub truncated: bool,
    /// True when the prompt still exceeds the budget with nothing left to
    /// shrink (the persona/task/target skeleton alone is too large).
    pub over_budget: bool,
}

/// Renders like [`render_rating_prompt`] but keeps the full prompt within
/// `char_budget` characters: lowest-similarity memories are dropped first
/// (never the top one), then the final memory's text is truncated. A prompt
/// that cannot fit is returned as-is with `over_budget` set.
pub fn render_within_budget(
    profile: &UserProfile,
    card: &ItemCard,
    memories: &[(&ItemCard, &EnrichedInteraction)],
    variant: PromptVariant,
    char_budget: usize,
) -> BudgetOutcome {
    let mut kept: Vec<(&ItemCard, EnrichedInteraction)> = memories
        .iter()
        .map(|(c, m)| (*c, (*m).clone()))
        .collect();
    let mut dropped_memories = 0;
    let mut truncated = false;
    loop {
        let pairs: Vec<(&ItemCard, &EnrichedInteraction)> =
            kept.iter().map(|(c, m)| (*c, m)).collect();
        let prompt = render_rating_prompt(profile, card, &pairs, variant);
        let total = prompt.full_text().chars().count();
        if total <= char_budget {
            return BudgetOutcome {
                prompt,
                dropped_memories,
                truncated,
                over_budget: false,
            };
        }
        if variant == PromptVariant::MsOnly {
            log::warn!(
                "prompt for ({}, {}) is {total} chars against a budget of {char_budget} with no memories to shed",
                profile.user_id,
                card.item_id
            );
            return BudgetOutcome {
                prompt,
                dropped_memories,
                truncated,
                over_budget: true,
            };
        }
        if kept.len() > 1 {
            kept.pop();
            dropped_memories += 1;
            continue;
        }
        let excess = total - char_budget;
        let text = &mut kept[0].1.memory_text;
        let char_count = text.chars().count();
        if char_count == 0 {
            log::warn!(
                "prompt for ({}, {}) exceeds the {char_budget}-char budget even with its memory emptied",
                profile.user_id,
                card.item_id
            );
            return BudgetOutcome {
                prompt,
                dropped_memories,
                truncated,
                over_budget: true,
            };
        }
        *text = text.chars().take(char_count.saturating_sub(excess)).collect();
        truncated = true;
    }
}

/// Digest over every rating-prompt template, recorded in dataset manifests
/// so emitted rows are traceable to exact template text.
pub fn template_digest() -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for text in [
        SYSTEM_TEMPLATE,
        TASK_TEMPLATE,
        PREAMBLE_TEMPLATE,
        ITEM_CARD_TEMPLATE,
        ITEM_SUMMARY_TEMPLATE,
        MEMORY_BLOCK_TEMPLATE,
    ] {
        hasher.update(text.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// A rating response after regex-style extraction. `related` mirrors
/// whether a value was found; unrelated responses feed the
/// unrelated-response-rate metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRating {
    pub value: Option<Rating>,
    pub raw_text: String,
    pub related: bool,
}

/// Extracts the first standalone digit in [1,5]: a digit counts only when
/// neither neighbor is another digit or a decimal point, so "3.74" and
/// "15" contribute nothing. Parsing is total.
pub fn parse_rating(raw: &str) -> ParsedRating {
    let bytes = raw.as_bytes();
    let standalone = |idx: Option<&u8>| match idx {
        None => true,
        Some(&b) => !b.is_ascii_digit() && b != b'.',
    };
    let mut value = None;
    for (i, &b) in bytes.iter().enumerate() {
        if (b'1'..=b'5').contains(&b)
            && standalone(if i == 0 { None } else { bytes.get(i - 1) })
            && standalone(bytes.get(i + 1))
        {
            value = Some(Rating::new(b - b'0').expect("digit in range"));
            break;
        }
    }
    ParsedRating {
        value,
        raw_text: raw.to_string(),
        related: value.is_some(),
    }
}
