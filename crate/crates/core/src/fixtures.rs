//! Reference fixtures shared by golden-file tests: the profile and item
//! cards the documented example prompts were built from, plus the rendered
//! prompts themselves.
//!
//! Component texts live under `fixtures/` as files (one trailing newline
//! each), the full prompts under `goldens/`.

use crate::corpus::{AvgRating, ItemCard, Rating};
use crate::distill::{compose_memory_text, EnrichedInteraction, UserProfile};

/// Complete short-term-only rating prompt (system and user text joined by
/// a blank line).
pub const GOLDEN_SHORT_TERM: &str = include_str!("../goldens/rating_prompt_short_term.txt");
/// Complete memory-augmented rating prompt for the same target.
pub const GOLDEN_WITH_MEMORIES: &str = include_str!("../goldens/rating_prompt_with_memories.txt");

fn component(raw: &str) -> String {
    raw.trim_end_matches('\n').to_string()
}

/// The profile behind both golden prompts.
pub fn sample_profile() -> UserProfile {
    UserProfile {
        user_id: "fixture-user".into(),
        activity_trait: component(include_str!("../fixtures/profile_activity.txt")),
        conformity_trait: component(include_str!("../fixtures/profile_conformity.txt")),
        diversity_trait: component(include_str!("../fixtures/profile_diversity.txt")),
        profile_description: component(include_str!("../fixtures/profile_description.txt")),
        embedding: None,
        revision: 1,
        regens: 0,
    }
}

/// Target movie of both golden prompts.
pub fn big_lebowski() -> ItemCard {
    ItemCard {
        item_id: "item-big-lebowski".into(),
        title: "Big Lebowski, The".to_string(),
        release_year: 1998,
        genres: ["Comedy", "Crime", "Mystery", "Thriller"]
            .map(String::from)
            .to_vec(),
        cast: component(include_str!("../fixtures/lebowski_cast.txt"))
            .split(", ")
            .map(String::from)
            .collect(),
        historical_avg_rating: AvgRating::parse("3.74").unwrap(),
        summary: component(include_str!("../fixtures/lebowski_summary.txt")),
    }
}

/// The movie behind the golden prompt's retrieved memory.
pub fn falling_down() -> ItemCard {
    ItemCard {
        item_id: "item-falling-down".into(),
        title: "Falling Down".to_string(),
        release_year: 1993,
        genres: ["Action", "Drama"].map(String::from).to_vec(),
        cast: component(include_str!("../fixtures/falling_down_cast.txt"))
            .split(", ")
            .map(String::from)
            .collect(),
        historical_avg_rating: AvgRating::parse("3.45").unwrap(),
        summary: component(include_str!("../fixtures/falling_down_summary.txt")),
    }
}

/// The retrieved memory in the memory-augmented golden prompt.
pub fn falling_down_memory() -> EnrichedInteraction {
    let card = falling_down();
    let rationale = component(include_str!("../fixtures/falling_down_rationale.txt"));
    EnrichedInteraction {
        user_id: "fixture-user".into(),
        item_id: card.item_id.clone(),
        rating: Rating::new(4).expect("fixture rating"),
        memory_text: compose_memory_text(&card, &rationale),
        embedding: None,
    }
}
