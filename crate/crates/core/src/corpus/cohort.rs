//! Seeded selection of the study cohort from the raw interaction log.

use std::collections::BTreeMap;

use super::{CorpusError, InteractionRecord, UserHistory, UserId};
use crate::rng;

/// Outcome of cohort selection.
#[derive(Debug, Clone)]
pub struct CohortSelection {
    /// Selected users, sorted by user id, each with a time-ordered history.
    pub histories: Vec<UserHistory>,
    /// How many users satisfied the interaction-count bounds.
    pub eligible: usize,
    /// How many requested slots went unfilled because the eligible pool was
    /// smaller than the requested cohort size.
    pub shortfall: usize,
}

/// Draws a seeded uniform sample of `cohort_size` users whose interaction
/// counts lie in `[min_interactions, max_interactions]`.
///
/// The eligible pool is ordered by user id before sampling, so the same
/// `(records, bounds, seed)` always yields the same cohort regardless of
/// input record order.
pub fn select_cohort(
    records: &[InteractionRecord],
    min_interactions: usize,
    max_interactions: usize,
    cohort_size: usize,
    seed: u64,
) -> Result<CohortSelection, CorpusError> {
    if min_interactions == 0 || min_interactions > max_interactions {
        return Err(CorpusError::InvalidCohortBounds {
            min: min_interactions,
            max: max_interactions,
        });
    }

    let mut by_user: BTreeMap<UserId, Vec<InteractionRecord>> = BTreeMap::new();
    for record in records {
        by_user
            .entry(record.user_id.clone())
            .or_default()
            .push(record.clone());
    }

    let eligible_users: Vec<(UserId, Vec<InteractionRecord>)> = by_user
        .into_iter()
        .filter(|(_, recs)| (min_interactions..=max_interactions).contains(&recs.len()))
        .collect();
    let eligible = eligible_users.len();

    let take = cohort_size.min(eligible);
    let shortfall = cohort_size - take;

    let mut rng = rng::substream(seed, "cohort");
    let mut picked = rng::sample_indices(&mut rng, eligible, take);
    picked.sort_unstable();

    let histories = picked
        .into_iter()
        .map(|i| {
            let (user_id, interactions) = eligible_users[i].clone();
            UserHistory::new(user_id, interactions)
        })
        .collect();

    Ok(CohortSelection {
        histories,
        eligible,
        shortfall,
    })
}
