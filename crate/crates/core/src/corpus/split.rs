//! Per-user temporal train/test splitting.

use super::{CorpusError, SplitCorpus, UserHistory, UserId};

/// A split corpus plus the users that were too short to split.
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub corpus: SplitCorpus,
    /// Users with fewer than 2 interactions, excluded from both sides.
    pub excluded: Vec<UserId>,
}

/// Splits each user's time-ordered history into an earlier train segment
/// and a later test segment.
///
/// The train side takes `ceil(train_fraction * n)` interactions, clamped to
/// `n - 1` so every split user keeps at least one held-out interaction.
/// Users with fewer than 2 interactions cannot satisfy that and are
/// excluded.
pub fn temporal_split(
    histories: &[UserHistory],
    train_fraction: f64,
) -> Result<SplitResult, CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::InvalidTrainFraction {
            value: train_fraction,
        });
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut excluded = Vec::new();

    for history in histories {
        let n = history.len();
        if n < 2 {
            excluded.push(history.user_id.clone());
            continue;
        }
        // Tolerance absorbs float noise in the product (e.g. 0.07 * 100
        // evaluating just above 7) without changing true fractional cases.
        let raw = train_fraction * n as f64;
        let train_len = ((raw - 1e-9).ceil() as usize).clamp(1, n - 1);

        train.extend_from_slice(&history.interactions[..train_len]);
        test.extend_from_slice(&history.interactions[train_len..]);
    }

    Ok(SplitResult {
        corpus: SplitCorpus {
            train,
            test,
            ratio: train_fraction,
        },
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{InteractionRecord, Rating};
    use proptest::prelude::*;

    fn history(user: &str, n: usize) -> UserHistory {
        let interactions = (0..n)
            .map(|i| InteractionRecord {
                user_id: user.into(),
                item_id: format!("i{i}").as_str().into(),
                rating: Rating::new(3).unwrap(),
                timestamp: i as i64 * 100,
            })
            .collect();
        UserHistory::new(user.into(), interactions)
    }

    #[test]
    fn sixty_forty_on_ten() {
        let result = temporal_split(&[history("u", 10)], 0.6).unwrap();
        assert_eq!(result.corpus.train.len(), 6);
        assert_eq!(result.corpus.test.len(), 4);
    }

    #[test]
    fn ceiling_applies_on_odd_counts() {
        let result = temporal_split(&[history("u", 5)], 0.6).unwrap();
        assert_eq!(result.corpus.train.len(), 3);
        assert_eq!(result.corpus.test.len(), 2);
    }

    #[test]
    fn two_interactions_split_one_and_one() {
        let result = temporal_split(&[history("u", 2)], 0.6).unwrap();
        assert_eq!(result.corpus.train.len(), 1);
        assert_eq!(result.corpus.test.len(), 1);
    }

    #[test]
    fn short_histories_are_excluded() {
        let result = temporal_split(&[history("a", 1), history("b", 3)], 0.6).unwrap();
        assert_eq!(result.excluded, vec![UserId("a".into())]);
        let b = UserId("b".into());
        assert_eq!(result.corpus.train_for(&b).len(), 2);
        assert_eq!(result.corpus.test_for(&b).len(), 1);
        assert!(result.corpus.train_for(&UserId("a".into())).is_empty());
    }

    #[test]
    fn train_precedes_test_in_time() {
        let result = temporal_split(&[history("u", 9)], 0.6).unwrap();
        let user = UserId("u".into());
        let last_train = result.corpus.train_for(&user).last().unwrap().timestamp;
        let first_test = result.corpus.test_for(&user).first().unwrap().timestamp;
        assert!(last_train <= first_test);
    }

    #[test]
    fn bad_fraction_is_rejected() {
        assert!(temporal_split(&[history("u", 4)], 0.0).is_err());
        assert!(temporal_split(&[history("u", 4)], 1.0).is_err());
        assert!(temporal_split(&[history("u", 4)], f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn split_invariants(n in 2usize..300, f in 0.05f64..0.95) {
            let result = temporal_split(&[history("u", n)], f).unwrap();
            let train_len = result.corpus.train.len();
            let test_len = result.corpus.test.len();
            prop_assert_eq!(train_len + test_len, n);
            prop_assert!(train_len >= 1);
            prop_assert!(test_len >= 1);
            // realized ratio stays within one interaction of the target,
            // except when the ceiling had to be clamped to keep a test row
            let realized = train_len as f64 / n as f64;
            let clamped = train_len == n - 1;
            prop_assert!(
                (realized >= f - 1e-9 && realized <= f + 1.0 / n as f64 + 1e-9) || clamped
            );
        }
    }
}
