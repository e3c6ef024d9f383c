//! Evaluation metrics: top-1 accuracy over emoji-labeled examples and the
//! area under the ROC curve for the emoji-vs-no-emoji decision.

/// One scored example for AUC: higher scores should mean "has emoji".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLabel {
    pub score: f64,
    pub is_positive: bool,
}

/// Fraction of emoji-labeled pairs whose prediction matches the label.
/// Pairs are `(predicted_class, true_label)`; only pairs with
/// `true_label < num_emoji` count, and `None` means there were none.
pub fn accuracy_at_1(pairs: &[(usize, usize)], num_emoji: usize) -> Option<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for &(pred, label) in pairs {
        if label < num_emoji {
            total += 1;
            if pred == label {
                correct += 1;
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Mann-Whitney AUC with midrank tie handling.
///
/// Equals the probability that a uniformly random positive outranks a
/// uniformly random negative, ties counting half. `None` when either class
/// is absent.
pub fn auc_roc(items: &[ScoredLabel]) -> Option<f64> {
    let num_pos = items.iter().filter(|s| s.is_positive).count();
    let num_neg = items.len() - num_pos;
    if num_pos == 0 || num_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[a]
            .score
            .partial_cmp(&items[b].score)
            .expect("finite scores")
    });

    // Walk groups of tied scores; every member gets the group's mean rank.
    let mut rank_sum_pos = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && items[order[end]].score == items[order[start]].score {
            end += 1;
        }
        // 1-based ranks start+1 ..= end have mean (start + end + 1) / 2.
        let midrank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            if items[idx].is_positive {
                rank_sum_pos += midrank;
            }
        }
        start = end;
    }

    let np = num_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Some(u / (np * num_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Brute force: count positive-negative pairs, ties worth one half.
    fn auc_by_pairs(items: &[ScoredLabel]) -> Option<f64> {
        let pos: Vec<f64> = items.iter().filter(|s| s.is_positive).map(|s| s.score).collect();
        let neg: Vec<f64> = items.iter().filter(|s| !s.is_positive).map(|s| s.score).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        Some(wins / (pos.len() * neg.len()) as f64)
    }

    fn scored(pairs: &[(f64, bool)]) -> Vec<ScoredLabel> {
        pairs
            .iter()
            .map(|&(score, is_positive)| ScoredLabel { score, is_positive })
            .collect()
    }

    #[test]
    fn accuracy_counts_only_emoji_labels() {
        // Labels 0..3 are emoji, 3 is UNK. Correct: (1,1), (2,2). Wrong:
        // (0,1). UNK pairs ignored even when "correct".
        let pairs = vec![(1, 1), (2, 2), (0, 1), (3, 3), (0, 3)];
        assert_eq!(accuracy_at_1(&pairs, 3), Some(2.0 / 3.0));
    }

    #[test]
    fn accuracy_none_without_emoji_labels() {
        assert_eq!(accuracy_at_1(&[(0, 5), (1, 5)], 5), None);
        assert_eq!(accuracy_at_1(&[], 4), None);
    }

    #[test]
    fn auc_perfect_and_inverted() {
        let items = scored(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]);
        assert_eq!(auc_roc(&items), Some(1.0));
        let flipped = scored(&[(0.9, false), (0.8, false), (0.2, true), (0.1, true)]);
        assert_eq!(auc_roc(&flipped), Some(0.0));
    }

    #[test]
    fn auc_known_value_with_ties() {
        // Positives: 0.8, 0.5; negatives: 0.5, 0.3.
        // Pairs: (0.8 beats both) = 2, (0.5 vs 0.5) = 0.5, (0.5 vs 0.3) = 1.
        // AUC = 3.5 / 4.
        let items = scored(&[(0.8, true), (0.5, true), (0.5, false), (0.3, false)]);
        assert_eq!(auc_roc(&items), Some(0.875));
    }

    #[test]
    fn auc_all_tied_is_half() {
        let items = scored(&[(0.4, true), (0.4, false), (0.4, true), (0.4, false)]);
        assert_eq!(auc_roc(&items), Some(0.5));
    }

    #[test]
    fn auc_single_class_is_none() {
        assert_eq!(auc_roc(&scored(&[(0.4, true), (0.6, true)])), None);
        assert_eq!(auc_roc(&[]), None);
    }

    #[test]
    fn auc_matches_pair_counting_on_random_instances() {
        let mut rng = crate::seeding::stream(2024, "auc-test", &[]);
        for k in 0..50 {
            let n = rng.random_range(2..200);
            let items: Vec<ScoredLabel> = (0..n)
                .map(|_| ScoredLabel {
                    // Coarse grid forces plenty of ties.
                    score: f64::from(rng.random_range(0..10u32)) / 10.0,
                    is_positive: rng.random_bool(0.4),
                })
                .collect();
            match (auc_roc(&items), auc_by_pairs(&items)) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-9, "instance {k}: {a} vs {b}")
                }
                other => panic!("instance {k}: disagreement {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            raw in proptest::collection::vec((0u32..20, any::<bool>()), 2..60)
        ) {
            let items: Vec<ScoredLabel> = raw
                .iter()
                .map(|&(s, p)| ScoredLabel { score: f64::from(s) / 5.0, is_positive: p })
                .collect();
            let transformed: Vec<ScoredLabel> = items
                .iter()
                .map(|s| ScoredLabel { score: s.score.exp(), is_positive: s.is_positive })
                .collect();
            match (auc_roc(&items), auc_roc(&transformed)) {
                (None, None) => {}
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                other => prop_assert!(false, "disagreement {other:?}"),
            }
        }

        #[test]
        fn auc_label_flip_mirrors(
            raw in proptest::collection::vec((0u32..20, any::<bool>()), 2..60)
        ) {
            let items: Vec<ScoredLabel> = raw
                .iter()
                .map(|&(s, p)| ScoredLabel { score: f64::from(s), is_positive: p })
                .collect();
            let flipped: Vec<ScoredLabel> = items
                .iter()
                .map(|s| ScoredLabel { score: s.score, is_positive: !s.is_positive })
                .collect();
            match (auc_roc(&items), auc_roc(&flipped)) {
                (None, None) => {}
                (Some(a), Some(b)) => prop_assert!((a + b - 1.0).abs() < 1e-12),
                other => prop_assert!(false, "disagreement {other:?}"),
            }
        }
    }
}
