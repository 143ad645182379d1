//! Small evaluation metrics.

/// Area under the ROC curve via the rank statistic, with tie handling
/// (tied scores contribute half credit). Returns `None` when either class is
/// absent.
pub fn auroc(scored: &[(f64, bool)]) -> Option<f64> {
    let pos = scored.iter().filter(|(_, y)| *y).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted: Vec<&(f64, bool)> = scored.iter().collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    // Sum of positive ranks with average ranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // ranks are 1-based
        for item in &sorted[i..j] {
            if item.1 {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let pos_f = pos as f64;
    let neg_f = neg as f64;
    Some((rank_sum - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg_f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let data = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(auroc(&data), Some(1.0));
    }

    #[test]
    fn inverted_separation() {
        let data = vec![(0.1, true), (0.2, true), (0.8, false), (0.9, false)];
        assert_eq!(auroc(&data), Some(0.0));
    }

    #[test]
    fn all_ties_score_half() {
        let data = vec![(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(auroc(&data), Some(0.5));
    }

    #[test]
    fn hand_worked_case() {
        // pos scores {0.8, 0.4}, neg {0.6, 0.2}: pairs won 3 of 4
        let data = vec![(0.8, true), (0.4, true), (0.6, false), (0.2, false)];
        assert_eq!(auroc(&data), Some(0.75));
    }

    #[test]
    fn degenerate_class_returns_none() {
        assert_eq!(auroc(&[(0.5, true)]), None);
    }
}
