//! Classification metrics: accuracy and ROC AUC.

/// Fraction of predictions matching labels; logits >= 0 count as positive.
pub fn accuracy(logits: &[f32], labels: &[f32]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return 0.0;
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(&l, &y)| (l >= 0.0) == (y >= 0.5))
        .count();
    correct as f64 / logits.len() as f64
}

/// ROC AUC via the rank-sum (Mann-Whitney) statistic with midranks for
/// ties, computed in f64. Returns `None` when only one class is present.
pub fn auc(logits: &[f32], labels: &[f32]) -> Option<f64> {
    assert_eq!(logits.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && logits[order[j + 1]] == logits[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied scores share the mean rank of the run
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] >= 0.5 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}
