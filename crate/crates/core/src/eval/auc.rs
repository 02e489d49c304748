use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Mann–Whitney ROC-AUC; tied scores count one half.
pub fn roc_auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("ROC-AUC needs both classes present"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of one-vs-rest AUCs over the classes present in `labels`.
/// `scores` is `samples × classes`.
pub fn roc_auc_multiclass(scores: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() != labels.len() {
        return Err(Error::shape(scores.nrows(), labels.len()));
    }
    let k = scores.ncols();
    if let Some(l) = labels.iter().find(|l| **l >= k) {
        return Err(Error::invalid(format!("label {l} outside {k} score columns")));
    }
    let mut present = vec![0usize; k];
    labels.iter().for_each(|l| present[*l] += 1);
    if present.iter().filter(|c| **c > 0).count() < 2 {
        return Err(Error::invalid("multiclass ROC-AUC needs at least two classes present"));
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..k {
        if present[c] == 0 {
            log::warn!("class {c} has no positives; skipped in one-vs-rest AUC");
            continue;
        }
        let y: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        let col: Vec<f64> = scores.column(c).to_vec();
        total += roc_auc_binary(&col, &y)?;
        used += 1;
    }
    Ok(total / used as f64)
}
