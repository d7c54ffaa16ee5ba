use hot_core::DenseTensor;

use crate::training::TrainError;

/// Denominator offset of [`smape`].
pub const SMAPE_EPS: f64 = 1e-8;

fn check(pred: &[f64], target: &[f64]) -> Result<(), TrainError> {
    if pred.is_empty() {
        return Err(TrainError::Empty);
    }
    if pred.len() != target.len() {
        return Err(TrainError::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean of `2|p − t| / (|p| + |t| + ε_s)`.
pub fn smape(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    check(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t).abs() / (p.abs() + t.abs() + SMAPE_EPS))
        .sum::<f64>()
        / pred.len() as f64)
}

fn logits_dims(logits: &DenseTensor, labels: &[usize]) -> Result<(usize, usize), TrainError> {
    let (b, c) = match logits.dims() {
        [b, c] => (*b, *c),
        d => return Err(TrainError::Shape(format!("logits must be (B, C), got {d:?}"))),
    };
    if labels.len() != b {
        return Err(TrainError::Shape(format!("{} labels for batch {b}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(TrainError::Shape(format!("label {l} outside 0..{c}")));
    }
    Ok((b, c))
}

/// Row-wise softmax probabilities of `(B, C)` logits.
pub fn softmax_probs(logits: &DenseTensor) -> Vec<f64> {
    let c = logits.dims()[logits.order() - 1];
    logits
        .data()
        .chunks(c)
        .flat_map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            row.iter().map(move |v| (v - max).exp() / total)
        })
        .collect()
}

/// Mean cross-entropy.
pub fn cross_entropy(logits: &DenseTensor, labels: &[usize]) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::Empty);
    }
    let (b, c) = logits_dims(logits, labels)?;
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max - row[l]
        })
        .sum();
    Ok(total / b as f64)
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy(logits: &DenseTensor, labels: &[usize]) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::Empty);
    }
    let (b, c) = logits_dims(logits, labels)?;
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == l
        })
        .count();
    Ok(hits as f64 / b as f64)
}

/// 1-based ranks with ties given their average rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Binary ROC AUC via the Mann–Whitney rank statistic.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64, TrainError> {
    if scores.is_empty() {
        return Err(TrainError::Empty);
    }
    if scores.len() != positive.len() {
        return Err(TrainError::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::Shape("AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    Ok((r_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Macro one-vs-rest AUC of softmax probabilities over the classes present
/// with both outcomes.
pub fn auc_ovr(logits: &DenseTensor, labels: &[usize]) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::Empty);
    }
    let (_, c) = logits_dims(logits, labels)?;
    let probs = softmax_probs(logits);
    let mut total = 0.0;
    let mut used = 0;
    for class in 0..c {
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if positive.iter().all(|&p| p) || !positive.iter().any(|&p| p) {
            continue;
        }
        let scores: Vec<f64> = probs.chunks(c).map(|row| row[class]).collect();
        total += auc(&scores, &positive)?;
        used += 1;
    }
    if used == 0 {
        return Err(TrainError::Shape("AUC needs at least two classes present".into()));
    }
    Ok(total / used as f64)
}
