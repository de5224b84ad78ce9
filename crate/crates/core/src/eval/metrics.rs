//! Classification metrics: Mann-Whitney AUC (exact, ties count one half),
//! a trapezoidal-ROC cross-check, and macro-averaged precision/recall/F1.

use crate::error::EvalError;

/// AUC as the probability that a random positive outscores a random
/// negative, computed from midranks so tied scores contribute 1/2.
pub fn auc(scored: &[(f64, usize)]) -> Result<f64, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = scored.iter().position(|(s, _)| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let pos = scored.iter().filter(|(_, l)| *l == 1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass(scored.len()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.partial_cmp(&scored[b].0).unwrap());
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &k in &order[i..=j] {
            if scored[k].1 == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// AUC by integrating the ROC curve with the trapezoid rule, sweeping the
/// threshold across distinct scores. Kept as an independent cross-check of
/// the rank-based implementation.
pub fn auc_trapezoid(scored: &[(f64, usize)]) -> Result<f64, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = scored.iter().position(|(s, _)| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let pos = scored.iter().filter(|(_, l)| *l == 1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass(scored.len()));
    }
    let mut sorted: Vec<(f64, usize)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut area = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        for item in &sorted[i..=j] {
            if item.1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j + 1;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match accuracy plus macro-averaged precision, recall, and F1.
/// Classes with no predicted (resp. true) members contribute zero to the
/// macro precision (resp. recall).
pub fn classification_metrics(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<ClassificationMetrics, EvalError> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(EvalError::Empty);
    }
    if let Some(&p) = preds.iter().chain(labels).find(|&&p| p >= n_classes) {
        return Err(EvalError::PredOutOfRange {
            pred: p,
            classes: n_classes,
        });
    }
    let mut confusion = vec![0usize; n_classes * n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l * n_classes + p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c * n_classes + c]).sum();
    let accuracy = correct as f64 / preds.len() as f64;
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for c in 0..n_classes {
        let tp = confusion[c * n_classes + c] as f64;
        let pred_c: usize = (0..n_classes).map(|l| confusion[l * n_classes + c]).sum();
        let true_c: usize = (0..n_classes).map(|p| confusion[c * n_classes + p]).sum();
        let p = if pred_c > 0 { tp / pred_c as f64 } else { 0.0 };
        let r = if true_c > 0 { tp / true_c as f64 } else { 0.0 };
        precision += p;
        recall += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let k = n_classes as f64;
    Ok(ClassificationMetrics {
        accuracy,
        precision: precision / k,
        recall: recall / k,
        f1: f1 / k,
    })
}

/// Fit a one-feature logistic regression on (feature, label) pairs and
/// score a held-out set with it. Returns the held-out AUC. Used as the
/// learnability oracle: if a scalar band-energy probe separates the corpus,
/// the corpus is learnable and any model failure is the model's fault.
pub fn logistic_probe_auc(
    train: &[(f64, usize)],
    test: &[(f64, usize)],
) -> Result<f64, EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean = train.iter().map(|(x, _)| x).sum::<f64>() / train.len() as f64;
    let var = train
        .iter()
        .map(|(x, _)| (x - mean) * (x - mean))
        .sum::<f64>()
        / train.len() as f64;
    let scale = 1.0 / var.sqrt().max(1e-12);
    let (mut w, mut b) = (0.0f64, 0.0f64);
    let lr = 0.5;
    for _ in 0..500 {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (x, y) in train {
            let z = w * (x - mean) * scale + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - *y as f64;
            gw += err * (x - mean) * scale;
            gb += err;
        }
        let n = train.len() as f64;
        w -= lr * gw / n;
        b -= lr * gb / n;
    }
    let scored: Vec<(f64, usize)> = test
        .iter()
        .map(|(x, y)| (w * (x - mean) * scale + b, *y))
        .collect();
    auc(&scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn perfect_separation_is_one() {
        let scored = vec![(0.9, 1), (0.8, 1), (0.3, 0), (0.1, 0)];
        assert_eq!(auc(&scored).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_is_half() {
        let scored = vec![(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)];
        assert_eq!(auc(&scored).unwrap(), 0.5);
    }

    #[test]
    fn worked_pairwise_example() {
        // fakes at 0.9 and 0.4, reals at 0.6 and 0.1: of the four
        // fake-real pairs, three are ordered correctly -> 3/4
        let scored = vec![(0.9, 1), (0.4, 1), (0.6, 0), (0.1, 0)];
        assert_eq!(auc(&scored).unwrap(), 0.75);
        // brute-force pair count oracle
        let fakes = [0.9, 0.4];
        let reals = [0.6, 0.1];
        let mut wins = 0.0;
        for f in fakes {
            for r in reals {
                if f > r {
                    wins += 1.0;
                } else if f == r {
                    wins += 0.5;
                }
            }
        }
        assert_eq!(wins / 4.0, 0.75);
    }

    #[test]
    fn single_class_is_an_error_not_zero() {
        let scored = vec![(0.9, 1), (0.8, 1)];
        assert!(matches!(auc(&scored), Err(EvalError::SingleClass(2))));
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = Rng::from_seed(8);
        let scored: Vec<(f64, usize)> = (0..60)
            .map(|_| (rng.range(-2.0, 2.0), rng.below(2)))
            .collect();
        let a = auc(&scored).unwrap();
        let transformed: Vec<(f64, usize)> = scored
            .iter()
            .map(|(s, l)| (s.exp() * 3.0 + 1.0, *l))
            .collect();
        assert!((auc(&transformed).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn label_flip_complements_without_ties() {
        let mut rng = Rng::from_seed(9);
        // distinct scores so no ties
        let scored: Vec<(f64, usize)> = (0..50)
            .map(|i| (i as f64 + rng.uniform() * 0.5, rng.below(2)))
            .collect();
        if scored.iter().any(|(_, l)| *l == 1) && scored.iter().any(|(_, l)| *l == 0) {
            let flipped: Vec<(f64, usize)> =
                scored.iter().map(|(s, l)| (*s, 1 - *l)).collect();
            let sum = auc(&scored).unwrap() + auc(&flipped).unwrap();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_and_trapezoid_agree_with_ties() {
        let mut rng = Rng::from_seed(10);
        for _ in 0..200 {
            let n = 5 + rng.below(40);
            let scored: Vec<(f64, usize)> = (0..n)
                .map(|_| ((rng.below(12) as f64) / 4.0, rng.below(2)))
                .collect();
            let has_both = scored.iter().any(|(_, l)| *l == 1)
                && scored.iter().any(|(_, l)| *l == 0);
            if has_both {
                let a = auc(&scored).unwrap();
                let b = auc_trapezoid(&scored).unwrap();
                assert!((a - b).abs() < 1e-9, "{a} vs {b} on {scored:?}");
            }
        }
    }

    #[test]
    fn perfect_predictions_metrics() {
        let m = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_binary() {
        let preds = vec![0; 10];
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let m = classification_metrics(&preds, &labels, 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 0.5); // class 0 recall 1, class 1 recall 0
    }

    #[test]
    fn three_class_confusion_hand_computation() {
        // confusion rows (true) x cols (pred): [[2,1,0],[0,2,0],[1,0,3]]
        let labels = vec![0, 0, 0, 1, 1, 2, 2, 2, 2];
        let preds = vec![0, 0, 1, 1, 1, 0, 2, 2, 2];
        let m = classification_metrics(&preds, &labels, 3).unwrap();
        let acc = 7.0 / 9.0;
        // precision per class: 2/3, 2/3, 3/3; recall: 2/3, 2/2, 3/4
        let prec = (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0;
        let rec = (2.0 / 3.0 + 1.0 + 0.75) / 3.0;
        let f1c0 = 2.0 * (2.0 / 3.0) * (2.0 / 3.0) / (4.0 / 3.0);
        let f1c1 = 2.0 * (2.0 / 3.0) * 1.0 / (5.0 / 3.0);
        let f1c2 = 2.0 * 1.0 * 0.75 / 1.75;
        let f1 = (f1c0 + f1c1 + f1c2) / 3.0;
        assert!((m.accuracy - acc).abs() < 1e-12);
        assert!((m.precision - prec).abs() < 1e-12);
        assert!((m.recall - rec).abs() < 1e-12);
        assert!((m.f1 - f1).abs() < 1e-12);
    }

    #[test]
    fn probe_separates_separable_features() {
        let mut rng = Rng::from_seed(11);
        let make = |n: usize, rng: &mut Rng| -> Vec<(f64, usize)> {
            (0..n)
                .map(|_| {
                    let y = rng.below(2);
                    let x = if y == 1 {
                        2.0 + rng.normal() * 0.5
                    } else {
                        rng.normal() * 0.5
                    };
                    (x, y)
                })
                .collect()
        };
        let train = make(200, &mut rng);
        let test = make(100, &mut rng);
        assert!(logistic_probe_auc(&train, &test).unwrap() > 0.95);
    }
}
