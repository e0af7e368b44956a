/// Positive-class F1, `2PR / (P + R)`, and 0 when `P + R = 0`.
pub fn f1(predictions: &[bool], labels: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Unweighted mean of the positive-class and negative-class F1.
pub fn macro_f1(predictions: &[bool], labels: &[bool]) -> f64 {
    let inv = |xs: &[bool]| xs.iter().map(|x| !x).collect::<Vec<_>>();
    0.5 * (f1(predictions, labels) + f1(&inv(predictions), &inv(labels)))
}

/// Majority class of a training split; ties go to positive.
pub fn majority_class(train_labels: &[bool]) -> bool {
    let pos = train_labels.iter().filter(|&&l| l).count();
    2 * pos >= train_labels.len()
}

/// F1 of predicting the train-split majority class for every test item.
pub fn naive_baseline(train_labels: &[bool], test_labels: &[bool]) -> f64 {
    let m = majority_class(train_labels);
    f1(&vec![m; test_labels.len()], test_labels)
}

/// Expected F1 of a predictor independent of the labels that marks a
/// fraction `q` of items positive, when a fraction `p` of labels is positive:
/// `2pq / (p + q)`.
pub fn chance_f1(p: f64, q: f64) -> f64 {
    if p + q == 0.0 {
        0.0
    } else {
        2.0 * p * q / (p + q)
    }
}

/// Fraction of `true` values.
pub fn positive_rate(xs: &[bool]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().filter(|&&x| x).count() as f64 / xs.len() as f64
    }
}
