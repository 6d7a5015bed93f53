//! Softmax cross-entropy and classification accuracy.

use ndarray::{Array2, ArrayView2, Axis};

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Mean cross-entropy against integer labels.
///
/// Returns the scalar loss and the logit gradient `(softmax - onehot) / N`,
/// ready to feed a model's backward pass.
pub fn softmax_ce(logits: &ArrayView2<f64>, labels: &[u32]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "one label per row");
    let p = softmax(logits);
    let mut loss = 0.0;
    let mut grad = p;
    for (i, &label) in labels.iter().enumerate() {
        let k = label as usize;
        // p is strictly positive after softmax, so the log is finite.
        loss -= grad[[i, k]].ln();
        grad[[i, k]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n as f64);
    (loss / n as f64, grad)
}

/// Mean cross-entropy against full target distributions (mixed labels from
/// mixup/cutmix are the main customers).
pub fn softmax_ce_soft(logits: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(logits.dim(), targets.dim(), "targets must match logits shape");
    let p = softmax(logits);
    let mut loss = 0.0;
    for i in 0..n {
        for k in 0..logits.ncols() {
            let t = targets[[i, k]];
            if t > 0.0 {
                loss -= t * p[[i, k]].ln();
            }
        }
    }
    let grad = (&p - targets) / n as f64;
    (loss / n as f64, grad)
}

/// Fraction of rows whose argmax equals the label. Ties resolve to the
/// lowest class index, deterministically.
pub fn accuracy(logits: &ArrayView2<f64>, labels: &[u32]) -> f64 {
    let n = logits.nrows();
    assert_eq!(n, labels.len());
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(labels) {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
