//! Softmax, cross-entropy and accuracy over (B, K) logits.

use ndarray::Array2;

/// Row-wise log-softmax with the usual max-subtraction for stability.
pub fn log_softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v -= max;
            sum += v.exp();
        }
        let lse = sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = log_softmax(logits);
    out.mapv_inplace(f32::exp);
    out
}

/// Mean cross-entropy and its gradient wrt the logits.
///
/// Returns `(loss, dlogits, correct)` where `correct` counts argmax hits.
pub fn cross_entropy(logits: &Array2<f32>, targets: &[usize]) -> (f64, Array2<f32>, usize) {
    let b = logits.nrows();
    assert_eq!(b, targets.len(), "one target per row");
    let lsm = log_softmax(logits);
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut dlogits = lsm.mapv(f32::exp);
    let inv_b = 1.0 / b as f32;
    for (i, &t) in targets.iter().enumerate() {
        loss -= lsm[[i, t]] as f64;
        dlogits[[i, t]] -= 1.0;
        let row = logits.row(i);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if pred == t {
            correct += 1;
        }
    }
    dlogits.mapv_inplace(|v| v * inv_b);
    (loss / b as f64, dlogits, correct)
}

/// Fraction of rows whose argmax equals the target, in percent.
pub fn accuracy(logits: &Array2<f32>, targets: &[usize]) -> f64 {
    let (_, _, correct) = cross_entropy(logits, targets);
    100.0 * correct as f64 / targets.len() as f64
}
