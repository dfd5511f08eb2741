//! Stabilized loss arithmetic shared by the public loss API and the
//! differentiation tape, so both sides compute identical values.

use ndarray::Array2;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh-form GELU; smooth everywhere, which keeps finite-difference
/// gradient checks clean.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Mean binary cross-entropy of logits against {0,1} targets, in the
/// log-sum-exp form `max(z,0) - z*t + ln(1 + exp(-|z|))`.
pub(crate) fn bce_with_logits(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets.iter())
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

pub(crate) fn bce_with_logits_grad(logits: &Array2<f64>, targets: &Array2<f64>) -> Array2<f64> {
    let n = logits.len() as f64;
    let mut grad = logits.clone();
    grad.zip_mut_with(targets, |z, &t| *z = (sigmoid(*z) - t) / n);
    grad
}

/// Dice loss per row, `1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`
/// with `p = sigmoid(z)`, averaged over rows.
pub(crate) fn dice_with_logits(logits: &Array2<f64>, targets: &Array2<f64>, eps: f64) -> f64 {
    let rows = logits.nrows();
    let mut total = 0.0;
    for r in 0..rows {
        let mut overlap = 0.0;
        let mut pred_sum = 0.0;
        let mut target_sum = 0.0;
        for c in 0..logits.ncols() {
            let p = sigmoid(logits[(r, c)]);
            let t = targets[(r, c)];
            overlap += p * t;
            pred_sum += p;
            target_sum += t;
        }
        total += 1.0 - (2.0 * overlap + eps) / (pred_sum + target_sum + eps);
    }
    total / rows as f64
}

pub(crate) fn dice_with_logits_grad(
    logits: &Array2<f64>,
    targets: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let rows = logits.nrows();
    let cols = logits.ncols();
    let mut grad = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut overlap = 0.0;
        let mut pred_sum = 0.0;
        let mut target_sum = 0.0;
        for c in 0..cols {
            let p = sigmoid(logits[(r, c)]);
            overlap += p * targets[(r, c)];
            pred_sum += p;
            target_sum += targets[(r, c)];
        }
        let num = 2.0 * overlap + eps;
        let den = pred_sum + target_sum + eps;
        for c in 0..cols {
            let p = sigmoid(logits[(r, c)]);
            // d/dp of (1 - num/den), then through the sigmoid and row mean.
            let dp = (num - 2.0 * targets[(r, c)] * den) / (den * den);
            grad[(r, c)] = dp * p * (1.0 - p) / rows as f64;
        }
    }
    grad
}

/// Mean squared error against fixed targets.
pub(crate) fn mse(pred: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(targets.iter())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

pub(crate) fn mse_grad(pred: &Array2<f64>, targets: &Array2<f64>) -> Array2<f64> {
    let n = pred.len() as f64;
    let mut grad = pred.clone();
    grad.zip_mut_with(targets, |p, &t| *p = 2.0 * (*p - t) / n);
    grad
}
