use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, Real};

/// Mean over all entries of `(out - y)^2`, with its gradient.
pub fn mse<T: Real>(out: &Matrix<T>, y: &Matrix<T>) -> Result<(f64, Matrix<T>)> {
    let diff = out.sub(y)?;
    let n = diff.len().max(1) as f64;
    let loss = diff.as_slice().iter().map(|d| d.as_f64().powi(2)).sum::<f64>() / n;
    let k = T::from_f64(2.0 / n);
    Ok((loss, diff.map(|d| d * k)))
}

/// Mean softmax cross-entropy over columns, with its gradient.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(f64, Matrix<T>)> {
    let (classes, n) = logits.shape();
    if labels.len() != n || labels.iter().any(|&l| l >= classes) {
        return Err(shape_err(
            "cross_entropy",
            format!("{n} labels below {classes}"),
            format!("{} labels", labels.len()),
        ));
    }
    let mut grad = Matrix::zeros(classes, n);
    let mut total = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for (c, &label) in labels.iter().enumerate() {
        let max = (0..classes).map(|r| logits.get(r, c).as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..classes).map(|r| (logits.get(r, c).as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - logits.get(label, c).as_f64();
        for (r, e) in exps.iter().enumerate() {
            let p = e / z - if r == label { 1.0 } else { 0.0 };
            grad.set(r, c, T::from_f64(p * inv_n));
        }
    }
    Ok((total * inv_n, grad))
}
