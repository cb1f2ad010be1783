use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Mean of `per_sample`.
    pub loss: f64,
    /// `(softmax - onehot) / n`.
    pub grad_logits: Matrix,
    pub per_sample: Vec<f64>,
    pub probabilities: Matrix,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Categorical cross-entropy over softmax outputs.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Dimension(format!("label {bad} out of range for {k} classes")));
    }
    let probabilities = softmax_rows(logits);
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = probabilities.clone();
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        // log-sum-exp form keeps saturated rows exact instead of ln(1 - tiny).
        per_sample.push((log_sum - (row[y] - max)).max(0.0));
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    let loss = if n > 0 {
        per_sample.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    Ok(LossOutput {
        loss,
        grad_logits: grad,
        per_sample,
        probabilities,
    })
}
