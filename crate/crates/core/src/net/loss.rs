use std::str::FromStr;

use crate::error::{param, Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `½ Σ (target − y)²`, summed over samples.
    Squared,
    /// Softmax over rows, mean negative log-likelihood over columns.
    /// Targets are one-hot columns.
    CrossEntropy,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" | "mse" => Ok(LossKind::Squared),
            "cross-entropy" | "cross_entropy" | "xent" => Ok(LossKind::CrossEntropy),
            other => param(format!("unknown loss '{other}'")),
        }
    }
}

/// Loss value and its gradient with respect to `y`.
pub fn loss(kind: LossKind, y: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if y.shape() != target.shape() {
        return Err(Error::Shape {
            op: "loss",
            lhs: y.shape(),
            rhs: target.shape(),
        });
    }
    match kind {
        LossKind::Squared => {
            let diff = y.sub(target)?;
            let value = 0.5 * diff.as_slice().iter().map(|d| d * d).sum::<f64>();
            Ok((value, diff))
        }
        LossKind::CrossEntropy => {
            let (classes, batch) = y.shape();
            let mut grad = Matrix::zeros(classes, batch);
            let mut total = 0.0;
            for j in 0..batch {
                let max = (0..classes).map(|i| y.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..classes).map(|i| (y.get(i, j) - max).exp()).sum();
                let log_sum = max + sum.ln();
                for i in 0..classes {
                    let t = target.get(i, j);
                    let log_p = y.get(i, j) - log_sum;
                    total -= t * log_p;
                    grad.set(i, j, (log_p.exp() - t) / batch as f64);
                }
            }
            Ok((total / batch as f64, grad))
        }
    }
}

/// One-hot columns for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    if labels.is_empty() {
        return param("no labels");
    }
    let mut m = Matrix::zeros(classes, labels.len());
    for (j, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Schema(format!("label {l} outside [0, {classes})")));
        }
        m.set(l, j, 1.0);
    }
    Ok(m)
}

/// Fraction of columns whose arg-max row matches the one-hot target.
pub fn accuracy(y: &Matrix, target: &Matrix) -> f64 {
    let argmax = |m: &Matrix, j: usize| {
        (0..m.rows())
            .max_by(|&a, &b| m.get(a, j).total_cmp(&m.get(b, j)).then(b.cmp(&a)))
            .unwrap_or(0)
    };
    let hits = (0..y.cols())
        .filter(|&j| argmax(y, j) == argmax(target, j))
        .count();
    hits as f64 / y.cols() as f64
}
