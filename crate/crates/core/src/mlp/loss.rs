use crate::error::{Error, Result};

/// Classification objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassLoss {
    CrossEntropy,
    /// Cross-entropy on `f / (τ‖f‖)`.
    LogitNorm {
        tau: f64,
    },
}

impl ClassLoss {
    pub fn eval(&self, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        match *self {
            ClassLoss::CrossEntropy => cross_entropy_loss(logits, label),
            ClassLoss::LogitNorm { tau } => {
                // jitter the exact-zero case rather than failing a training step
                match logit_norm_loss(logits, label, tau) {
                    Err(Error::ZeroLogitVector) => {
                        let jittered: Vec<f64> = logits.iter().map(|v| v + 1e-6).collect();
                        logit_norm_loss(&jittered, label, tau)
                    }
                    other => other,
                }
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    // (m − z_y) + ln Σ exp(z_k − m); when z_y is the max the log term is
    // ln(1 + rest), kept accurate for confident predictions
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let loss = if logits[label] == max {
        rest.ln_1p()
    } else {
        (max - logits[label]) + ((logits[label] - max).exp() + rest).ln()
    };
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Cross-entropy on `z = f/(τ‖f‖)`, gradient pulled back through the
/// normalization: `∂L/∂f = (g − (g·f̂)f̂) / (τ‖f‖)` with `f̂ = f/‖f‖`.
pub fn logit_norm_loss(logits: &[f64], label: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let norm = logits.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::ZeroLogitVector);
    }
    let scale = 1.0 / (tau * norm);
    let z: Vec<f64> = logits.iter().map(|v| v * scale).collect();
    let (loss, g) = cross_entropy_loss(&z, label)?;
    let unit: Vec<f64> = logits.iter().map(|v| v / norm).collect();
    let proj: f64 = g.iter().zip(&unit).map(|(a, b)| a * b).sum();
    let grad = g
        .iter()
        .zip(&unit)
        .map(|(gi, ui)| (gi - proj * ui) * scale)
        .collect();
    Ok((loss, grad))
}
