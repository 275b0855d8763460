//! Monte Carlo dropout inference and the aleatoric metrics computed over
//! the `T` stochastic passes of one input.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mlp::{softmax, MlpModel, Mode};
use crate::numerics::{Matrix, RngStream};
use crate::vos::energy;

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax outputs and energies of `T` passes over one input.
#[derive(Clone, Debug, PartialEq)]
pub struct McSamples {
    probs: Matrix,
    energies: Vec<f64>,
}

impl McSamples {
    pub fn new(probs: Matrix, energies: Vec<f64>) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() == 0 {
            return Err(Error::InvalidArgument(
                "need at least one pass and one class".into(),
            ));
        }
        if energies.len() != probs.rows() {
            return Err(Error::dims(probs.rows(), energies.len()));
        }
        for row in probs.iter_rows() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(
                    "every pass must be a probability vector".into(),
                ));
            }
        }
        Ok(McSamples { probs, energies })
    }

    /// Softmax and energy of each row of a `T × K` logit matrix.
    pub fn from_logits(logits: &Matrix) -> Result<Self> {
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        let mut energies = Vec::with_capacity(logits.rows());
        for (t, row) in logits.iter_rows().enumerate() {
            probs.row_mut(t).copy_from_slice(&softmax(row));
            energies.push(energy(row));
        }
        McSamples::new(probs, energies)
    }

    pub fn passes(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }
}

/// `T` stochastic passes; pass `i` uses `rng.substream(i)`, so the parallel
/// and serial schedules give identical results.
pub fn mc_infer(
    model: &MlpModel,
    x: &[f64],
    passes: usize,
    rng: &RngStream,
    parallel: bool,
) -> Result<McSamples> {
    if passes == 0 {
        return Err(Error::InvalidArgument("need at least one MC pass".into()));
    }
    let one = |i: usize| -> Result<Vec<f64>> {
        let mut stream = rng.substream(i as u64);
        Ok(model.forward(x, Mode::Stochastic(&mut stream))?.logits)
    };
    let rows: Vec<Vec<f64>> = if parallel {
        (0..passes)
            .into_par_iter()
            .map(one)
            .collect::<Result<_>>()?
    } else {
        (0..passes).map(one).collect::<Result<_>>()?
    };
    McSamples::from_logits(&Matrix::from_rows(&rows)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct McSummary {
    pub mean_probs: Vec<f64>,
    pub predicted: usize,
    /// `H(p̂)`
    pub entropy: f64,
    /// `H(p̂) − mean_i H(p_i)`
    pub mutual_info: f64,
    /// `mean_i KL(p̂ ‖ p_i)`
    pub ekl: f64,
    /// Class-averaged predictive variance.
    pub variance: f64,
    pub class_variance: Vec<f64>,
    pub energy_mean: f64,
    pub energy_var: f64,
}

impl McSummary {
    /// Energy-based ID-likeness, `−|mean E|`; higher is more ID-like.
    pub fn energy_score(&self) -> f64 {
        -self.energy_mean.abs()
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(PROB_FLOOR).ln()).sum::<f64>()
}

pub fn summarize(s: &McSamples) -> McSummary {
    let t = s.passes() as f64;
    let k = s.classes();
    let mut mean_probs = vec![0.0; k];
    for row in s.probs.iter_rows() {
        for (m, p) in mean_probs.iter_mut().zip(row) {
            *m += p;
        }
    }
    for m in &mut mean_probs {
        *m /= t;
    }
    let predicted = crate::mlp::argmax(&mean_probs);
    let h_mean = entropy(&mean_probs);
    // H(p̂) − mean_i H(p_i) rewritten as mean_i Σ_k p_ik (ln p_ik − ln p̂_k),
    // which is the same with the floor and has no cancellation
    let ln_mean: Vec<f64> = mean_probs.iter().map(|m| m.max(PROB_FLOOR).ln()).collect();
    let mutual_info = s
        .probs
        .iter_rows()
        .map(|row| {
            row.iter()
                .zip(&ln_mean)
                .map(|(&p, &lm)| p * (p.max(PROB_FLOOR).ln() - lm))
                .sum::<f64>()
        })
        .sum::<f64>()
        / t;
    let ekl = s
        .probs
        .iter_rows()
        .map(|row| {
            mean_probs
                .iter()
                .zip(row)
                .map(|(&m, &p)| m * (m.max(PROB_FLOOR).ln() - p.max(PROB_FLOOR).ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / t;
    let class_variance: Vec<f64> = (0..k)
        .map(|c| {
            s.probs
                .iter_rows()
                .map(|row| (row[c] - mean_probs[c]).powi(2))
                .sum::<f64>()
                / t
        })
        .collect();
    let variance = class_variance.iter().sum::<f64>() / k as f64;
    let energy_mean = s.energies.iter().sum::<f64>() / t;
    let energy_var = s
        .energies
        .iter()
        .map(|e| (e - energy_mean).powi(2))
        .sum::<f64>()
        / t;
    McSummary {
        mean_probs,
        predicted,
        entropy: h_mean,
        // both are ≥ 0 in exact arithmetic; clamp rounding residue
        mutual_info: mutual_info.max(0.0),
        ekl: ekl.max(0.0),
        variance,
        class_variance,
        energy_mean,
        energy_var,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreWeights {
    pub mutual_info: f64,
    pub energy: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            mutual_info: 0.5,
            energy: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreComponent {
    Energy,
    MutualInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedScores {
    pub scores: Vec<f64>,
    /// Components that were constant over the batch and contributed 0.
    pub degenerate: Vec<ScoreComponent>,
}

fn min_max(values: &[f64]) -> Option<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    (span > 0.0).then(|| values.iter().map(|v| (v - lo) / span).collect())
}

/// `w_E·scale(−|Ē|) + w_MI·scale(−MI)` with per-batch min-max scaling;
/// higher means more ID-like.
pub fn combined_scores(summaries: &[McSummary], weights: ScoreWeights) -> Result<CombinedScores> {
    if !(weights.energy.is_finite() && weights.mutual_info.is_finite()) {
        return Err(Error::InvalidArgument(
            "score weights must be finite".into(),
        ));
    }
    let energy: Vec<f64> = summaries.iter().map(McSummary::energy_score).collect();
    let mi: Vec<f64> = summaries.iter().map(|s| -s.mutual_info).collect();
    let mut scores = vec![0.0; summaries.len()];
    let mut degenerate = Vec::new();
    for (component, values, w) in [
        (ScoreComponent::Energy, energy, weights.energy),
        (ScoreComponent::MutualInfo, mi, weights.mutual_info),
    ] {
        match min_max(&values) {
            Some(scaled) => {
                for (s, v) in scores.iter_mut().zip(scaled) {
                    *s += w * v;
                }
            }
            None => degenerate.push(component),
        }
    }
    Ok(CombinedScores { scores, degenerate })
}
