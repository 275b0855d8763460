//! Virtual outlier synthesis in penultimate-feature space.
//!
//! Per-class Gaussians are fitted to a bank of recent training features.
//! Outliers are the lowest-likelihood `t` of `N_cand` draws from a class
//! Gaussian. ID samples and outliers are separated by a binary
//! cross-entropy on the scaled energy
//! `ES = log(|μ_c| / max(|E|, ε_E))`, where `μ_c` is a running mean of the
//! class's training energies and `E = −logsumexp(logits)`.
//!
//! Energies are normally negative, so the log-ratio is taken on magnitudes.
//! Read literally ([`EnergyConvention::Ratio`]) the loss pushes ID energies
//! below the class running mean in magnitude and outliers above it. The
//! default [`EnergyConvention::Inverse`] uses `log(|E| / |μ_c|)` instead, so
//! ID samples are pushed toward larger `|E|` (higher energy score) and
//! outliers toward smaller. The convention only affects training; the free
//! function [`scaled_energy`] always computes the literal ratio.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, GaussianParams, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct VosConfig {
    /// Candidates drawn per class before keeping the lowest-likelihood tail.
    pub n_candidates: usize,
    /// Features kept per class in the ring buffer.
    pub bank_capacity: usize,
    /// Momentum `m` of the per-class running energy mean.
    pub energy_momentum: f64,
    /// Floor `ε_E` on `|E|` inside the scaled energy.
    pub energy_floor: f64,
    /// Epochs trained with the uncertainty loss disabled.
    pub warmup_epochs: usize,
    /// Orientation of the scaled-energy log-ratio.
    pub convention: EnergyConvention,
}

/// Which way round the scaled-energy log-ratio is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnergyConvention {
    /// `log(|μ_c| / |E|)`: ID samples are pushed below the class mean
    /// magnitude, outliers above it.
    Ratio,
    /// `log(|E| / |μ_c|)`: ID samples are pushed above the class mean
    /// magnitude, outliers below it.
    #[default]
    Inverse,
}

impl EnergyConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            EnergyConvention::Ratio => "ratio",
            EnergyConvention::Inverse => "inverse",
        }
    }

    pub fn scaled(self, energy: f64, class_mean: f64, floor: f64) -> f64 {
        let es = scaled_energy(energy, class_mean, floor);
        match self {
            EnergyConvention::Ratio => es,
            EnergyConvention::Inverse => -es,
        }
    }

    /// `∂ES/∂E` under this convention.
    pub fn grad(self, energy: f64, floor: f64) -> f64 {
        let g = scaled_energy_grad(energy, floor);
        match self {
            EnergyConvention::Ratio => g,
            EnergyConvention::Inverse => -g,
        }
    }
}

impl std::str::FromStr for EnergyConvention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ratio" => Ok(EnergyConvention::Ratio),
            "inverse" => Ok(EnergyConvention::Inverse),
            _ => Err("expected ratio or inverse".into()),
        }
    }
}

impl Default for VosConfig {
    fn default() -> Self {
        VosConfig {
            n_candidates: 10_000,
            bank_capacity: 1000,
            energy_momentum: 0.99,
            energy_floor: 1e-6,
            warmup_epochs: 10,
            convention: EnergyConvention::default(),
        }
    }
}

/// Per-class ring buffer of penultimate features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    capacity: usize,
    dim: usize,
    classes: Vec<VecDeque<Vec<f64>>>,
}

impl FeatureBank {
    pub fn new(num_classes: usize, dim: usize, capacity: usize) -> Self {
        FeatureBank {
            capacity,
            dim,
            classes: vec![VecDeque::with_capacity(capacity); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, label: usize, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::dims(self.dim, feature.len()));
        }
        let classes = self.classes.len();
        let slot = self
            .classes
            .get_mut(label)
            .ok_or(Error::LabelOutOfRange { label, classes })?;
        if slot.len() == self.capacity {
            slot.pop_front();
        }
        if self.capacity > 0 {
            slot.push_back(feature.to_vec());
        }
        Ok(())
    }

    pub fn count(&self, class: usize) -> usize {
        self.classes[class].len()
    }

    pub fn features(&self, class: usize) -> impl Iterator<Item = &[f64]> {
        self.classes[class].iter().map(Vec::as_slice)
    }
}

/// Sample mean and `1/n` covariance per class, ridge-regularized.
pub fn fit_class_gaussians(bank: &FeatureBank) -> Result<Vec<GaussianParams>> {
    let d = bank.dim();
    (0..bank.num_classes())
        .map(|c| {
            let n = bank.count(c);
            if n < d + 1 {
                return Err(Error::InsufficientSamples {
                    class: c,
                    have: n,
                    need: d + 1,
                });
            }
            let mut mean = vec![0.0; d];
            for f in bank.features(c) {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            let mut cov = Matrix::zeros(d, d);
            let mut centered = vec![0.0; d];
            for f in bank.features(c) {
                for ((c, v), m) in centered.iter_mut().zip(f).zip(&mean) {
                    *c = v - m;
                }
                for i in 0..d {
                    let ci = centered[i];
                    let row = &mut cov.row_mut(i)[..=i];
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot += ci * centered[j];
                    }
                }
            }
            for i in 0..d {
                for j in 0..=i {
                    let v = cov[(i, j)] / n as f64;
                    cov[(i, j)] = v;
                    cov[(j, i)] = v;
                }
            }
            GaussianParams::regularized(mean, &cov)
        })
        .collect()
}

/// One virtual-outlier draw: the kept points plus the density of every
/// candidate, so callers can audit the selection.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierDraw {
    /// Kept points in draw order, `t × d`.
    pub features: Matrix,
    /// Indices of the kept candidates, ascending.
    pub kept: Vec<usize>,
    /// `log p` of each of the `n_candidates` candidates.
    pub candidate_logpdf: Vec<f64>,
}

/// Draws `n_candidates` points from `g` and keeps the `t` with the lowest
/// log-density. Ties keep the earlier draw.
///
/// `log p(x)` depends on `x` only through the whitened radius `|z|²`, and for
/// `z ~ N(0, I_d)` the radius `|z|² ~ χ²_d` is independent of the direction
/// `z/|z|`, which is uniform on the sphere. Candidates are therefore drawn
/// radius first; only the kept ones get a direction and are mapped to
/// feature space. The output has the same law as drawing all candidates in
/// full and ranking them.
pub fn draw_virtual_outliers(
    g: &GaussianParams,
    t: usize,
    n_candidates: usize,
    rng: &mut RngStream,
) -> Result<OutlierDraw> {
    if t == 0 || n_candidates < t {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= t <= n_candidates, got t={t}, n_candidates={n_candidates}"
        )));
    }
    let d = g.dim();
    let chi2 = ChiSquared::new(d as f64)
        .map_err(|e| Error::InvalidArgument(format!("chi-square with {d} dof: {e}")))?;
    let radius2: Vec<f64> = (0..n_candidates).map(|_| rng.sample(chi2)).collect();
    let mut kept: Vec<usize> = (0..n_candidates).collect();
    if t < n_candidates {
        kept.select_nth_unstable_by(t - 1, |&a, &b| {
            radius2[b].total_cmp(&radius2[a]).then(a.cmp(&b))
        });
        kept.truncate(t);
    }
    kept.sort_unstable();

    let mut features = Matrix::zeros(t, d);
    let mut z = vec![0.0; d];
    for (row, &i) in kept.iter().enumerate() {
        let norm2 = loop {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n2: f64 = z.iter().map(|v| v * v).sum();
            if n2 > 0.0 {
                break n2;
            }
        };
        let scale = (radius2[i] / norm2).sqrt();
        for v in z.iter_mut() {
            *v *= scale;
        }
        g.transform(&z, features.row_mut(row));
    }
    let candidate_logpdf = radius2
        .iter()
        .map(|&r2| g.logpdf_from_radius2(r2))
        .collect();
    Ok(OutlierDraw {
        features,
        kept,
        candidate_logpdf,
    })
}

/// The kept points of [`draw_virtual_outliers`].
pub fn sample_virtual_outliers(
    g: &GaussianParams,
    t: usize,
    n_candidates: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    Ok(draw_virtual_outliers(g, t, n_candidates, rng)?.features)
}

/// `E = −logsumexp(logits)`
pub fn energy(logits: &[f64]) -> f64 {
    -logsumexp(logits)
}

/// `μ ← m·μ + (1−m)·E`; the first observation initializes `μ = E`.
pub fn update_running_energy_mean(current: Option<f64>, energy: f64, momentum: f64) -> f64 {
    match current {
        None => energy,
        Some(mu) => momentum * mu + (1.0 - momentum) * energy,
    }
}

/// `log(|μ| / max(|E|, floor))`
pub fn scaled_energy(energy: f64, class_mean: f64, floor: f64) -> f64 {
    (class_mean.abs().max(floor) / energy.abs().max(floor)).ln()
}

/// `∂ES/∂E`, zero where the floor is active.
pub fn scaled_energy_grad(energy: f64, floor: f64) -> f64 {
    if energy.abs() > floor {
        -1.0 / energy
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with `σ(ES)` as the ID probability, targets 1
/// for ID and 0 for virtual outliers. Returns the loss and its gradients
/// with respect to each ID and outlier score.
pub fn uncertainty_loss(
    id_scaled: &[f64],
    ood_scaled: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if id_scaled.is_empty() || ood_scaled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = (id_scaled.len() + ood_scaled.len()) as f64;
    let loss = (id_scaled.iter().map(|&s| softplus(-s)).sum::<f64>()
        + ood_scaled.iter().map(|&s| softplus(s)).sum::<f64>())
        / n;
    let id_grad = id_scaled.iter().map(|&s| (sigmoid(s) - 1.0) / n).collect();
    let ood_grad = ood_scaled.iter().map(|&s| sigmoid(s) / n).collect();
    Ok((loss, id_grad, ood_grad))
}

/// Training-time VOS bookkeeping: feature bank, fitted class Gaussians and
/// running energy means.
#[derive(Clone, Debug, PartialEq)]
pub struct VosState {
    pub config: VosConfig,
    bank: FeatureBank,
    gaussians: Vec<GaussianParams>,
    running_means: Vec<Option<f64>>,
}

impl VosState {
    pub fn new(config: VosConfig, num_classes: usize, dim: usize) -> Self {
        let bank = FeatureBank::new(num_classes, dim, config.bank_capacity);
        VosState {
            config,
            bank,
            gaussians: Vec::new(),
            running_means: vec![None; num_classes],
        }
    }

    /// Rebuilds a state from checkpointed parameters; the bank starts empty.
    pub fn from_parts(
        config: VosConfig,
        dim: usize,
        gaussians: Vec<GaussianParams>,
        running_means: Vec<Option<f64>>,
    ) -> Result<Self> {
        let classes = running_means.len();
        if !gaussians.is_empty() && gaussians.len() != classes {
            return Err(Error::dims(classes, gaussians.len()));
        }
        if let Some(g) = gaussians.iter().find(|g| g.dim() != dim) {
            return Err(Error::dims(dim, g.dim()));
        }
        let mut s = VosState::new(config, classes, dim);
        s.gaussians = gaussians;
        s.running_means = running_means;
        Ok(s)
    }

    pub fn num_classes(&self) -> usize {
        self.running_means.len()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn bank(&self) -> &FeatureBank {
        &self.bank
    }

    pub fn gaussians(&self) -> &[GaussianParams] {
        &self.gaussians
    }

    pub fn running_means(&self) -> &[Option<f64>] {
        &self.running_means
    }

    pub fn running_mean(&self, class: usize) -> Option<f64> {
        self.running_means.get(class).copied().flatten()
    }

    pub fn is_fitted(&self) -> bool {
        !self.gaussians.is_empty()
    }

    /// Banks the feature and folds `energy` into the class running mean.
    pub fn observe(&mut self, label: usize, feature: &[f64], energy: f64) -> Result<()> {
        self.bank.push(label, feature)?;
        let m = self.config.energy_momentum;
        let slot = &mut self.running_means[label];
        *slot = Some(update_running_energy_mean(*slot, energy, m));
        Ok(())
    }

    /// Refits the class Gaussians when every class has at least `d+1`
    /// banked features. Returns whether a refit happened.
    pub fn refit(&mut self) -> Result<bool> {
        match fit_class_gaussians(&self.bank) {
            Ok(g) => {
                self.gaussians = g;
                Ok(true)
            }
            Err(Error::InsufficientSamples { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub fn scaled(&self, energy: f64, class: usize) -> f64 {
        let mu = self.running_mean(class).unwrap_or(energy);
        self.config
            .convention
            .scaled(energy, mu, self.config.energy_floor)
    }

    /// `∂ES/∂E` for the configured convention.
    pub fn scaled_grad(&self, energy: f64) -> f64 {
        self.config
            .convention
            .grad(energy, self.config.energy_floor)
    }
}
