use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{lr_at, sgd_step, softmax, ClassLoss, Gradients, MlpModel, Mode, Schedule, SgdState};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::vos::{self, VosState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: ClassLoss,
    /// Weight of the uncertainty loss once VOS is active.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr: 0.1,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss: ClassLoss::CrossEntropy,
            beta: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_at(&self.schedule, self.lr, epoch, self.epochs)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 || self.beta < 0.0 {
            return bad("momentum, weight decay and beta must be non-negative");
        }
        if let ClassLoss::LogitNorm { tau } = self.loss {
            if !(tau > 0.0) {
                return bad("tau must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub cls_loss: f64,
    /// Mean uncertainty loss over batches where it was active, else 0.
    pub uncert_loss: f64,
    /// `cls_loss + beta·uncert_loss` for the epoch.
    pub total_loss: f64,
    /// Accuracy of the stochastic training passes.
    pub accuracy: f64,
    pub beta: f64,
    pub vos_active: bool,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,cls_loss,uncert_loss,total_loss,accuracy,beta,vos_active";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.cls_loss,
            self.uncert_loss,
            self.total_loss,
            self.accuracy,
            self.beta,
            u8::from(self.vos_active)
        )
    }
}

/// Mini-batch SGD on `ds`.
///
/// With a [`VosState`], every training feature is banked and its energy
/// folded into the class running mean from the first epoch. After
/// `warmup_epochs` the class Gaussians are refit at the start of each epoch
/// and each batch adds `beta ·` [`vos::uncertainty_loss`] over the batch's
/// ID samples and one virtual outlier per ID sample, drawn from the Gaussian
/// of that sample's class. Outlier gradients reach the output layer only.
pub fn train(
    mut model: MlpModel,
    ds: &LabeledDataset,
    config: &TrainConfig,
    mut vos: Option<&mut VosState>,
) -> Result<(MlpModel, Vec<EpochLog>)> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if ds.dim() != model.input_dim() {
        return Err(Error::dims(model.input_dim(), ds.dim()));
    }
    if ds.num_classes() > model.num_classes() {
        return Err(Error::dims(model.num_classes(), ds.num_classes()));
    }
    if let Some(v) = vos.as_deref() {
        if v.dim() != model.penultimate_dim() || v.num_classes() != model.num_classes() {
            return Err(Error::InvalidArgument(
                "VOS state does not match the model's feature width or class count".into(),
            ));
        }
    }

    let mut rng = RngStream::new(config.seed, 1);
    let outlier_streams = RngStream::new(config.seed, 2);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut sgd = SgdState::default();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch)?;
        let vos_active = match vos.as_deref_mut() {
            Some(v) if config.beta > 0.0 && epoch >= v.config.warmup_epochs => v.refit()?,
            _ => false,
        };
        order.shuffle(&mut rng);

        let (mut cls_sum, mut correct) = (0.0, 0usize);
        let (mut unc_sum, mut unc_batches) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let n = batch.len() as f64;
            let mut traces = Vec::with_capacity(batch.len());
            let mut dlogits = Vec::with_capacity(batch.len());
            let mut energies = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, y) = ds.sample(i);
                let trace = model.forward(x, Mode::Stochastic(&mut rng))?;
                let (loss, mut g) = config.loss.eval(&trace.logits, y)?;
                cls_sum += loss;
                if argmax(&trace.logits) == y {
                    correct += 1;
                }
                for v in &mut g {
                    *v /= n;
                }
                let e = vos::energy(&trace.logits);
                if let Some(v) = vos.as_deref_mut() {
                    v.observe(y, &trace.penultimate, e)?;
                }
                energies.push(e);
                dlogits.push(g);
                traces.push(trace);
            }

            let mut grads = Gradients::zeros_like(&model);
            if let (true, Some(v)) = (vos_active, vos.as_deref()) {
                let labels: Vec<usize> = batch.iter().map(|&i| ds.labels()[i]).collect();
                let id_scaled: Vec<f64> = energies
                    .iter()
                    .zip(&labels)
                    .map(|(&e, &y)| v.scaled(e, y))
                    .collect();
                let outliers = synthesize_outliers(v, &model, &labels, &outlier_streams, step)?;
                let ood_scaled: Vec<f64> = outliers
                    .iter()
                    .map(|o| v.scaled(o.energy, o.class))
                    .collect();
                let (loss, id_grad, ood_grad) = vos::uncertainty_loss(&id_scaled, &ood_scaled)?;
                unc_sum += loss;
                unc_batches += 1;
                for (((g, trace), &e), gs) in
                    dlogits.iter_mut().zip(&traces).zip(&energies).zip(&id_grad)
                {
                    // ∂E/∂logits = −softmax(logits)
                    let coeff = -config.beta * gs * v.scaled_grad(e);
                    for (gi, p) in g.iter_mut().zip(softmax(&trace.logits)) {
                        *gi += coeff * p;
                    }
                }
                for (o, gs) in outliers.iter().zip(&ood_grad) {
                    let coeff = -config.beta * gs * v.scaled_grad(o.energy);
                    grads.add_head_outer(&softmax(&o.logits), &o.feature, coeff);
                }
            }
            for (trace, g) in traces.iter().zip(&dlogits) {
                grads.add_scaled(&model.backward(trace, g)?, 1.0);
            }
            sgd_step(
                &mut model,
                &grads,
                lr,
                config.momentum,
                config.weight_decay,
                &mut sgd,
            )?;
            step += 1;
        }

        let cls_loss = cls_sum / ds.len() as f64;
        let uncert_loss = if unc_batches > 0 {
            unc_sum / unc_batches as f64
        } else {
            0.0
        };
        logs.push(EpochLog {
            epoch,
            lr,
            cls_loss,
            uncert_loss,
            total_loss: cls_loss + config.beta * uncert_loss,
            accuracy: correct as f64 / ds.len() as f64,
            beta: if vos_active { config.beta } else { 0.0 },
            vos_active,
        });
    }
    Ok((model, logs))
}

struct Outlier {
    class: usize,
    feature: Vec<f64>,
    logits: Vec<f64>,
    energy: f64,
}

/// One outlier per ID sample, grouped by class. Each class draws from its
/// own substream so the per-class work can run in parallel.
fn synthesize_outliers(
    state: &VosState,
    model: &MlpModel,
    labels: &[usize],
    streams: &RngStream,
    step: u64,
) -> Result<Vec<Outlier>> {
    let classes = state.num_classes();
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n_cand = state.config.n_candidates;
    let per_class: Vec<Result<Vec<Outlier>>> = counts
        .par_iter()
        .enumerate()
        .map(|(c, &t)| {
            if t == 0 {
                return Ok(Vec::new());
            }
            let mut rng = streams.substream(step * classes as u64 + c as u64);
            let feats =
                vos::sample_virtual_outliers(&state.gaussians()[c], t, n_cand.max(t), &mut rng)?;
            feats
                .iter_rows()
                .map(|f| {
                    let logits = model.head_logits(f)?;
                    Ok(Outlier {
                        class: c,
                        feature: f.to_vec(),
                        energy: vos::energy(&logits),
                        logits,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(labels.len());
    for group in per_class {
        out.extend(group?);
    }
    Ok(out)
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
