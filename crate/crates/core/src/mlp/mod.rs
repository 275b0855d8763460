//! A small fully connected ReLU network with inverted dropout, written out
//! by hand so every gradient can be checked against finite differences.

mod loss;
mod optim;
mod train;

pub use loss::{cross_entropy_loss, logit_norm_loss, softmax, ClassLoss};
pub use optim::{lr_at, sgd_step, Schedule, SgdState};
pub use train::{argmax, train, EpochLog, TrainConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, RngStream};

/// One affine layer, `weights` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    dropout: f64,
}

/// How hidden-layer dropout is applied during a forward pass.
pub enum Mode<'a> {
    /// No masks. Inverted dropout makes this the expectation of the
    /// stochastic pass for each linear unit.
    Deterministic,
    /// Bernoulli(1−p) keep masks, kept units scaled by `1/(1−p)`.
    Stochastic(&'a mut RngStream),
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Input to each layer (`inputs[0]` is `x`, later entries are post-dropout).
    pub inputs: Vec<Vec<f64>>,
    /// Hidden-layer pre-activations.
    pub pre_activations: Vec<Vec<f64>>,
    /// Per hidden layer multiplicative masks (`0` or `1/(1−p)`), only when sampled.
    pub masks: Option<Vec<Vec<f64>>>,
    /// Last hidden activation before dropout, the feature space virtual
    /// outliers live in.
    pub penultimate: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Parameter gradients, one [`Layer`] per model layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(b.weights.as_slice())
            {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    /// Accumulates `scale · (g ⊗ features)` into the output layer only.
    pub fn add_head_outer(&mut self, g: &[f64], features: &[f64], scale: f64) {
        let head = self.layers.last_mut().expect("model has layers");
        for (r, &gr) in g.iter().enumerate() {
            let s = scale * gr;
            for (w, &f) in head.weights.row_mut(r).iter_mut().zip(features) {
                *w += s * f;
            }
            head.bias[r] += s;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.as_slice().iter().all(|&v| v == 0.0) && l.bias.iter().all(|&v| v == 0.0)
        })
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs at least one layer".into(),
            ));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {dropout}"
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dims(pair[0].outputs(), pair[1].inputs()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::dims(l.outputs(), l.bias.len()));
            }
        }
        Ok(MlpModel { layers, dropout })
    }

    /// He-style uniform init `U(±√(6/fan_in))`, zero biases.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    weights: Matrix::new(w[1], w[0], data).expect("sized"),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        MlpModel::new(layers, dropout)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p}")));
        }
        self.dropout = p;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.head().outputs()
    }

    pub fn penultimate_dim(&self) -> usize {
        self.head().inputs()
    }

    pub fn head(&self) -> &Layer {
        self.layers.last().expect("model has layers")
    }

    /// Logits of penultimate-space `features` through the output layer alone.
    pub fn head_logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.penultimate_dim() {
            return Err(Error::dims(self.penultimate_dim(), features.len()));
        }
        Ok(self.head().apply(features))
    }

    pub fn forward(&self, x: &[f64], mode: Mode<'_>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), x.len()));
        }
        let hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(hidden);
        let mut penultimate = x.to_vec();
        let (mut rng, mut masks) = match mode {
            Mode::Stochastic(rng) => (Some(rng), Some(Vec::with_capacity(hidden))),
            Mode::Deterministic => (None, None),
        };
        let keep = 1.0 - self.dropout;
        let mut a = x.to_vec();
        for layer in &self.layers[..hidden] {
            let z = layer.apply(&a);
            let h: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            inputs.push(std::mem::replace(&mut a, h.clone()));
            pre_activations.push(z);
            penultimate = h;
            if let (Some(rng), Some(masks)) = (rng.as_deref_mut(), masks.as_mut()) {
                let mask: Vec<f64> = (0..a.len())
                    .map(|_| {
                        if self.dropout == 0.0 || rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for (v, m) in a.iter_mut().zip(&mask) {
                    *v *= m;
                }
                masks.push(mask);
            }
        }
        let logits = self.head().apply(&a);
        inputs.push(a);
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            masks,
            penultimate,
            logits,
        })
    }

    /// Parameter gradients for upstream `dlogits`, reusing the trace's masks.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<Gradients> {
        self.check_trace(trace)?;
        if dlogits.len() != self.num_classes() {
            return Err(Error::dims(self.num_classes(), dlogits.len()));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = dlogits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let g = &mut grads.layers[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (w, &a) in g.weights.row_mut(r).iter_mut().zip(input) {
                    *w += d * a;
                }
                g.bias[r] += d;
            }
            if l == 0 {
                break;
            }
            // gradient w.r.t. this layer's input, then back through dropout and ReLU
            let mut upstream = vec![0.0; layer.inputs()];
            for (r, &d) in delta.iter().enumerate() {
                for (u, &w) in upstream.iter_mut().zip(layer.weights.row(r)) {
                    *u += d * w;
                }
            }
            if let Some(masks) = &trace.masks {
                for (u, m) in upstream.iter_mut().zip(&masks[l - 1]) {
                    *u *= m;
                }
            }
            for (u, &z) in upstream.iter_mut().zip(&trace.pre_activations[l - 1]) {
                if z <= 0.0 {
                    *u = 0.0;
                }
            }
            delta = upstream;
        }
        Ok(grads)
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let hidden = self.layers.len() - 1;
        if trace.inputs.len() != self.layers.len() || trace.pre_activations.len() != hidden {
            return Err(Error::TraceMismatch(format!(
                "trace has {} layers, model has {}",
                trace.inputs.len(),
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if trace.inputs[l].len() != layer.inputs() {
                return Err(Error::TraceMismatch(format!(
                    "layer {l} input width {} != {}",
                    trace.inputs[l].len(),
                    layer.inputs()
                )));
            }
        }
        if let Some(masks) = &trace.masks {
            if masks.len() != hidden {
                return Err(Error::TraceMismatch("mask count".into()));
            }
        }
        Ok(())
    }
}
