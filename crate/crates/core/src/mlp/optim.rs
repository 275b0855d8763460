use super::{Gradients, MlpModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// `0.5·lr₀·(1 + cos(π·epoch/epochs))`
    Cosine,
    /// `lr₀·factor^(milestones passed)`
    Step { milestones: Vec<usize>, factor: f64 },
}

impl Schedule {
    /// Drops by ten at epochs 80 and 140.
    pub fn step_80_140() -> Self {
        Schedule::Step {
            milestones: vec![80, 140],
            factor: 0.1,
        }
    }
}

pub fn lr_at(schedule: &Schedule, base_lr: f64, epoch: usize, epochs: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::EpochOutOfRange { epoch, epochs });
    }
    Ok(match schedule {
        Schedule::Cosine => {
            0.5 * base_lr * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
        }
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            base_lr * factor.powi(passed as i32)
        }
    })
}

/// Momentum buffers, lazily shaped on the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Option<Gradients>,
}

/// `v ← momentum·v + g + wd·w`, then `w ← w − lr·v`.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    if grads.layers.len() != model.layers().len() {
        return Err(Error::dims(model.layers().len(), grads.layers.len()));
    }
    for (l, g) in model.layers().iter().zip(&grads.layers) {
        if l.weights.shape() != g.weights.shape() || l.bias.len() != g.bias.len() {
            return Err(Error::dims(
                l.weights.as_slice().len(),
                g.weights.as_slice().len(),
            ));
        }
    }
    let velocity = state
        .velocity
        .get_or_insert_with(|| Gradients::zeros_like(model));
    for ((layer, g), v) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        let params = layer
            .weights
            .as_mut_slice()
            .iter_mut()
            .chain(layer.bias.iter_mut());
        let grad = g.weights.as_slice().iter().chain(&g.bias);
        let vel = v.weights.as_mut_slice().iter_mut().chain(v.bias.iter_mut());
        for ((w, &gr), vv) in params.zip(grad).zip(vel) {
            *vv = momentum * *vv + gr + weight_decay * *w;
            *w -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Layer;
    use crate::numerics::{Matrix, RngStream};

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(lr_at(&Schedule::Cosine, 0.1, 0, 100).unwrap(), 0.1);
        assert!((lr_at(&Schedule::Cosine, 0.1, 50, 100).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(
            lr_at(&Schedule::Cosine, 0.1, 100, 100),
            Err(Error::EpochOutOfRange { .. })
        ));
    }

    #[test]
    fn step_schedule_drops_at_80_and_140() {
        let s = Schedule::step_80_140();
        let at = |e| lr_at(&s, 0.1, e, 200).unwrap();
        assert_eq!(at(79), 0.1);
        assert!((at(80) - 0.01).abs() < 1e-15);
        assert!((at(139) - 0.01).abs() < 1e-15);
        assert!((at(140) - 0.001).abs() < 1e-15);
    }

    fn tiny() -> MlpModel {
        let layer = Layer {
            weights: Matrix::from_rows(&[[1.0, -2.0]]).unwrap(),
            bias: vec![0.5],
        };
        MlpModel::new(vec![layer], 0.0).unwrap()
    }

    fn grads(w: [f64; 2], b: f64) -> Gradients {
        Gradients {
            layers: vec![Layer {
                weights: Matrix::from_rows(&[w]).unwrap(),
                bias: vec![b],
            }],
        }
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let mut m = MlpModel::init(2, &[3], 2, 0.0, &mut RngStream::new(0, 0)).unwrap();
        let before = m.clone();
        let mut g = Gradients::zeros_like(&m);
        g.layers[0].bias = vec![1.0; 3];
        sgd_step(&mut m, &g, 0.0, 0.9, 5e-4, &mut SgdState::default()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn plain_gradient_descent_without_momentum_or_decay() {
        let mut m = tiny();
        sgd_step(
            &mut m,
            &grads([1.0, 2.0], -1.0),
            0.1,
            0.0,
            0.0,
            &mut SgdState::default(),
        )
        .unwrap();
        assert_eq!(m.layers()[0].weights.as_slice(), &[0.9, -2.2]);
        assert_eq!(m.layers()[0].bias, vec![0.6]);
    }

    #[test]
    fn two_momentum_steps_match_manual_unroll() {
        let (lr, mu, wd) = (0.1, 0.9, 5e-4);
        let g1 = [0.3, -0.4, 0.2];
        let g2 = [-0.1, 0.5, 0.7];
        let mut m = tiny();
        let mut st = SgdState::default();
        sgd_step(&mut m, &grads([g1[0], g1[1]], g1[2]), lr, mu, wd, &mut st).unwrap();
        sgd_step(&mut m, &grads([g2[0], g2[1]], g2[2]), lr, mu, wd, &mut st).unwrap();

        let w0 = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let v1 = g1[i] + wd * w0[i];
            let w1 = w0[i] - lr * v1;
            let v2 = mu * v1 + g2[i] + wd * w1;
            let w2 = w1 - lr * v2;
            let got = if i < 2 {
                m.layers()[0].weights.as_slice()[i]
            } else {
                m.layers()[0].bias[0]
            };
            assert!((got - w2).abs() < 1e-15, "param {i}");
        }
    }
}
