use serde::{Deserialize, Serialize};

use super::params::{Dims, Gradients, ModelParams};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer with inverse-time learning-rate decay
/// `lr / (1 + decay * epoch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub decay: f64,
    pub steps: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptState {
    pub fn new(kind: OptimizerKind, lr: f64, decay: f64, dims: Dims) -> Self {
        let n = ModelParams::zeros(dims).len();
        let moments = if kind == OptimizerKind::Adam { n } else { 0 };
        Self {
            kind,
            lr,
            decay,
            steps: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr / (1.0 + self.decay * epoch as f64)
    }

    /// Applies one update in place. Non-finite gradients abort before any
    /// parameter changes.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &Gradients,
        epoch: usize,
    ) -> Result<()> {
        params.check_congruent(grads)?;
        if let Some(i) = grads.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::Optimizer(format!(
                "non-finite gradient entry at index {i}"
            )));
        }
        let lr = self.lr_at(epoch);
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.as_mut_slice().iter_mut().zip(grads.as_slice()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::Shape(
                        "optimizer moments do not match parameters".into(),
                    ));
                }
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params
                    .as_mut_slice()
                    .iter_mut()
                    .zip(grads.as_slice())
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::Layer;

    fn dims() -> Dims {
        Dims::new(8, 1)
    }

    fn single(value: f64) -> ModelParams {
        let mut p = ModelParams::zeros(dims());
        p.layer_mut(Layer::HeadBias)[0] = value;
        p
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut opt = OptState::new(OptimizerKind::Sgd, 0.1, 0.0, dims());
        let mut p = single(1.0);
        opt.step(&mut p, &single(2.0), 0).unwrap();
        assert!((p.layer(Layer::HeadBias)[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_rate() {
        let opt = OptState::new(OptimizerKind::Sgd, 1e-3, 1e-3, dims());
        assert_eq!(opt.lr_at(0), 1e-3);
        assert!((opt.lr_at(10) - 1e-3 / 1.01).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = OptState::new(kind, 0.5, 1e-3, dims());
            let mut p = single(1.5);
            let before = p.clone();
            opt.step(&mut p, &ModelParams::zeros(dims()), 3).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_first_step_is_unit_direction() {
        let mut opt = OptState::new(OptimizerKind::Adam, 1e-3, 0.0, dims());
        let mut p = single(1.0);
        opt.step(&mut p, &single(1.0), 0).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p.layer(Layer::HeadBias)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut opt = OptState::new(OptimizerKind::Adam, 1e-3, 0.0, dims());
        let mut p = single(1.0);
        let before = p.clone();
        assert!(matches!(
            opt.step(&mut p, &single(f64::NAN), 0),
            Err(Error::Optimizer(_))
        ));
        assert_eq!(p, before);
        assert_eq!(opt.steps, 0);
    }
}
