use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second Adam moments per parameter id.
    pub moments: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Real> Optimizer<F> {
    pub fn sgd(lr: f64) -> Optimizer<F> {
        Optimizer { kind: OptimizerKind::Sgd, lr, beta1: 0.0, beta2: 0.0, eps: 0.0, step: 0, moments: Vec::new() }
    }

    pub fn adam(lr: f64) -> Optimizer<F> {
        Optimizer { kind: OptimizerKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    /// Applies one update to every trainable parameter, then clears grads.
    pub fn step(&mut self, params: &mut ParamStore<F>) -> Result<(), NnError> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(NnError::MissingGrad { name: p.name.clone() });
        }
        if self.moments.len() != params.len() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(&p.value.shape), Tensor::zeros(&p.value.shape)))
                .collect();
        }
        self.step += 1;
        let lr = F::from_f64(self.lr);
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let c1 = F::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let c2 = F::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let eps = F::from_f64(self.eps);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in p.value.data.iter_mut().zip(&g.data) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    for (((w, &g), m), v) in
                        p.value.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut())
                    {
                        *m = b1 * *m + (F::ONE - b1) * g;
                        *v = b2 * *v + (F::ONE - b2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}
