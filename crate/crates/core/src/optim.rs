//! SGD-with-momentum and Adam with decoupled weight decay and per-epoch
//! exponential learning-rate decay.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Multiplier applied to `lr` at every epoch end.
    pub lr_decay: f64,
    pub weight_decay: f64,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, lr_decay: f64, weight_decay: f64, store: &ParamStore) -> Self {
        let first = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self { kind, lr, lr_decay, weight_decay, steps: 0, first, second }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update from the accumulated gradients. Weight decay shrinks
    /// each parameter by `lr * weight_decay` before the gradient update.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let shrink = 1.0 - self.lr * self.weight_decay;
        let lr = self.lr;
        let t = self.steps as f64;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let value = p.value.data_mut();
            let grad = p.grad.data();
            if self.weight_decay != 0.0 {
                value.iter_mut().for_each(|v| *v *= shrink);
            }
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let vel = self.first[i].data_mut();
                    for ((w, g), v) in value.iter_mut().zip(grad).zip(vel.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((w, g), m), v) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.lr_decay;
    }
}
