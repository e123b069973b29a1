use serde::{Deserialize, Serialize};

use crate::layers::Param;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for the parameters of one stage. Adam moments are
/// created on the first step, one pair per parameter tensor in stage order.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    config: OptimizerConfig,
    step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.moments
    }

    /// Updates every parameter from its accumulated gradient.
    pub fn apply<'a>(&mut self, params: impl Iterator<Item = &'a mut Param<T>>) {
        self.step += 1;
        let c = |v: f64| T::from_f64_lossy(v);
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for p in params {
                    for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w = *w - c(lr) * g;
                    }
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                for (i, p) in params.enumerate() {
                    if self.moments.len() <= i {
                        let zeros = Tensor::zeros(p.value.shape()).expect("parameter shape is valid");
                        self.moments.push((zeros.clone(), zeros));
                    }
                    let (m, v) = &mut self.moments[i];
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                        md[j] = c(beta1) * md[j] + c(1.0 - beta1) * g;
                        vd[j] = c(beta2) * vd[j] + c(1.0 - beta2) * g * g;
                        let m_hat = md[j] / c(bias1);
                        let v_hat = vd[j] / c(bias2);
                        *w = *w - c(lr) * m_hat / (v_hat.sqrt() + c(eps));
                    }
                }
            }
        }
    }
}
