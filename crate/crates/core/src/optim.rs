//! Plain SGD and AdamW with decoupled weight decay.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{GradientSet, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub const fn adamw_default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = *self
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::config("adamw betas must lie in [0, 1)"));
            }
            if !(eps > 0.0) || !(weight_decay >= 0.0) {
                return Err(Error::config("adamw eps must be positive and weight decay non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T = f64> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

/// Optimizer with its per-layer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T = f64> {
    kind: OptimizerKind,
    moments: IndexMap<String, Moments<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ParameterSet<T>) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => IndexMap::new(),
            OptimizerKind::AdamW { .. } => params
                .trainable()
                .map(|(k, t)| {
                    let z = Tensor::zeros(t.shape().to_vec());
                    (
                        k.to_string(),
                        Moments {
                            first: z.clone(),
                            second: z,
                        },
                    )
                })
                .collect(),
        };
        Optimizer {
            kind,
            moments,
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments<T>)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Applies one update in place to the trainable layers of `params`.
    ///
    /// AdamW decay is decoupled: `theta <- theta - lr * (wd * theta + m_hat / (sqrt(v_hat) + eps))`.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &GradientSet<T>, lr: f64) -> Result<()> {
        grads.check_matches(params)?;
        self.steps += 1;
        let lr_t = T::of(lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, g) in grads.iter() {
                    let w = params.get_mut(name).expect("checked");
                    for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv = *wv - lr_t * gv;
                    }
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let one = T::one();
                let bc1 = one - T::of(beta1.powi(self.steps as i32));
                let bc2 = one - T::of(beta2.powi(self.steps as i32));
                let (eps, wd) = (T::of(eps), T::of(weight_decay));
                for (name, g) in grads.iter() {
                    let m = self
                        .moments
                        .get_mut(name)
                        .ok_or_else(|| Error::State(format!("no optimizer moments for `{name}`")))?;
                    let w = params.get_mut(name).expect("checked");
                    let iter = w
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.first.data_mut().iter_mut().zip(m.second.data_mut().iter_mut()));
                    for ((wv, &gv), (mv, vv)) in iter {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *wv = *wv - lr_t * (wd * *wv + m_hat / (v_hat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}
