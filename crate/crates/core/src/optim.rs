use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Optimizer choice and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adamw {
        #[serde(default = "default_adamw_lr")]
        lr: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
    },
    Rmsprop {
        #[serde(default = "default_rmsprop_lr")]
        lr: f64,
        #[serde(default = "default_rmsprop_alpha")]
        alpha: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_adamw_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-2
}
fn default_rmsprop_lr() -> f64 {
    1e-3
}
fn default_rmsprop_alpha() -> f64 {
    0.99
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        Self::Adamw {
            lr: default_adamw_lr(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn rmsprop() -> Self {
        Self::Rmsprop {
            lr: default_rmsprop_lr(),
            alpha: default_rmsprop_alpha(),
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn build(&self, vars: Vec<Var>) -> Result<Optimizer> {
        Ok(match *self {
            Self::Adamw { lr, weight_decay } => Optimizer::AdamW(AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay,
                    ..ParamsAdamW::default()
                },
            )?),
            Self::Rmsprop {
                lr,
                alpha,
                momentum,
                weight_decay,
            } => Optimizer::RmsProp(RmsProp::new(vars, lr, alpha, momentum, weight_decay)?),
        })
    }
}

pub enum Optimizer {
    AdamW(AdamW),
    RmsProp(RmsProp),
}

impl Optimizer {
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Optimizer::AdamW(o) => o.step(grads)?,
            Optimizer::RmsProp(o) => o.step(grads)?,
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

/// RMSProp with the same update rule as `torch.optim.RMSprop` (non-centered).
pub struct RmsProp {
    vars: Vec<RmsVar>,
    lr: f64,
    alpha: f64,
    momentum: f64,
    weight_decay: f64,
    eps: f64,
}

struct RmsVar {
    var: Var,
    square_avg: Tensor,
    buf: Tensor,
}

impl RmsProp {
    pub fn new(vars: Vec<Var>, lr: f64, alpha: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let vars = vars
            .into_iter()
            .filter(|v| v.dtype().is_float())
            .map(|var| {
                let zeros = var.zeros_like()?;
                Ok(RmsVar {
                    square_avg: zeros.clone(),
                    buf: zeros,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            lr,
            alpha,
            momentum,
            weight_decay,
            eps: 1e-8,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for v in self.vars.iter_mut() {
            let Some(g) = grads.get(&v.var) else { continue };
            let g = if self.weight_decay != 0.0 {
                (g + (v.var.as_tensor() * self.weight_decay)?)?
            } else {
                g.clone()
            };
            v.square_avg = ((&v.square_avg * self.alpha)? + (g.sqr()? * (1.0 - self.alpha))?)?;
            let denom = (v.square_avg.sqrt()? + self.eps)?;
            let update = if self.momentum > 0.0 {
                v.buf = ((&v.buf * self.momentum)? + g.div(&denom)?)?;
                v.buf.clone()
            } else {
                g.div(&denom)?
            };
            v.var.set(&(v.var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}
