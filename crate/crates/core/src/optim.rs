//! Plain SGD and Adam with bias-corrected moments.
//!
//! Weight decay is an L2 term added to the gradient before the update.

use crate::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for one parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

fn check(op: &'static str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape {
            op,
            left: p.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    Ok(())
}

/// One Adam update of every tensor in `params`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "adam_step got {} parameters and {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        check("adam_step", p, g)?;
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::Contract("adam state does not match the parameter list".into()));
    }
    for ((p, m), v) in params.iter().zip(&state.m).zip(&state.v) {
        check("adam_step", p, m)?;
        check("adam_step", p, v)?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj + hyper.weight_decay * *w;
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "sgd_step got {} parameters and {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        check("sgd_step", p, g)?;
        for (w, &gj) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (gj + weight_decay * *w);
        }
    }
    Ok(())
}

/// Optimizer chosen by a [`TrainConfig`], applied to a whole model.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64, weight_decay: f64 },
    Adam { hyper: AdamHyper, state: AdamState },
}

impl Optimizer {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
            },
            OptimizerKind::Adam => Optimizer::Adam {
                hyper: AdamHyper {
                    lr: cfg.lr,
                    beta1: cfg.beta1,
                    beta2: cfg.beta2,
                    eps: cfg.eps,
                    weight_decay: cfg.weight_decay,
                },
                state: AdamState::default(),
            },
        }
    }

    /// Updates `params` in place; `grads` follows [`ModelParams::named`] order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        let mut flat: Vec<Tensor> = Vec::new();
        params.for_each_mut(|_, t| flat.push(std::mem::replace(t, Tensor::scalar(0.0))));
        let result = match self {
            Optimizer::Sgd { lr, weight_decay } => sgd_step(&mut flat, grads, *lr, *weight_decay),
            Optimizer::Adam { hyper, state } => adam_step(&mut flat, grads, state, hyper),
        };
        let mut it = flat.into_iter();
        params.for_each_mut(|_, t| *t = it.next().expect("parameter count is fixed"));
        result
    }
}
