//! Trainable parameters and the Adam optimizer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Identifier of a U-Net block: encoder blocks first, then decoder, then the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u8);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub trainable: bool,
    pub block_id: BlockId,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, block_id: BlockId) -> Self {
        Self {
            name: name.into(),
            tensor,
            grad: None,
            trainable: true,
            block_id,
        }
    }

    /// Record on the tape. Frozen parameters become constant leaves.
    pub fn bind(&self, tape: &mut Tape<T>, want_grad: bool) -> Var {
        tape.leaf(self.tensor.clone(), want_grad && self.trainable)
    }

    /// Add the tape gradient of `var` into this parameter's gradient.
    /// Frozen parameters never accumulate.
    pub fn accumulate_grad(&mut self, tape: &Tape<T>, var: Var) {
        if !self.trainable {
            return;
        }
        let Some(g) = tape.grad(var) else { return };
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params(params: &[Parameter<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Parameter<T>], config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::for_params(params),
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState<T>) -> Self {
        Self { config, state }
    }

    /// One bias-corrected Adam update. Consumes all gradients; frozen
    /// parameters and their moments are left untouched.
    pub fn step(&mut self, params: &mut [Parameter<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.state.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.state.m.len(),
                params.len()
            )));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::from_f64(1.0 - beta1.powi(t));
        let corr2 = T::from_f64(1.0 - beta2.powi(t));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(epsilon);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            if m.len() != g.len() {
                return Err(Error::Shape(format!("optimizer moments for `{}` have the wrong size", p.name)));
            }
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / corr1;
                let vhat = *vi / corr2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn zero_grads<T>(params: &mut [Parameter<T>]) {
    for p in params {
        p.grad = None;
    }
}
