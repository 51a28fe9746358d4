use serde::{Deserialize, Serialize};

use super::{EngineError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// A trainable tensor with a fixed shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    pub role: ParamRole,
    pub layer: usize,
}

impl Parameter {
    pub fn new(value: Tensor, role: ParamRole, layer: usize) -> Self {
        Parameter { value, role, layer }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_weight(&self) -> bool {
        self.role == ParamRole::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig { lr, beta1, beta2, eps: 1e-8 }
    }

    fn validate(&self) -> Result<(), EngineError> {
        // lr = 0 is allowed: it freezes the parameters.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(EngineError::InvalidHyperparameter(format!("lr = {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(EngineError::InvalidHyperparameter(format!("{name} = {b}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(EngineError::InvalidHyperparameter(format!("eps = {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment accumulators for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update in place.
    ///
    /// All gradients are validated before anything is modified, so a
    /// non-finite gradient leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [Parameter], grads: &[Tensor], cfg: &AdamConfig) -> Result<(), EngineError> {
        cfg.validate()?;
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(EngineError::ShapeMismatch {
                op: "adam",
                detail: format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len()),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[index].shape() {
                return Err(EngineError::ShapeMismatch {
                    op: "adam",
                    detail: format!("parameter {index}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(EngineError::NonFiniteGradient { index });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let w = p.value.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                w[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
