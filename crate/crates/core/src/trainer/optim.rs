use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr } | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerSpec::Sgd { .. } => OptimizerSpec::Sgd { lr },
            OptimizerSpec::Adam { beta1, beta2, eps, .. } => OptimizerSpec::Adam { lr, beta1, beta2, eps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerSpec::Sgd { lr } => lr > 0.0 && lr.is_finite(),
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers for one parameter slice; empty for SGD.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SliceState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl SliceState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One update of `params` in place.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut SliceState, spec: &OptimizerSpec) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract("parameter and gradient lengths differ"));
    }
    match *spec {
        OptimizerSpec::Sgd { lr } => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
            if state.m.len() != params.len() {
                if state.t != 0 {
                    return Err(Error::contract("optimizer state shape differs from parameters"));
                }
                *state = SliceState::new(params.len());
            }
            state.t += 1;
            let c1 = 1.0 - beta1.powf(state.t as f64);
            let c2 = 1.0 - beta2.powf(state.t as f64);
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let mh = state.m[i] / c1;
                let vh = state.v[i] / c2;
                params[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Optimizer over a fixed list of parameter slices. Inactive slices keep both
/// their values and their moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    states: Vec<SliceState>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, states: Vec::new() })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, active: &[bool]) -> Result<()> {
        if params.len() != grads.len() || params.len() != active.len() {
            return Err(Error::contract("parameter, gradient and mask lists differ in length"));
        }
        if self.states.is_empty() {
            self.states = vec![SliceState::default(); params.len()];
        } else if self.states.len() != params.len() {
            return Err(Error::contract("parameter list changed between optimizer steps"));
        }
        for (((p, g), &on), st) in params.into_iter().zip(grads).zip(active).zip(&mut self.states) {
            if on {
                optimizer_step(p, g, st, &self.spec)?;
            }
        }
        Ok(())
    }
}
