//! Parameter update rules, selectable by name (`adam`, `sgd-momentum`, `sgd`).

use std::fmt::Debug;
use std::sync::OnceLock;

use crate::error::{Result, SpiceError};
use crate::registry::{Registry, StrategySpec};

pub const DEFAULT_ADAM_LR: f64 = 1e-3;
pub const DEFAULT_SGD_LR: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

pub trait Optimizer: Send + Sync + Debug {
    fn name(&self) -> String;
    fn learning_rate(&self) -> f64;
    /// Updates `params` in place from `grads`. Accumulators are sized on first use.
    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()>;
    fn steps(&self) -> u64;
}

fn check_shapes(params: &[f64], grads: &[f64], acc: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(SpiceError::shape(params.len(), grads.len()));
    }
    if !acc.is_empty() && acc.len() != params.len() {
        return Err(SpiceError::shape(acc.len(), params.len()));
    }
    Ok(())
}

/// Heavy-ball SGD: `v ← μv + g`, `θ ← θ − lr·v`. With μ = 0 this is plain SGD.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
    steps: u64,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
            steps: 0,
        }
    }
}

impl Optimizer for SgdMomentum {
    fn name(&self) -> String {
        format!("sgd-momentum:{}", self.lr)
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_shapes(params, grads, &self.velocity)?;
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        self.steps += 1;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> String {
        format!("adam:{}", self.lr)
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_shapes(params, grads, &self.first)?;
        if self.first.is_empty() {
            self.first = vec![0.0; params.len()];
            self.second = vec![0.0; params.len()];
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, m), v), &g) in params
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
            .zip(grads)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

fn positive_lr(lr: Option<f64>, default: f64) -> Result<f64> {
    let lr = lr.unwrap_or(default);
    if lr > 0.0 && lr.is_finite() {
        Ok(lr)
    } else {
        Err(SpiceError::Config(format!("learning rate must be > 0, got {lr}")))
    }
}

pub fn optimizer_registry() -> &'static Registry<dyn Optimizer> {
    static REG: OnceLock<Registry<dyn Optimizer>> = OnceLock::new();
    REG.get_or_init(|| {
        Registry::<dyn Optimizer>::new("optimizer")
            .register("adam", &["adaptive-moments"], "Adam, parameter = learning rate", |lr| {
                Ok(Box::new(Adam::new(positive_lr(lr, DEFAULT_ADAM_LR)?)))
            })
            .register("sgd-momentum", &["momentum"], "SGD with momentum 0.9", |lr| {
                Ok(Box::new(SgdMomentum::new(
                    positive_lr(lr, DEFAULT_SGD_LR)?,
                    DEFAULT_MOMENTUM,
                )))
            })
            .register("sgd", &[], "plain SGD", |lr| {
                Ok(Box::new(SgdMomentum::new(positive_lr(lr, DEFAULT_SGD_LR)?, 0.0)))
            })
    })
}

pub fn make_optimizer(spec: &StrategySpec) -> Result<Box<dyn Optimizer>> {
    optimizer_registry().create(spec)
}
