use std::f64::consts::PI;

use super::{ModelParams, Tensor};

/// Plain SGD with a cosine learning-rate schedule stepped once per
/// communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    lr0: f64,
    round: usize,
    total_rounds: usize,
    momentum: Option<f64>,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(lr0: f64, total_rounds: usize) -> Self {
        Self {
            lr0,
            round: 0,
            total_rounds,
            momentum: None,
            velocity: Vec::new(),
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = Some(momentum);
        self
    }

    pub fn base_lr(&self) -> f64 {
        self.lr0
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn total_rounds(&self) -> usize {
        self.total_rounds
    }

    /// `lr0 · ½ · (1 + cos(π t / T))`; `lr0` when `T = 0`.
    pub fn lr(&self) -> f64 {
        if self.total_rounds == 0 {
            return self.lr0;
        }
        let t = self.round.min(self.total_rounds) as f64;
        self.lr0 * 0.5 * (1.0 + (PI * t / self.total_rounds as f64).cos())
    }

    pub fn set_round(&mut self, round: usize) {
        self.round = round.min(self.total_rounds);
    }

    pub fn advance_round(&mut self) {
        self.set_round(self.round + 1);
    }
}

/// `p ← p − lr(t)·g` for every trainable tensor, then zeroes all gradients.
pub fn sgd_step(params: &mut ModelParams, opt: &mut OptimizerState) {
    let lr = opt.lr();
    match opt.momentum {
        None => {
            for t in params.tensors_mut().iter_mut().filter(|t| t.trainable()) {
                let g = t.grad().clone();
                t.value_mut().add_scaled(&g, -lr);
            }
        }
        Some(mu) => {
            if opt.velocity.len() != params.len() {
                opt.velocity = params.tensors().iter().map(|t| Tensor::zeros(t.value().shape())).collect();
            }
            for (t, v) in params.tensors_mut().iter_mut().zip(&mut opt.velocity) {
                if !t.trainable() {
                    continue;
                }
                v.scale(mu);
                v.add_assign(t.grad());
                t.value_mut().add_scaled(v, -lr);
            }
        }
    }
    params.zero_grad();
}
