//! RMSProp and point-wise weight clipping.

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Direction of an RMSProp update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub decay: f64,
    pub eps: f64,
    /// Running mean of squared gradients, one buffer per parameter; empty
    /// until the first step.
    pub accum: Vec<Tensor>,
}

impl OptimState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            decay: DEFAULT_DECAY,
            eps: DEFAULT_EPS,
            accum: Vec::new(),
        }
    }
}

/// `s ← ρs + (1−ρ)g²`, then `p ← p ± α g / (√s + ε)`.
pub fn rmsprop_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    direction: Direction,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.accum.is_empty() {
        state.accum = params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
    }
    if state.accum.len() != params.len() {
        return Err(contract("optimizer state does not match parameter list"));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(&state.accum) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::Dimension {
                op: "rmsprop_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    let (rho, eps, step) = (state.decay, state.eps, direction.sign() * state.learning_rate);
    for ((p, g), s) in params.iter_mut().zip(grads).zip(state.accum.iter_mut()) {
        for ((pv, &gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
            *sv = rho * *sv + (1.0 - rho) * gv * gv;
            *pv += step * gv / (sv.sqrt() + eps);
        }
    }
    Ok(())
}

/// Clamps every entry into `[−c, c]`.
pub fn clip_params(params: &mut [&mut Tensor], c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(contract(format!("clip bound must be positive, got {c}")));
    }
    for p in params.iter_mut() {
        for v in p.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
    Ok(())
}
