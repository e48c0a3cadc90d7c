//! Stochastic gradient descent with momentum.

use crate::error::{shape_err, Result};

use super::Tensor;

/// `v <- momentum * v + g; p <- p - lr * v`
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Vec<f32>>) {
        self.velocity = v;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f32]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!("{} params but {} grads", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(shape_err!("optimizer state has {} buffers for {} params", self.velocity.len(), params.len()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || v.len() != g.len() {
                return Err(shape_err!("param/grad/velocity lengths {}/{}/{}", p.len(), g.len(), v.len()));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                let d = self.lr * *vv;
                // subtracting a signed zero would flip -0.0 parameters
                if d != 0.0 {
                    *pv -= d;
                }
            }
        }
        Ok(())
    }
}
