use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_step_size(step_size: f64) -> Self {
        Self {
            step_size,
            ..Self::default()
        }
    }
}

/// Moment accumulators for bias-corrected adaptive-moment descent.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the moments by one gradient and returns the descent
    /// increment `α·m̂/(√v̂ + ε)` for each array (to be subtracted).
    pub fn increment(&mut self, grads: &[Matrix]) -> Result<Vec<Matrix>> {
        if grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameter arrays",
                grads.len(),
                self.first.len()
            )));
        }
        for (g, m) in grads.iter().zip(&self.first) {
            if g.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            step_size,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut out = Vec::with_capacity(grads.len());
        for ((g, m), v) in grads.iter().zip(&mut self.first).zip(&mut self.second) {
            let mut inc = Matrix::zeros(g.rows(), g.cols());
            for (((gi, mi), vi), o) in g
                .as_slice()
                .iter()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(inc.as_mut_slice())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *o = step_size * m_hat / (v_hat.sqrt() + epsilon);
            }
            out.push(inc);
        }
        Ok(out)
    }

    /// One descent step applied in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {:?} with gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let incs = self.increment(grads)?;
        for (p, inc) in params.iter_mut().zip(incs) {
            for (pv, iv) in p.as_mut_slice().iter_mut().zip(inc.as_slice()) {
                *pv -= iv;
            }
        }
        Ok(())
    }
}
