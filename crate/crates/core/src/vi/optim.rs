//! Adam for gradient ascent, with per-entry step counts so that parameters
//! touched only by some minibatches get correctly bias-corrected moments.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Ascent step on every entry.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        let all = [0..params.len()];
        self.step_ranges(params, grad, &all, lr)
    }

    /// Ascent step restricted to `ranges`; other entries and their moments
    /// are left untouched.
    pub fn step_ranges(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        ranges: &[Range<usize>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.len() {
            return Err(Error::dims("optimizer parameters", self.len(), params.len()));
        }
        if grad.len() != self.len() {
            return Err(Error::dims("optimizer gradient", self.len(), grad.len()));
        }
        for r in ranges {
            if r.end > self.len() {
                return Err(Error::invalid("optimizer range out of bounds"));
            }
            for i in r.clone() {
                let g = grad[i];
                self.steps[i] += 1;
                let t = self.steps[i] as i32;
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / (1.0 - self.beta1.powi(t));
                let v_hat = self.v[i] / (1.0 - self.beta2.powi(t));
                params[i] += lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(2);
        let mut x = vec![0.0, 0.0];
        adam.step(&mut x, &[3.0, -0.5], 0.1).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-6);
        assert!((x[1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn maximises_concave_quadratic() {
        let mut adam = Adam::new(1);
        let mut x = vec![5.0];
        for _ in 0..3000 {
            let g = [-(x[0] - 1.5)];
            adam.step(&mut x, &g, 0.05).unwrap();
        }
        assert!((x[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn inactive_entries_untouched() {
        let mut adam = Adam::new(3);
        let mut x = vec![1.0, 1.0, 1.0];
        adam.step_ranges(&mut x, &[1.0, 1.0, 1.0], &[1..2], 0.1).unwrap();
        assert_eq!(x[0], 1.0);
        assert_eq!(x[2], 1.0);
        assert!(x[1] > 1.0);
        assert!(adam.step(&mut x, &[1.0], 0.1).is_err());
    }
}
