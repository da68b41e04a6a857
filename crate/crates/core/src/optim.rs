//! Adam and the step-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParameterStore};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.01,
            factor: 0.1,
            milestones: vec![],
        }
    }
}

impl LrSchedule {
    /// `base * factor^k` where `k` counts milestones `<= epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.factor.powi(k as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, DenseMatrix>,
    second: BTreeMap<String, DenseMatrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &GradientMap, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            if !params.is_trainable(name) {
                return Err(Error::Invalid(format!("gradient for frozen parameter {name:?}")));
            }
            let value = params.value_mut(name)?;
            if value.shape() != g.shape() {
                return Err(Error::shape("adam", name.to_string()));
            }
            let (rows, cols) = g.shape();
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| DenseMatrix::zeros(rows, cols));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| DenseMatrix::zeros(rows, cols));
            let md = m.data_mut();
            let vd = v.data_mut();
            for (k, (w, &gk)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gk;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = md[k] / c1;
                let vhat = vd[k] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn schedule_steps_at_milestones() {
        let s = LrSchedule {
            base: 0.01,
            factor: 0.1,
            milestones: vec![200],
        };
        assert_eq!(s.rate(199), 0.01);
        assert!((s.rate(200) - 0.001).abs() < 1e-18);
        let none = LrSchedule::default();
        assert_eq!(none.rate(10_000), 0.01);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * g/|g| per coordinate.
        let mut p = ParameterStore::new();
        p.insert("w", DenseMatrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap(), true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&p, "w").unwrap();
        let sq = tape.hadamard(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let mut adam = Adam::default();
        adam.step(&mut p, &grads, 0.1).unwrap();
        let w = p.value("w").unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((w.get(0, 1) + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParameterStore::new();
        p.insert("w", DenseMatrix::filled(2, 2, 3.0), true).unwrap();
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let w = tape.param(&p, "w").unwrap();
            let sq = tape.hadamard(w, w).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            adam.step(&mut p, &grads, 0.05).unwrap();
        }
        assert!(p.value("w").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}
