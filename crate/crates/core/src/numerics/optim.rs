use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::ParamStore;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![1.0, -1.0]));
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut s, &grads);
        let d = s.get("x").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![3.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&s, "x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq).unwrap();
            let grads = g.backward(l).unwrap();
            opt.step(&mut s, &grads);
        }
        assert!(s.get("x").unwrap().data()[0].abs() < 1e-2);
    }
}
