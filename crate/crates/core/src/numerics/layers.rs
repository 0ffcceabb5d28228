use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Activation, Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// `activation(x · W + b)` with `W: d_in × d_out`, `b: d_out`.
///
/// The layer only holds parameter names; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, activation: Activation) -> Self {
        FeedForward {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            d_in,
            d_out,
            activation,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_uniform(&self.weight, &[self.d_in, self.d_out], self.d_in, rng);
        store.init_uniform(&self.bias, &[self.d_out], self.d_in, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let h = g.matmul(x, w)?;
        let h = g.add_row(h, b)?;
        g.activate(h, self.activation)
    }

    /// Graph-free evaluation.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: in training, zero each entry with probability `rate` and
/// scale survivors by `1/(1−rate)`. Identity in evaluation.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if mode == Mode::Eval || rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?)?;
    g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_replaces_last_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ff = FeedForward::new("ff", 5, 3, Activation::Relu);
        let mut s = ParamStore::new();
        ff.init(&mut s, &mut rng);
        let y = ff.apply(&s, &Tensor::zeros(&[4, 5])).unwrap();
        assert_eq!(y.shape(), &[4, 3]);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ff = FeedForward::new("ff", 16, 4, Activation::Identity);
        let mut s = ParamStore::new();
        ff.init(&mut s, &mut rng);
        let bound = 0.25;
        assert!(s.get("ff.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_unbiased_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 20000], 1.0)).unwrap();
        assert_eq!(dropout(&mut g, x, 0.4, Mode::Eval, &mut rng).unwrap(), x);
        let y = dropout(&mut g, x, 0.4, Mode::Train, &mut rng).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.03);
        assert!(v.iter().all(|x| *x == 0.0 || (*x - 1.0 / 0.6).abs() < 1e-12));
    }
}
