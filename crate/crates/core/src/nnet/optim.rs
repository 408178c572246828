//! SGD with classical momentum.

use super::tensor::Tensor;

/// Optimizer state: one velocity tensor per parameter, in the same order the
/// owning network lists its parameters.
#[derive(Clone, Debug)]
pub struct SgdmState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdmState {
    pub fn new(learning_rate: f64, momentum: f64, params: &[&Tensor]) -> Self {
        SgdmState {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| p.zeros_like()).collect(),
        }
    }

    /// One update: `v <- mu*v - lr*g; p <- p + v`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), self.velocity.len(), "param count changed");
        assert_eq!(grads.len(), self.velocity.len(), "grad count mismatch");
        for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(self.velocity.iter_mut()) {
            assert_eq!(p.shape(), v.shape(), "velocity shape mismatch");
            v.scale(self.momentum);
            v.add_scaled(g, -self.learning_rate);
            p.add_scaled(v, 1.0);
        }
    }
}
