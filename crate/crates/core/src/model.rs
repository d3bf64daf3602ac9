//! Interfaces shared by the trainer and the samplers.

use crate::error::Result;
use crate::tensor::Tensor;

/// Noise level a batch item is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub index: usize,
    pub sigma: f64,
}

/// Anything that maps a batch and per-item noise levels to a same-shape
/// score estimate: the network, analytic toy scores, test oracles.
pub trait ScoreModel: Sync {
    fn score(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<Tensor>;
}

/// A score model with flat parameters and a reverse-mode gradient.
pub trait TrainableScore: ScoreModel {
    type Tape: Send;

    fn forward_taped(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<(Tensor, Self::Tape)>;

    /// Gradient of `<grad_out, score>` with respect to the flat parameters.
    fn backward(&self, tape: Self::Tape, grad_out: &Tensor) -> Vec<f64>;

    fn parameters(&self) -> Vec<f64>;

    fn set_parameters(&mut self, params: &[f64]) -> Result<()>;

    fn num_parameters(&self) -> usize {
        self.parameters().len()
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn score(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<Tensor> {
        (**self).score(x, levels)
    }
}
