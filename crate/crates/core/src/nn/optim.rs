use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::net::{DenseNet, Gradients};

/// Adagrad state for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad<T> {
    /// Running sums of squared gradients, in [`Gradients::flat`] order.
    pub accumulators: Vec<T>,
    pub learning_rate: T,
    /// Subtracted from the learning rate at the end of every epoch.
    pub decay: T,
    pub epsilon: T,
}

impl<T: Scalar> Adagrad<T> {
    pub fn new(net: &DenseNet<T>, learning_rate: T, decay: T, epsilon: T) -> Self {
        Self {
            accumulators: vec![T::zero(); net.parameter_count()],
            learning_rate,
            decay,
            epsilon,
        }
    }

    /// `accum += g^2; param -= lr * g / (sqrt(accum) + eps)`.
    pub fn step(&mut self, net: &mut DenseNet<T>, grads: &Gradients<T>) -> Result<()> {
        let flat = grads.flat();
        if flat.len() != self.accumulators.len() || net.parameter_count() != flat.len() {
            return Err(Error::DimensionMismatch {
                expected: self.accumulators.len(),
                got: flat.len(),
            });
        }
        let lr = self.learning_rate;
        for ((param, acc), &g) in net.parameters_mut().zip(self.accumulators.iter_mut()).zip(&flat) {
            if g == T::zero() {
                continue;
            }
            *acc += g * g;
            *param -= lr * g / (acc.sqrt() + self.epsilon);
        }
        Ok(())
    }

    pub fn end_epoch(&mut self) {
        self.learning_rate = (self.learning_rate - self.decay).max(T::zero());
    }
}
