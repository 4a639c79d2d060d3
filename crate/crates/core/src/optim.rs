//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{Error, Result};
use crate::model::SynthModel;
use crate::tensor::Real;

const STATE_PREFIX: &str = "optim.velocity.";

/// `v <- mu v + g; p <- p - lr v`, skipping frozen parts of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &SynthModel<T>, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {learning_rate} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("momentum {momentum} outside [0, 1)")));
        }
        let velocity = model
            .params()
            .iter()
            .map(|(_, _, p)| vec![T::zero(); p.len()])
            .collect();
        Ok(Sgd {
            learning_rate,
            momentum,
            velocity,
        })
    }

    /// Applies one update from a gradient buffer produced by
    /// [`SynthModel::backward`].
    pub fn step(&mut self, model: &mut SynthModel<T>, grad: &SynthModel<T>) {
        let lr = T::from_f64_lossy(self.learning_rate);
        let mu = T::from_f64_lossy(self.momentum);
        let trainable: Vec<bool> = model
            .params()
            .iter()
            .map(|(_, part, _)| model.is_trainable(*part))
            .collect();
        for (((_, p), (_, _, g)), (v, train)) in model
            .params_mut()
            .into_iter()
            .zip(grad.params())
            .zip(self.velocity.iter_mut().zip(trainable))
        {
            if !train {
                continue;
            }
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }

    /// Momentum buffers as named tensors for checkpointing.
    pub fn state(&self) -> Vec<(String, &[T])> {
        self.velocity
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("{STATE_PREFIX}{i}"), &v[..]))
            .collect()
    }

    /// Restores buffers written by [`state`](Self::state); entries with other
    /// names are ignored.
    pub fn load_state(&mut self, entries: &[(String, Vec<T>)]) -> Result<()> {
        let mine: Vec<&(String, Vec<T>)> =
            entries.iter().filter(|(n, _)| n.starts_with(STATE_PREFIX)).collect();
        if mine.is_empty() {
            return Ok(());
        }
        if mine.len() != self.velocity.len() {
            return Err(Error::Checkpoint(format!(
                "optimiser state has {} buffers, model needs {}",
                mine.len(),
                self.velocity.len()
            )));
        }
        for (i, ((name, data), v)) in mine.into_iter().zip(self.velocity.iter_mut()).enumerate() {
            if *name != format!("{STATE_PREFIX}{i}") || data.len() != v.len() {
                return Err(Error::Checkpoint(format!("unexpected optimiser entry {name}")));
            }
            v.copy_from_slice(data);
        }
        Ok(())
    }
}
