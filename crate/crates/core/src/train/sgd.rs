use crate::error::{shape_err, Result};
use crate::tensor::{ParamStore, Real};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// SGD with classical momentum and weight decay added to the gradient.
///
/// `v <- momentum * v + (g + weight_decay * w)`, `w <- w - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per store entry, empty for non-trainable entries.
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .iter()
            .map(|(_, e)| if e.is_trainable() { vec![T::zero(); e.tensor.numel()] } else { Vec::new() })
            .collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        &self.velocity[index]
    }

    pub fn set_velocity(&mut self, index: usize, v: Vec<T>) -> Result<()> {
        if v.len() != self.velocity[index].len() {
            return Err(shape_err!("velocity {index} has {} values, expected {}", v.len(), self.velocity[index].len()));
        }
        self.velocity[index] = v;
        Ok(())
    }

    /// Applies one update to every trainable parameter that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(shape_err!("optimizer tracks {} tensors, store has {}", self.velocity.len(), store.len()));
        }
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let v = &mut self.velocity[id.index()];
            let p = store.get_mut(id);
            if v.len() != p.numel() {
                return Err(shape_err!("velocity length {} does not match parameter of shape {:?}", v.len(), p.shape()));
            }
            let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
            for ((w, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}
