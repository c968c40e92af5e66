use crate::error::{Error, Result};
use crate::models::{Grads, ModelState};
use crate::tensor::Real;

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
///
/// Parameters whose gradient is `None` are left untouched, decay included.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut ModelState<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::numerical("non-finite parameter gradient"));
        }
        let slots = grads.slots();
        let mut params = model.param_slots_mut();
        if slots.len() != params.len() {
            return Err(Error::Shape("gradient layout differs from model".into()));
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![None; params.len()];
        }
        let (mu, wd, lr) = (T::c(self.momentum), T::c(self.weight_decay), T::c(lr));
        for ((p, g), v) in params.iter_mut().zip(slots).zip(self.velocity.iter_mut()) {
            let Some(g) = g else { continue };
            let fresh = v.is_none();
            let v = v.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gi + wd * *pi;
                *vi = if fresh { d } else { mu * *vi + d };
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}
