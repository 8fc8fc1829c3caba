use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Stochastic gradient descent with optional heavy-ball momentum:
/// `v <- momentum * v + grad; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    params: Vec<ParamId>,
    velocity: Vec<Option<Vec<f64>>>,
    steps: u64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            params: Vec::new(),
            velocity: Vec::new(),
            steps: 0,
        })
    }

    pub fn register(&mut self, store: &ParamStore, id: ParamId) -> Result<()> {
        if self.params.contains(&id) {
            return Err(Error::contract(format!(
                "parameter {} registered twice",
                store.get(id).name()
            )));
        }
        if store.is_frozen(id) {
            return Err(Error::contract(format!(
                "parameter {} is frozen",
                store.get(id).name()
            )));
        }
        self.params.push(id);
        self.velocity.push(None);
        Ok(())
    }

    pub fn register_all(
        &mut self,
        store: &ParamStore,
        ids: impl IntoIterator<Item = ParamId>,
    ) -> Result<()> {
        ids.into_iter().try_for_each(|id| self.register(store, id))
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Number of completed `step` calls.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            if store.is_frozen(id) {
                return Err(Error::contract(format!(
                    "parameter {} was frozen after registration",
                    store.get(id).name()
                )));
            }
        }
        for (slot, &id) in self.velocity.iter_mut().zip(&self.params) {
            // Parameters that took no part in this step's graph stay put.
            let Some(grad) = store.take_grad(id) else {
                continue;
            };
            let grad = grad.into_data();
            let update = if self.momentum > 0.0 {
                let v = slot.get_or_insert_with(|| vec![0.0; grad.len()]);
                v.iter_mut()
                    .zip(&grad)
                    .for_each(|(v, g)| *v = self.momentum * *v + g);
                v.clone()
            } else {
                grad
            };
            let value = store.value_mut(id);
            value
                .data_mut()
                .iter_mut()
                .zip(&update)
                .for_each(|(p, u)| *p -= self.lr * u);
        }
        self.steps += 1;
        Ok(())
    }
}
