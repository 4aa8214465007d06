use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<T> {
    id: ParamId,
    lr: f64,
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam with bias correction over a fixed group of parameters, each with
/// its own learning rate.
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, group: &[(ParamId, f64)], config: AdamConfig) -> Self {
        let slots = group
            .iter()
            .map(|&(id, lr)| {
                let n = store.get(id).value.numel();
                Slot {
                    id,
                    lr,
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                }
            })
            .collect();
        Self {
            config,
            step: 0,
            slots,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().map(|s| s.id)
    }

    /// Applies one update. Parameters without a gradient are skipped; it is
    /// an error for the whole group to lack gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if !self.slots.iter().any(|s| store.get(s.id).grad.is_some()) {
            return Err(TensorError::Usage(
                "adam step requested but no parameter in the group has a gradient".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        for slot in &mut self.slots {
            let p = store.get_mut(slot.id);
            let Some(grad) = p.grad.as_ref() else { continue };
            let step_size = T::of(slot.lr / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            let e = T::of(eps);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(&mut slot.m)
                .zip(&mut slot.v)
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + e);
            }
        }
        Ok(())
    }

    /// Moment buffers as `(name/adam_m, name/adam_v)` entries plus the step
    /// counter under `{group}/adam_t`.
    pub fn state_entries(&self, store: &ParamStore<T>, group: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.slots.len() + 1);
        for s in &self.slots {
            let p = store.get(s.id);
            let shape = p.value.shape();
            out.push((format!("{}/adam_m", p.name), Tensor::new(shape, s.m.clone()).expect("moment shape")));
            out.push((format!("{}/adam_v", p.name), Tensor::new(shape, s.v.clone()).expect("moment shape")));
        }
        out.push((format!("{group}/adam_t"), Tensor::scalar(T::of(self.step as f64))));
        out
    }

    /// Restores state written by [`Adam::state_entries`].
    pub fn load_state(
        &mut self,
        store: &ParamStore<T>,
        group: &str,
        lookup: impl Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        let key = format!("{group}/adam_t");
        let t = lookup(&key)
            .and_then(|t| t.item())
            .ok_or_else(|| TensorError::Format(format!("missing {key}")))?;
        for s in &mut self.slots {
            let p = store.get(s.id);
            for (suffix, buf) in [("adam_m", &mut s.m), ("adam_v", &mut s.v)] {
                let key = format!("{}/{suffix}", p.name);
                let t = lookup(&key).ok_or_else(|| TensorError::Format(format!("missing {key}")))?;
                if t.shape() != p.value.shape() {
                    return Err(TensorError::Format(format!("{key}: shape {:?}", t.shape())));
                }
                *buf = t.into_data();
            }
        }
        self.step = t.as_f64() as u64;
        Ok(())
    }
}
