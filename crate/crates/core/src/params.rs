//! Named parameters, lazy binding onto a tape, and the optimizer.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are never touched by an optimizer step.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            frozen,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.iter().filter(|(_, p)| !p.frozen)
    }

    pub fn trainable_scalars(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.len()).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn scalars_with_prefix(&self, prefix: &str) -> usize {
        self.trainable()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// SHA-256 over names and bit patterns of the selected parameters.
    pub fn checksum(&self, frozen: bool) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.iter().filter(|(_, p)| p.frozen == frozen) {
            h.update(p.name.as_bytes());
            p.value.fingerprint(&mut h);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Binds parameters onto `tape` on first use.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape) -> Bound<'s, 't> {
        Bound {
            store: self,
            tape,
            vars: RefCell::new(vec![None; self.params.len()]),
        }
    }
}

/// Parameters of a [`ParamStore`] materialised on a tape. Trainable
/// parameters become gradient leaves, frozen ones constants.
pub struct Bound<'s, 't> {
    store: &'s ParamStore,
    tape: &'t Tape,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'s, 't> Bound<'s, 't> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), !p.frozen);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if self.store.params[i].frozen {
                    return None;
                }
                v.grad().map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// One update. Frozen parameters and parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut grad_of: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            let p = store.get(*id);
            if p.value.shape() != g.shape() {
                return Err(Error::dim("adamw", p.value.shape(), g.shape()));
            }
            grad_of[id.0] = Some(g);
        }
        for i in 0..store.len() {
            let p = &mut store.params[i];
            let Some(g) = grad_of[i] else { continue };
            if p.frozen {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for j in 0..p.value.len() {
                let gj = g.data()[j];
                let mj = beta1 * m.data()[j] + (1.0 - beta1) * gj;
                let vj = beta2 * v.data()[j] + (1.0 - beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + eps);
                let w = &mut p.value.data_mut()[j];
                *w -= lr * (update + weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Linear warm-up reaching `peak` on the last warm-up step, then cosine
    /// annealing that lands on `floor` at the final step.
    pub fn lr(&self, step: usize) -> f64 {
        let last = self.total_steps.saturating_sub(1);
        let w = self.warmup_steps.min(last);
        if step < w {
            return self.peak * (step + 1) as f64 / w as f64;
        }
        let start = w.saturating_sub(1);
        let span = last.saturating_sub(start).max(1) as f64;
        let progress = ((step - start) as f64 / span).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_hits_peak_and_floor() {
        let s = LrSchedule {
            peak: 1e-4,
            floor: 1e-5,
            warmup_steps: 50,
            total_steps: 500,
        };
        assert!(s.lr(0) < 1e-4 / 10.0);
        assert_eq!(s.lr(49), 1e-4);
        assert!((s.lr(499) - 1e-5).abs() < 1e-18);
        for k in 50..499 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
        let no_warm = LrSchedule {
            warmup_steps: 0,
            ..s
        };
        assert_eq!(no_warm.lr(0), 1e-4);
        assert!((no_warm.lr(499) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn adamw_skips_frozen() {
        let mut store = ParamStore::new();
        let f = store.add("frozen", Tensor::vector(vec![1.0, 2.0]), true);
        let t = store.add("trainable", Tensor::vector(vec![1.0, 2.0]), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let grads = vec![(t, Tensor::vector(vec![1.0, -1.0]))];
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.value(f).data(), &[1.0, 2.0]);
        let v = store.value(t).data();
        assert!(v[0] < 1.0 && v[1] > 2.0 - 0.2);
        assert_eq!(store.trainable_scalars(), 2);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::new();
        let f = store.add("w", Tensor::vector(vec![1.0]), true);
        let before = store.checksum(true);
        store.value_mut(f).data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(before, store.checksum(true));
    }
}
