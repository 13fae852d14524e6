//! Training loop: batch order, schedules, optimizer steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::params::{AdamW, LrSchedule};

use super::data::PatchBag;
use super::model::{Model, Prepared};

/// Losses and schedule values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub lambda: f64,
    pub loss: f64,
    pub l_clsf: f64,
    pub l_wps: f64,
    pub l_pen: f64,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: usize,
    train: Vec<Prepared>,
}

impl Trainer {
    pub fn new(model: Model, train: &[&PatchBag]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let prepared = model.prepare_all(train)?;
        let optimizer = AdamW::new(model.cfg.optimizer.clone(), &model.store);
        Ok(Trainer {
            model,
            optimizer,
            step: 0,
            train: prepared,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.train.len() / self.model.cfg.batch_size).max(1)
    }

    pub fn schedule(&self) -> LrSchedule {
        let cfg = &self.model.cfg;
        LrSchedule {
            peak: cfg.lr_peak,
            floor: cfg.lr_floor,
            warmup_steps: cfg.warmup_epochs * self.steps_per_epoch(),
            total_steps: cfg.steps,
        }
    }

    pub fn lambda(&self, step: usize) -> f64 {
        self.model.cfg.lambda_schedule.at(step, self.model.cfg.steps)
    }

    /// Training-set positions of the batch used at `step`. Each epoch is a
    /// fresh permutation drawn from its own stream of the seeded generator.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let b = self.model.cfg.batch_size.min(order.len());
        order[pos * b..(pos + 1) * b].to_vec()
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let lr = self.schedule().lr(step);
        let lambda = self.lambda(step);
        let idx = self.batch_indices(step);
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &self.train[i]).collect();
        let tape = Tape::new();
        let bound = self.model.store.bind(&tape);
        let f = self.model.forward_batch(&bound, &batch, lambda, None)?;
        let record = StepRecord {
            step,
            lr,
            lambda,
            loss: f.loss.item(),
            l_clsf: f.l_clsf.item(),
            l_wps: f.l_wps.item(),
            l_pen: f.l_pen.item(),
        };
        if !record.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "clsf={} wps={} penalty={} lr={lr} lambda={lambda}",
                    record.l_clsf, record.l_wps, record.l_pen
                ),
            });
        }
        tape.backward(f.loss)?;
        let grads = bound.grads();
        drop(bound);
        self.optimizer.step(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(record)
    }

    /// Runs until `cfg.steps` steps are done, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut log = Vec::with_capacity(self.model.cfg.steps.saturating_sub(self.step));
        while self.step < self.model.cfg.steps {
            let r = self.train_step()?;
            if r.step % 50 == 0 {
                log::info!(
                    "step {} loss {:.5} (clsf {:.5}, wps {:.5}, penalty {:.5}) lr {:.2e}",
                    r.step,
                    r.loss,
                    r.l_clsf,
                    r.l_wps,
                    r.l_pen,
                    r.lr
                );
            }
            on_step(self, &r)?;
            log.push(r);
        }
        Ok(log)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atm::ClassGraph;
    use crate::pipeline::config::ModelConfig;
    use crate::pipeline::data::{gen_synthetic_dataset, GenConfig, Split};

    fn trainer(steps: usize) -> Trainer {
        let mut cfg = ModelConfig::micro();
        cfg.steps = steps;
        let gen = GenConfig {
            classes: 6,
            unseen: 1,
            images: 12,
            grid_h: 3,
            grid_w: 3,
            d_in: 16,
            max_pos: 3,
            ..GenConfig::default()
        };
        let s = gen_synthetic_dataset(&gen).unwrap();
        let graph = ClassGraph::isolated(s.vocab.names.clone(), s.vocab.seen_mask.clone());
        let model = Model::new(cfg, s.vocab, graph).unwrap();
        Trainer::new(model, &s.dataset.split(Split::Train)).unwrap()
    }

    #[test]
    fn epochs_cover_every_image_once() {
        let t = trainer(10);
        let spe = t.steps_per_epoch();
        let mut seen: Vec<usize> = (0..spe).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), spe * t.model.cfg.batch_size);
        let epoch = |e: usize| (0..spe).flat_map(|s| t.batch_indices(e * spe + s)).collect::<Vec<_>>();
        assert_ne!(epoch(0), epoch(1));
    }

    #[test]
    fn steps_are_deterministic_and_spare_frozen() {
        let mut a = trainer(6);
        let mut b = trainer(6);
        let frozen = a.model.store.checksum(true);
        let la = a.run(|_, _| Ok(())).unwrap();
        let lb = b.run(|_, _| Ok(())).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.model.store.checksum(false), b.model.store.checksum(false));
        assert_eq!(a.model.store.checksum(true), frozen);
        assert!(la.iter().all(|r| r.loss.is_finite()));
    }
}
