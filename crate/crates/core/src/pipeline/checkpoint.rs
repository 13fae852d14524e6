//! Single-file checkpoints.
//!
//! Layout: the magic `OVMLRCK1`, a `u32` section count, then sections of
//! `u32` name length, name, `u64` payload length, payload. JSON sections
//! hold the config, vocabulary, graph and scalar state; tensor sections
//! hold a `u32` entry count followed by entries of length-prefixed name,
//! `u32` rank, `u64` dims and little-endian `f64` values. All integers are
//! little-endian. Frozen backbone weights are not stored: they are
//! regenerated from the config seed and checked against the recorded
//! checksum.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atm::ClassGraph;
use crate::error::{Error, Result};
use crate::files::{read_bytes, write_bytes};
use crate::params::{AdamW, ParamId};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::data::{PatchBag, Vocabulary};
use super::model::Model;
use super::train::Trainer;

const MAGIC: &[u8; 8] = b"OVMLRCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    /// Completed optimizer steps.
    pub step: usize,
    pub optimizer_step: u64,
    /// λ used by the last completed step.
    pub lambda: f64,
    pub frozen_checksum: String,
    pub trainable_checksum: String,
}

pub type NamedTensors = Vec<(String, Tensor)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub graph: ClassGraph,
    pub state: CheckpointState,
    pub params: NamedTensors,
    pub adam_m: NamedTensors,
    pub adam_v: NamedTensors,
}

fn moments(model: &Model, m: &[Option<Tensor>]) -> NamedTensors {
    model
        .store
        .trainable()
        .filter_map(|(id, p)| m[id.0].clone().map(|t| (p.name.clone(), t)))
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&AdamW>, step: usize) -> Self {
        let lambda = if step == 0 {
            model.cfg.lambda_schedule.at(0, model.cfg.steps)
        } else {
            model.cfg.lambda_schedule.at(step - 1, model.cfg.steps)
        };
        Checkpoint {
            config: model.cfg.clone(),
            vocab: model.vocab.clone(),
            graph: model.graph.clone(),
            state: CheckpointState {
                step,
                optimizer_step: optimizer.map_or(0, |o| o.step),
                lambda,
                frozen_checksum: model.store.checksum(true),
                trainable_checksum: model.store.checksum(false),
            },
            params: model
                .store
                .trainable()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            adam_m: optimizer.map(|o| moments(model, &o.m)).unwrap_or_default(),
            adam_v: optimizer.map(|o| moments(model, &o.v)).unwrap_or_default(),
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint::from_model(&t.model, Some(&t.optimizer), t.step)
    }

    /// Rebuilds the model and restores the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), self.vocab.clone(), self.graph.clone())?;
        let frozen = model.store.checksum(true);
        if frozen != self.state.frozen_checksum {
            return Err(Error::Contract(format!(
                "regenerated frozen weights do not match the checkpoint (checksum {frozen}, expected {})",
                self.state.frozen_checksum
            )));
        }
        for (name, value) in &self.params {
            let id = lookup(&model, name)?;
            let slot = model.store.value_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::dim("checkpoint", slot.shape(), value.shape()));
            }
            *slot = value.clone();
        }
        if model.store.checksum(false) != self.state.trainable_checksum {
            return Err(Error::Contract("trainable parameters do not match the recorded checksum".into()));
        }
        Ok(model)
    }

    /// Restores a trainer positioned after the stored step.
    pub fn trainer(&self, train: &[&PatchBag]) -> Result<Trainer> {
        let model = self.model()?;
        let mut t = Trainer::new(model, train)?;
        t.step = self.state.step;
        t.optimizer.step = self.state.optimizer_step;
        for (table, slots) in [(&self.adam_m, &mut t.optimizer.m), (&self.adam_v, &mut t.optimizer.v)] {
            for (name, value) in table {
                let id = lookup(&t.model, name)?;
                slots[id.0] = Some(value.clone());
            }
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sections: Vec<(&str, Vec<u8>)> = vec![
            ("config", serde_json::to_vec(&self.config)?),
            ("vocab", serde_json::to_vec(&self.vocab)?),
            ("graph", serde_json::to_vec(&self.graph)?),
            ("state", serde_json::to_vec(&self.state)?),
            ("params", encode_tensors(&self.params)),
            ("adam_m", encode_tensors(&self.adam_m)),
            ("adam_v", encode_tensors(&self.adam_v)),
        ];
        let mut out = MAGIC.to_vec();
        out.extend((sections.len() as u32).to_le_bytes());
        for (name, payload) in sections {
            put_str(&mut out, name);
            out.extend((payload.len() as u64).to_le_bytes());
            out.extend(payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).map_err(&bad)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let count = r.u32().map_err(&bad)?;
        let mut sections = std::collections::HashMap::new();
        for _ in 0..count {
            let name = r.string().map_err(&bad)?;
            let len = r.u64().map_err(&bad)? as usize;
            sections.insert(name, r.take(len).map_err(&bad)?);
        }
        let section = |name: &str| {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| bad(format!("missing section {name:?}")))
        };
        let json = |name: &str| -> Result<serde_json::Value> {
            serde_json::from_slice(section(name)?).map_err(|e| bad(format!("section {name}: {e}")))
        };
        let config = decode_json(json("config")?, "config").map_err(&bad)?;
        let vocab = decode_json(json("vocab")?, "vocab").map_err(&bad)?;
        let graph = decode_json(json("graph")?, "graph").map_err(&bad)?;
        let state = decode_json(json("state")?, "state").map_err(&bad)?;
        let tensors = |name: &str| decode_tensors(section(name)?).map_err(|m| bad(format!("section {name}: {m}")));
        Ok(Checkpoint {
            config,
            vocab,
            graph,
            state,
            params: tensors("params")?,
            adam_m: tensors("adam_m")?,
            adam_v: tensors("adam_v")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&read_bytes(path)?, path)
    }
}

fn lookup(model: &Model, name: &str) -> Result<ParamId> {
    model
        .store
        .id(name)
        .ok_or_else(|| Error::Lookup(format!("checkpoint parameter {name:?} not in model")))
}

fn decode_json<T: serde::de::DeserializeOwned>(v: serde_json::Value, name: &str) -> Result<T, String> {
    serde_json::from_value(v).map_err(|e| format!("section {name}: {e}"))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn encode_tensors(items: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((items.len() as u32).to_le_bytes());
    for (name, t) in items {
        put_str(&mut out, name);
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn decode_tensors(buf: &[u8]) -> Result<NamedTensors, String> {
    let mut r = Reader { buf, pos: 0 };
    let n = r.u32()?;
    let mut items = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        items.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(items)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}
