//! Checkpoint files: `MOWL`, a little-endian u32 version, a u64 manifest
//! length, the JSON manifest, then every tensor as little-endian f32 in
//! manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, StageConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OwlModel, ParamGroup};
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"MOWL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerEntry {
    pub stage: u8,
    pub step: usize,
    pub optimizer_step: u64,
    pub config: StageConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub trainer: Option<TrainerEntry>,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: manifest plus tensor payloads by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Vec<f32>>,
}

const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

pub fn save_checkpoint(path: &Path, model: &OwlModel, vocab: &Vocabulary, trainer: Option<&Trainer>) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, group: &str, shape: Vec<usize>, values: &[f64]| {
        entries.push(TensorEntry {
            name,
            group: group.to_string(),
            shape,
            offset,
        });
        offset += values.len();
        for &v in values {
            payload.extend((v as f32).to_le_bytes());
        }
    };
    for (name, t) in model.params() {
        push(name.clone(), ParamGroup::of(&name).name(), t.shape().to_vec(), &t.data());
    }
    if let Some(tr) = trainer {
        let shapes: BTreeMap<String, Vec<usize>> =
            model.params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for (prefix, moments) in [(M_PREFIX, &tr.opt.m), (V_PREFIX, &tr.opt.v)] {
            for (name, values) in moments {
                let shape = shapes.get(name).cloned().unwrap_or_else(|| vec![values.len()]);
                push(format!("{prefix}{name}"), "optimizer", shape, values);
            }
        }
    }
    let manifest = Manifest {
        model: model.cfg.clone(),
        vocab: vocab.to_lines(),
        trainer: trainer.map(|t| TrainerEntry {
            stage: t.stage,
            step: t.step,
            optimizer_step: t.opt.step,
            config: t.cfg.clone(),
        }),
        tensors: entries,
    };
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + payload.len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text);
    out.extend(payload);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() < len {
            return Err(Error::Format("truncated checkpoint manifest".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::Format(format!("malformed manifest: {e}")))?;
        let payload = &body[len..];
        let mut tensors = BTreeMap::new();
        let mut expected = 0;
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(Error::Format(format!("tensor {} has offset {} (expected {expected})", e.name, e.offset)));
            }
            expected += n;
            let (start, end) = (e.offset * 4, (e.offset + n) * 4);
            if payload.len() < end {
                return Err(Error::Format(format!("truncated payload at tensor {}", e.name)));
            }
            let values = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(e.name.clone(), values).is_some() {
                return Err(Error::Format(format!("duplicate tensor name {}", e.name)));
            }
        }
        if payload.len() != expected * 4 {
            return Err(Error::Format(format!(
                "payload has {} bytes, manifest describes {}",
                payload.len(),
                expected * 4
            )));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_lines(&self.manifest.vocab)
    }

    pub fn has_lora(&self) -> bool {
        self.manifest.tensors.iter().any(|e| e.group == ParamGroup::Lora.name())
    }

    /// Builds a model with the recorded configuration (attaching adapters
    /// when the checkpoint has them) and loads every parameter.
    pub fn build_model(&self) -> Result<OwlModel> {
        let mut model = OwlModel::new(&self.manifest.model, 0)?;
        if self.has_lora() {
            model.attach_lora(0)?;
        }
        self.restore_into(&model)?;
        Ok(model)
    }

    /// Loads parameters into an existing model; its configuration and
    /// parameter set must match the checkpoint exactly.
    pub fn restore_into(&self, model: &OwlModel) -> Result<()> {
        if model.cfg != self.manifest.model {
            let want = serde_json::to_string(&self.manifest.model).expect("config serializes");
            let have = serde_json::to_string(&model.cfg).expect("config serializes");
            return Err(Error::Config(format!("checkpoint config {want} does not match model config {have}")));
        }
        let shapes: BTreeMap<&str, &[usize]> = self
            .manifest
            .tensors
            .iter()
            .filter(|e| e.group != "optimizer")
            .map(|e| (e.name.as_str(), e.shape.as_slice()))
            .collect();
        let params = model.params();
        if params.len() != shapes.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, t) in &params {
            match shapes.get(name.as_str()) {
                Some(s) if *s == t.shape() => {}
                Some(s) => {
                    return Err(Error::Config(format!(
                        "parameter {name}: checkpoint shape {s:?}, model shape {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("parameter {name} missing from checkpoint"))),
            }
        }
        for (name, t) in &params {
            let values: Vec<f64> = self.tensors[name].iter().map(|&v| v as f64).collect();
            t.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    /// The saved trainer state, if the checkpoint was written mid-training.
    pub fn trainer(&self) -> Result<Option<Trainer>> {
        let Some(entry) = &self.manifest.trainer else {
            return Ok(None);
        };
        let mut opt = AdamW::new(entry.config.optim);
        opt.step = entry.optimizer_step;
        for (name, values) in &self.tensors {
            let widen = || values.iter().map(|&v| v as f64).collect();
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                opt.m.insert(p.to_string(), widen());
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                opt.v.insert(p.to_string(), widen());
            }
        }
        let mut t = Trainer::new(entry.stage, &entry.config)?;
        t.opt = opt;
        t.step = entry.step;
        Ok(Some(t))
    }
}
