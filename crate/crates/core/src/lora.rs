//! Low-rank adapters on linear maps: the adapted map is
//! `W + (alpha / r)·B·A` with `A: [r × in]`, `B: [out × r]`.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal, Linear};
use crate::tensor::{kernels, Tensor};

pub const PROJECTIONS: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: vec!["q_proj".into(), "v_proj".into()],
            dropout: 0.0,
        }
    }
}

impl LoraConfig {
    /// Adapters on all four attention maps. A frozen LM that was never
    /// pretrained needs the extra capacity to learn to answer at desk scale.
    pub fn desk() -> Self {
        LoraConfig {
            targets: PROJECTIONS.map(String::from).to_vec(),
            ..LoraConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("lora.alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora.dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora.targets must name at least one projection".into()));
        }
        for t in &self.targets {
            if !PROJECTIONS.contains(&t.as_str()) {
                return Err(Error::Config(format!(
                    "lora.targets: unknown projection {t:?} (expected one of {PROJECTIONS:?})"
                )));
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A trainable rank-`r` factor pair attached to one linear map.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
    pub dropout: f64,
    dropout_rng: Arc<Mutex<Option<ChaCha8Rng>>>,
}

impl LoraAdapter {
    /// `A` drawn with std `1/√in`, `B` all zeros.
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, cfg: &LoraConfig) -> Result<Self> {
        if cfg.rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "lora.rank {} exceeds min(d_in, d_out) = {}",
                cfg.rank,
                d_in.min(d_out)
            )));
        }
        Ok(LoraAdapter {
            a: normal(rng, &[cfg.rank, d_in], 1.0 / (d_in as f64).sqrt()),
            b: Tensor::param(&[d_out, cfg.rank], vec![0.0; d_out * cfg.rank])?,
            scale: cfg.scale(),
            dropout: cfg.dropout,
            dropout_rng: Arc::new(Mutex::new(None)),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// Enables input dropout with a fresh stream; `None` disables it
    /// (inference).
    pub fn set_dropout_seed(&self, seed: Option<u64>) {
        *self.dropout_rng.lock().expect("dropout lock") = seed.map(ChaCha8Rng::seed_from_u64);
    }

    /// `scale · (x·Aᵀ)·Bᵀ`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        if self.dropout > 0.0 {
            if let Some(rng) = self.dropout_rng.lock().expect("dropout lock").as_mut() {
                let keep = 1.0 / (1.0 - self.dropout);
                let mask = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                    .collect();
                x = x.mul(&Tensor::new(x.shape(), mask)?)?;
            }
        }
        x.matmul_t(&self.a)?.matmul_t(&self.b)?.scale(self.scale)
    }

    /// `scale·B·A` as a dense `[out × in]` matrix.
    pub fn dense_delta(&self) -> Vec<f64> {
        let (out, r) = (self.b.shape()[0], self.rank());
        let d_in = self.a.shape()[1];
        let mut ba = kernels::matmul(&self.b.data(), &self.a.data(), out, r, d_in);
        for v in &mut ba {
            *v *= self.scale;
        }
        ba
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        let want = [self.b.shape()[0], self.a.shape()[1]];
        if w.shape() != want {
            return Err(Error::dim(
                "lora_merge",
                format!("weight {:?} does not match adapter {:?}", w.shape(), want),
            ));
        }
        Ok(())
    }

    /// `W′ = W + scale·B·A`.
    pub fn merge(&self, w: &Tensor) -> Result<Tensor> {
        self.check(w)?;
        let merged = w.data().iter().zip(self.dense_delta()).map(|(w, d)| w + d).collect();
        let out = Tensor::new(w.shape(), merged)?;
        crate::tensor::round_to_precision(&mut out.data_mut());
        Ok(out)
    }

    /// `W = W′ − scale·B·A`.
    pub fn unmerge(&self, merged: &Tensor) -> Result<Tensor> {
        self.check(merged)?;
        let base = merged.data().iter().zip(self.dense_delta()).map(|(w, d)| w - d).collect();
        let out = Tensor::new(merged.shape(), base)?;
        crate::tensor::round_to_precision(&mut out.data_mut());
        Ok(out)
    }
}

impl Linear {
    /// Attaches a fresh adapter and freezes the base weight and bias.
    pub fn attach_lora(&mut self, rng: &mut ChaCha8Rng, cfg: &LoraConfig) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Contract("linear map already carries a LoRA adapter".into()));
        }
        self.lora = Some(LoraAdapter::new(rng, self.d_in(), self.d_out(), cfg)?);
        self.weight.set_requires_grad(false);
        if let Some(b) = &self.bias {
            b.set_requires_grad(false);
        }
        Ok(())
    }

    /// Folds the adapter into the weight and detaches it, returning it so
    /// it can be unmerged later.
    pub fn merge_lora(&mut self) -> Result<LoraAdapter> {
        let adapter = self
            .lora
            .take()
            .ok_or_else(|| Error::Contract("no LoRA adapter to merge".into()))?;
        let merged = adapter.merge(&self.weight)?;
        self.weight.assign(&merged.data())?;
        Ok(adapter)
    }

    /// Inverse of [`Linear::merge_lora`].
    pub fn unmerge_lora(&mut self, adapter: LoraAdapter) -> Result<()> {
        let base = adapter.unmerge(&self.weight)?;
        self.weight.assign(&base.data())?;
        self.lora = Some(adapter);
        Ok(())
    }
}
