//! The assembled model: vision encoder → abstractor → language model, with a
//! flat registry of named parameters split into groups.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::abstractor::{Abstractor, AbstractorConfig};
use crate::data::{Image, RenderedExample};
use crate::error::{Error, Result};
use crate::lm::{Decode, LanguageModel, LmConfig};
use crate::lora::LoraConfig;
use crate::nn::NamedParam;
use crate::tensor::{no_grad, Tensor};
use crate::vision::{VisionConfig, VisionEncoder};

/// Desk defaults throughout; adapters default to [`LoraConfig::desk`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub abstractor: AbstractorConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vision: VisionConfig::default(),
            abstractor: AbstractorConfig::default(),
            lm: LmConfig::default(),
            lora: LoraConfig::desk(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.abstractor.validate(self.lm.dim)?;
        self.lm.validate()?;
        self.lora.validate()?;
        let (n_v, _) = self.vision.output_shape();
        if n_v == 0 {
            return Err(Error::Config("vision produces no feature rows".into()));
        }
        if self.abstractor.num_queries >= self.lm.max_positions {
            return Err(Error::Config(format!(
                "lm.max_positions {} must exceed abstractor.num_queries {}",
                self.lm.max_positions, self.abstractor.num_queries
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisionEncoder,
    Abstractor,
    LmBase,
    Lora,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::VisionEncoder,
        ParamGroup::Abstractor,
        ParamGroup::LmBase,
        ParamGroup::Lora,
    ];

    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("vision.") {
            ParamGroup::VisionEncoder
        } else if name.starts_with("abstractor.") {
            ParamGroup::Abstractor
        } else if name.contains(".lora_") {
            ParamGroup::Lora
        } else {
            ParamGroup::LmBase
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::VisionEncoder => "vision_encoder",
            ParamGroup::Abstractor => "abstractor",
            ParamGroup::LmBase => "lm_base",
            ParamGroup::Lora => "lora",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct OwlModel {
    pub cfg: ModelConfig,
    pub vision: VisionEncoder,
    pub abstractor: Abstractor,
    pub lm: LanguageModel,
}

impl OwlModel {
    /// Random initialization; the LoRA adapters are not attached.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(OwlModel {
            cfg: cfg.clone(),
            vision: VisionEncoder::new(&cfg.vision, seed)?,
            abstractor: Abstractor::new(&cfg.abstractor, cfg.vision.dim, cfg.lm.dim, seed)?,
            lm: LanguageModel::new(&cfg.lm, seed)?,
        })
    }

    pub fn attach_lora(&mut self, seed: u64) -> Result<()> {
        self.lm.attach_lora(&self.cfg.lora, seed)
    }

    pub fn has_lora(&self) -> bool {
        self.lm.has_lora()
    }

    /// `K × dim` visual tokens for one image.
    pub fn visual_tokens(&self, img: &Image) -> Result<Tensor> {
        self.abstractor.abstract_features(&self.vision.encode_image(img)?)
    }

    pub fn loss(&self, ex: &RenderedExample, image: Option<&Image>) -> Result<Tensor> {
        let visual = image.map(|img| self.visual_tokens(img)).transpose()?;
        self.lm.lm_loss(ex, visual.as_ref())
    }

    pub fn generate(
        &self,
        prompt: &[u32],
        image: Option<&Image>,
        decode: Decode,
        max_new: usize,
        seed: u64,
    ) -> Result<Vec<u32>> {
        let visual = no_grad(|| image.map(|img| self.visual_tokens(img)).transpose())?;
        self.lm.generate(prompt, visual.as_ref(), decode, max_new, seed)
    }

    /// Every parameter in a fixed order with a unique dotted name.
    pub fn params(&self) -> Vec<NamedParam> {
        let mut out = Vec::new();
        self.vision.params(&mut out);
        self.abstractor.params(&mut out);
        self.lm.params(&mut out);
        out
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<NamedParam> {
        self.params().into_iter().filter(|(n, _)| ParamGroup::of(n) == group).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn names_are_unique_and_grouped() {
        let mut m = OwlModel::new(&ModelConfig::default(), 0).unwrap();
        m.attach_lora(0).unwrap();
        let ps = m.params();
        let names: HashSet<_> = ps.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), ps.len());
        for g in ParamGroup::ALL {
            assert!(!m.group_params(g).is_empty(), "{g}");
        }
        assert_eq!(ParamGroup::of("lm.blocks.0.attn.q_proj.lora_a"), ParamGroup::Lora);
        assert_eq!(ParamGroup::of("lm.blocks.0.attn.q_proj.weight"), ParamGroup::LmBase);
        assert_eq!(ParamGroup::of("abstractor.queries"), ParamGroup::Abstractor);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = OwlModel::new(&ModelConfig::default(), 4).unwrap();
        let b = OwlModel::new(&ModelConfig::default(), 4).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
    }
}
