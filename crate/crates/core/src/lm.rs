//! Decoder-only causal language model over `[text ∥ visual rows ∥ text]`
//! sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RenderedExample;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::nn::{check_heads, fan_in_std, module_rng, normal, Block, Linear, NamedParam, Norm, NormKind, INIT_STD};
use crate::tensor::{no_grad, Tensor};
use crate::tokenizer::{BOS, EOS, IMAGE, PAD};

/// The output head starts wider than the hidden layers so that a frozen,
/// randomly initialized model can still express confident predictions
/// when steered through its visual prefix.
pub const HEAD_INIT_STD: f64 = 0.05;


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub norm: NormKind,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 384,
            layers: 4,
            dim: 128,
            heads: 4,
            max_positions: 128,
            norm: NormKind::RmsNorm,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= IMAGE as usize {
            return Err(Error::Config(format!(
                "lm.vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("lm.max_positions must be positive".into()));
        }
        check_heads("lm", self.dim, self.heads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

/// Where the visual rows land once the image placeholder is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub slot: Option<usize>,
    pub visual_rows: usize,
    pub rows: usize,
}

impl Layout {
    pub fn new(tokens: &[u32], visual_rows: Option<usize>) -> Result<Self> {
        let mut slots = tokens.iter().enumerate().filter(|(_, &t)| t == IMAGE).map(|(i, _)| i);
        let slot = slots.next();
        if slots.next().is_some() {
            return Err(Error::Contract("at most one image placeholder per sequence".into()));
        }
        match (slot, visual_rows) {
            (Some(_), None) => Err(Error::Contract("image placeholder present but no visual tokens given".into())),
            (None, Some(_)) => Err(Error::Contract("visual tokens given but the sequence has no image placeholder".into())),
            (Some(s), Some(k)) => Ok(Layout {
                slot: Some(s),
                visual_rows: k,
                rows: tokens.len() - 1 + k,
            }),
            (None, None) => Ok(Layout {
                slot: None,
                visual_rows: 0,
                rows: tokens.len(),
            }),
        }
    }

    /// Row index of original token `i` (the last visual row for the slot).
    pub fn row_of(&self, i: usize) -> usize {
        match self.slot {
            Some(s) if i == s => s + self.visual_rows - 1,
            Some(s) if i > s => i + self.visual_rows - 1,
            _ => i,
        }
    }
}

impl LanguageModel {
    pub fn new(cfg: &LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = module_rng(seed, 3);
        let d = cfg.dim;
        Ok(LanguageModel {
            cfg: cfg.clone(),
            tok_emb: normal(&mut rng, &[cfg.vocab_size, d], INIT_STD),
            pos_emb: normal(&mut rng, &[cfg.max_positions, d], INIT_STD),
            blocks: (0..cfg.layers)
                .map(|_| Block::new(&mut rng, d, cfg.heads, cfg.norm, false, fan_in_std(d)))
                .collect(),
            norm: Norm::new(cfg.norm, d),
            head: Linear::new(&mut rng, d, cfg.vocab_size, false, HEAD_INIT_STD),
        })
    }

    /// Attaches adapters to every targeted projection of every layer and
    /// freezes the adapted base weights.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        if cfg.rank > self.cfg.dim {
            return Err(Error::Config(format!(
                "lora.rank {} exceeds the projection width {}",
                cfg.rank, self.cfg.dim
            )));
        }
        let mut rng = module_rng(seed, 4);
        for block in &mut self.blocks {
            for target in &cfg.targets {
                block.attn.projection_mut(target)?.attach_lora(&mut rng, cfg)?;
            }
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| {
            let a = &b.attn;
            [&a.q_proj, &a.k_proj, &a.v_proj, &a.o_proj].iter().any(|l| l.lora.is_some())
        })
    }

    /// Input rows after expanding the image placeholder, plus positions.
    fn embed(&self, tokens: &[u32], visual: Option<&Tensor>) -> Result<Tensor> {
        let layout = Layout::new(tokens, visual.map(|v| v.shape()[0]))?;
        if layout.rows > self.cfg.max_positions {
            return Err(Error::Length {
                len: layout.rows,
                limit: self.cfg.max_positions,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = self.tok_emb.embedding_lookup(&ids)?;
        let x = match (layout.slot, visual) {
            (Some(s), Some(v)) => {
                let (_, d) = v.dims2("forward_multimodal")?;
                if d != self.cfg.dim {
                    return Err(Error::dim(
                        "forward_multimodal",
                        format!("visual tokens axis 1 = {d}, model dim = {}", self.cfg.dim),
                    ));
                }
                let mut parts = Vec::with_capacity(3);
                if s > 0 {
                    parts.push(emb.slice(0, 0, s)?);
                }
                parts.push(v.clone());
                if s + 1 < tokens.len() {
                    parts.push(emb.slice(0, s + 1, tokens.len() - s - 1)?);
                }
                if parts.len() == 1 {
                    parts.pop().expect("one part")
                } else {
                    Tensor::concat(&parts, 0)?
                }
            }
            _ => emb,
        };
        x.add(&self.pos_emb.slice(0, 0, layout.rows)?)
    }

    /// Logits `[T′ × vocab]` with `T′ = T − 1 + K` when an image is present.
    pub fn forward_multimodal(&self, tokens: &[u32], visual: Option<&Tensor>) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let mut x = self.embed(tokens, visual)?;
        for b in &self.blocks {
            x = b.forward(&x, true)?;
        }
        self.head.forward(&self.norm.forward(&x)?)
    }

    /// Next-token targets and mask over expanded rows: the row holding
    /// token `i` predicts token `i + 1`, scored iff `loss_mask[i + 1]`.
    pub fn loss_targets(ex: &RenderedExample, layout: &Layout) -> (Vec<usize>, Vec<u8>) {
        let mut targets = vec![0usize; layout.rows];
        let mut mask = vec![0u8; layout.rows];
        for i in 0..ex.tokens.len().saturating_sub(1) {
            if ex.loss_mask[i + 1] == 1 {
                let r = layout.row_of(i);
                targets[r] = ex.tokens[i + 1] as usize;
                mask[r] = 1;
            }
        }
        (targets, mask)
    }

    pub fn lm_loss(&self, ex: &RenderedExample, visual: Option<&Tensor>) -> Result<Tensor> {
        let layout = Layout::new(&ex.tokens, visual.map(|v| v.shape()[0]))?;
        let (targets, mask) = Self::loss_targets(ex, &layout);
        if !mask.contains(&1) {
            return Err(Error::EmptyLoss("rendered example has no scored tokens".into()));
        }
        self.forward_multimodal(&ex.tokens, visual)?.masked_cross_entropy(&targets, &mask)
    }

    /// Autoregressive continuation of `prompt`, stopping after `max_new`
    /// tokens or at EOS (which is not included).
    pub fn generate(
        &self,
        prompt: &[u32],
        visual: Option<&Tensor>,
        decode: Decode,
        max_new: usize,
        seed: u64,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Contract("generation needs a non-empty prompt".into()));
        }
        if let Decode::Temperature(t) = decode {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Contract(format!("temperature must be positive, got {t}")));
            }
        }
        let layout = Layout::new(prompt, visual.map(|v| v.shape()[0]))?;
        let needed = layout.rows + max_new.saturating_sub(1);
        if needed > self.cfg.max_positions {
            return Err(Error::Length {
                len: needed,
                limit: self.cfg.max_positions,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        no_grad(|| {
            for _ in 0..max_new {
                let logits = self.forward_multimodal(&seq, visual)?;
                let v = self.cfg.vocab_size;
                let rows = logits.shape()[0];
                let mut last = logits.data()[(rows - 1) * v..rows * v].to_vec();
                // Only EOS among the special ids may be produced.
                for id in [PAD, BOS, IMAGE] {
                    last[id as usize] = f64::NEG_INFINITY;
                }
                let next = match decode {
                    Decode::Greedy => argmax(&last),
                    Decode::Temperature(t) => sample(&last, t, &mut rng),
                };
                if next == EOS {
                    break;
                }
                out.push(next);
                seq.push(next);
            }
            Ok(out)
        })
    }

    pub fn params(&self, out: &mut Vec<NamedParam>) {
        out.push(("lm.tok_emb".into(), self.tok_emb.clone()));
        out.push(("lm.pos_emb".into(), self.pos_emb.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("lm.blocks.{i}"), out);
        }
        self.norm.params("lm.norm", out);
        self.head.params("lm.head", out);
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample(row: &[f64], t: f64, rng: &mut ChaCha8Rng) -> u32 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|v| ((v - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (row.len() - 1) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn small() -> LmConfig {
        LmConfig {
            vocab_size: 40,
            layers: 2,
            dim: 16,
            heads: 2,
            max_positions: 32,
            norm: NormKind::RmsNorm,
        }
    }

    fn visual(k: usize, d: usize) -> Tensor {
        normal(&mut module_rng(9, 9), &[k, d], 1.0)
    }

    #[test]
    fn image_expands_to_k_rows() {
        let lm = LanguageModel::new(&LmConfig::default(), 0).unwrap();
        let tokens = [IMAGE, 10, 11, 12, 13, 14, 15, 16, 17, 18];
        let logits = lm.forward_multimodal(&tokens, Some(&visual(8, 128))).unwrap();
        assert_eq!(logits.shape(), &[17, 384]);
        let text = lm.forward_multimodal(&tokens[1..], None).unwrap();
        assert_eq!(text.shape(), &[9, 384]);
    }

    #[test]
    fn image_contract_errors() {
        let lm = LanguageModel::new(&small(), 0).unwrap();
        assert!(matches!(lm.forward_multimodal(&[IMAGE, 5], None), Err(Error::Contract(_))));
        assert!(matches!(
            lm.forward_multimodal(&[IMAGE, 5, IMAGE], Some(&visual(2, 16))),
            Err(Error::Contract(_))
        ));
        let long = vec![5u32; 33];
        assert!(matches!(lm.forward_multimodal(&long, None), Err(Error::Length { len: 33, limit: 32 })));
    }

    #[test]
    fn future_tokens_do_not_affect_past_logits() {
        let lm = LanguageModel::new(&small(), 1).unwrap();
        let v = visual(3, 16);
        let a = [IMAGE, 7, 8, 9, 10, 11];
        let mut b = a;
        b[4] = 0;
        b[5] = 0;
        let la = lm.forward_multimodal(&a, Some(&v)).unwrap().to_vec();
        let lb = lm.forward_multimodal(&b, Some(&v)).unwrap().to_vec();
        // Token 4 sits at row 4 + 2 = 6; rows 0..=5 see only unchanged inputs.
        let cut = 6 * 40;
        assert_eq!(la[..cut], lb[..cut]);
        assert_ne!(la[cut..], lb[cut..]);
    }

    #[test]
    fn layout_rows() {
        let l = Layout::new(&[4, IMAGE, 5, 6], Some(3)).unwrap();
        assert_eq!((l.rows, l.row_of(0), l.row_of(1), l.row_of(2)), (6, 0, 3, 4));
    }

    #[test]
    fn loss_scores_only_masked_targets() {
        let _g = Precision::F64.scoped();
        let lm = LanguageModel::new(&small(), 2).unwrap();
        let ex = RenderedExample {
            tokens: vec![IMAGE, 5, 6, 7, 8],
            loss_mask: vec![0, 0, 0, 1, 1],
            image_slot: Some(0),
        };
        let v = visual(2, 16);
        let loss = lm.lm_loss(&ex, Some(&v)).unwrap().item();
        // Rows 3 and 4 (tokens 6 and 7) predict tokens 7 and 8.
        let logits = lm.forward_multimodal(&ex.tokens, Some(&v)).unwrap().to_vec();
        let nll = |row: usize, target: usize| {
            let r = &logits[row * 40..(row + 1) * 40];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - r[target]
        };
        let want = (nll(3, 7) + nll(4, 8)) / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn unscored_example_is_empty_loss() {
        let lm = LanguageModel::new(&small(), 2).unwrap();
        let ex = RenderedExample {
            tokens: vec![5, 6],
            loss_mask: vec![1, 0],
            image_slot: None,
        };
        assert!(matches!(lm.lm_loss(&ex, None), Err(Error::EmptyLoss(_))));
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let lm = LanguageModel::new(&LmConfig::default(), 3).unwrap();
        let mut rng = module_rng(4, 4);
        let mut total = 0.0;
        for _ in 0..100 {
            let tokens: Vec<u32> = (0..12).map(|_| rng.random_range(4..384)).collect();
            let ex = RenderedExample {
                loss_mask: vec![1; tokens.len()],
                tokens,
                image_slot: None,
            };
            total += no_grad(|| lm.lm_loss(&ex, None)).unwrap().item();
        }
        let mean = total / 100.0;
        assert!((mean - 384f64.ln()).abs() < 0.2, "{mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        let lm = LanguageModel::new(&small(), 5).unwrap();
        let v = visual(2, 16);
        let g1 = lm.generate(&[IMAGE, 5, 6], Some(&v), Decode::Greedy, 6, 0).unwrap();
        assert_eq!(g1, lm.generate(&[IMAGE, 5, 6], Some(&v), Decode::Greedy, 6, 0).unwrap());
        let t1 = lm.generate(&[5, 6], None, Decode::Temperature(1.5), 6, 11).unwrap();
        assert_eq!(t1, lm.generate(&[5, 6], None, Decode::Temperature(1.5), 6, 11).unwrap());
        assert!(lm.generate(&[5], None, Decode::Greedy, 0, 0).unwrap().is_empty());
        assert!(matches!(
            lm.generate(&[5; 30], None, Decode::Greedy, 10, 0),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn lora_parameter_count() {
        let mut lm = LanguageModel::new(&LmConfig::default(), 0).unwrap();
        let cfg = LoraConfig::default();
        lm.attach_lora(&cfg, 1).unwrap();
        let mut ps = Vec::new();
        lm.params(&mut ps);
        let lora: usize = ps.iter().filter(|(n, _)| n.contains("lora_")).map(|(_, t)| t.numel()).sum();
        assert_eq!(lora, 4 * 2 * 8 * (128 + 128));
        let bad = LoraConfig { rank: 129, ..LoraConfig::default() };
        let mut lm2 = LanguageModel::new(&LmConfig::default(), 0).unwrap();
        assert!(matches!(lm2.attach_lora(&bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn attach_is_identity_before_training() {
        let mut lm = LanguageModel::new(&small(), 6).unwrap();
        let v = visual(2, 16);
        let tokens = [IMAGE, 9, 10, 11];
        let before = lm.forward_multimodal(&tokens, Some(&v)).unwrap().to_vec();
        lm.attach_lora(&LoraConfig { rank: 4, ..LoraConfig::default() }, 0).unwrap();
        assert_eq!(before, lm.forward_multimodal(&tokens, Some(&v)).unwrap().to_vec());
    }
}
