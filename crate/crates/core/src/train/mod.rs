//! Two-stage training: freeze plans, AdamW with warmup + cosine decay,
//! mixed-modality gradient accumulation, metrics, and checkpoints.

mod adamw;
pub mod checkpoint;
mod metrics;
mod schedule;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use adamw::AdamW;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{read_metrics, MetricRecord, MetricsLog};
pub use schedule::{lr_at, AdamWConfig, StageConfig};

use crate::data::synth::QaProbe;
use crate::data::{render_conversation, render_prompt, CaptionRecord, ConversationRecord, Image, RenderedExample, Turn};
use crate::error::{Error, Result};
use crate::lm::Decode;
use crate::model::{OwlModel, ParamGroup};
use crate::nn::NamedParam;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupState {
    Trainable,
    Frozen,
    Absent,
}

/// Trainable/frozen assignment for every parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan(pub BTreeMap<ParamGroup, GroupState>);

impl FreezePlan {
    pub fn stage1() -> Self {
        use GroupState::*;
        FreezePlan(BTreeMap::from([
            (ParamGroup::VisionEncoder, Trainable),
            (ParamGroup::Abstractor, Trainable),
            (ParamGroup::LmBase, Frozen),
            (ParamGroup::Lora, Absent),
        ]))
    }

    pub fn stage2() -> Self {
        use GroupState::*;
        FreezePlan(BTreeMap::from([
            (ParamGroup::VisionEncoder, Frozen),
            (ParamGroup::Abstractor, Trainable),
            (ParamGroup::LmBase, Frozen),
            (ParamGroup::Lora, Trainable),
        ]))
    }

    pub fn for_stage(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(FreezePlan::stage1()),
            2 => Ok(FreezePlan::stage2()),
            s => Err(Error::Contract(format!("unknown training stage {s}"))),
        }
    }

    pub fn state(&self, g: ParamGroup) -> GroupState {
        self.0.get(&g).copied().unwrap_or(GroupState::Absent)
    }

    /// Sets `requires_grad` on every parameter; a group marked absent must
    /// have no parameters and a present group must have some.
    pub fn apply(&self, model: &OwlModel) -> Result<()> {
        let params = model.params();
        for g in ParamGroup::ALL {
            let count = params.iter().filter(|(n, _)| ParamGroup::of(n) == g).count();
            match (self.state(g), count) {
                (GroupState::Absent, c) if c > 0 => {
                    return Err(Error::Contract(format!("group {g} must be absent but has {c} parameters")))
                }
                (GroupState::Trainable | GroupState::Frozen, 0) => {
                    return Err(Error::Contract(format!("group {g} is required but the model has none")))
                }
                _ => {}
            }
        }
        for (name, t) in &params {
            let on = self.state(ParamGroup::of(name)) == GroupState::Trainable;
            t.set_requires_grad(on);
            if !on {
                t.clear_grad();
            }
        }
        Ok(())
    }
}

/// A rendered training example with its image, if any.
#[derive(Debug, Clone)]
pub struct Example {
    pub rendered: RenderedExample,
    pub image: Option<Image>,
}

impl Example {
    pub fn from_conversation(rec: &ConversationRecord, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Ok(Example {
            rendered: render_conversation(rec, vocab, max_len)?,
            image: rec.image.clone(),
        })
    }

    pub fn from_caption(rec: &CaptionRecord, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Example::from_conversation(&rec.to_conversation(), vocab, max_len)
    }
}

/// Renders records in parallel, keeping input order.
pub fn render_examples(records: &[ConversationRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    records
        .par_iter()
        .map(|r| Example::from_conversation(r, vocab, max_len))
        .collect()
}

/// Indices of the `draw`-th batch of size `batch` from a dataset of `n`
/// items: a walk through seeded per-epoch permutations. Pure in its
/// arguments, so a resumed run draws the same batches.
pub fn batch_indices(seed: u64, stream: u64, draw: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let pos = draw * batch + j;
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            rng.set_stream(stream);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[pos % n]);
    }
    out
}

/// Zeroes the gradients of trainable parameters, then accumulates the
/// gradient of `(Σ micro-batch mean losses) / (n_t + n_m)`, text micro-batches
/// first. Returns that averaged loss.
pub fn accumulate_gradients(model: &OwlModel, text: &[Vec<&Example>], mm: &[Vec<&Example>]) -> Result<f64> {
    let n = text.len() + mm.len();
    if n == 0 {
        return Err(Error::Contract("accumulation needs at least one micro-batch".into()));
    }
    for (_, t) in model.params() {
        if t.requires_grad() {
            t.zero_grad();
        }
    }
    let mut total = 0.0;
    for batch in text.iter().chain(mm) {
        if batch.is_empty() {
            return Err(Error::EmptyLoss("empty micro-batch".into()));
        }
        let w = 1.0 / (batch.len() * n) as f64;
        for ex in batch {
            let loss = model.loss(&ex.rendered, ex.image.as_ref())?;
            total += loss.item() * w;
            loss.scale(w)?.backward()?;
        }
    }
    Ok(total)
}

/// One optimizer step over the given micro-batches.
pub fn accumulate_mixed(
    model: &OwlModel,
    opt: &mut AdamW,
    lr: f64,
    text: &[Vec<&Example>],
    mm: &[Vec<&Example>],
) -> Result<f64> {
    let loss = accumulate_gradients(model, text, mm)?;
    opt.step(&model.params(), lr)?;
    Ok(loss)
}

/// Training state for one stage; `step` counts completed updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub stage: u8,
    pub cfg: StageConfig,
    pub opt: AdamW,
    pub step: usize,
}

const TEXT_STREAM: u64 = 11;
const MM_STREAM: u64 = 12;

impl Trainer {
    pub fn new(stage: u8, cfg: &StageConfig) -> Result<Self> {
        FreezePlan::for_stage(stage)?;
        cfg.validate(&format!("stage{stage}"))?;
        Ok(Trainer {
            stage,
            cfg: cfg.clone(),
            opt: AdamW::new(cfg.optim),
            step: 0,
        })
    }

    pub fn plan(&self) -> FreezePlan {
        FreezePlan::for_stage(self.stage).expect("stage checked at construction")
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    fn draw<'a>(&self, data: &'a [Example], stream: u64, count: usize) -> Result<Vec<Vec<&'a Example>>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        if data.is_empty() {
            return Err(Error::Data(format!(
                "stage {} needs {} data but none was given",
                self.stage,
                if stream == TEXT_STREAM { "text-only" } else { "multimodal" }
            )));
        }
        Ok((0..count)
            .map(|j| {
                batch_indices(self.cfg.seed, stream, self.step * count + j, self.cfg.batch_size, data.len())
                    .into_iter()
                    .map(|i| &data[i])
                    .collect()
            })
            .collect())
    }

    fn seed_dropout(&self, params: &OwlModel) {
        let mut layer = 0u64;
        for b in &params.lm.blocks {
            let a = &b.attn;
            for lin in [&a.q_proj, &a.k_proj, &a.v_proj, &a.o_proj] {
                if let Some(ad) = &lin.lora {
                    let s = self.cfg.seed ^ ((self.step as u64) << 20) ^ layer;
                    ad.set_dropout_seed((ad.dropout > 0.0).then_some(s));
                }
                layer += 1;
            }
        }
    }

    /// One update; returns the step's averaged loss and learning rate.
    pub fn train_step(&mut self, model: &OwlModel, text: &[Example], mm: &[Example]) -> Result<(f64, f64)> {
        if self.is_done() {
            return Err(Error::Contract(format!("stage {} already ran all {} steps", self.stage, self.step)));
        }
        let t = self.draw(text, TEXT_STREAM, self.cfg.text_micro_batches)?;
        let m = self.draw(mm, MM_STREAM, self.cfg.mm_micro_batches)?;
        let lr = lr_at(self.step + 1, &self.cfg)?;
        self.seed_dropout(model);
        let loss = accumulate_mixed(model, &mut self.opt, lr, &t, &m);
        self.seed_dropout_off(model);
        let loss = loss?;
        self.step += 1;
        Ok((loss, lr))
    }

    fn seed_dropout_off(&self, model: &OwlModel) {
        for b in &model.lm.blocks {
            let a = &b.attn;
            for lin in [&a.q_proj, &a.k_proj, &a.v_proj, &a.o_proj] {
                if let Some(ad) = &lin.lora {
                    ad.set_dropout_seed(None);
                }
            }
        }
    }

    /// Applies the stage's freeze plan and runs up to `steps` more updates
    /// (stopping at `total_steps`), logging each one.
    pub fn run(
        &mut self,
        model: &OwlModel,
        text: &[Example],
        mm: &[Example],
        steps: usize,
        log: &MetricsLog,
    ) -> Result<Vec<f64>> {
        self.plan().apply(model)?;
        let mut losses = Vec::new();
        for _ in 0..steps {
            if self.is_done() {
                break;
            }
            let (loss, lr) = self.train_step(model, text, mm)?;
            log.push(MetricRecord {
                step: self.step,
                stage: self.stage,
                loss,
                lr,
            })?;
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Stage 1 over caption data: vision encoder and abstractor train, the
/// language model stays frozen.
pub fn run_stage1(model: &OwlModel, data: &[Example], cfg: &StageConfig, log: &MetricsLog) -> Result<Trainer> {
    let mut t = Trainer::new(1, cfg)?;
    t.run(model, &[], data, cfg.total_steps, log)?;
    Ok(t)
}

/// Stage 2 over text-only and multimodal instructions: abstractor and LoRA
/// adapters train; the model must already carry adapters.
pub fn run_stage2(
    model: &OwlModel,
    text: &[Example],
    mm: &[Example],
    cfg: &StageConfig,
    log: &MetricsLog,
) -> Result<Trainer> {
    let mut t = Trainer::new(2, cfg)?;
    t.run(model, text, mm, cfg.total_steps, log)?;
    Ok(t)
}

/// Greedy answer to a single-turn question.
pub fn answer(model: &OwlModel, vocab: &Vocabulary, image: Option<&Image>, question: &str, max_new: usize) -> Result<String> {
    let prompt = render_prompt(&[Turn::user(question)], image.is_some(), vocab)?;
    let room = model.cfg.lm.max_positions.saturating_sub(prompt.len() + model.cfg.abstractor.num_queries);
    let ids = model.generate(&prompt, image, Decode::Greedy, max_new.min(room), 0)?;
    Ok(vocab.decode(&ids).trim().to_string())
}

/// Fraction of probes answered exactly (after trimming whitespace).
pub fn qa_accuracy(model: &OwlModel, vocab: &Vocabulary, probes: &[QaProbe], max_new: usize) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Contract("no probes to evaluate".into()));
    }
    let hits: Vec<bool> = probes
        .par_iter()
        .map(|p| answer(model, vocab, Some(&p.image), &p.question, max_new).map(|a| a == p.answer))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / probes.len() as f64)
}

/// Snapshot of parameter bytes, for freeze checks.
pub fn snapshot(params: &[NamedParam]) -> BTreeMap<String, Vec<u64>> {
    params
        .iter()
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstractor::AbstractorConfig;
    use crate::data::synth::{synth_instruction_dataset, synth_shapes_dataset};
    use crate::lm::LmConfig;
    use crate::model::ModelConfig;
    use crate::nn::NormKind;
    use crate::vision::VisionConfig;

    fn tiny() -> (OwlModel, Vocabulary) {
        let vocab = Vocabulary::build(["a red circle above a blue square"], 270).unwrap();
        let cfg = ModelConfig {
            vision: VisionConfig {
                image_size: 16,
                patch_size: 8,
                layers: 1,
                dim: 8,
                heads: 2,
                use_cls: true,
            },
            abstractor: AbstractorConfig {
                num_queries: 2,
                layers: 1,
                heads: 2,
                self_attention_on_queries: true,
            },
            lm: LmConfig {
                vocab_size: vocab.len(),
                layers: 1,
                dim: 8,
                heads: 2,
                max_positions: 96,
                norm: NormKind::RmsNorm,
            },
            lora: Default::default(),
        };
        (OwlModel::new(&cfg, 0).unwrap(), vocab)
    }

    fn captions(vocab: &Vocabulary, n: usize) -> Vec<Example> {
        synth_shapes_dataset(3, n, 2, 16)
            .unwrap()
            .iter()
            .map(|r| Example::from_caption(r, vocab, 64).unwrap())
            .collect()
    }

    fn quick(stage: u8, steps: usize) -> StageConfig {
        StageConfig {
            total_steps: steps,
            warmup_steps: 1,
            peak_lr: 1e-2,
            batch_size: 2,
            text_micro_batches: usize::from(stage == 2),
            mm_micro_batches: 1,
            ..StageConfig::stage1_desk()
        }
    }

    #[test]
    fn batches_are_permutation_walks() {
        let mut seen: Vec<usize> = (0..5).flat_map(|d| batch_indices(1, 0, d, 2, 10)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(1, 0, 7, 3, 10), batch_indices(1, 0, 7, 3, 10));
        assert_ne!(batch_indices(1, 0, 0, 10, 10), batch_indices(1, 0, 1, 10, 10));
    }

    #[test]
    fn stage1_keeps_language_model_frozen() {
        let (model, vocab) = tiny();
        let data = captions(&vocab, 16);
        let lm0 = snapshot(&model.group_params(ParamGroup::LmBase));
        let v0 = snapshot(&model.group_params(ParamGroup::VisionEncoder));
        let t = run_stage1(&model, &data, &quick(1, 5), &MetricsLog::in_memory()).unwrap();
        assert_eq!(snapshot(&model.group_params(ParamGroup::LmBase)), lm0);
        assert_ne!(snapshot(&model.group_params(ParamGroup::VisionEncoder)), v0);
        assert!(t.opt.m.keys().all(|k| !k.starts_with("lm.")));
    }

    #[test]
    fn stage2_requires_adapters() {
        let (model, vocab) = tiny();
        let data = captions(&vocab, 4);
        let err = run_stage2(&model, &data, &data, &quick(2, 2), &MetricsLog::in_memory());
        assert!(matches!(err, Err(Error::Contract(m)) if m.contains("lora")));
    }

    #[test]
    fn stage2_updates_only_abstractor_and_lora() {
        let (mut model, vocab) = tiny();
        model.attach_lora(1).unwrap();
        let mm = captions(&vocab, 8);
        let text: Vec<Example> = synth_instruction_dataset(4, 8, 1.0, 2, 16)
            .unwrap()
            .iter()
            .map(|r| Example::from_conversation(r, &vocab, 64).unwrap())
            .collect();
        let before: BTreeMap<ParamGroup, _> =
            ParamGroup::ALL.iter().map(|&g| (g, snapshot(&model.group_params(g)))).collect();
        run_stage2(&model, &text, &mm, &quick(2, 4), &MetricsLog::in_memory()).unwrap();
        for g in ParamGroup::ALL {
            let same = snapshot(&model.group_params(g)) == before[&g];
            let frozen = matches!(g, ParamGroup::VisionEncoder | ParamGroup::LmBase);
            assert_eq!(same, frozen, "{g}");
        }
    }

    #[test]
    fn accumulation_is_an_average_of_micro_batches() {
        let (model, vocab) = tiny();
        FreezePlan::stage1().apply(&model).unwrap();
        let data = captions(&vocab, 4);
        let grads = |text: &[Vec<&Example>], mm: &[Vec<&Example>]| {
            accumulate_gradients(&model, text, mm).unwrap();
            model
                .params()
                .iter()
                .filter_map(|(_, t)| t.grad())
                .flatten()
                .collect::<Vec<f64>>()
        };
        let a = vec![&data[0], &data[1]];
        let b = vec![&data[2], &data[3]];
        let ga = grads(std::slice::from_ref(&a), &[]);
        let gb = grads(&[], std::slice::from_ref(&b));
        let both = grads(std::slice::from_ref(&a), std::slice::from_ref(&b));
        for i in 0..both.len() {
            assert!((both[i] - (ga[i] + gb[i]) / 2.0).abs() < 1e-6);
        }
        let dup = grads(&[a.clone(), a.clone()], &[]);
        for i in 0..dup.len() {
            assert!((dup[i] - ga[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_micro_batch_aborts_without_update() {
        let (model, _) = tiny();
        FreezePlan::stage1().apply(&model).unwrap();
        let before = snapshot(&model.params());
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(accumulate_mixed(&model, &mut opt, 0.1, &[vec![]], &[]).is_err());
        assert_eq!(snapshot(&model.params()), before);
    }
}
