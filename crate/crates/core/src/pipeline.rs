//! The desk-scale two-stage run on synthetic shapes: caption pretraining
//! with a frozen language model, then instruction tuning with adapters,
//! then held-out question answering.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::synth::{synth_instruction_samples, synth_qa_probes, synth_shapes_dataset, DEFAULT_IMAGE_SIZE};
use crate::data::{ChatTemplate, ConversationRecord, Role};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OwlModel};
use crate::tokenizer::Vocabulary;
use crate::train::{
    qa_accuracy, render_examples, Example, FreezePlan, MetricsLog, StageConfig, Trainer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub grid: usize,
    pub captions: usize,
    pub instructions: usize,
    pub text_fraction: f64,
    pub probes: usize,
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            grid: 2,
            captions: 2048,
            instructions: 2048,
            text_fraction: 0.3,
            probes: 200,
            vocab_size: 384,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.grid) {
            return Err(Error::Config(format!("data.grid must be 2 or 3, got {}", self.grid)));
        }
        if !(0.0..=1.0).contains(&self.text_fraction) {
            return Err(Error::Config(format!(
                "data.text_fraction must be in [0, 1], got {}",
                self.text_fraction
            )));
        }
        if self.vocab_size < crate::tokenizer::MIN_VOCAB {
            return Err(Error::Config(format!(
                "data.vocab_size must be at least {}, got {}",
                crate::tokenizer::MIN_VOCAB,
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Datasets materialized for a desk run.
pub struct DeskData {
    pub vocab: Vocabulary,
    pub captions: Vec<Example>,
    pub text: Vec<Example>,
    pub multimodal: Vec<Example>,
    pub probes: Vec<crate::data::synth::QaProbe>,
}

/// Every string the template and data produce, once per occurrence, for
/// vocabulary training.
pub fn vocab_corpus(captions: &[ConversationRecord], instructions: &[ConversationRecord]) -> Vec<String> {
    let mut corpus = Vec::new();
    for rec in captions.iter().chain(instructions) {
        for turn in &rec.turns {
            let marker = match turn.role {
                Role::User => ChatTemplate::USER,
                Role::Assistant => ChatTemplate::ASSISTANT,
            };
            corpus.push(marker.to_string());
            corpus.push(turn.text.clone());
        }
    }
    corpus
}

/// Synthetic caption conversations and instruction conversations (text-only
/// and multimodal mixed) for a desk run.
pub fn desk_records(cfg: &DataConfig) -> Result<(Vec<ConversationRecord>, Vec<ConversationRecord>)> {
    cfg.validate()?;
    let size = DEFAULT_IMAGE_SIZE;
    let captions = synth_shapes_dataset(cfg.seed, cfg.captions, cfg.grid, size)?
        .iter()
        .map(|c| c.to_conversation())
        .collect();
    let samples = synth_instruction_samples(cfg.seed + 1, cfg.instructions, cfg.text_fraction, cfg.grid, size)?;
    Ok((captions, samples.into_iter().map(|s| s.record).collect()))
}

/// Renders records, splitting them into (text-only, multimodal).
pub fn render_split(records: Vec<ConversationRecord>, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    let (text, mm): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.image.is_none());
    Ok((render_examples(&text, vocab, max_len)?, render_examples(&mm, vocab, max_len)?))
}

pub fn build_desk_data(cfg: &DataConfig, max_len: usize) -> Result<DeskData> {
    let (captions, instructions) = desk_records(cfg)?;
    let corpus = vocab_corpus(&captions, &instructions);
    let vocab = Vocabulary::build(corpus.iter().map(String::as_str), cfg.vocab_size)?;
    let (text, multimodal) = render_split(instructions, &vocab, max_len)?;
    Ok(DeskData {
        captions: render_examples(&captions, &vocab, max_len)?,
        text,
        multimodal,
        probes: synth_qa_probes(cfg.seed + 2, cfg.probes, cfg.grid, DEFAULT_IMAGE_SIZE)?,
        vocab,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub vocab_size: usize,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    pub stage1_initial: f64,
    pub stage1_final: f64,
    pub qa_accuracy: f64,
    pub seconds: f64,
}

/// Mean of the last `n` values (or all of them when fewer).
pub fn tail_mean(xs: &[f64], n: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Builds data and a fresh model, then runs both stages and the probe
/// evaluation.
pub fn run_desk(
    data_cfg: &DataConfig,
    model_cfg: &ModelConfig,
    stage1: &StageConfig,
    stage2: &StageConfig,
    seed: u64,
    log: &MetricsLog,
) -> Result<(OwlModel, DeskData, DeskReport)> {
    let start = Instant::now();
    let data = build_desk_data(data_cfg, stage1.max_len.max(stage2.max_len))?;
    let mut cfg = model_cfg.clone();
    cfg.lm.vocab_size = data.vocab.len();
    let mut model = OwlModel::new(&cfg, seed)?;

    let mut t1 = Trainer::new(1, stage1)?;
    let stage1_losses = t1.run(&model, &[], &data.captions, stage1.total_steps, log)?;

    model.attach_lora(seed)?;
    FreezePlan::stage2().apply(&model)?;
    let mut t2 = Trainer::new(2, stage2)?;
    let stage2_losses = t2.run(&model, &data.text, &data.multimodal, stage2.total_steps, log)?;

    let qa = qa_accuracy(&model, &data.vocab, &data.probes, 12)?;
    let report = DeskReport {
        vocab_size: data.vocab.len(),
        stage1_initial: stage1_losses.first().copied().unwrap_or(f64::NAN),
        stage1_final: tail_mean(&stage1_losses, 25),
        stage1_losses,
        stage2_losses,
        qa_accuracy: qa,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, data, report))
}
