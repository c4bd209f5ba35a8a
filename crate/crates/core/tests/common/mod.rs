#![allow(dead_code)]

use owlet::gradcheck::tiny_model_config;
use owlet::model::{ModelConfig, OwlModel};
use owlet::pipeline::{build_desk_data, DataConfig, DeskData};
use owlet::train::StageConfig;

/// A few hundred synthetic records; enough for short training runs.
pub fn small_data() -> DeskData {
    let cfg = DataConfig {
        captions: 96,
        instructions: 96,
        probes: 16,
        vocab_size: 300,
        ..DataConfig::default()
    };
    build_desk_data(&cfg, 48).unwrap()
}

pub fn small_model_config(data: &DeskData) -> ModelConfig {
    let mut cfg = tiny_model_config();
    cfg.lm.vocab_size = data.vocab.len();
    cfg.lm.max_positions = 64;
    cfg
}

pub fn small_model(data: &DeskData, seed: u64) -> OwlModel {
    OwlModel::new(&small_model_config(data), seed).unwrap()
}

pub fn short_stage(stage: u8, steps: usize) -> StageConfig {
    let base = if stage == 1 {
        StageConfig::stage1_desk()
    } else {
        StageConfig::stage2_desk()
    };
    StageConfig {
        total_steps: steps,
        warmup_steps: steps / 10,
        batch_size: 2,
        max_len: 48,
        ..base
    }
}
