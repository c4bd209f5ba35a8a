//! Finite-difference gradient checks over every tensor op and through the
//! whole model, shared by the test suite and the `gradcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::abstractor::AbstractorConfig;
use crate::data::{render_conversation, ConversationRecord, Image, Turn};
use crate::error::Result;
use crate::lm::LmConfig;
use crate::lora::LoraConfig;
use crate::model::{ModelConfig, OwlModel};
use crate::nn::NormKind;
use crate::tensor::gradcheck::{grad_check_inputs, DEFAULT_EPS};
use crate::tensor::{Precision, Tensor};
use crate::tokenizer::{Vocabulary, MIN_VOCAB};
use crate::vision::VisionConfig;

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
    let n = shape.iter().product();
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    Tensor::param(shape, randn(rng, shape))
}

/// `Σ out ⊙ w` with fixed random `w`, so every output coordinate carries a
/// distinct upstream gradient.
fn probe(out: Tensor, rng: &mut ChaCha8Rng) -> Result<impl Fn(&Tensor) -> Result<Tensor>> {
    let w = Tensor::new(out.shape(), randn(rng, out.shape()))?;
    Ok(move |t: &Tensor| t.mul(&w)?.sum())
}

type OpCase = fn(&mut ChaCha8Rng) -> Result<f64>;

macro_rules! case {
    ($rng:ident, [$($input:ident : $shape:expr),*], |$($arg:ident),*| $body:expr) => {{
        $(let $input = leaf($rng, &$shape)?;)*
        let sample = { $(let $arg = &$input;)* $body? };
        let reduce = probe(sample, $rng)?;
        grad_check_inputs(
            || { $(let $arg = &$input;)* reduce(&$body?) },
            &[$($input.clone()),*],
            DEFAULT_EPS,
        )
    }};
}

fn dim(rng: &mut ChaCha8Rng, lo: usize) -> usize {
    rng.random_range(lo..=8)
}

const OP_CASES: &[(&str, OpCase)] = &[
    ("matmul", |r| {
        let (m, k, n) = (dim(r, 1), dim(r, 1), dim(r, 1));
        case!(r, [a: [m, k], b: [k, n]], |a, b| a.matmul(b))
    }),
    ("matmul_t", |r| {
        let (m, k, n) = (dim(r, 1), dim(r, 1), dim(r, 1));
        case!(r, [a: [m, k], b: [n, k]], |a, b| a.matmul_t(b))
    }),
    ("add", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n], b: [m, n]], |a, b| a.add(b))
    }),
    ("add_bias", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n], b: [n]], |a, b| a.add(b))
    }),
    ("mul", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n], b: [m, n]], |a, b| a.mul(b))
    }),
    ("scale", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        let s: f64 = r.sample(StandardNormal);
        case!(r, [a: [m, n]], |a| a.scale(s))
    }),
    ("transpose", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n]], |a| a.transpose())
    }),
    ("reshape", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n]], |a| a.reshape(&[n, m]))
    }),
    ("concat_rows", |r| {
        let (m1, m2, n) = (dim(r, 1), dim(r, 1), dim(r, 1));
        case!(r, [a: [m1, n], b: [m2, n]], |a, b| Tensor::concat(&[a.clone(), b.clone()], 0))
    }),
    ("concat_cols", |r| {
        let (m, n1, n2) = (dim(r, 1), dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n1], b: [m, n2]], |a, b| Tensor::concat(&[a.clone(), b.clone()], 1))
    }),
    ("slice", |r| {
        let (m, n) = (dim(r, 2), dim(r, 2));
        let axis = r.random_range(0..2);
        let extent = [m, n][axis];
        let start = r.random_range(0..extent);
        let len = r.random_range(1..=extent - start);
        case!(r, [a: [m, n]], |a| a.slice(axis, start, len))
    }),
    ("embedding_lookup", |r| {
        let (v, d, t) = (dim(r, 1), dim(r, 1), dim(r, 1));
        let ids: Vec<usize> = (0..t).map(|_| r.random_range(0..v)).collect();
        case!(r, [table: [v, d]], |table| table.embedding_lookup(&ids))
    }),
    ("gelu", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n]], |a| a.gelu())
    }),
    ("layer_norm", |r| {
        let (m, n) = (dim(r, 1), dim(r, 2));
        case!(r, [x: [m, n], g: [n], b: [n]], |x, g, b| x.layer_norm(g, b))
    }),
    ("rms_norm", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [x: [m, n], g: [n]], |x, g| x.rms_norm(g))
    }),
    ("softmax_rows", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n]], |a| a.softmax_rows())
    }),
    ("causal_mask_fill", |r| {
        let t = dim(r, 1);
        case!(r, [a: [t, t]], |a| a.causal_mask_fill()?.softmax_rows())
    }),
    ("sum", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n]], |a| a.sum())
    }),
    ("mean", |r| {
        let (m, n) = (dim(r, 1), dim(r, 1));
        case!(r, [a: [m, n]], |a| a.mean())
    }),
    ("masked_cross_entropy", |r| {
        let (t, v) = (dim(r, 1), dim(r, 2));
        let targets: Vec<usize> = (0..t).map(|_| r.random_range(0..v)).collect();
        let mut mask: Vec<u8> = (0..t).map(|_| r.random_range(0..2)).collect();
        mask[r.random_range(0..t)] = 1;
        case!(r, [logits: [t, v]], |logits| logits.masked_cross_entropy(&targets, &mask))
    }),
];

pub fn op_names() -> Vec<&'static str> {
    OP_CASES.iter().map(|(n, _)| *n).collect()
}

/// Worst relative error of each op over `seeds` random cases with every
/// extent in 1..=8.
pub fn check_ops(seeds: u64) -> Result<Vec<CheckResult>> {
    OP_CASES
        .iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                worst = worst.max(case(&mut rng)?);
            }
            Ok(CheckResult {
                name: name.to_string(),
                max_rel_err: worst,
            })
        })
        .collect()
}

/// Smallest model with every component: 1-layer encoder, 1-layer
/// abstractor, 2-layer LM with adapters on all four attention projections.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vision: VisionConfig {
            image_size: 8,
            patch_size: 4,
            layers: 1,
            dim: 8,
            heads: 2,
            use_cls: true,
        },
        abstractor: AbstractorConfig {
            num_queries: 3,
            layers: 1,
            heads: 2,
            self_attention_on_queries: true,
        },
        lm: LmConfig {
            vocab_size: MIN_VOCAB,
            layers: 2,
            dim: 8,
            heads: 2,
            max_positions: 32,
            norm: NormKind::RmsNorm,
        },
        lora: LoraConfig {
            rank: 2,
            alpha: 4.0,
            targets: ["q_proj", "k_proj", "v_proj", "o_proj"].map(String::from).to_vec(),
            dropout: 0.0,
        },
    }
}

/// Checks the LM loss of one image conversation against every parameter of
/// the tiny model, adapters included with nonzero `B`.
pub fn check_end_to_end(seed: u64) -> Result<CheckResult> {
    let _mode = Precision::F64.scoped();
    let cfg = tiny_model_config();
    let mut model = OwlModel::new(&cfg, seed)?;
    model.attach_lora(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.params();
    for (name, p) in &params {
        if name.ends_with(".lora_b") {
            p.assign(&randn(&mut rng, p.shape()).iter().map(|v| 0.1 * v).collect::<Vec<_>>())?;
        }
        p.set_requires_grad(true);
    }
    let vocab = Vocabulary::bytes_only();
    let size = cfg.vision.image_size;
    let pixels: Vec<f32> = (0..size * size * 3).map(|_| rng.random()).collect();
    let image = Image::new(size, size, pixels)?;
    let rec = ConversationRecord::new(vec![Turn::user("hi?"), Turn::assistant("ok")], Some(image.clone()))?;
    let ex = render_conversation(&rec, &vocab, 32)?;
    let tensors: Vec<Tensor> = params.into_iter().map(|(_, p)| p).collect();
    let err = grad_check_inputs(|| model.loss(&ex, Some(&image)), &tensors, DEFAULT_EPS)?;
    Ok(CheckResult {
        name: "end_to_end_lm_loss".into(),
        max_rel_err: err,
    })
}

/// Every op check followed by the end-to-end check.
pub fn run_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = check_ops(seeds)?;
    out.push(check_end_to_end(0)?);
    Ok(out)
}
