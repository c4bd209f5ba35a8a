use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use owlet::config::RunConfig;
use owlet::data::synth::{synth_instruction_dataset, synth_shapes_dataset, DEFAULT_IMAGE_SIZE};
use owlet::data::{load_manifest, render_prompt, write_manifest, ConversationRecord, Image, Record, Turn};
use owlet::eval::{load_jsonl, render_report, EvalInputs};
use owlet::gradcheck::{run_suite, TOLERANCE};
use owlet::lm::Decode;
use owlet::model::OwlModel;
use owlet::pipeline::{desk_records, render_split, vocab_corpus};
use owlet::tokenizer::Vocabulary;
use owlet::train::{load_checkpoint, render_examples, save_checkpoint, MetricsLog, Trainer};
use owlet::{Error, Result};

#[derive(Parser)]
#[command(name = "owlet", version, about = "Two-stage multimodal training at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train the vision encoder and abstractor on captions.
    Pretrain(TrainArgs),
    /// Stage 2: attach adapters and tune on mixed instructions.
    Finetune(FinetuneArgs),
    /// Answer one prompt.
    Generate(GenerateArgs),
    /// Multi-turn conversation over stdin.
    Chat(ChatArgs),
    /// Aggregate rating, ability and judge files into a report.
    Eval(EvalArgs),
    /// Finite-difference gradient checks for every op and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Write a synthetic dataset as a JSONL manifest plus images.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL manifest to train on instead of synthetic data.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Vocabulary file; built from the training text when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Continue from a checkpoint written by the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Print a progress line every N steps.
    #[arg(long, default_value_t = 25)]
    log_every: usize,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Stage-1 checkpoint to start from.
    #[arg(long, required_unless_present = "resume")]
    init_from: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    /// PPM or raw float-grid image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    judge: Option<PathBuf>,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Captions,
    Instructions,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    /// Output manifest path; images go to an `images/` directory beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    text_fraction: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| dispatch(cli.cmd)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("OWLET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::Config(format!("OWLET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Generate(a) => generate(a),
        Command::Chat(a) => chat(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck { seeds } => gradcheck(seeds),
        Command::SynthData(a) => synth_data(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

/// Loads the config and applies command-line overrides to `stage`, then
/// validates the result.
fn run_config(a: &TrainArgs, stage: u8) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.paths.out_dir = o.clone();
    }
    let sc = if stage == 1 { &mut cfg.stage1 } else { &mut cfg.stage2 };
    if let Some(n) = a.steps {
        sc.total_steps = n;
    }
    if let Some(lr) = a.lr {
        sc.peak_lr = lr;
    }
    if let Some(b) = a.batch_size {
        sc.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_conversations(path: &Path) -> Result<Vec<ConversationRecord>> {
    Ok(load_manifest(path)?
        .into_iter()
        .map(|r| match r {
            Record::Caption(c) => c.to_conversation(),
            Record::Conversation(c) => c,
        })
        .collect())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// `steps` replaces the saved total, extending (or shortening) the schedule.
fn resume_trainer(path: &Path, stage: u8, steps: Option<usize>) -> Result<(OwlModel, Vocabulary, Trainer)> {
    let ck = load_checkpoint(path)?;
    let mut trainer = ck
        .trainer()?
        .ok_or_else(|| Error::Config(format!("{} has no trainer state to resume", path.display())))?;
    if trainer.stage != stage {
        return Err(Error::Config(format!(
            "{} holds stage {} state, not stage {stage}",
            path.display(),
            trainer.stage
        )));
    }
    if let Some(n) = steps {
        trainer.cfg.total_steps = n;
        trainer.cfg.validate(&format!("stage{stage}"))?;
    }
    Ok((ck.build_model()?, ck.vocabulary()?, trainer))
}

fn train_loop(
    model: &OwlModel,
    vocab: &Vocabulary,
    trainer: &mut Trainer,
    text: &[owlet::train::Example],
    mm: &[owlet::train::Example],
    out_dir: &Path,
    log_every: usize,
) -> Result<PathBuf> {
    create_dir(out_dir)?;
    let log = MetricsLog::to_file(&out_dir.join("metrics.jsonl"))?;
    let every = log_every.max(1);
    while !trainer.is_done() {
        let losses = trainer.run(model, text, mm, every, &log)?;
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        eprintln!("stage {} step {}/{} loss {mean:.4}", trainer.stage, trainer.step, trainer.cfg.total_steps);
    }
    let ckpt = out_dir.join(format!("stage{}.ckpt", trainer.stage));
    save_checkpoint(&ckpt, model, vocab, Some(trainer))?;
    vocab.save(&out_dir.join("vocab.txt"))?;
    println!("{}", ckpt.display());
    Ok(ckpt)
}

fn pretrain(a: TrainArgs) -> Result<()> {
    let cfg = run_config(&a, 1)?;
    let max_len = cfg.stage1.max_len;
    let captions = match &a.manifest {
        Some(p) => manifest_conversations(p)?,
        None => desk_records(&cfg.data)?.0,
    };
    let (model, vocab, mut trainer) = match &a.resume {
        Some(p) => resume_trainer(p, 1, a.steps)?,
        None => {
            let vocab = match (&a.vocab, &a.manifest) {
                (Some(p), _) => Vocabulary::load(p)?,
                (None, Some(_)) => {
                    let corpus = vocab_corpus(&captions, &[]);
                    Vocabulary::build(corpus.iter().map(String::as_str), cfg.data.vocab_size)?
                }
                // Synthetic runs size the vocabulary for Stage 2 as well.
                (None, None) => {
                    let (c, i) = desk_records(&cfg.data)?;
                    let corpus = vocab_corpus(&c, &i);
                    Vocabulary::build(corpus.iter().map(String::as_str), cfg.data.vocab_size)?
                }
            };
            let mut mc = cfg.model.clone();
            mc.lm.vocab_size = vocab.len();
            (OwlModel::new(&mc, cfg.seed)?, vocab, Trainer::new(1, &cfg.stage1)?)
        }
    };
    let examples = render_examples(&captions, &vocab, max_len)?;
    train_loop(&model, &vocab, &mut trainer, &[], &examples, &cfg.paths.out_dir, a.log_every)?;
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = run_config(&a.train, 2)?;
    let (model, vocab, mut trainer) = match (&a.train.resume, &a.init_from) {
        (Some(p), _) => resume_trainer(p, 2, a.train.steps)?,
        (None, Some(p)) => {
            let ck = load_checkpoint(p)?;
            if ck.has_lora() {
                return Err(Error::Config(format!("{} already carries adapters", p.display())));
            }
            let mut model = ck.build_model()?;
            model.cfg.lora = cfg.model.lora.clone();
            model.attach_lora(cfg.seed)?;
            (model, ck.vocabulary()?, Trainer::new(2, &cfg.stage2)?)
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    let records = match &a.train.manifest {
        Some(p) => manifest_conversations(p)?,
        None => desk_records(&cfg.data)?.1,
    };
    let (text, mm) = render_split(records, &vocab, cfg.stage2.max_len)?;
    train_loop(&model, &vocab, &mut trainer, &text, &mm, &cfg.paths.out_dir, a.train.log_every)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(OwlModel, Vocabulary)> {
    let ck = load_checkpoint(path)?;
    Ok((ck.build_model()?, ck.vocabulary()?))
}

fn load_image(path: Option<&PathBuf>) -> Result<Option<Image>> {
    path.map(|p| Image::load(p)).transpose()
}

fn reply(model: &OwlModel, vocab: &Vocabulary, turns: &[Turn], image: Option<&Image>, decode: Decode, max_new: usize, seed: u64) -> Result<String> {
    let prompt = render_prompt(turns, image.is_some(), vocab)?;
    let ids = model.generate(&prompt, image, decode, max_new, seed)?;
    Ok(vocab.decode(&ids).trim().to_string())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let image = load_image(a.image.as_ref())?;
    let decode = match a.temperature {
        Some(t) => Decode::Temperature(t),
        None => Decode::Greedy,
    };
    let text = reply(&model, &vocab, &[Turn::user(a.prompt)], image.as_ref(), decode, a.max_new, a.seed)?;
    println!("{text}");
    Ok(())
}

fn chat(a: ChatArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let image = load_image(a.image.as_ref())?;
    let mut turns = Vec::new();
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::Io {
            path: PathBuf::from("<stdin>"),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        turns.push(Turn::user(line.trim()));
        let text = reply(&model, &vocab, &turns, image.as_ref(), Decode::Greedy, a.max_new, 0)?;
        writeln!(out, "{text}").and_then(|_| out.flush()).map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })?;
        turns.push(Turn::assistant(text));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let inputs = EvalInputs {
        questions: load_jsonl(&a.questions)?,
        ratings: load_jsonl(&a.ratings)?,
        annotations: a.annotations.as_deref().map(load_jsonl).transpose()?.unwrap_or_default(),
        judge_pairs: a.judge.as_deref().map(load_jsonl).transpose()?.unwrap_or_default(),
    };
    let report = render_report(&inputs)?;
    if let Some(dir) = &a.out {
        report.write(dir)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<()> {
    let results = run_suite(seeds)?;
    for r in &results {
        println!(
            "{:<24} {:.3e} {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {TOLERANCE:e} for {}",
            failed.join(", ")
        )))
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let records: Vec<Record> = match a.kind {
        SynthKind::Captions => synth_shapes_dataset(a.seed, a.n, a.grid, DEFAULT_IMAGE_SIZE)?
            .into_iter()
            .map(Record::Caption)
            .collect(),
        SynthKind::Instructions => {
            synth_instruction_dataset(a.seed, a.n, a.text_fraction, a.grid, DEFAULT_IMAGE_SIZE)?
                .into_iter()
                .map(Record::Conversation)
                .collect()
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_manifest(&a.out, &records)?;
    println!("{} records -> {}", records.len(), a.out.display());
    Ok(())
}
