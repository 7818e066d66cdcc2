use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use biss::checkpoint::{read_manifest, Checkpoint};
use biss::corpus::{encode_pairs, read_dialogues, tokenized_pairs, Vocab};
use biss::sampling::{Strategy, PRESET_NAMES};
use biss::synth::{noisy_copy_dialogues, write_dialogues, SynthConfig};
use biss::tensor::{DType, Real};
use biss::trainer::{
    ablate, check_vocab, evaluate, generate, metrics_csv, metrics_table, Dataset, TrainConfig, TrainError, Trainer,
};

#[derive(Parser)]
#[command(name = "biss", version, about = "Scheduled-sampling seq2seq dialogue trainer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Strategy preset name, overriding the config.
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Training corpus for train/ablate, evaluation corpus for eval.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Greedy reply to a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        prompt: String,
    },
    /// Train and score several strategies on the same data order.
    Ablate {
        /// Comma-separated preset names; all presets when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Print a checkpoint's manifest.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dump every parameter value as text.
        #[arg(long)]
        text: bool,
    },
    /// Write a synthetic noisy-copy corpus (train/valid/test).
    Synth {
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

fn deterministic() -> bool {
    std::env::var("BISS_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn data_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| data_err(path, e))
}

fn base_config(common: &Common) -> Result<TrainConfig, TrainError> {
    let mut config = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(name) = &common.strategy {
        config.strategy = Strategy::preset(name)?;
    }
    if let Some(corpus) = &common.corpus {
        config.corpus.train = Some(corpus.clone());
    }
    if let Some(dir) = &common.out_dir {
        config.checkpoint_dir = Some(dir.clone());
    }
    Ok(config)
}

fn train<R: Real>(common: &Common, resume: Option<&Path>) -> Result<(), TrainError> {
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<R>::load(path)?;
            let mut trainer = Trainer::from_checkpoint(&ckpt)?;
            if let Some(corpus) = &common.corpus {
                trainer.config.corpus.train = Some(corpus.clone());
            }
            if let Some(dir) = &common.out_dir {
                trainer.config.checkpoint_dir = Some(dir.clone());
            }
            trainer
        }
        None => {
            let mut config = base_config(common)?;
            config.validate()?;
            let vocab = Dataset::load(&config.corpus)?.vocab;
            config.model.vocab_size = vocab.len();
            Trainer::new(config, vocab.hash())?
        }
    };
    let data = Dataset::load(&trainer.config.corpus)?;
    if data.vocab.hash() != trainer.vocab_hash {
        return Err(TrainError::VocabMismatch {
            expected: trainer.vocab_hash.clone(),
            found: data.vocab.hash(),
        });
    }
    let out_dir = trainer.config.checkpoint_dir.clone();
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
        data.vocab.save(&dir.join("vocab.txt"))?;
    }
    log::info!(
        "{} train pairs, vocab {}, {} parameters",
        data.train.len(),
        data.vocab.len(),
        trainer.model.num_parameters()
    );
    trainer.run(&data, None)?;
    let held_out = if data.test.is_empty() { &data.valid } else { &data.test };
    let mut rows = trainer.eval_log.clone();
    if !held_out.is_empty() {
        rows.push(evaluate(
            &trainer.model,
            held_out,
            "final",
            trainer.global_step,
            trainer.config.batch_size,
        )?);
        print!("{}", metrics_table(&rows));
    }
    if let Some(dir) = &out_dir {
        let trace: String = std::iter::once("step,loss\n".to_string())
            .chain(trainer.loss_trace.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)))
            .collect();
        write_file(&dir.join("loss.csv"), &trace)?;
        if !rows.is_empty() {
            write_file(&dir.join("metrics.csv"), &metrics_csv(&rows))?;
        }
    }
    Ok(())
}

fn eval<R: Real>(common: &Common, checkpoint: &Path, vocab: &Path) -> Result<(), TrainError> {
    let ckpt = Checkpoint::<R>::load(checkpoint)?;
    let vocab = Vocab::load(vocab)?;
    check_vocab(&ckpt.manifest, &vocab)?;
    let path = common
        .corpus
        .clone()
        .or_else(|| ckpt.manifest.train.corpus.test.clone())
        .or_else(|| ckpt.manifest.train.corpus.valid.clone())
        .ok_or_else(|| TrainError::Config("no evaluation corpus given".into()))?;
    let dialogues = read_dialogues(&path, &ckpt.manifest.train.corpus.delimiter)?;
    let pairs = encode_pairs(&tokenized_pairs(&dialogues).0, &vocab);
    let model = ckpt.model()?;
    let row = evaluate(&model, &pairs, "eval", ckpt.manifest.global_step, ckpt.manifest.train.batch_size)?;
    print!("{}", metrics_table(std::slice::from_ref(&row)));
    if let Some(dir) = &common.out_dir {
        write_file(&dir.join("eval.csv"), &metrics_csv(&[row]))?;
    }
    Ok(())
}

fn generate_cmd<R: Real>(checkpoint: &Path, vocab: &Path, prompt: &str) -> Result<(), TrainError> {
    let ckpt = Checkpoint::<R>::load(checkpoint)?;
    let vocab = Vocab::load(vocab)?;
    check_vocab(&ckpt.manifest, &vocab)?;
    println!("{}", generate(&ckpt.model()?, &vocab, prompt)?);
    Ok(())
}

fn ablate_cmd<R: Real>(common: &Common, variants: &[String]) -> Result<(), TrainError> {
    let config = base_config(common)?;
    config.validate()?;
    let data = Dataset::load(&config.corpus)?;
    let names: Vec<String> = if variants.is_empty() {
        PRESET_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        variants.to_vec()
    };
    let variants = names
        .into_iter()
        .map(|n| Ok((n.clone(), Strategy::preset(&n)?)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let rows = ablate::<R>(&config, &variants, &data)?;
    let table = metrics_table(&rows);
    print!("{table}");
    if let Some(dir) = &common.out_dir {
        write_file(&dir.join("ablation.csv"), &metrics_csv(&rows))?;
        write_file(&dir.join("ablation.txt"), &table)?;
    }
    Ok(())
}

fn inspect<R: Real>(checkpoint: &Path, text: bool) -> Result<(), TrainError> {
    if text {
        print!("{}", Checkpoint::<R>::load(checkpoint)?.to_text());
        return Ok(());
    }
    let m = read_manifest(checkpoint)?;
    println!("dtype        {:?}", m.dtype);
    println!("step         {}", m.global_step);
    println!("epoch        {} (batch {})", m.epoch, m.batch_in_epoch);
    println!("strategy     {:?}", m.train.strategy);
    println!("model        {:?}", m.model);
    println!("vocab hash   {}", m.vocab_hash);
    if let Some(last) = m.loss_trace.last() {
        println!("last loss    {last:.6}");
    }
    let total: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    println!("parameters   {total} in {} tensors", m.tensors.len());
    for t in &m.tensors {
        println!("  {:<36} {:?}", t.name, t.shape);
    }
    Ok(())
}

fn synth(common: &Common, pairs: usize, noise: f64) -> Result<(), TrainError> {
    let dir = common
        .out_dir
        .clone()
        .ok_or_else(|| TrainError::Config("synth needs --out-dir".into()))?;
    if !(0.0..=1.0).contains(&noise) {
        return Err(TrainError::Config(format!("noise must lie in [0, 1], got {noise}")));
    }
    let seed = common.seed.unwrap_or(1);
    let config = SynthConfig {
        noise,
        ..Default::default()
    };
    let held_out = (pairs / 10).max(1);
    for (name, n, offset) in [("train", pairs, 0), ("valid", held_out, 1), ("test", held_out, 2)] {
        let dialogues = noisy_copy_dialogues(&config, n, seed.wrapping_mul(3).wrapping_add(offset));
        write_dialogues(&dir.join(format!("{name}.txt")), &dialogues)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn precision_of(path: &Path) -> Result<DType, TrainError> {
    Ok(read_manifest(path)?.dtype)
}

fn dispatch<R: Real>(cli: &Cli) -> Result<(), TrainError> {
    let c = &cli.common;
    match &cli.command {
        Command::Train { resume } => train::<R>(c, resume.as_deref()),
        Command::Eval { checkpoint, vocab } => eval::<R>(c, checkpoint, vocab),
        Command::Generate {
            checkpoint,
            vocab,
            prompt,
        } => generate_cmd::<R>(checkpoint, vocab, prompt),
        Command::Ablate { variants } => ablate_cmd::<R>(c, variants),
        Command::InspectCheckpoint { checkpoint, text } => inspect::<R>(checkpoint, *text),
        Command::Synth { pairs, noise } => synth(c, *pairs, *noise),
    }
}

fn run(cli: &Cli) -> Result<(), TrainError> {
    // Existing checkpoints are read at the precision they were written in.
    let stored = match &cli.command {
        Command::Eval { checkpoint, .. }
        | Command::Generate { checkpoint, .. }
        | Command::InspectCheckpoint { checkpoint, .. } => Some(precision_of(checkpoint)?),
        Command::Train { resume: Some(path) } => Some(precision_of(path)?),
        _ => None,
    };
    let dtype = stored.unwrap_or(if deterministic() { DType::F64 } else { DType::F32 });
    match dtype {
        DType::F32 => dispatch::<f32>(cli),
        DType::F64 => dispatch::<f64>(cli),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
