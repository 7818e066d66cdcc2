//! Training loop, evaluation, ablation and generation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, Manifest, RngState, TensorEntry};
use crate::corpus::{
    detokenize, encode_pairs, make_batches, read_dialogues, sequential_batches, terminate, tokenize, tokenized_pairs,
    Batch, CorpusError, DialoguePair, Vocab, DEFAULT_DELIMITER, EOS,
};
use crate::graph::{Graph, Mode};
use crate::metrics::{corpus_bleu, distinct_report, MetricError};
use crate::model::{ModelConfig, ModelError, Seq2Seq, SeqBatch};
use crate::optim::{max_abs, Adam, OptimizerConfig};
use crate::sampling::{two_pass_training_step, SamplingError, StepContext, Strategy};
use crate::tensor::Real;

pub type Pairs = Vec<DialoguePair<Vec<usize>>>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("vocabulary hash mismatch: checkpoint has {expected}, corpus gives {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("non-finite loss {loss} at step {step} (epoch {epoch}, batch {batch}), max |grad| = {max_grad}")]
    Numeric {
        step: u64,
        epoch: usize,
        batch: usize,
        loss: f64,
        max_grad: f64,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl TrainError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) | TrainError::Model(ModelError::Config(_)) | TrainError::Sampling(_) => 2,
            TrainError::Numeric { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Existing vocabulary file; built from the training pairs when absent.
    pub vocab: Option<PathBuf>,
    pub delimiter: String,
    pub min_freq: usize,
    /// Vocabulary cap including the four reserved ids.
    pub max_vocab: Option<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: None,
            valid: None,
            test: None,
            vocab: None,
            delimiter: DEFAULT_DELIMITER.to_string(),
            min_freq: 1,
            max_vocab: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// Evaluate on the validation pairs every this many steps (0 = never).
    pub eval_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            strategy: Strategy::TeacherForcing,
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 32,
            seed: 1,
            corpus: CorpusConfig::default(),
            eval_every: 0,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks everything except `model.vocab_size`, which comes from the data.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(TrainError::Config(format!("bad optimizer settings {o:?}")));
        }
        self.strategy.validate()?;
        for path in [&self.corpus.train, &self.corpus.valid, &self.corpus.test, &self.corpus.vocab]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(TrainError::Data(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

/// Encoded corpus splits and the vocabulary they share.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Pairs,
    pub valid: Pairs,
    pub test: Pairs,
}

fn read_split(path: &Path, delimiter: &str) -> Result<Vec<DialoguePair<Vec<String>>>> {
    let dialogues = read_dialogues(path, delimiter)?;
    let (pairs, skipped) = tokenized_pairs(&dialogues);
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} dialogues with fewer than two turns", path.display());
    }
    Ok(pairs)
}

impl Dataset {
    pub fn load(config: &CorpusConfig) -> Result<Self> {
        let train_path = config
            .train
            .as_ref()
            .ok_or_else(|| TrainError::Config("no training corpus given".into()))?;
        let train = read_split(train_path, &config.delimiter)?;
        if train.is_empty() {
            return Err(TrainError::Corpus(CorpusError::EmptyCorpus));
        }
        let vocab = match &config.vocab {
            Some(path) => Vocab::load(path)?,
            None => Vocab::from_pairs(&train, config.min_freq, config.max_vocab)?,
        };
        let other = |p: &Option<PathBuf>| -> Result<Pairs> {
            match p {
                Some(path) => Ok(encode_pairs(&read_split(path, &config.delimiter)?, &vocab)),
                None => Ok(Vec::new()),
            }
        };
        let valid = other(&config.valid)?;
        let test = other(&config.test)?;
        let train = encode_pairs(&train, &vocab);
        Ok(Self {
            vocab,
            train,
            valid,
            test,
        })
    }
}

/// One row of a results table. Scores are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    /// Cumulative BLEU-1..4.
    pub bleu: [f64; 4],
    /// Clipped n-gram precisions p_1..p_4.
    pub precision: [f64; 4],
    pub distinct: [f64; 3],
    /// Mean teacher-forced cross-entropy on the evaluated pairs.
    pub loss: f64,
    pub step: u64,
}

/// Seed for the data order of `epoch`; independent of the strategy streams.
pub fn data_order_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6461_7461);
    rng.set_word_pos(2 * epoch as u128);
    rand::Rng::random(&mut rng)
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6472_6f70);
    rng
}

#[derive(Debug, Clone)]
pub struct Trainer<R> {
    pub config: TrainConfig,
    pub model: Seq2Seq<R>,
    pub adam: Adam<R>,
    pub dropout_rng: ChaCha8Rng,
    pub global_step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub loss_trace: Vec<f64>,
    pub eval_log: Vec<MetricsRow>,
    pub vocab_hash: String,
}

impl<R: Real> Trainer<R> {
    /// Fresh run. `config.model.vocab_size` must already match the vocabulary.
    pub fn new(config: TrainConfig, vocab_hash: String) -> Result<Self> {
        config.validate()?;
        config.model.validate()?;
        let model = Seq2Seq::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(config.optimizer.clone(), model.params());
        Ok(Self {
            dropout_rng: dropout_rng(config.seed),
            config,
            model,
            adam,
            global_step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            loss_trace: Vec::new(),
            eval_log: Vec::new(),
            vocab_hash,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<R>) -> Result<Self> {
        let m = &ckpt.manifest;
        Ok(Self {
            config: m.train.clone(),
            model: ckpt.model()?,
            adam: ckpt.adam(),
            dropout_rng: m.dropout_rng.restore()?,
            global_step: m.global_step,
            epoch: m.epoch,
            batch_in_epoch: m.batch_in_epoch,
            loss_trace: m.loss_trace.clone(),
            eval_log: Vec::new(),
            vocab_hash: m.vocab_hash.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<R> {
        let params = self.model.params().to_vec();
        Checkpoint {
            manifest: Manifest {
                dtype: R::DTYPE,
                model: self.config.model.clone(),
                train: self.config.clone(),
                vocab_hash: self.vocab_hash.clone(),
                global_step: self.global_step,
                epoch: self.epoch,
                batch_in_epoch: self.batch_in_epoch,
                adam_step: self.adam.step,
                dropout_rng: RngState::capture(&self.dropout_rng),
                loss_trace: self.loss_trace.clone(),
                tensors: params
                    .iter()
                    .map(|p| TensorEntry {
                        name: p.name.clone(),
                        shape: p.tensor.shape().to_vec(),
                    })
                    .collect(),
            },
            params,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn epoch_batches(&self, train: &[DialoguePair<Vec<usize>>], epoch: usize) -> Vec<Batch> {
        make_batches(
            train,
            self.config.batch_size,
            self.config.model.max_len,
            data_order_seed(self.config.seed, epoch),
        )
    }

    /// One optimizer update; returns the batch loss.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let ctx = StepContext {
            seed: self.config.seed,
            epoch: self.epoch,
            batch_index: self.batch_in_epoch,
            global_step: self.global_step,
        };
        let out = two_pass_training_step(&self.model, batch, &self.config.strategy, &ctx, &mut self.dropout_rng)?;
        let max_grad = max_abs(&out.grads);
        if !out.loss.is_finite() || !max_grad.is_finite() {
            return Err(TrainError::Numeric {
                step: self.global_step,
                epoch: self.epoch,
                batch: self.batch_in_epoch,
                loss: out.loss,
                max_grad,
            });
        }
        self.adam.update(self.model.params_mut(), &out.grads);
        self.global_step += 1;
        self.batch_in_epoch += 1;
        self.loss_trace.push(out.loss);
        log::debug!("step {} loss {:.6}", self.global_step, out.loss);
        Ok(out.loss)
    }

    /// Trains until the configured epoch count, or until `stop_at_step`
    /// updates have been made. Picks up wherever the counters point.
    pub fn run(&mut self, data: &Dataset, stop_at_step: Option<u64>) -> Result<()> {
        if data.train.is_empty() {
            return Err(TrainError::Corpus(CorpusError::EmptyCorpus));
        }
        while !self.finished() {
            let batches = self.epoch_batches(&data.train, self.epoch);
            while self.batch_in_epoch < batches.len() {
                if stop_at_step.is_some_and(|s| self.global_step >= s) {
                    return Ok(());
                }
                self.step(&batches[self.batch_in_epoch])?;
                let step = self.global_step;
                if self.config.eval_every > 0 && step % self.config.eval_every == 0 && !data.valid.is_empty() {
                    let row = evaluate(&self.model, &data.valid, &format!("step-{step}"), step, self.config.batch_size)?;
                    log::info!("step {step} valid bleu-2 {:.2} distinct-2 {:.2}", row.bleu[1], row.distinct[1]);
                    self.eval_log.push(row);
                }
                if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
                    self.save_to_dir(&format!("step-{step}.ckpt"))?;
                }
            }
            let n = batches.len();
            let mean = self.loss_trace[self.loss_trace.len() - n..].iter().sum::<f64>() / n as f64;
            log::info!("epoch {} done, mean loss {mean:.4}", self.epoch + 1);
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
        self.save_to_dir("last.ckpt")?;
        Ok(())
    }

    fn save_to_dir(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.config.checkpoint_dir {
            let path = dir.join(name);
            self.checkpoint().save(&path)?;
            log::info!("saved {}", path.display());
        }
        Ok(())
    }
}

/// Mean teacher-forced cross-entropy over `pairs`, weighted by target tokens.
pub fn eval_loss<R: Real>(model: &Seq2Seq<R>, pairs: &[DialoguePair<Vec<usize>>], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut idle = ChaCha8Rng::seed_from_u64(0);
    for batch in sequential_batches(pairs, batch_size, model.config().max_len) {
        let mut g = Graph::<R>::no_grad();
        let p = model.bind(&mut g);
        let src = SeqBatch::new(&batch.context, &batch.context_pad, batch.size, batch.src_len);
        let memory = model.encode(&mut g, &p, src, Mode::Eval, &mut idle)?;
        let logits = model.decode(&mut g, &p, &batch.decoder_input, &memory, Mode::Eval, &mut idle)?;
        let loss = g
            .cross_entropy(logits, &batch.response, &batch.response_pad)
            .map_err(ModelError::from)?;
        let n = batch.response_pad.iter().filter(|&&p| !p).count();
        total += g.value(loss)[0].to_f64().unwrap_or(f64::NAN) * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Greedy responses for every context, in order.
pub fn generate_all<R: Real>(
    model: &Seq2Seq<R>,
    pairs: &[DialoguePair<Vec<usize>>],
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let max_len = model.config().max_len;
    let mut out = Vec::with_capacity(pairs.len());
    for batch in sequential_batches(pairs, batch_size, max_len) {
        let src = SeqBatch::new(&batch.context, &batch.context_pad, batch.size, batch.src_len);
        out.extend(model.greedy_generate(src, max_len)?);
    }
    Ok(out)
}

/// Reference side of a pair as the model sees it: truncated to fit with EOS.
pub fn reference(response: &[usize], max_len: usize) -> Vec<usize> {
    let mut r = terminate(response, max_len);
    if r.last() == Some(&EOS) {
        r.pop();
    }
    r
}

/// Scores generations against references.
pub fn score(label: &str, step: u64, loss: f64, candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<MetricsRow> {
    let bleu = corpus_bleu(candidates, references)?;
    let distinct = distinct_report(candidates);
    Ok(MetricsRow {
        label: label.to_string(),
        bleu: bleu.bleu.map(|v| 100.0 * v),
        precision: bleu.precision.map(|v| 100.0 * v),
        distinct: distinct.distinct.map(|v| 100.0 * v),
        loss,
        step,
    })
}

pub fn evaluate<R: Real>(
    model: &Seq2Seq<R>,
    pairs: &[DialoguePair<Vec<usize>>],
    label: &str,
    step: u64,
    batch_size: usize,
) -> Result<MetricsRow> {
    if pairs.is_empty() {
        return Err(TrainError::Data("evaluation set is empty".into()));
    }
    let max_len = model.config().max_len;
    let candidates = generate_all(model, pairs, batch_size)?;
    let references: Vec<Vec<usize>> = pairs.iter().map(|p| reference(&p.response, max_len)).collect();
    let loss = eval_loss(model, pairs, batch_size)?;
    score(label, step, loss, &candidates, &references)
}

/// Evaluates a checkpoint, refusing a corpus encoded with another vocabulary.
pub fn evaluate_checkpoint<R: Real>(ckpt: &Checkpoint<R>, vocab: &Vocab, pairs: &[DialoguePair<Vec<usize>>]) -> Result<MetricsRow> {
    check_vocab(&ckpt.manifest, vocab)?;
    let model = ckpt.model()?;
    evaluate(&model, pairs, "eval", ckpt.manifest.global_step, ckpt.manifest.train.batch_size)
}

pub fn check_vocab(manifest: &Manifest, vocab: &Vocab) -> Result<()> {
    let found = vocab.hash();
    if manifest.vocab_hash != found {
        return Err(TrainError::VocabMismatch {
            expected: manifest.vocab_hash.clone(),
            found,
        });
    }
    Ok(())
}

/// Trains one run per variant from the same seed and data order, then scores
/// each on `eval` (the test split, or validation when there is none).
pub fn ablate<R: Real>(base: &TrainConfig, variants: &[(String, Strategy)], data: &Dataset) -> Result<Vec<MetricsRow>> {
    if variants.len() < 2 {
        return Err(TrainError::Config("ablation needs at least two variants".into()));
    }
    let mut labels: Vec<&str> = variants.iter().map(|(l, _)| l.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != variants.len() {
        return Err(TrainError::Config("ablation labels must be unique".into()));
    }
    let eval = if data.test.is_empty() { &data.valid } else { &data.test };
    let mut rows = Vec::with_capacity(variants.len());
    for (label, strategy) in variants {
        log::info!("ablation variant {label}");
        let mut config = base.clone();
        config.strategy = *strategy;
        config.model.vocab_size = data.vocab.len();
        config.checkpoint_dir = base.checkpoint_dir.as_ref().map(|d| d.join(label));
        let mut trainer = Trainer::<R>::new(config, data.vocab.hash())?;
        trainer.run(data, None)?;
        rows.push(evaluate(&trainer.model, eval, label, trainer.global_step, base.batch_size)?);
    }
    Ok(rows)
}

const COLUMNS: [&str; 9] = [
    "BLEU-1",
    "BLEU-2",
    "BLEU-3",
    "BLEU-4",
    "Distinct-1",
    "Distinct-2",
    "Distinct-3",
    "loss",
    "step",
];

fn row_cells(r: &MetricsRow) -> Vec<String> {
    let mut cells: Vec<String> = r.bleu.iter().chain(&r.distinct).map(|v| format!("{v:.2}")).collect();
    cells.push(format!("{:.4}", r.loss));
    cells.push(r.step.to_string());
    cells
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label"];
    header.extend(COLUMNS);
    header.extend(["P-1", "P-2", "P-3", "P-4"]);
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.label.clone()];
        rec.extend(r.bleu.iter().chain(&r.distinct).map(|v| v.to_string()));
        rec.push(r.loss.to_string());
        rec.push(r.step.to_string());
        rec.extend(r.precision.iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("Model".to_string())
        .chain(COLUMNS.iter().map(|c| c.to_string()))
        .collect()];
    for r in rows {
        cells.push(std::iter::once(r.label.clone()).chain(row_cells(r)).collect());
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// Greedy reply to a free-text prompt.
pub fn generate<R: Real>(model: &Seq2Seq<R>, vocab: &Vocab, prompt: &str) -> Result<String> {
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(TrainError::Data("prompt is empty after tokenization".into()));
    }
    let max_len = model.config().max_len;
    let ids = terminate(&vocab.encode(&tokens), max_len);
    let pad = vec![false; ids.len()];
    let out = model.greedy_generate(SeqBatch::new(&ids, &pad, 1, ids.len()), max_len)?;
    Ok(detokenize(&vocab.decode(&out[0])))
}
