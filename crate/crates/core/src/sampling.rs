//! Training-time decoder input mixing.
//!
//! A mixing strategy looks at the model's teacher-forced predictions for a
//! response and decides, per decoder input position, whether the next pass
//! sees the gold token, the model's argmax token, or a random word.
//!
//! Index convention: decoder input position `j >= 1` carries target token
//! `j - 1`, so it is mixed using the prediction and confidence made at target
//! position `j - 1`. Position 0 (BOS) and padding are always gold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, NUM_SPECIAL};
use crate::graph::{Graph, Mode};
use crate::metrics::{cosine, sli_bleu, sli_cosine, MetricError};
use crate::model::{argmax, ModelError, Seq2Seq, SeqBatch};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("invalid strategy: {0}")]
    Invalid(String),
    #[error("unknown strategy name {0:?}")]
    UnknownName(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, SamplingError>;

/// Teacher-forcing probability as a function of the global training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecaySchedule {
    /// `max(eps, k*i + b)`
    Linear { eps: f64, k: f64, b: f64 },
    /// `k^i`
    Exponential { k: f64 },
    /// `k / (k + exp(i/k))`
    Sigmoid { k: f64 },
}

impl DecaySchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DecaySchedule::Linear { eps, k, b } => eps.is_finite() && k.is_finite() && b.is_finite(),
            DecaySchedule::Exponential { k } => k > 0.0 && k <= 1.0,
            DecaySchedule::Sigmoid { k } => k >= 1.0 && k.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SamplingError::Invalid(format!("bad decay constants {self:?}")))
        }
    }

    /// Probability of keeping the gold token at step `i`, clamped to `[0, 1]`.
    pub fn value(&self, i: u64) -> Result<f64> {
        self.validate()?;
        let i = i as f64;
        let v = match *self {
            DecaySchedule::Linear { eps, k, b } => eps.max(k * i + b),
            DecaySchedule::Exponential { k } => k.powf(i),
            DecaySchedule::Sigmoid { k } => k / (k + (i / k).exp()),
        };
        Ok(v.clamp(0.0, 1.0))
    }
}

/// Sentence-level indicator used by the bilevel strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SentenceIndicator {
    /// Sentence score fixed at 1.
    None,
    /// Sum of sentence BLEU-1..4 over `m`.
    Bleu { m: f64 },
    /// Cosine of averaged decoder embeddings over `m`.
    Cosine { m: f64 },
}

/// Map from the fused score `S * P` to a mixing probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Smooth {
    /// `max(min(x, 1), 0)`
    Clamp,
    /// `1 / (1 + exp(-k (x - b)))`
    Sigmoid { k: f64, b: f64 },
    /// Ignores its input. Used to pin the mixing probability in tests and
    /// diagnostics.
    Constant { value: f64 },
}

impl Smooth {
    pub const DEFAULT_SIGMOID: Smooth = Smooth::Sigmoid { k: 10.0, b: 0.6 };

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Smooth::Clamp => x.clamp(0.0, 1.0),
            Smooth::Sigmoid { k, b } => 1.0 / (1.0 + (-k * (x - b)).exp()),
            Smooth::Constant { value } => value,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Smooth::Clamp => Ok(()),
            Smooth::Sigmoid { k, b } if k >= 1.0 && b > 0.0 => Ok(()),
            Smooth::Constant { value } if (0.0..=1.0).contains(&value) => Ok(()),
            other => Err(SamplingError::Invalid(format!("bad smooth function {other:?}"))),
        }
    }
}

/// Fuses sentence score and token confidence: `f(S * P)`.
pub fn fuse_and_smooth(sentence_score: f64, confidence: f64, smooth: Smooth) -> f64 {
    smooth.apply(sentence_score * confidence)
}

fn default_guard_prob() -> f64 {
    1.0
}

/// Which source feeds the decoder during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    TeacherForcing,
    DecaySs {
        schedule: DecaySchedule,
    },
    ConfidenceAware {
        t_golden: f64,
        t_rand: f64,
    },
    AdaptiveBridge {
        beta: f64,
        w: f64,
        tau: f64,
    },
    Bilevel {
        sli: SentenceIndicator,
        smooth: Smooth,
        alpha: f64,
        /// Chance that a position with confidence `>= alpha` actually gets a
        /// random word. 1.0 replaces every such position.
        #[serde(default = "default_guard_prob")]
        rand_guard_prob: f64,
    },
}

/// Names accepted by [`Strategy::preset`].
pub const PRESET_NAMES: &[&str] = &[
    "transformer",
    "decay-linear",
    "decay-exponential",
    "decay-sigmoid",
    "confidence-aware",
    "adapbridge",
    "bilevel-none",
    "bilevel-bleu",
    "bilevel-cosine",
    "bilevel-f1",
    "bilevel-f2",
];

impl Strategy {
    pub fn bilevel(sli: SentenceIndicator, smooth: Smooth) -> Self {
        Strategy::Bilevel {
            sli,
            smooth,
            alpha: 0.95,
            rand_guard_prob: 1.0,
        }
    }

    /// Named configurations for the baselines and ablation variants.
    pub fn preset(name: &str) -> Result<Self> {
        let s = match name.to_ascii_lowercase().as_str() {
            "transformer" | "teacher-forcing" => Strategy::TeacherForcing,
            "decay-linear" => Strategy::DecaySs {
                schedule: DecaySchedule::Linear {
                    eps: 0.5,
                    k: -1e-4,
                    b: 1.0,
                },
            },
            "decay-exponential" => Strategy::DecaySs {
                schedule: DecaySchedule::Exponential { k: 0.9999 },
            },
            "decay-sigmoid" => Strategy::DecaySs {
                schedule: DecaySchedule::Sigmoid { k: 1000.0 },
            },
            "confidence-aware" => Strategy::ConfidenceAware {
                t_golden: 0.7,
                t_rand: 0.95,
            },
            "adapbridge" | "adaptive-bridge" => Strategy::AdaptiveBridge {
                beta: 0.75,
                w: 15.0,
                tau: 3.0,
            },
            "bilevel-none" => Strategy::bilevel(SentenceIndicator::None, Smooth::DEFAULT_SIGMOID),
            "bilevel-bleu" | "bilevel-f2" => {
                Strategy::bilevel(SentenceIndicator::Bleu { m: 0.8 }, Smooth::DEFAULT_SIGMOID)
            }
            "bilevel-cosine" => {
                Strategy::bilevel(SentenceIndicator::Cosine { m: 0.6 }, Smooth::DEFAULT_SIGMOID)
            }
            "bilevel-f1" => Strategy::bilevel(SentenceIndicator::Bleu { m: 0.9 }, Smooth::Clamp),
            _ => return Err(SamplingError::UnknownName(name.to_string())),
        };
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SamplingError::Invalid(m));
        match *self {
            Strategy::TeacherForcing => Ok(()),
            Strategy::DecaySs { schedule } => schedule.validate(),
            Strategy::ConfidenceAware { t_golden, t_rand } => {
                if (0.0..=1.0).contains(&t_golden) && (0.0..=1.0).contains(&t_rand) && t_golden <= t_rand {
                    Ok(())
                } else {
                    bad(format!("thresholds need 0 <= t_golden <= t_rand <= 1, got {t_golden}, {t_rand}"))
                }
            }
            Strategy::AdaptiveBridge { beta, w, tau } => {
                if tau > 0.0 && w.is_finite() && (-1.0..=1.0).contains(&beta) {
                    Ok(())
                } else {
                    bad(format!("adaptive bridge needs tau > 0 and beta in [-1,1], got beta={beta}, tau={tau}"))
                }
            }
            Strategy::Bilevel {
                sli,
                smooth,
                alpha,
                rand_guard_prob,
            } => {
                match sli {
                    SentenceIndicator::Bleu { m } | SentenceIndicator::Cosine { m } if !(m > 0.0) => {
                        return bad(format!("m must be positive, got {m}"));
                    }
                    _ => {}
                }
                smooth.validate()?;
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return bad(format!("alpha must lie in (0, 1], got {alpha}"));
                }
                if !(0.0..=1.0).contains(&rand_guard_prob) {
                    return bad(format!("rand_guard_prob must lie in [0, 1], got {rand_guard_prob}"));
                }
                Ok(())
            }
        }
    }

    pub fn uses_predictions(&self) -> bool {
        !matches!(self, Strategy::TeacherForcing)
    }
}

/// Logistic schedule for the adaptive bridge: `1 / (1 + exp(-(epoch - w) / tau))`.
pub fn bridge_probability(epoch: usize, w: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(SamplingError::Invalid(format!("tau must be positive, got {tau}")));
    }
    Ok(1.0 / (1.0 + (-(epoch as f64 - w) / tau).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Gold,
    Pred,
    Rand,
}

/// Per-position outcome of mixing one response.
#[derive(Debug, Clone, PartialEq)]
pub struct MixDecision {
    /// Source of each decoder input position.
    pub sources: Vec<Source>,
    /// Probability of choosing the prediction at each position (0 where fixed).
    pub probs: Vec<f64>,
    pub sentence_score: f64,
    /// Resulting decoder input row.
    pub input: Vec<usize>,
}

/// Pass-1 view of one batch row.
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    /// `[BOS, y_1..y_(T-1)]`
    pub gold_input: &'a [usize],
    /// `y_1..y_T`
    pub gold: &'a [usize],
    /// PAD flags for `gold`.
    pub pad: &'a [bool],
    /// Argmax token at each target position.
    pub predicted: &'a [usize],
    /// Softmax probability of the argmax token at each target position.
    pub confidence: &'a [f64],
}

impl RowView<'_> {
    fn len(&self) -> usize {
        self.gold_input.len()
    }

    // Decoder input `j` is padding exactly when target `j` is.
    fn mixable(&self, j: usize) -> bool {
        j >= 1 && !self.pad[j]
    }

    fn stripped_gold(&self) -> Vec<usize> {
        self.gold.iter().zip(self.pad).filter(|(_, &p)| !p).map(|(&t, _)| t).collect()
    }

    fn stripped_predicted(&self) -> Vec<usize> {
        self.predicted.iter().zip(self.pad).filter(|(_, &p)| !p).map(|(&t, _)| t).collect()
    }

    fn all_gold(&self, sentence_score: f64) -> MixDecision {
        MixDecision {
            sources: vec![Source::Gold; self.len()],
            probs: vec![0.0; self.len()],
            sentence_score,
            input: self.gold_input.to_vec(),
        }
    }
}

fn random_word<G: Rng + ?Sized>(vocab_size: usize, rng: &mut G) -> usize {
    rng.random_range(NUM_SPECIAL..vocab_size)
}

/// Sentence score of the argmax prediction against the gold response.
/// Degenerate cosine inputs score 0.
pub fn sentence_score<R: Real>(row: &RowView<'_>, sli: SentenceIndicator, table: &Tensor<R>) -> Result<f64> {
    match sli {
        SentenceIndicator::None => Ok(1.0),
        SentenceIndicator::Bleu { m } => Ok(sli_bleu(&row.stripped_predicted(), &row.stripped_gold(), m)?),
        SentenceIndicator::Cosine { m } => {
            match sli_cosine(&row.stripped_predicted(), &row.stripped_gold(), table, m) {
                Ok(s) => Ok(s),
                Err(MetricError::DegenerateEmbedding | MetricError::EmptySentence) => Ok(0.0),
                Err(e) => Err(e.into()),
            }
        }
    }
}

/// Bilevel mixing of one row: draw `u ~ U(0,1)` per mixable position and take
/// the prediction when `u < f(S * P)`, else gold; then any position whose
/// confidence is at least `alpha` is replaced by a random non-special word.
#[allow(clippy::too_many_arguments)]
pub fn bilevel_mix<G: Rng + ?Sized>(
    row: &RowView<'_>,
    sentence_score: f64,
    smooth: Smooth,
    alpha: f64,
    rand_guard_prob: f64,
    vocab_size: usize,
    rng: &mut G,
) -> Result<MixDecision> {
    if !(alpha > 0.0) {
        return Err(SamplingError::Invalid(format!("alpha must be positive, got {alpha}")));
    }
    let mut d = row.all_gold(sentence_score);
    for j in 1..row.len() {
        if !row.mixable(j) {
            continue;
        }
        let confidence = row.confidence[j - 1];
        let p = fuse_and_smooth(sentence_score, confidence, smooth);
        d.probs[j] = p;
        if rng.random::<f64>() < p {
            d.sources[j] = Source::Pred;
            d.input[j] = row.predicted[j - 1];
        }
        if confidence >= alpha && (rand_guard_prob >= 1.0 || rng.random::<f64>() < rand_guard_prob) {
            d.sources[j] = Source::Rand;
            d.input[j] = random_word(vocab_size, rng);
        }
    }
    Ok(d)
}

/// Three-way bucketing by confidence: `[0, t_golden)` gold, `[t_golden, t_rand)`
/// prediction, `[t_rand, 1]` random word.
pub fn confidence_aware_mix<G: Rng + ?Sized>(
    row: &RowView<'_>,
    t_golden: f64,
    t_rand: f64,
    vocab_size: usize,
    rng: &mut G,
) -> MixDecision {
    let mut d = row.all_gold(1.0);
    for j in 1..row.len() {
        if !row.mixable(j) {
            continue;
        }
        let c = row.confidence[j - 1];
        if c >= t_rand {
            d.sources[j] = Source::Rand;
            d.input[j] = random_word(vocab_size, rng);
            d.probs[j] = 1.0;
        } else if c >= t_golden {
            d.sources[j] = Source::Pred;
            d.input[j] = row.predicted[j - 1];
            d.probs[j] = 1.0;
        }
    }
    d
}

/// Takes the prediction with probability `bridge_probability(epoch)` wherever
/// the embedding cosine between predicted and gold token exceeds `beta`.
pub fn adaptive_bridge_mix<R: Real, G: Rng + ?Sized>(
    row: &RowView<'_>,
    table: &Tensor<R>,
    epoch: usize,
    beta: f64,
    w: f64,
    tau: f64,
    rng: &mut G,
) -> Result<MixDecision> {
    let alpha = bridge_probability(epoch, w, tau)?;
    let dim = table.shape()[1];
    let vec_of = |id: usize| -> Vec<f64> {
        table.data()[id * dim..(id + 1) * dim]
            .iter()
            .map(|v| v.to_f64().unwrap_or(0.0))
            .collect()
    };
    let mut d = row.all_gold(1.0);
    for j in 1..row.len() {
        if !row.mixable(j) {
            continue;
        }
        let (pred, gold) = (row.predicted[j - 1], row.gold[j - 1]);
        let sim = cosine(&vec_of(pred), &vec_of(gold)).unwrap_or(0.0);
        let u: f64 = rng.random();
        if sim > beta {
            d.probs[j] = alpha;
            if u < alpha {
                d.sources[j] = Source::Pred;
                d.input[j] = pred;
            }
        }
    }
    Ok(d)
}

/// Takes the prediction with probability `1 - teacher_forcing_prob`.
pub fn decay_mix<G: Rng + ?Sized>(row: &RowView<'_>, teacher_forcing_prob: f64, rng: &mut G) -> MixDecision {
    let mut d = row.all_gold(1.0);
    let p = 1.0 - teacher_forcing_prob;
    for j in 1..row.len() {
        if !row.mixable(j) {
            continue;
        }
        d.probs[j] = p;
        if rng.random::<f64>() < p {
            d.sources[j] = Source::Pred;
            d.input[j] = row.predicted[j - 1];
        }
    }
    d
}

/// Where a training step sits in the run; seeds the per-row mixing streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub epoch: usize,
    pub batch_index: usize,
    pub global_step: u64,
}

/// Independent generator for one batch row's mixing draws.
pub fn row_rng(seed: u64, epoch: usize, batch_index: usize, row: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(batch_index as u64).to_le_bytes());
    key[24..].copy_from_slice(&(row as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Mixes one row under `strategy`.
pub fn mix_row<R: Real, G: Rng + ?Sized>(
    strategy: &Strategy,
    row: &RowView<'_>,
    table: &Tensor<R>,
    ctx: &StepContext,
    rng: &mut G,
) -> Result<MixDecision> {
    let vocab = table.shape()[0];
    match *strategy {
        Strategy::TeacherForcing => Ok(row.all_gold(1.0)),
        Strategy::DecaySs { schedule } => Ok(decay_mix(row, schedule.value(ctx.global_step)?, rng)),
        Strategy::ConfidenceAware { t_golden, t_rand } => Ok(confidence_aware_mix(row, t_golden, t_rand, vocab, rng)),
        Strategy::AdaptiveBridge { beta, w, tau } => adaptive_bridge_mix(row, table, ctx.epoch, beta, w, tau, rng),
        Strategy::Bilevel {
            sli,
            smooth,
            alpha,
            rand_guard_prob,
        } => {
            let s = sentence_score(row, sli, table)?;
            bilevel_mix(row, s, smooth, alpha, rand_guard_prob, vocab, rng)
        }
    }
}

/// Teacher-forced predictions for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Argmax token per target position, `[rows * len]`.
    pub tokens: Vec<usize>,
    /// Probability of that token, `[rows * len]`.
    pub confidence: Vec<f64>,
}

/// First pass: eval-mode teacher-forced decode on gold inputs without
/// gradient tracking.
pub fn predict<R: Real>(model: &Seq2Seq<R>, batch: &Batch) -> Result<Predictions> {
    let mut g = Graph::<R>::no_grad();
    let p = model.bind(&mut g);
    // eval mode never draws from this generator
    let mut idle = ChaCha8Rng::seed_from_u64(0);
    let src = SeqBatch::new(&batch.context, &batch.context_pad, batch.size, batch.src_len);
    let memory = model.encode(&mut g, &p, src, Mode::Eval, &mut idle)?;
    let logits = model.decode(&mut g, &p, &batch.decoder_input, &memory, Mode::Eval, &mut idle)?;
    let vocab = model.config().vocab_size;
    let values = g.value(logits);
    let mut tokens = Vec::with_capacity(values.len() / vocab);
    let mut confidence = Vec::with_capacity(values.len() / vocab);
    for row in values.chunks(vocab) {
        let best = argmax(row);
        let max = row[best].to_f64().unwrap_or(f64::NAN);
        let z: f64 = row.iter().map(|v| (v.to_f64().unwrap_or(f64::NAN) - max).exp()).sum();
        tokens.push(best);
        confidence.push(1.0 / z);
    }
    Ok(Predictions { tokens, confidence })
}

/// Mixed decoder inputs for every row of `batch`.
pub fn mix_batch<R: Real>(
    model: &Seq2Seq<R>,
    batch: &Batch,
    predictions: &Predictions,
    strategy: &Strategy,
    ctx: &StepContext,
) -> Result<Vec<MixDecision>> {
    let t = batch.tgt_len;
    (0..batch.size)
        .map(|r| {
            let row = RowView {
                gold_input: batch.decoder_input_row(r),
                gold: batch.response_row(r),
                pad: batch.response_pad_row(r),
                predicted: &predictions.tokens[r * t..(r + 1) * t],
                confidence: &predictions.confidence[r * t..(r + 1) * t],
            };
            let mut rng = row_rng(ctx.seed, ctx.epoch, ctx.batch_index, r);
            mix_row(strategy, &row, model.embedding_table(), ctx, &mut rng)
        })
        .collect()
}

/// Loss and parameter gradients from one two-pass step.
#[derive(Debug, Clone)]
pub struct StepOutcome<R> {
    pub loss: f64,
    /// Gradient per model parameter, in parameter order.
    pub grads: Vec<Vec<R>>,
    /// Decoder input used in the gradient pass, `[rows * len]`.
    pub decoder_input: Vec<usize>,
    /// Mixing decisions per row; empty under teacher forcing.
    pub decisions: Vec<MixDecision>,
}

/// One training step: a gradient-free prediction pass (skipped under teacher
/// forcing), mixing, then a gradient pass on the mixed decoder inputs scored
/// against the unmixed gold targets.
pub fn two_pass_training_step<R: Real, G: Rng + ?Sized>(
    model: &Seq2Seq<R>,
    batch: &Batch,
    strategy: &Strategy,
    ctx: &StepContext,
    dropout_rng: &mut G,
) -> Result<StepOutcome<R>> {
    let (decoder_input, decisions) = if strategy.uses_predictions() {
        let predictions = predict(model, batch)?;
        let decisions = mix_batch(model, batch, &predictions, strategy, ctx)?;
        let input = decisions.iter().flat_map(|d| d.input.iter().copied()).collect();
        (input, decisions)
    } else {
        (batch.decoder_input.clone(), Vec::new())
    };
    let mut g = Graph::<R>::new();
    let p = model.bind(&mut g);
    let src = SeqBatch::new(&batch.context, &batch.context_pad, batch.size, batch.src_len);
    let memory = model.encode(&mut g, &p, src, Mode::Train, dropout_rng)?;
    let logits = model.decode(&mut g, &p, &decoder_input, &memory, Mode::Train, dropout_rng)?;
    let loss = g
        .cross_entropy(logits, &batch.response, &batch.response_pad)
        .map_err(ModelError::from)?;
    g.backward(loss).map_err(ModelError::from)?;
    let loss_value = g.value(loss)[0].to_f64().unwrap_or(f64::NAN);
    let grads = (0..model.params().len())
        .map(|i| {
            let v = p.var(i);
            g.grad(v)
                .map(<[R]>::to_vec)
                .unwrap_or_else(|| vec![R::zero(); model.params()[i].tensor.len()])
        })
        .collect();
    Ok(StepOutcome {
        loss: loss_value,
        grads,
        decoder_input,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, EOS, PAD};

    fn row<'a>(
        gold_input: &'a [usize],
        gold: &'a [usize],
        pad: &'a [bool],
        predicted: &'a [usize],
        confidence: &'a [f64],
    ) -> RowView<'a> {
        RowView {
            gold_input,
            gold,
            pad,
            predicted,
            confidence,
        }
    }

    #[test]
    fn decay_values() {
        assert_eq!(DecaySchedule::Exponential { k: 0.98 }.value(0).unwrap(), 1.0);
        assert!((DecaySchedule::Sigmoid { k: 5.0 }.value(0).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        let lin = DecaySchedule::Linear {
            eps: 0.1,
            k: -0.001,
            b: 1.0,
        };
        assert_eq!(lin.value(2000).unwrap(), 0.1);
        assert!(DecaySchedule::Exponential { k: 1.5 }.value(3).is_err());
        assert!(DecaySchedule::Exponential { k: 0.0 }.value(3).is_err());
    }

    #[test]
    fn smooth_functions() {
        let f2 = Smooth::DEFAULT_SIGMOID;
        assert_eq!(fuse_and_smooth(0.6, 1.0, f2), 0.5);
        assert!((fuse_and_smooth(1.0, 1.0, f2) - 1.0 / (1.0 + (-4f64).exp())).abs() < 1e-12);
        assert_eq!(fuse_and_smooth(1.5, 1.0, Smooth::Clamp), 1.0);
        assert_eq!(fuse_and_smooth(-0.2, 1.0, Smooth::Clamp), 0.0);
        assert_eq!(fuse_and_smooth(0.37, 1.0, Smooth::Clamp), 0.37);
    }

    #[test]
    fn presets_map_to_exact_configs() {
        assert_eq!(
            Strategy::preset("bilevel-bleu").unwrap(),
            Strategy::Bilevel {
                sli: SentenceIndicator::Bleu { m: 0.8 },
                smooth: Smooth::Sigmoid { k: 10.0, b: 0.6 },
                alpha: 0.95,
                rand_guard_prob: 1.0
            }
        );
        assert_eq!(
            Strategy::preset("bilevel-f1").unwrap(),
            Strategy::Bilevel {
                sli: SentenceIndicator::Bleu { m: 0.9 },
                smooth: Smooth::Clamp,
                alpha: 0.95,
                rand_guard_prob: 1.0
            }
        );
        for name in PRESET_NAMES {
            Strategy::preset(name).unwrap().validate().unwrap();
        }
        assert!(matches!(Strategy::preset("nope"), Err(SamplingError::UnknownName(_))));
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ca = Strategy::ConfidenceAware {
            t_golden: 0.9,
            t_rand: 0.5,
        };
        assert!(ca.validate().is_err());
        let bl = Strategy::Bilevel {
            sli: SentenceIndicator::Bleu { m: 0.0 },
            smooth: Smooth::Clamp,
            alpha: 0.95,
            rand_guard_prob: 1.0,
        };
        assert!(bl.validate().is_err());
        let bl = Strategy::Bilevel {
            sli: SentenceIndicator::None,
            smooth: Smooth::Sigmoid { k: 0.5, b: 0.6 },
            alpha: 0.95,
            rand_guard_prob: 1.0,
        };
        assert!(bl.validate().is_err());
        assert!(bridge_probability(0, 15.0, 0.0).is_err());
    }

    #[test]
    fn strategy_serde_round_trip() {
        for name in PRESET_NAMES {
            let s = Strategy::preset(name).unwrap();
            let text = toml::to_string(&s).unwrap();
            let back: Strategy = toml::from_str(&text).unwrap();
            assert_eq!(back, s, "{text}");
        }
    }

    #[test]
    fn bridge_center() {
        assert_eq!(bridge_probability(15, 15.0, 3.0).unwrap(), 0.5);
        assert!(bridge_probability(10_000, 15.0, 3.0).unwrap() > 0.999_999);
    }

    const GI: [usize; 5] = [BOS, 10, 11, 12, PAD];
    const GOLD: [usize; 5] = [10, 11, 12, EOS, PAD];
    const PAD_ROW: [bool; 5] = [false, false, false, false, true];
    const PRED: [usize; 5] = [20, 21, 22, 23, 24];

    #[test]
    fn bilevel_boundaries() {
        let conf = [0.5; 5];
        let r = row(&GI, &GOLD, &PAD_ROW, &PRED, &conf);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = bilevel_mix(&r, 1.0, Smooth::Constant { value: 0.0 }, 0.95, 1.0, 30, &mut rng).unwrap();
        assert_eq!(zero.input, GI.to_vec());
        let one = bilevel_mix(&r, 1.0, Smooth::Constant { value: 1.0 }, 0.95, 1.0, 30, &mut rng).unwrap();
        assert_eq!(one.input, vec![BOS, 20, 21, 22, PAD]);
        assert_eq!(one.sources[0], Source::Gold);
        assert!(bilevel_mix(&r, 1.0, Smooth::Clamp, 0.0, 1.0, 30, &mut rng).is_err());
    }

    #[test]
    fn bilevel_guard_replaces_confident_positions() {
        let conf = [0.5, 0.96, 0.5, 0.5, 0.99];
        let r = row(&GI, &GOLD, &PAD_ROW, &PRED, &conf);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = bilevel_mix(&r, 1.0, Smooth::Constant { value: 0.0 }, 0.95, 1.0, 30, &mut rng).unwrap();
        assert_eq!(d.sources[2], Source::Rand);
        assert!(d.input[2] >= NUM_SPECIAL && d.input[2] < 30);
        assert_eq!(d.sources[1], Source::Gold);
        assert_eq!(d.sources[0], Source::Gold);
    }

    #[test]
    fn pad_positions_stay_gold() {
        let gi = [BOS, 10, EOS, PAD];
        let gold = [10, EOS, PAD, PAD];
        let pad = [false, false, true, true];
        let conf = [0.99; 4];
        let pred = [20, 21, 22, 23];
        let r = row(&gi, &gold, &pad, &pred, &conf);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = bilevel_mix(&r, 1.0, Smooth::Constant { value: 1.0 }, 0.95, 1.0, 30, &mut rng).unwrap();
        assert_eq!(d.sources[3], Source::Gold);
        assert_eq!(d.input[3], PAD);
        assert_eq!(d.input[0], BOS);
    }

    #[test]
    fn confidence_buckets() {
        let conf = [0.5, 0.8, 0.97, 0.1, 0.1];
        let r = row(&GI, &GOLD, &PAD_ROW, &PRED, &conf);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = confidence_aware_mix(&r, 0.7, 0.95, 30, &mut rng);
        assert_eq!(&d.sources[1..4], &[Source::Gold, Source::Pred, Source::Rand]);
        assert_eq!(d.input[2], 21);
    }

    #[test]
    fn adaptive_bridge_rules() {
        // one-hot rows: token i points along axis i % 4
        let table = Tensor::<f64>::from_fn(&[30, 4], |i| if (i / 4) % 4 == i % 4 { 1.0 } else { 0.0 });
        let conf = [0.5; 5];
        let same = row(&GI, &GOLD, &PAD_ROW, &GOLD, &conf);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = adaptive_bridge_mix(&same, &table, 10_000, 0.75, 15.0, 3.0, &mut rng).unwrap();
        assert!(d.sources[1..4].iter().all(|&s| s == Source::Pred));
        assert_eq!(d.sources[4], Source::Gold);
        // predictions orthogonal to gold never pass the threshold
        let other = row(&GI, &GOLD, &PAD_ROW, &PRED, &conf);
        let d = adaptive_bridge_mix(&other, &table, 10_000, 0.75, 15.0, 3.0, &mut rng).unwrap();
        assert!(d.sources.iter().all(|&s| s == Source::Gold));
    }

    #[test]
    fn bilevel_none_scores_one_and_bleu_scores_literal_sum() {
        let conf = [0.5; 5];
        let r = row(&GI, &GOLD, &PAD_ROW, &GOLD, &conf);
        let table = Tensor::<f64>::from_fn(&[30, 4], |i| i as f64);
        assert_eq!(sentence_score(&r, SentenceIndicator::None, &table).unwrap(), 1.0);
        let s = sentence_score(&r, SentenceIndicator::Bleu { m: 0.8 }, &table).unwrap();
        assert!((s - 5.0).abs() < 1e-12);
        let s = sentence_score(&r, SentenceIndicator::Cosine { m: 0.6 }, &table).unwrap();
        assert!((s - 1.0 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn row_streams_are_distinct() {
        let a: u64 = row_rng(1, 0, 0, 0).random();
        let b: u64 = row_rng(1, 0, 0, 1).random();
        let c: u64 = row_rng(1, 0, 0, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
