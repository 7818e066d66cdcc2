//! BLEU, Distinct-n and embedding cosine scores.
//!
//! Everything here works on token slices of any hashable type, so the same
//! code scores id sequences during training and strings at evaluation time.
//! Callers strip padding before scoring.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("n-gram order {0} outside 1..=4")]
    Order(usize),
    #[error("scale m must be positive, got {0}")]
    Scale(f64),
    #[error("empty sentence")]
    EmptySentence,
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("token id {0} outside the embedding table")]
    UnknownId(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

// (clipped matches, candidate n-gram total)
fn clipped_matches<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn check_order(i: usize) -> Result<()> {
    if (1..=4).contains(&i) {
        Ok(())
    } else {
        Err(MetricError::Order(i))
    }
}

/// Unsmoothed sentence-level `i`-gram BLEU: clipped `i`-gram precision times
/// the brevity penalty `exp(min(0, 1 - |ref|/|cand|))`.
pub fn sentence_bleu_i<T: Eq + Hash>(candidate: &[T], reference: &[T], i: usize) -> Result<f64> {
    check_order(i)?;
    let (matched, total) = clipped_matches(candidate, reference, i);
    if total == 0 || matched == 0 {
        return Ok(0.0);
    }
    let precision = matched as f64 / total as f64;
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).min(0.0).exp();
    Ok(precision * bp)
}

/// BLEU sentence score: `(bleu_1 + bleu_2 + bleu_3 + bleu_4) / m`.
pub fn sli_bleu<T: Eq + Hash>(predicted: &[T], gold: &[T], m: f64) -> Result<f64> {
    if !(m > 0.0) {
        return Err(MetricError::Scale(m));
    }
    let mut total = 0.0;
    for i in 1..=4 {
        total += sentence_bleu_i(predicted, gold, i)?;
    }
    Ok(total / m)
}

/// Mean of the embedding rows of `seq` in a `[vocab, dim]` table.
pub fn sentence_embedding<R: Real>(seq: &[usize], table: &Tensor<R>) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(MetricError::EmptySentence);
    }
    let (vocab, dim) = (table.shape()[0], table.shape()[1]);
    let data = table.data();
    let mut mean = vec![0.0; dim];
    for &id in seq {
        if id >= vocab {
            return Err(MetricError::UnknownId(id));
        }
        for (m, v) in mean.iter_mut().zip(&data[id * dim..(id + 1) * dim]) {
            *m += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    let n = seq.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Cosine of two vectors; errors when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(MetricError::DegenerateEmbedding);
    }
    Ok(dot / (na * nb))
}

/// Cosine similarity of averaged embeddings, divided by `m`.
pub fn sli_cosine<R: Real>(predicted: &[usize], gold: &[usize], table: &Tensor<R>, m: f64) -> Result<f64> {
    if !(m > 0.0) {
        return Err(MetricError::Scale(m));
    }
    let a = sentence_embedding(predicted, table)?;
    let b = sentence_embedding(gold, table)?;
    Ok(cosine(&a, &b)? / m)
}

/// Corpus BLEU for orders 1 through 4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Cumulative BLEU-n: brevity penalty times the geometric mean of p_1..p_n.
    pub bleu: [f64; 4],
    /// Bare clipped n-gram precision p_n.
    pub precision: [f64; 4],
    pub brevity_penalty: f64,
}

impl BleuReport {
    pub fn bleu_n(&self, n: usize) -> f64 {
        self.bleu[n - 1]
    }
}

/// Corpus-level BLEU with one reference per candidate.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t) = clipped_matches(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut precision = [0.0; 4];
    for n in 0..4 {
        if total[n] > 0 {
            precision[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut bleu = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 0..4 {
        if precision[n] == 0.0 || brevity_penalty == 0.0 {
            break;
        }
        log_sum += precision[n].ln();
        bleu[n] = brevity_penalty * (log_sum / (n + 1) as f64).exp();
    }
    Ok(BleuReport {
        bleu,
        precision,
        brevity_penalty,
    })
}

/// Corpus-wide ratio of unique to total n-grams; 0 when there are none.
pub fn distinct_n<T: Eq + Hash>(candidates: &[Vec<T>], n: usize) -> f64 {
    assert!(n >= 1, "distinct-n needs n >= 1");
    let mut unique: HashMap<&[T], ()> = HashMap::new();
    let mut total = 0usize;
    for c in candidates {
        if c.len() < n {
            continue;
        }
        for g in c.windows(n) {
            unique.insert(g, ());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistinctReport {
    pub distinct: [f64; 3],
}

pub fn distinct_report<T: Eq + Hash>(candidates: &[Vec<T>]) -> DistinctReport {
    DistinctReport {
        distinct: [1, 2, 3].map(|n| distinct_n(candidates, n)),
    }
}
