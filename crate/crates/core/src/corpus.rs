//! Dialogue corpus ingestion: multi-turn splitting, tokenization, vocabulary,
//! padding and batching.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_DELIMITER: &str = "__eou__";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size limit {0} leaves no room for corpus tokens (4 ids are reserved)")]
    VocabLimit(usize),
    #[error("duplicate token {0:?} in vocabulary file")]
    DuplicateToken(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One context/response pair from a split dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialoguePair<T> {
    pub context: T,
    pub response: T,
}

/// Output of [`split_dialogues`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome<T> {
    pub pairs: Vec<DialoguePair<T>>,
    /// Dialogues with fewer than two utterances.
    pub skipped: usize,
}

/// Splits each dialogue `(u1..un)` into the adjacent pairs `(u1,u2)..(u(n-1),un)`.
pub fn split_dialogues<T: Clone>(dialogues: &[Vec<T>]) -> SplitOutcome<T> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for d in dialogues {
        if d.len() < 2 {
            skipped += 1;
            continue;
        }
        pairs.extend(d.windows(2).map(|w| DialoguePair {
            context: w[0].clone(),
            response: w[1].clone(),
        }));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} dialogues with fewer than two utterances");
    }
    SplitOutcome { pairs, skipped }
}

/// Lowercases, splits on whitespace and separates ASCII punctuation into
/// standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Bijective token/id mapping with reserved ids 0..4 for PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_corpus_tokens(corpus: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        for t in corpus {
            if index.contains_key(&t) {
                return Err(CorpusError::DuplicateToken(t));
            }
            index.insert(t.clone(), tokens.len());
            tokens.push(t);
        }
        if tokens.len() <= NUM_SPECIAL {
            return Err(CorpusError::EmptyCorpus);
        }
        Ok(Self { tokens, index })
    }

    /// Frequency-ranked vocabulary (ties broken by first occurrence).
    /// `max_size` counts the reserved ids.
    pub fn build<'a, I, S>(sentences: I, min_freq: usize, max_size: Option<usize>) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if let Some(max) = max_size {
            if max <= NUM_SPECIAL {
                return Err(CorpusError::VocabLimit(max));
            }
        }
        // token -> (count, first position)
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for sentence in sentences {
            for tok in sentence {
                let tok = tok.as_ref();
                if SPECIAL_TOKENS.contains(&tok) {
                    continue;
                }
                counts.entry(tok).or_insert((0, seen)).0 += 1;
                seen += 1;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .filter(|(_, (c, _))| *c >= min_freq.max(1))
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        if let Some(max) = max_size {
            ranked.truncate(max - NUM_SPECIAL);
        }
        Self::from_corpus_tokens(ranked.into_iter().map(|(t, _, _)| t.to_string()).collect())
    }

    /// Builds from the context and response sides of tokenized pairs.
    pub fn from_pairs(
        pairs: &[DialoguePair<Vec<String>>],
        min_freq: usize,
        max_size: Option<usize>,
    ) -> Result<Self> {
        Self::build(
            pairs
                .iter()
                .flat_map(|p| [p.context.as_slice(), p.response.as_slice()]),
            min_freq,
            max_size,
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, stopping at EOS and dropping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// Corpus tokens in id order, without the reserved entries.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIAL..]
    }

    /// Text form: one token per line, line `i` holds id `i + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.corpus_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_corpus_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the text form; ties checkpoints to the vocabulary they were trained with.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Truncates to `max_len - 1` tokens (keeping the head) and appends EOS.
pub fn terminate(ids: &[usize], max_len: usize) -> Vec<usize> {
    let keep = ids.len().min(max_len.saturating_sub(1));
    let mut out = ids[..keep].to_vec();
    out.push(EOS);
    out
}

/// Padded id matrices for one training or evaluation batch. All matrices are
/// row-major; `true` in a mask marks a PAD position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub context: Vec<usize>,
    pub context_pad: Vec<bool>,
    /// Gold targets `y_1..y_T` (EOS-terminated, PAD-filled).
    pub response: Vec<usize>,
    pub response_pad: Vec<bool>,
    /// `[BOS, y_1..y_(T-1)]` per row.
    pub decoder_input: Vec<usize>,
    /// Indices of the rows' pairs in the source slice.
    pub pair_index: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&DialoguePair<Vec<usize>>], max_len: usize) -> Self {
        assert!(!pairs.is_empty());
        let ctx: Vec<Vec<usize>> = pairs.iter().map(|p| terminate(&p.context, max_len)).collect();
        let rsp: Vec<Vec<usize>> = pairs.iter().map(|p| terminate(&p.response, max_len)).collect();
        let src_len = ctx.iter().map(Vec::len).max().unwrap_or(1);
        let tgt_len = rsp.iter().map(Vec::len).max().unwrap_or(1);
        let size = pairs.len();
        let mut batch = Batch {
            size,
            src_len,
            tgt_len,
            context: vec![PAD; size * src_len],
            context_pad: vec![true; size * src_len],
            response: vec![PAD; size * tgt_len],
            response_pad: vec![true; size * tgt_len],
            decoder_input: vec![PAD; size * tgt_len],
            pair_index: (0..size).collect(),
        };
        for (r, (c, y)) in ctx.iter().zip(&rsp).enumerate() {
            for (j, &id) in c.iter().enumerate() {
                batch.context[r * src_len + j] = id;
                batch.context_pad[r * src_len + j] = false;
            }
            for (j, &id) in y.iter().enumerate() {
                batch.response[r * tgt_len + j] = id;
                batch.response_pad[r * tgt_len + j] = false;
            }
            batch.decoder_input[r * tgt_len] = BOS;
            for j in 1..y.len() {
                batch.decoder_input[r * tgt_len + j] = y[j - 1];
            }
        }
        batch
    }

    pub fn context_row(&self, r: usize) -> &[usize] {
        &self.context[r * self.src_len..(r + 1) * self.src_len]
    }

    pub fn response_row(&self, r: usize) -> &[usize] {
        &self.response[r * self.tgt_len..(r + 1) * self.tgt_len]
    }

    pub fn response_pad_row(&self, r: usize) -> &[bool] {
        &self.response_pad[r * self.tgt_len..(r + 1) * self.tgt_len]
    }

    pub fn decoder_input_row(&self, r: usize) -> &[usize] {
        &self.decoder_input[r * self.tgt_len..(r + 1) * self.tgt_len]
    }
}

/// Shuffles pairs with a generator seeded by `seed` alone, then cuts them
/// into batches of `batch_size` (the last batch may be smaller).
pub fn make_batches(
    pairs: &[DialoguePair<Vec<usize>>],
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Vec<Batch> {
    assert!(batch_size >= 1 && max_len >= 2);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<&DialoguePair<Vec<usize>>> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut b = Batch::from_pairs(&rows, max_len);
            b.pair_index = chunk.to_vec();
            b
        })
        .collect()
}

/// Batches in source order, for evaluation.
pub fn sequential_batches(
    pairs: &[DialoguePair<Vec<usize>>],
    batch_size: usize,
    max_len: usize,
) -> Vec<Batch> {
    let order: Vec<usize> = (0..pairs.len()).collect();
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let rows: Vec<&DialoguePair<Vec<usize>>> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut b = Batch::from_pairs(&rows, max_len);
            b.pair_index = chunk.to_vec();
            b
        })
        .collect()
}

#[derive(Deserialize)]
struct JsonDialogue {
    utterances: Vec<String>,
}

/// Reads dialogues from either a `.jsonl` file (one `{"utterances": [...]}`
/// object per line) or plain text with one dialogue per line and utterances
/// separated by `delimiter`. Blank lines and empty utterances are dropped.
pub fn read_dialogues(path: &Path, delimiter: &str) -> Result<Vec<Vec<String>>> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let utterances: Vec<String> = if jsonl {
            let d: JsonDialogue = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
            d.utterances
        } else {
            line.split(delimiter).map(str::to_string).collect()
        };
        let utterances: Vec<String> = utterances
            .into_iter()
            .map(|u| u.trim().to_string())
            .filter(|u| !u.is_empty())
            .collect();
        out.push(utterances);
    }
    Ok(out)
}

/// Splits and tokenizes dialogues; pairs whose context or response tokenizes
/// to nothing are dropped.
pub fn tokenized_pairs(dialogues: &[Vec<String>]) -> (Vec<DialoguePair<Vec<String>>>, usize) {
    let split = split_dialogues(dialogues);
    let pairs = split
        .pairs
        .into_iter()
        .map(|p| DialoguePair {
            context: tokenize(&p.context),
            response: tokenize(&p.response),
        })
        .filter(|p| !p.context.is_empty() && !p.response.is_empty())
        .collect();
    (pairs, split.skipped)
}

pub fn encode_pairs(pairs: &[DialoguePair<Vec<String>>], vocab: &Vocab) -> Vec<DialoguePair<Vec<usize>>> {
    pairs
        .iter()
        .map(|p| DialoguePair {
            context: vocab.encode(&p.context),
            response: vocab.encode(&p.response),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn split_rule() {
        let pair = |c: &'static str, r: &'static str| DialoguePair { context: c, response: r };
        let out = split_dialogues(&[vec!["u1", "u2", "u3"]]);
        assert_eq!(out.pairs, vec![pair("u1", "u2"), pair("u2", "u3")]);
        assert_eq!(split_dialogues(&[vec!["u1", "u2"]]).pairs, vec![pair("u1", "u2")]);
        let ten: Vec<usize> = (0..10).collect();
        assert_eq!(split_dialogues(&[ten]).pairs.len(), 9);
    }

    #[test]
    fn single_utterance_skipped() {
        let out = split_dialogues(&[s(&["only"]), s(&["a", "b"])]);
        assert_eq!(out.skipped, 1);
        assert_eq!(out.pairs.len(), 1);
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Hello, world!"), s(&["hello", ",", "world", "!"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  It's  FINE. "), s(&["it", "'", "s", "fine", "."]));
    }

    #[test]
    fn vocab_frequency_order_and_unk() {
        let sent = s(&["a", "a", "b"]);
        let v = Vocab::build([sent.as_slice()], 1, None).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn vocab_ties_by_first_occurrence() {
        let sent = s(&["c", "b", "a", "b", "c"]);
        let v = Vocab::build([sent.as_slice()], 1, None).unwrap();
        assert_eq!(v.corpus_tokens(), &s(&["c", "b", "a"])[..]);
    }

    #[test]
    fn vocab_truncation_counts_reserved() {
        let sent: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let v = Vocab::build([sent.as_slice()], 1, Some(5)).unwrap();
        assert_eq!(v.len(), 5);
        assert!(matches!(
            Vocab::build([sent.as_slice()], 1, Some(4)),
            Err(CorpusError::VocabLimit(4))
        ));
    }

    #[test]
    fn vocab_min_freq_and_empty() {
        let sent = s(&["a", "a", "b"]);
        let v = Vocab::build([sent.as_slice()], 2, None).unwrap();
        assert_eq!(v.len(), 5);
        let empty: Vec<String> = vec![];
        assert!(matches!(
            Vocab::build([empty.as_slice()], 1, None),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn vocab_text_round_trip_and_hash() {
        let sent = s(&["x", "y", "y"]);
        let v = Vocab::build([sent.as_slice()], 1, None).unwrap();
        let text = v.to_text();
        assert_eq!(text, "y\nx\n");
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(matches!(
            Vocab::from_text("a\na\n"),
            Err(CorpusError::DuplicateToken(_))
        ));
    }

    #[test]
    fn decode_stops_at_eos() {
        let sent = s(&["hi", "there"]);
        let v = Vocab::build([sent.as_slice()], 1, None).unwrap();
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), s(&["hi", "there"]));
    }

    #[test]
    fn truncation_keeps_head() {
        let ids: Vec<usize> = (10..40).collect();
        let t = terminate(&ids, 26);
        assert_eq!(t.len(), 26);
        assert_eq!(t[..25], ids[..25]);
        assert_eq!(t[25], EOS);
    }

    #[test]
    fn batch_padding_and_shift() {
        let pairs: Vec<DialoguePair<Vec<usize>>> = [2usize, 4, 3]
            .iter()
            .map(|&n| DialoguePair {
                context: vec![7; 2],
                response: (10..10 + n).collect(),
            })
            .collect();
        let refs: Vec<&DialoguePair<Vec<usize>>> = pairs.iter().collect();
        let b = Batch::from_pairs(&refs, 26);
        assert_eq!(b.tgt_len, 5);
        let pads: Vec<usize> = (0..3)
            .map(|r| b.response_pad_row(r).iter().filter(|&&p| p).count())
            .collect();
        assert_eq!(pads, vec![2, 0, 1]);
        assert_eq!(b.response_row(0), &[10, 11, EOS, PAD, PAD]);
        assert_eq!(b.decoder_input_row(0), &[BOS, 10, 11, PAD, PAD]);
        assert_eq!(b.decoder_input_row(1), &[BOS, 10, 11, 12, 13]);
    }

    #[test]
    fn batches_deterministic_in_seed() {
        let pairs: Vec<DialoguePair<Vec<usize>>> = (0..50)
            .map(|i| DialoguePair {
                context: vec![4 + i % 7],
                response: vec![5, 4 + i % 3],
            })
            .collect();
        let a = make_batches(&pairs, 8, 26, 3);
        let b = make_batches(&pairs, 8, 26, 3);
        let c = make_batches(&pairs, 8, 26, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 7);
        assert_eq!(a.iter().map(|b| b.size).sum::<usize>(), 50);
    }

    #[test]
    fn reads_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("d.txt");
        fs::write(&txt, "Hi there __eou__ Hello! __eou__ Bye __eou__\n\nsolo __eou__\n").unwrap();
        let d = read_dialogues(&txt, DEFAULT_DELIMITER).unwrap();
        assert_eq!(d, vec![s(&["Hi there", "Hello!", "Bye"]), s(&["solo"])]);
        let (pairs, skipped) = tokenized_pairs(&d);
        assert_eq!(pairs.len(), 2);
        assert_eq!(skipped, 1);

        let js = dir.path().join("d.jsonl");
        fs::write(&js, "{\"utterances\": [\"a\", \"b\", \"c\"]}\n").unwrap();
        assert_eq!(read_dialogues(&js, DEFAULT_DELIMITER).unwrap(), vec![s(&["a", "b", "c"])]);
        fs::write(&js, "{oops}\n").unwrap();
        assert!(matches!(
            read_dialogues(&js, DEFAULT_DELIMITER),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }
}
