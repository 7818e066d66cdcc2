//! Synthetic noisy-copy dialogues.
//!
//! Each dialogue opens with a random utterance; every later turn repeats the
//! previous one with each word independently replaced by a random word with
//! probability `noise`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, DEFAULT_DELIMITER, NUM_SPECIAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Total vocabulary size including the four reserved ids.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            min_len: 3,
            max_len: 11,
            min_turns: 2,
            max_turns: 4,
            noise: 0.1,
        }
    }
}

pub fn word(i: usize) -> String {
    format!("w{i:02}")
}

fn utterance(words: &[String]) -> String {
    words.join(" ")
}

/// Dialogues holding exactly `pairs` adjacent context/response pairs.
pub fn noisy_copy_dialogues(config: &SynthConfig, pairs: usize, seed: u64) -> Vec<Vec<String>> {
    assert!(config.vocab_size > NUM_SPECIAL);
    assert!(1 <= config.min_len && config.min_len <= config.max_len);
    assert!(2 <= config.min_turns && config.min_turns <= config.max_turns);
    let lexicon: Vec<String> = (0..config.vocab_size - NUM_SPECIAL).map(word).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dialogues = Vec::new();
    let mut remaining = pairs;
    while remaining > 0 {
        let turns = rng.random_range(config.min_turns..=config.max_turns).min(remaining + 1);
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut current: Vec<String> = (0..len)
            .map(|_| lexicon.choose(&mut rng).expect("non-empty lexicon").clone())
            .collect();
        let mut dialogue = vec![utterance(&current)];
        for _ in 1..turns {
            for w in current.iter_mut() {
                if rng.random::<f64>() < config.noise {
                    *w = lexicon.choose(&mut rng).expect("non-empty lexicon").clone();
                }
            }
            dialogue.push(utterance(&current));
        }
        remaining -= turns - 1;
        dialogues.push(dialogue);
    }
    dialogues
}

/// Writes dialogues one per line with utterances joined by the default delimiter.
pub fn write_dialogues(path: &Path, dialogues: &[Vec<String>]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let mut f = fs::File::create(path).map_err(io)?;
    let sep = format!(" {DEFAULT_DELIMITER} ");
    for d in dialogues {
        writeln!(f, "{}", d.join(&sep)).map_err(io)?;
    }
    Ok(())
}
