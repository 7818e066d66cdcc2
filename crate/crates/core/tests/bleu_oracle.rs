mod common;

use biss::metrics::{corpus_bleu, sentence_bleu_i};
use common::{bleu_oracle_gap, brute_corpus_bleu, brute_sentence_bleu};

#[test]
fn matches_brute_force_counter_on_random_corpora() {
    for seed in 0..50 {
        let gap = bleu_oracle_gap(seed);
        assert!(gap <= 1e-9, "seed {seed}: gap {gap:e}");
    }
}

#[test]
fn repeated_word_hand_case() {
    // "the the the" against "the cat sat"
    let (the, cat, sat) = (4usize, 5, 6);
    let cand = [the, the, the];
    let reference = [the, cat, sat];
    assert!((sentence_bleu_i(&cand, &reference, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((brute_sentence_bleu(&cand, &reference, 1) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn oracle_agrees_on_exact_and_disjoint_corpora() {
    let refs = vec![vec![4, 5, 6, 7, 8], vec![9, 10, 11, 12]];
    let r = corpus_bleu(&refs, &refs).unwrap();
    assert_eq!(r.bleu, [1.0; 4]);
    assert_eq!(brute_corpus_bleu(&refs, &refs).0, [1.0; 4]);
    let other = vec![vec![20, 21, 22], vec![23, 24]];
    assert_eq!(corpus_bleu(&other, &refs).unwrap().bleu, [0.0; 4]);
}
