#![allow(dead_code)]

use biss::corpus::{encode_pairs, tokenized_pairs, Vocab};
use biss::graph::{Graph, Mode, Var};
use biss::model::{ModelConfig, Seq2Seq, SeqBatch};
use biss::synth::{noisy_copy_dialogues, SynthConfig};
use biss::tensor::Tensor;
use biss::trainer::{Dataset, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)`, with a small floor so that two near-zero values
/// compare as equal.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).with_requires_grad(true)
}

/// Values bounded away from zero so that relu kinks stay outside the
/// finite-difference stencil.
pub fn kink_free_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
    .with_requires_grad(true)
}

/// Analytic gradient of `f` against central differences, over every input
/// element. Returns the largest relative error.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &vars);
        g.value(loss)[0]
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Scalar probe of a non-scalar output: `sum(out * w)` for a fixed random `w`.
pub fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    let w = g
        .constant(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Worst relative error over every differentiable operation for one seed.
pub fn gradcheck_ops(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let s = seed;

    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 5]);
    out.push(("matmul", gradcheck(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        probe(g, y, s)
    })));

    let a = random_tensor(&mut rng, &[2, 3, 4]);
    let b = random_tensor(&mut rng, &[2, 4, 3]);
    out.push(("batched matmul", gradcheck(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        probe(g, y, s)
    })));

    let a = random_tensor(&mut rng, &[2, 3, 4]);
    let b = random_tensor(&mut rng, &[2, 3, 4]);
    out.push(("add", gradcheck(&[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        probe(g, y, s)
    })));
    out.push(("mul", gradcheck(&[a.clone(), b], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        probe(g, y, s)
    })));

    let bias = random_tensor(&mut rng, &[4]);
    out.push(("add_bias", gradcheck(&[a.clone(), bias], |g, v| {
        let y = g.add_bias(v[0], v[1]).unwrap();
        probe(g, y, s)
    })));

    out.push(("scale", gradcheck(&[a.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        probe(g, y, s)
    })));

    let k = kink_free_tensor(&mut rng, &[3, 5]);
    out.push(("relu", gradcheck(&[k], |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, s)
    })));

    for axis in 0..3 {
        out.push(("softmax", gradcheck(&[a.clone()], |g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            probe(g, y, s)
        })));
    }

    let gain = random_tensor(&mut rng, &[4]);
    let beta = random_tensor(&mut rng, &[4]);
    out.push(("layer_norm", gradcheck(&[a.clone(), gain, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        probe(g, y, s)
    })));

    let table = random_tensor(&mut rng, &[6, 3]);
    out.push(("embedding", gradcheck(&[table], |g, v| {
        let y = g.embedding(v[0], &[1, 4, 1, 0, 5]).unwrap();
        probe(g, y, s)
    })));

    out.push(("dropout", gradcheck(&[a.clone()], |g, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(s);
        let y = g.dropout(v[0], 0.3, Mode::Train, &mut mask_rng).unwrap();
        probe(g, y, s)
    })));

    out.push(("reshape", gradcheck(&[a.clone()], |g, v| {
        let y = g.reshape(v[0], &[6, 4]).unwrap();
        probe(g, y, s)
    })));
    out.push(("permute", gradcheck(&[a.clone()], |g, v| {
        let y = g.permute(v[0], &[2, 0, 1]).unwrap();
        probe(g, y, s)
    })));
    out.push(("transpose", gradcheck(&[a.clone()], |g, v| {
        let y = g.transpose(v[0], 1, 2).unwrap();
        probe(g, y, s)
    })));

    let c = random_tensor(&mut rng, &[2, 3, 2]);
    out.push(("concat", gradcheck(&[a.clone(), c], |g, v| {
        let y = g.concat(&[v[0], v[1]], 2).unwrap();
        probe(g, y, s)
    })));

    let logits = random_tensor(&mut rng, &[2, 3, 5]);
    out.push(("cross_entropy", gradcheck(&[logits], |g, v| {
        g.cross_entropy(v[0], &[1, 4, 0, 2, 3, 0], &[false, false, true, false, false, true])
            .unwrap()
    })));

    out.push(("sum", gradcheck(&[a], |g, v| {
        let y = g.mul(v[0], v[0]).unwrap();
        g.sum(y)
    })));
    out
}

pub fn small_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        dropout: 0.1,
        max_len: 8,
        vocab_size: vocab,
        tie_embeddings: false,
    }
}

/// Loss of a 2-layer model on a fixed batch with padding, in train mode with
/// a fixed dropout stream.
fn model_loss(model: &Seq2Seq<f64>, record: bool, seed: u64) -> (f64, Option<Vec<Vec<f64>>>) {
    let src = [5, 6, 7, 2, 8, 9, 2, 0];
    let src_pad = [false, false, false, false, false, false, false, true];
    let tgt_in = [1, 5, 6, 7, 1, 8, 9, 0];
    let tgt = [5, 6, 7, 2, 8, 9, 2, 0];
    let tgt_pad = [false, false, false, false, false, false, false, true];
    let mut g = if record { Graph::new() } else { Graph::no_grad() };
    let p = model.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let memory = model
        .encode(&mut g, &p, SeqBatch::new(&src, &src_pad, 2, 4), Mode::Train, &mut rng)
        .unwrap();
    let logits = model.decode(&mut g, &p, &tgt_in, &memory, Mode::Train, &mut rng).unwrap();
    let loss = g.cross_entropy(logits, &tgt, &tgt_pad).unwrap();
    let value = g.value(loss)[0];
    if !record {
        return (value, None);
    }
    g.backward(loss).unwrap();
    let grads = (0..model.params().len())
        .map(|i| g.grad(p.var(i)).unwrap().to_vec())
        .collect();
    (value, Some(grads))
}

/// Worst relative error over a sample of every parameter tensor of a 2-layer
/// d_model=16 model.
pub fn gradcheck_model(seed: u64, per_tensor: usize) -> f64 {
    let mut model = Seq2Seq::<f64>::new(small_model_config(12), seed).unwrap();
    let (_, grads) = model_loss(&model, true, seed);
    let grads = grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 17);
    let mut worst = 0.0f64;
    for (i, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let orig = model.params()[i].tensor.data()[j];
            model.params_mut()[i].tensor.data_mut()[j] = orig + STEP;
            let up = model_loss(&model, false, seed).0;
            model.params_mut()[i].tensor.data_mut()[j] = orig - STEP;
            let down = model_loss(&model, false, seed).0;
            model.params_mut()[i].tensor.data_mut()[j] = orig;
            worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// n-grams of `s` as owned vectors.
fn ngrams(s: &[usize], n: usize) -> Vec<Vec<usize>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

/// Clipped matches counted by linear scans, no hashing.
pub fn brute_clipped(cand: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let mut matched = 0;
    let mut seen: Vec<&Vec<usize>> = Vec::new();
    for g in &c {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let in_c = c.iter().filter(|x| *x == g).count();
        let in_r = r.iter().filter(|x| *x == g).count();
        matched += in_c.min(in_r);
    }
    (matched, c.len())
}

pub fn brute_sentence_bleu(cand: &[usize], reference: &[usize], n: usize) -> f64 {
    let (m, t) = brute_clipped(cand, reference, n);
    if t == 0 || m == 0 {
        return 0.0;
    }
    let bp = if cand.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    };
    bp * m as f64 / t as f64
}

/// Cumulative corpus BLEU-1..4 and precisions.
pub fn brute_corpus_bleu(cands: &[Vec<usize>], refs: &[Vec<usize>]) -> ([f64; 4], [f64; 4]) {
    let mut p = [0.0; 4];
    for n in 1..=4 {
        let (mut m, mut t) = (0, 0);
        for (c, r) in cands.iter().zip(refs) {
            let (a, b) = brute_clipped(c, r, n);
            m += a;
            t += b;
        }
        p[n - 1] = if t == 0 { 0.0 } else { m as f64 / t as f64 };
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut bleu = [0.0; 4];
    for n in 1..=4 {
        if p[..n].iter().all(|&x| x > 0.0) {
            let mean_log = p[..n].iter().map(|x| x.ln()).sum::<f64>() / n as f64;
            bleu[n - 1] = bp * mean_log.exp();
        }
    }
    (bleu, p)
}

/// Random corpus of up to 10 sentence pairs of up to 12 tokens over a small
/// alphabet, so that n-gram overlaps are common.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = rng.random_range(1..=10);
    let alphabet = rng.random_range(2..=6);
    let sent = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.random_range(1..=12);
        (0..len).map(|_| rng.random_range(4..4 + alphabet)).collect()
    };
    let cands = (0..n).map(|_| sent(rng)).collect();
    let refs = (0..n).map(|_| sent(rng)).collect();
    (cands, refs)
}

/// Largest gap between the library and the brute-force counter on one corpus.
pub fn bleu_oracle_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cands, refs) = random_corpus(&mut rng);
    let report = biss::metrics::corpus_bleu(&cands, &refs).unwrap();
    let (bleu, prec) = brute_corpus_bleu(&cands, &refs);
    let mut gap = 0.0f64;
    for n in 0..4 {
        gap = gap.max((report.bleu[n] - bleu[n]).abs());
        gap = gap.max((report.precision[n] - prec[n]).abs());
    }
    for (c, r) in cands.iter().zip(&refs) {
        for n in 1..=4 {
            let lib = biss::metrics::sentence_bleu_i(c, r, n).unwrap();
            gap = gap.max((lib - brute_sentence_bleu(c, r, n)).abs());
        }
    }
    gap
}

/// Held-out-style synthetic data with a vocabulary built on the training side.
pub fn synthetic_dataset(train_pairs: usize, test_pairs: usize, noise: f64, seed: u64) -> Dataset {
    let config = SynthConfig {
        noise,
        ..Default::default()
    };
    let (train, _) = tokenized_pairs(&noisy_copy_dialogues(&config, train_pairs, seed));
    let (test, _) = tokenized_pairs(&noisy_copy_dialogues(&config, test_pairs, seed + 7919));
    let vocab = Vocab::from_pairs(&train, 1, None).unwrap();
    Dataset {
        train: encode_pairs(&train, &vocab),
        valid: Vec::new(),
        test: encode_pairs(&test, &vocab),
        vocab,
    }
}

/// Small, quick training setup for determinism and resume checks.
pub fn tiny_train_config(vocab: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        dropout: 0.1,
        max_len: 12,
        vocab_size: vocab,
        tie_embeddings: false,
    };
    c.batch_size = 16;
    c.epochs = 2;
    c.seed = seed;
    c.optimizer.warmup_steps = 20;
    c
}
