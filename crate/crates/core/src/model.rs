//! Small pre-norm transformer encoder-decoder.
//!
//! Parameters live in a flat, named list so that the optimizer and the
//! checkpoint format can walk them without knowing the architecture. A
//! [`Layout`] derived from the config maps each architectural role to its
//! position in that list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BOS, EOS, PAD};
use crate::graph::{Graph, Mode, Var};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Reuse the token embedding as the output projection.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            dropout: 0.1,
            max_len: 26,
            vocab_size: 0,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads, n_layers and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.vocab_size < 5 {
            return bad("vocab_size must be at least 5");
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub tensor: Tensor<R>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embedding: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    output: Option<usize>,
    output_bias: usize,
}

enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.weight"), vec![d_in, d_out], Init::Xavier),
            b: self.add(format!("{prefix}.bias"), vec![d_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{prefix}.up"), d, d_ff),
            down: self.linear(&format!("{prefix}.down"), d_ff, d),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let embedding = b.add("embedding".into(), vec![cfg.vocab_size, d], Init::Embedding);
    let encoder = (0..cfg.n_layers)
        .map(|l| EncoderLayer {
            attn_norm: b.norm(&format!("encoder.{l}.attn_norm"), d),
            attn: b.attention(&format!("encoder.{l}.attn"), d),
            ff_norm: b.norm(&format!("encoder.{l}.ff_norm"), d),
            ff: b.feed_forward(&format!("encoder.{l}.ff"), d, cfg.d_ff),
        })
        .collect();
    let encoder_norm = b.norm("encoder.norm", d);
    let decoder = (0..cfg.n_layers)
        .map(|l| DecoderLayer {
            self_norm: b.norm(&format!("decoder.{l}.self_norm"), d),
            self_attn: b.attention(&format!("decoder.{l}.self_attn"), d),
            cross_norm: b.norm(&format!("decoder.{l}.cross_norm"), d),
            cross_attn: b.attention(&format!("decoder.{l}.cross_attn"), d),
            ff_norm: b.norm(&format!("decoder.{l}.ff_norm"), d),
            ff: b.feed_forward(&format!("decoder.{l}.ff"), d, cfg.d_ff),
        })
        .collect();
    let decoder_norm = b.norm("decoder.norm", d);
    let output = (!cfg.tie_embeddings)
        .then(|| b.add("output.weight".into(), vec![d, cfg.vocab_size], Init::Xavier));
    let output_bias = b.add("output.bias".into(), vec![cfg.vocab_size], Init::Zeros);
    (
        Layout {
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            output_bias,
        },
        b.specs,
    )
}

/// Sinusoidal position table, `[max_len, d_model]`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Token ids for a padded batch of sequences.
#[derive(Debug, Clone, Copy)]
pub struct SeqBatch<'a> {
    pub ids: &'a [usize],
    pub pad: &'a [bool],
    pub rows: usize,
    pub len: usize,
}

impl<'a> SeqBatch<'a> {
    pub fn new(ids: &'a [usize], pad: &'a [bool], rows: usize, len: usize) -> Self {
        assert_eq!(ids.len(), rows * len);
        assert_eq!(pad.len(), rows * len);
        Self { ids, pad, rows, len }
    }
}

/// Encoder output for one batch.
#[derive(Debug, Clone)]
pub struct Memory<'a> {
    /// `[rows, len, d_model]`
    pub states: Var,
    pub source: SeqBatch<'a>,
}

/// Parameters bound to a graph for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Graph node of parameter `index`.
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq<R> {
    config: ModelConfig,
    params: Vec<Param<R>>,
    layout_names: Vec<String>,
    layout: Layout,
}

impl<R: Real> Seq2Seq<R> {
    /// Freshly initialized model; initialization depends only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<R> = match init {
                Init::Zeros => vec![R::zero(); n],
                Init::Ones => vec![R::one(); n],
                Init::Xavier => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| R::lit(rng.random_range(-limit..limit))).collect()
                }
                Init::Embedding => {
                    let limit = (3.0 / config.d_model as f64).sqrt();
                    (0..n).map(|_| R::lit(rng.random_range(-limit..limit))).collect()
                }
            };
            let tensor = Tensor::new(shape, data)?.with_requires_grad(true);
            params.push(Param { name, tensor });
        }
        let layout_names = params.iter().map(|p| p.name.clone()).collect();
        Ok(Self {
            config,
            params,
            layout_names,
            layout,
        })
    }

    /// Rebuilds a model from named parameters, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: Vec<Param<R>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if specs.len() != params.len() {
            return Err(ModelError::Params(format!(
                "expected {} tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.tensor.shape() {
                return Err(ModelError::Params(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            if !p.tensor.is_finite() {
                return Err(ModelError::Params(format!("{} has non-finite values", p.name)));
            }
        }
        let params = params
            .into_iter()
            .map(|p| Param {
                name: p.name,
                tensor: p.tensor.with_requires_grad(true),
            })
            .collect::<Vec<_>>();
        let layout_names = params.iter().map(|p| p.name.clone()).collect();
        Ok(Self {
            config,
            params,
            layout_names,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<R>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout_names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Token embedding table `[vocab, d_model]`, shared by encoder and decoder inputs.
    pub fn embedding_table(&self) -> &Tensor<R> {
        &self.params[self.layout.embedding].tensor
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn bind(&self, g: &mut Graph<R>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.leaf(&p.tensor)).collect(),
        }
    }

    fn check_ids(&self, seq: &SeqBatch<'_>) -> Result<()> {
        if seq.len > self.config.max_len {
            return Err(ModelError::TooLong {
                len: seq.len,
                max: self.config.max_len,
            });
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph<R>, p: &Bound, x: Var, l: Linear) -> Result<Var> {
        let y = g.matmul(x, p.vars[l.w])?;
        Ok(g.add_bias(y, p.vars[l.b])?)
    }

    fn norm(&self, g: &mut Graph<R>, p: &Bound, x: Var, n: Norm) -> Result<Var> {
        Ok(g.layer_norm(x, p.vars[n.gain], p.vars[n.bias], R::lit(1e-5))?)
    }

    fn embed<G: Rng + ?Sized>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        seq: &SeqBatch<'_>,
        mode: Mode,
        rng: &mut G,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let layout = self.layout();
        let emb = g.embedding(p.vars[layout.embedding], seq.ids)?;
        let emb = g.scale(emb, R::lit((d as f64).sqrt()));
        let pe = positional_encoding(seq.len, d);
        let mut tiled = Vec::with_capacity(seq.rows * seq.len * d);
        for _ in 0..seq.rows {
            tiled.extend(pe.iter().map(|&v| R::lit(v)));
        }
        let pe = g.constant(&[seq.rows * seq.len, d], tiled)?;
        let x = g.add(emb, pe)?;
        Ok(g.dropout(x, self.config.dropout, mode, rng)?)
    }

    // Additive mask `[rows*heads, q_len, k_len]`: key padding, plus causal when requested.
    fn attention_mask(&self, g: &mut Graph<R>, rows: usize, q_len: usize, keys: &[bool], k_len: usize, causal: bool) -> Result<Var> {
        let h = self.config.n_heads;
        let masked = R::lit(MASKED);
        let mut data = Vec::with_capacity(rows * h * q_len * k_len);
        for r in 0..rows {
            for _ in 0..h {
                for i in 0..q_len {
                    for j in 0..k_len {
                        let hidden = keys[r * k_len + j] || (causal && j > i);
                        data.push(if hidden { masked } else { R::zero() });
                    }
                }
            }
        }
        Ok(g.constant(&[rows * h, q_len, k_len], data)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend<G: Rng + ?Sized>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        a: Attention,
        query: Var,
        kv: Var,
        rows: usize,
        q_len: usize,
        k_len: usize,
        mask: Var,
        mode: Mode,
        rng: &mut G,
    ) -> Result<Var> {
        let (d, h) = (self.config.d_model, self.config.n_heads);
        let dh = self.config.head_dim();
        let split = |g: &mut Graph<R>, x: Var, len: usize| -> Result<Var> {
            let x = g.reshape(x, &[rows, len, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            Ok(g.reshape(x, &[rows * h, len, dh])?)
        };
        let q = self.linear(g, p, query, a.q)?;
        let k = self.linear(g, p, kv, a.k)?;
        let v = self.linear(g, p, kv, a.v)?;
        let q = split(g, q, q_len)?;
        let k = split(g, k, k_len)?;
        let v = split(g, v, k_len)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, R::lit(1.0 / (dh as f64).sqrt()));
        let scores = g.add(scores, mask)?;
        let weights = g.softmax(scores, 2)?;
        let weights = g.dropout(weights, self.config.dropout, mode, rng)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.reshape(ctx, &[rows, h, q_len, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[rows * q_len, d])?;
        self.linear(g, p, ctx, a.o)
    }

    fn feed_forward<G: Rng + ?Sized>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        f: FeedForward,
        x: Var,
        mode: Mode,
        rng: &mut G,
    ) -> Result<Var> {
        let hidden = self.linear(g, p, x, f.up)?;
        let hidden = g.relu(hidden);
        let hidden = g.dropout(hidden, self.config.dropout, mode, rng)?;
        self.linear(g, p, hidden, f.down)
    }

    fn residual<G: Rng + ?Sized>(&self, g: &mut Graph<R>, x: Var, update: Var, mode: Mode, rng: &mut G) -> Result<Var> {
        let update = g.dropout(update, self.config.dropout, mode, rng)?;
        Ok(g.add(x, update)?)
    }

    /// Encodes a padded source batch into `[rows, len, d_model]` states.
    pub fn encode<'a, G: Rng + ?Sized>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        src: SeqBatch<'a>,
        mode: Mode,
        rng: &mut G,
    ) -> Result<Memory<'a>> {
        self.check_ids(&src)?;
        let layout = self.layout();
        let mask = self.attention_mask(g, src.rows, src.len, src.pad, src.len, false)?;
        let mut x = self.embed(g, p, &src, mode, rng)?;
        for layer in layout.encoder.iter() {
            let h = self.norm(g, p, x, layer.attn_norm)?;
            let h = self.attend(g, p, layer.attn, h, h, src.rows, src.len, src.len, mask, mode, rng)?;
            x = self.residual(g, x, h, mode, rng)?;
            let h = self.norm(g, p, x, layer.ff_norm)?;
            let h = self.feed_forward(g, p, layer.ff, h, mode, rng)?;
            x = self.residual(g, x, h, mode, rng)?;
        }
        let x = self.norm(g, p, x, layout.encoder_norm)?;
        let states = g.reshape(x, &[src.rows, src.len, self.config.d_model])?;
        Ok(Memory { states, source: src })
    }

    /// Teacher-forced decoding of `tgt_input` (BOS-prefixed rows) against
    /// `memory`; returns logits `[rows, len, vocab]`. Position `t` sees only
    /// inputs at positions `<= t`.
    pub fn decode<G: Rng + ?Sized>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        tgt_input: &[usize],
        memory: &Memory<'_>,
        mode: Mode,
        rng: &mut G,
    ) -> Result<Var> {
        let rows = memory.source.rows;
        if rows == 0 || tgt_input.len() % rows != 0 {
            return Err(ModelError::Config(format!(
                "decoder input of {} ids does not split into {rows} rows",
                tgt_input.len()
            )));
        }
        let len = tgt_input.len() / rows;
        // Decoder inputs carry no key mask: the causal mask already hides the
        // trailing pads from every earlier position.
        let no_pad = vec![false; tgt_input.len()];
        let tgt = SeqBatch::new(tgt_input, &no_pad, rows, len);
        self.check_ids(&tgt)?;
        let layout = self.layout();
        let d = self.config.d_model;
        let src = memory.source;
        let self_mask = self.attention_mask(g, rows, len, &no_pad, len, true)?;
        let cross_mask = self.attention_mask(g, rows, len, src.pad, src.len, false)?;
        let mem = g.reshape(memory.states, &[rows * src.len, d])?;
        let mut x = self.embed(g, p, &tgt, mode, rng)?;
        for layer in layout.decoder.iter() {
            let h = self.norm(g, p, x, layer.self_norm)?;
            let h = self.attend(g, p, layer.self_attn, h, h, rows, len, len, self_mask, mode, rng)?;
            x = self.residual(g, x, h, mode, rng)?;
            let h = self.norm(g, p, x, layer.cross_norm)?;
            let h = self.attend(g, p, layer.cross_attn, h, mem, rows, len, src.len, cross_mask, mode, rng)?;
            x = self.residual(g, x, h, mode, rng)?;
            let h = self.norm(g, p, x, layer.ff_norm)?;
            let h = self.feed_forward(g, p, layer.ff, h, mode, rng)?;
            x = self.residual(g, x, h, mode, rng)?;
        }
        let x = self.norm(g, p, x, layout.decoder_norm)?;
        let out_w = match layout.output {
            Some(w) => p.vars[w],
            None => g.transpose(p.vars[layout.embedding], 0, 1)?,
        };
        let logits = g.matmul(x, out_w)?;
        let logits = g.add_bias(logits, p.vars[layout.output_bias])?;
        Ok(g.reshape(logits, &[rows, len, self.config.vocab_size])?)
    }

    /// Autoregressive argmax decoding in eval mode. Each returned row holds at
    /// most `max_len` tokens and ends at (without including) the first EOS.
    pub fn greedy_generate(&self, src: SeqBatch<'_>, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let max_len = max_len.min(self.config.max_len);
        let vocab = self.config.vocab_size;
        // eval mode draws nothing
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<R>::no_grad();
        let p = self.bind(&mut g);
        let memory = self.encode(&mut g, &p, src, Mode::Eval, &mut rng)?;
        let rows = src.rows;
        let mut prefix: Vec<Vec<usize>> = vec![vec![BOS]; rows];
        let mut done = vec![false; rows];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for step in 0..max_len {
            let len = step + 1;
            let input: Vec<usize> = prefix.iter().flatten().copied().collect();
            let mark = g.len();
            let logits = self.decode(&mut g, &p, &input, &memory, Mode::Eval, &mut rng)?;
            let values = g.value(logits);
            for r in 0..rows {
                if done[r] {
                    prefix[r].push(PAD);
                    continue;
                }
                let row = &values[(r * len + step) * vocab..(r * len + step + 1) * vocab];
                let next = argmax(row);
                if next == EOS {
                    done[r] = true;
                } else {
                    out[r].push(next);
                }
                prefix[r].push(next);
            }
            debug_assert!(g.len() > mark);
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 4,
            n_layers: 2,
            d_ff: 32,
            dropout: 0.1,
            max_len: 12,
            vocab_size: vocab,
            tie_embeddings: false,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny(50).validate().is_ok());
        let mut c = tiny(50);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(50);
        c.max_len = 1;
        assert!(c.validate().is_err());
        assert!(tiny(4).validate().is_err());
    }

    #[test]
    fn layout_names_unique_and_embedding_shape() {
        let m = Seq2Seq::<f64>::new(tiny(50), 0).unwrap();
        let mut names = m.param_names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.params().len());
        assert_eq!(m.embedding_table().shape(), &[50, 16]);
        let tied = Seq2Seq::<f64>::new(ModelConfig { tie_embeddings: true, ..tiny(50) }, 0).unwrap();
        assert_eq!(tied.params().len(), m.params().len() - 1);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Seq2Seq::<f32>::new(tiny(50), 7).unwrap();
        let b = Seq2Seq::<f32>::new(tiny(50), 7).unwrap();
        let c = Seq2Seq::<f32>::new(tiny(50), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = Seq2Seq::<f64>::new(tiny(50), 0).unwrap();
        let mut params = m.params().to_vec();
        assert!(Seq2Seq::from_params(tiny(50), params.clone()).is_ok());
        params.pop();
        assert!(matches!(Seq2Seq::from_params(tiny(50), params), Err(ModelError::Params(_))));
    }

    #[test]
    fn too_long_rejected() {
        let m = Seq2Seq::<f64>::new(tiny(50), 0).unwrap();
        let ids = vec![5; 13];
        let pad = vec![false; 13];
        let err = m.greedy_generate(SeqBatch::new(&ids, &pad, 1, 13), 5).unwrap_err();
        assert_eq!(err, ModelError::TooLong { len: 13, max: 12 });
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe = positional_encoding(3, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[0.1f64, 0.5, 0.5, 0.2]), 1);
    }
}
