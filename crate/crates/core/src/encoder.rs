//! Pre-layer-norm transformer encoder with CLS pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::param_struct;
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("row {row}: token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { row: usize, id: u32, vocab: usize },
    #[error("row {row}: first token must be the CLS id {cls}, found {found}")]
    MissingCls { row: usize, cls: u32, found: u32 },
    #[error("row {row}: padding must be a trailing suffix")]
    InteriorPadding { row: usize },
    #[error("row {row}: length {len} exceeds max sequence length {max}")]
    TooLong { row: usize, len: usize, max: usize },
    #[error("empty token batch")]
    EmptyBatch,
    #[error("sentence {row} has no tokens to pool")]
    NothingToPool { row: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ids of the reserved tokens. They occupy the lowest vocabulary ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub cls: u32,
    pub eos: u32,
    pub mask: u32,
    pub unk: u32,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            pad: 0,
            cls: 1,
            eos: 2,
            mask: 3,
            unk: 4,
        }
    }
}

impl SpecialTokens {
    pub fn all(&self) -> [u32; 5] {
        [self.pad, self.cls, self.eos, self.mask, self.unk]
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.all().contains(&id)
    }

    /// Smallest id that is not reserved.
    pub fn first_content_id(&self) -> u32 {
        self.all().into_iter().max().unwrap_or(0) + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(flatten)]
    pub specials: SpecialTokens,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ff_dim: 256,
            vocab_size: 405,
            max_len: 32,
            specials: SpecialTokens::default(),
            seed: 0,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return bad("layers, heads, model_dim and ff_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        let ids = self.specials.all();
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= self.vocab_size {
                return bad(format!("special id {a} >= vocab_size {}", self.vocab_size));
            }
            if ids[i + 1..].contains(a) {
                return bad(format!("special id {a} assigned twice"));
            }
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

param_struct! {
    /// Weights of one transformer block.
    pub struct BlockParams {
        leaves: [
            ln1_gain, ln1_bias,
            w_query, b_query, w_key, w_value, b_value, w_out, b_out,
            ln2_gain, ln2_bias,
            w_ff_in, b_ff_in, w_ff_out, b_ff_out,
        ],
        lists: [],
    }
}

param_struct! {
    pub struct EncoderParams {
        leaves: [token_embedding, position_embedding, final_gain, final_bias],
        lists: [blocks: BlockParams],
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub(crate) fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("positive std"),
        }
    }

    pub(crate) fn normal<T: Element>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64_lossy(self.normal.sample(&mut self.rng)))
    }

    pub(crate) fn block<T: Element>(&mut self, dim: usize, ff: usize) -> BlockParams<Tensor<T>> {
        let ones = || Tensor::full(&[dim], T::one());
        let zeros = |n: usize| Tensor::zeros(&[n]);
        BlockParams {
            ln1_gain: ones(),
            ln1_bias: zeros(dim),
            w_query: self.normal(&[dim, dim]),
            b_query: zeros(dim),
            w_key: self.normal(&[dim, dim]),
            w_value: self.normal(&[dim, dim]),
            b_value: zeros(dim),
            w_out: self.normal(&[dim, dim]),
            b_out: zeros(dim),
            ln2_gain: ones(),
            ln2_bias: zeros(dim),
            w_ff_in: self.normal(&[dim, ff]),
            b_ff_in: zeros(ff),
            w_ff_out: self.normal(&[ff, dim]),
            b_ff_out: zeros(dim),
        }
    }
}

/// Deterministic initialization from `config.seed`.
pub fn init_params<T: Element>(config: &EncoderConfig) -> Result<EncoderParams<Tensor<T>>, EncoderError> {
    config.validate()?;
    let d = config.model_dim;
    let mut init = Init::new(config.seed, config.init_std);
    let token_embedding = init.normal(&[config.vocab_size, d]);
    let position_embedding = init.normal(&[config.max_len, d]);
    let blocks = (0..config.num_layers).map(|_| init.block(d, config.ff_dim)).collect();
    Ok(EncoderParams {
        token_embedding,
        position_embedding,
        final_gain: Tensor::full(&[d], T::one()),
        final_bias: Tensor::zeros(&[d]),
        blocks,
    })
}

/// Right-padded id matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub seq_len: usize,
    /// Unpadded length of each row.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads `rows` to the longest row with `pad`.
    pub fn from_rows(rows: &[Vec<u32>], pad: u32) -> Result<Self, EncoderError> {
        let seq_len = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || seq_len == 0 {
            return Err(EncoderError::EmptyBatch);
        }
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(pad, seq_len - r.len()));
        }
        Ok(Self {
            ids,
            rows: rows.len(),
            seq_len,
            lengths: rows.iter().map(Vec::len).collect(),
        })
    }

    /// Wraps an already padded matrix, rejecting interior padding.
    pub fn from_matrix(ids: Vec<u32>, rows: usize, seq_len: usize, pad: u32) -> Result<Self, EncoderError> {
        if rows == 0 || seq_len == 0 || ids.len() != rows * seq_len {
            return Err(EncoderError::EmptyBatch);
        }
        let mut lengths = Vec::with_capacity(rows);
        for (r, row) in ids.chunks(seq_len).enumerate() {
            let len = row.iter().position(|&t| t == pad).unwrap_or(seq_len);
            if row[len..].iter().any(|&t| t != pad) {
                return Err(EncoderError::InteriorPadding { row: r });
            }
            lengths.push(len);
        }
        Ok(Self {
            ids,
            rows,
            seq_len,
            lengths,
        })
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.seq_len..r * self.seq_len + self.lengths[r]]
    }

    /// Flat `rows × seq_len` mask, true at real (non-pad) positions.
    pub fn padding_mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.seq_len).map(move |j| j < len))
            .collect()
    }
}

/// Encoder output for one batch.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `[batch, seq_len, model_dim]`, after the final layer norm.
    pub hidden: Var,
    /// `[batch, model_dim]`, the hidden state at the CLS position.
    pub sentence: Var,
    /// Per layer `[batch, heads, seq_len, seq_len]`; empty unless captured.
    pub attention: Vec<Var>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl EncodedBatch {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }
}

/// Key-padding mask broadcast to `[batch, heads, seq, seq]`; true where masked.
pub(crate) fn attention_mask(lengths: &[usize], heads: usize, seq: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(lengths.len() * heads * seq * seq);
    for &len in lengths {
        for _ in 0..heads * seq {
            mask.extend((0..seq).map(|k| k >= len));
        }
    }
    mask
}

fn affine<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn norm<T: Element>(g: &mut Graph<T>, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
    let axis = g.shape(x).len() - 1;
    let n = g.layer_norm(x, axis)?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

/// One pre-LN block over `x: [batch, seq, dim]`. Returns the new stream and
/// the attention probabilities.
pub(crate) fn transformer_block<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockParams<Var>,
    heads: usize,
    mask: &[bool],
) -> Result<(Var, Var), TensorError> {
    let shape = g.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let h = norm(g, x, p.ln1_gain, p.ln1_bias)?;
    let h = g.reshape(h, &[b * l, d])?;
    let mut split = |w: Var, bias: Option<Var>| -> Result<Var, TensorError> {
        let y = match bias {
            Some(bias) => affine(g, h, w, bias)?,
            None => g.matmul(h, w)?,
        };
        let y = g.reshape(y, &[b, l, heads, dh])?;
        g.transpose(y, vec![0, 2, 1, 3])
    };
    let q = split(p.w_query, Some(p.b_query))?;
    // No key bias: it shifts every score of a query equally.
    let k = split(p.w_key, None)?;
    let v = split(p.w_value, Some(p.b_value))?;
    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let scores = g.masked_fill(scores, mask.to_vec(), f64::NEG_INFINITY)?;
    let attn = g.softmax(scores, 3)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.transpose(ctx, vec![0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b * l, d])?;
    let o = affine(g, ctx, p.w_out, p.b_out)?;
    let o = g.reshape(o, &[b, l, d])?;
    let x = g.add(x, o)?;

    let h = norm(g, x, p.ln2_gain, p.ln2_bias)?;
    let h = g.reshape(h, &[b * l, d])?;
    let h = affine(g, h, p.w_ff_in, p.b_ff_in)?;
    let h = g.gelu(h)?;
    let h = affine(g, h, p.w_ff_out, p.b_ff_out)?;
    let h = g.reshape(h, &[b, l, d])?;
    let x = g.add(x, h)?;
    Ok((x, attn))
}

pub(crate) fn final_norm<T: Element>(g: &mut Graph<T>, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
    norm(g, x, gain, bias)
}

fn validate_batch(config: &EncoderConfig, batch: &TokenBatch) -> Result<(), EncoderError> {
    for r in 0..batch.rows {
        let row = batch.row(r);
        if row.len() > config.max_len {
            return Err(EncoderError::TooLong {
                row: r,
                len: row.len(),
                max: config.max_len,
            });
        }
        match row.first() {
            Some(&t) if t == config.specials.cls => {}
            found => {
                return Err(EncoderError::MissingCls {
                    row: r,
                    cls: config.specials.cls,
                    found: found.copied().unwrap_or(config.specials.pad),
                })
            }
        }
        if let Some(&id) = row.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                row: r,
                id,
                vocab: config.vocab_size,
            });
        }
        if row.contains(&config.specials.pad) {
            return Err(EncoderError::InteriorPadding { row: r });
        }
    }
    Ok(())
}

/// Runs the encoder over a padded batch.
pub fn encode<T: Element>(
    g: &mut Graph<T>,
    config: &EncoderConfig,
    params: &EncoderParams<Var>,
    batch: &TokenBatch,
    capture_attention: bool,
) -> Result<EncodedBatch, EncoderError> {
    validate_batch(config, batch)?;
    let (b, l, d) = (batch.rows, batch.seq_len, config.model_dim);
    let ids: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
    let emb = g.gather_rows(params.token_embedding, ids)?;
    let emb = g.reshape(emb, &[b, l, d])?;
    let pos = g.slice(params.position_embedding, 0, 0, l)?;
    let mut x = g.add(emb, pos)?;
    let mask = attention_mask(&batch.lengths, config.num_heads, l);
    let mut attention = Vec::new();
    for block in &params.blocks {
        let (next, attn) = transformer_block(g, x, block, config.num_heads, &mask)?;
        x = next;
        if capture_attention {
            attention.push(attn);
        }
    }
    let hidden = final_norm(g, x, params.final_gain, params.final_bias)?;
    let cls = g.slice(hidden, 1, 0, 1)?;
    let sentence = g.reshape(cls, &[b, d])?;
    Ok(EncodedBatch {
        hidden,
        sentence,
        attention,
        lengths: batch.lengths.clone(),
        seq_len: l,
    })
}

/// Mean of hidden states over non-padded positions after the CLS slot.
pub fn pool_mean<T: Element>(g: &mut Graph<T>, encoded: &EncodedBatch) -> Result<Var, EncoderError> {
    let shape = g.shape(encoded.hidden).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let mut keep = Vec::with_capacity(b * l * d);
    let mut inv = Vec::with_capacity(b * d);
    for (row, &len) in encoded.lengths.iter().enumerate() {
        if len < 2 {
            return Err(EncoderError::NothingToPool { row });
        }
        for j in 0..l {
            let w = if j >= 1 && j < len { T::one() } else { T::zero() };
            keep.extend(std::iter::repeat_n(w, d));
        }
        let r = T::one() / T::from_f64_lossy((len - 1) as f64);
        inv.extend(std::iter::repeat_n(r, d));
    }
    let keep = g.constant(Tensor::new(vec![b, l, d], keep)?);
    let masked = g.mul(encoded.hidden, keep)?;
    let summed = g.sum(masked, 1)?;
    let inv = g.constant(Tensor::new(vec![b, d], inv)?);
    Ok(g.mul(summed, inv)?)
}
