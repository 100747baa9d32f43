//! Training objectives: token masking, cross-unmasking, sentence alignment,
//! KoLeo spreading and their weighted combination.
//!
//! The cross-unmasking head predicts the masked tokens of one language from
//! the masked encoder's token states, with the other language's clean
//! sentence vector prepended as an extra sequence position. Switches in
//! [`GradFlowConfig`] select which encoder outputs receive gradient and which
//! sentence vectors are aligned.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    attention_mask, final_norm, transformer_block, BlockParams, EncodedBatch, EncoderConfig, EncoderError, Init,
    SpecialTokens,
};
use crate::params::param_struct;
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

/// Floor applied to nearest-neighbour distances before the logarithm.
pub const KOLEO_DISTANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("no masked position in the batch")]
    NothingMasked,
    #[error("{0} needs at least 2 vectors, got {1}")]
    TooFewVectors(&'static str, usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("mask ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("loss weights must be non-negative and finite")]
    BadWeights,
    #[error("clean-to-clean alignment requires the symmetric architecture")]
    CleanToCleanNeedsSymmetric,
    #[error("view set does not match the configured architecture: {0}")]
    InconsistentViews(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScheme {
    /// Every selected position becomes the mask id.
    #[default]
    AllMask,
    /// 80% mask id, 10% random content id, 10% unchanged.
    BertStyle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingPolicy {
    pub mask_ratio: f64,
    pub mask_scheme: MaskScheme,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            mask_ratio: 0.4,
            mask_scheme: MaskScheme::AllMask,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(ObjectiveError::BadRatio(self.mask_ratio));
        }
        Ok(())
    }
}

/// A masked copy of one token row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedRow {
    pub tokens: Vec<u32>,
    /// Ascending sequence positions that carry a prediction target.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<u32>,
}

fn maskable(specials: &SpecialTokens, id: u32) -> bool {
    id != specials.pad && id != specials.cls && id != specials.eos && id != specials.mask
}

/// Selects `round(ratio · maskable)` positions uniformly without replacement.
pub fn mask_tokens<R: Rng + ?Sized>(
    row: &[u32],
    policy: &MaskingPolicy,
    specials: &SpecialTokens,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedRow {
    let candidates: Vec<usize> = (0..row.len()).filter(|&i| maskable(specials, row[i])).collect();
    let count = (policy.mask_ratio * candidates.len() as f64).round() as usize;
    let count = count.min(candidates.len());
    let mut positions: Vec<usize> = index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();
    let mut tokens = row.to_vec();
    let targets = positions.iter().map(|&p| row[p]).collect();
    let first_content = specials.first_content_id();
    for &p in &positions {
        tokens[p] = match policy.mask_scheme {
            MaskScheme::AllMask => specials.mask,
            MaskScheme::BertStyle => {
                let r: f64 = rng.gen();
                if r < 0.8 {
                    specials.mask
                } else if r < 0.9 && (first_content as usize) < vocab_size {
                    rng.gen_range(first_content..vocab_size as u32)
                } else {
                    row[p]
                }
            }
        };
    }
    MaskedRow {
        tokens,
        positions,
        targets,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if ok(self.alpha) && ok(self.beta) && ok(self.gamma) {
            Ok(())
        } else {
            Err(ObjectiveError::BadWeights)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentMode {
    CleanToClean,
    /// Masked sentence vector of language A against the clean one of B.
    CleanToDirty,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentFamily {
    Mse,
    Infonce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradFlowConfig {
    /// Backpropagate the unmasking loss into the masked encoder's token states.
    pub token_gradients: bool,
    pub alignment_mode: AlignmentMode,
    pub alignment_family: AlignmentFamily,
    pub koleo: bool,
    /// Four encoder views (clean and masked per language) instead of two.
    pub symmetric: bool,
    pub temperature: f64,
}

impl Default for GradFlowConfig {
    fn default() -> Self {
        Self {
            token_gradients: true,
            alignment_mode: AlignmentMode::CleanToClean,
            alignment_family: AlignmentFamily::Mse,
            koleo: true,
            symmetric: true,
            temperature: 0.05,
        }
    }
}

impl GradFlowConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.alignment_mode == AlignmentMode::CleanToClean && !self.symmetric {
            return Err(ObjectiveError::CleanToCleanNeedsSymmetric);
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(ObjectiveError::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

param_struct! {
    /// Transformer stack plus vocabulary projection used for unmasking.
    pub struct UnmaskHeadParams {
        leaves: [position_embedding, final_gain, final_bias, w_vocab, b_vocab],
        lists: [blocks: BlockParams],
    }
}

/// Head initialization shares the encoder geometry.
pub fn init_head<T: Element>(
    encoder: &EncoderConfig,
    num_layers: usize,
    seed: u64,
) -> Result<UnmaskHeadParams<Tensor<T>>, ObjectiveError> {
    encoder.validate()?;
    let d = encoder.model_dim;
    let mut init = Init::new(seed, encoder.init_std);
    let position_embedding = init.normal(&[encoder.max_len, d]);
    let blocks = (0..num_layers).map(|_| init.block(d, encoder.ff_dim)).collect();
    let w_vocab = init.normal(&[d, encoder.vocab_size]);
    Ok(UnmaskHeadParams {
        position_embedding,
        final_gain: Tensor::full(&[d], T::one()),
        final_bias: Tensor::zeros(&[d]),
        w_vocab,
        b_vocab: Tensor::zeros(&[encoder.vocab_size]),
        blocks,
    })
}

/// Masked encoder output together with what it must reconstruct.
#[derive(Clone, Copy, Debug)]
pub struct MaskedView<'a> {
    pub encoded: &'a EncodedBatch,
    /// Per sentence, ascending masked positions.
    pub positions: &'a [Vec<usize>],
    pub targets: &'a [Vec<u32>],
}

/// Mean negative log-likelihood of `targets` under `logits: [m, vocab]`.
pub fn masked_token_cross_entropy<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[u32],
) -> Result<Var, ObjectiveError> {
    let shape = g.shape(logits).to_vec();
    if targets.is_empty() {
        return Err(ObjectiveError::NothingMasked);
    }
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cross-entropy",
            expected: format!("[{}, vocab]", targets.len()),
            actual: format!("{shape:?}"),
        }
        .into());
    }
    let vocab = shape[1];
    let logp = g.log_softmax(logits, 1)?;
    let flat = g.reshape(logp, &[shape[0] * vocab])?;
    let picks = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| i * vocab + t as usize)
        .collect();
    let picked = g.gather_rows(flat, picks)?;
    let mean = g.mean(picked, 0)?;
    Ok(g.scale(mean, -1.0)?)
}

/// Unmasking cross-entropy for one direction: `[S_other, Ĥ] → targets`.
pub fn cross_unmask_loss<T: Element>(
    g: &mut Graph<T>,
    encoder: &EncoderConfig,
    sentence_other: Var,
    masked: MaskedView<'_>,
    head: &UnmaskHeadParams<Var>,
    flow: &GradFlowConfig,
) -> Result<Var, ObjectiveError> {
    let enc = masked.encoded;
    let (b, l, d) = (enc.rows(), enc.seq_len, encoder.model_dim);
    if g.shape(sentence_other) != [b, d] {
        return Err(TensorError::ShapeMismatch {
            op: "cross-unmask",
            expected: format!("[{b}, {d}]"),
            actual: format!("{:?}", g.shape(sentence_other)),
        }
        .into());
    }
    if masked.positions.len() != b || masked.targets.len() != b {
        return Err(ObjectiveError::InconsistentViews("mask metadata per sentence"));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, (pos, tgt)) in masked.positions.iter().zip(masked.targets).enumerate() {
        if pos.len() != tgt.len() {
            return Err(ObjectiveError::InconsistentViews("positions vs targets"));
        }
        for (&p, &t) in pos.iter().zip(tgt) {
            if p == 0 || p >= enc.lengths[s] {
                return Err(ObjectiveError::InconsistentViews("masked position outside sentence"));
            }
            rows.push(s * l + p);
            targets.push(t);
        }
    }
    if targets.is_empty() || l < 2 {
        return Err(ObjectiveError::NothingMasked);
    }

    let mut tokens = g.slice(enc.hidden, 1, 1, l - 1)?;
    if !flow.token_gradients {
        tokens = g.stop_gradient(tokens)?;
    }
    let sent = g.reshape(sentence_other, &[b, 1, d])?;
    let seq = g.concat(&[sent, tokens], 1)?;
    let pos = g.slice(head.position_embedding, 0, 1, l - 1)?;
    let zero = g.constant(Tensor::zeros(&[1, d]));
    let pos = g.concat(&[zero, pos], 0)?;
    let mut x = g.add(seq, pos)?;
    let mask = attention_mask(&enc.lengths, encoder.num_heads, l);
    for block in &head.blocks {
        x = transformer_block(g, x, block, encoder.num_heads, &mask)?.0;
    }
    let x = final_norm(g, x, head.final_gain, head.final_bias)?;
    let x = g.reshape(x, &[b * l, d])?;
    let picked = g.gather_rows(x, rows)?;
    let logits = g.matmul(picked, head.w_vocab)?;
    let logits = g.add(logits, head.b_vocab)?;
    masked_token_cross_entropy(g, logits, &targets)
}

fn check_pair<T: Element>(g: &Graph<T>, a: Var, b: Var, op: &'static str) -> Result<(), ObjectiveError> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{:?}", g.shape(a)),
            actual: format!("{:?}", g.shape(b)),
        }
        .into());
    }
    Ok(())
}

/// Mean squared difference over batch and dimensions.
pub fn alignment_mse<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, ObjectiveError> {
    check_pair(g, a, b, "alignment-mse")?;
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    Ok(g.mean_all(sq)?)
}

/// Index of each row's nearest other row (squared euclidean, lowest index on ties).
pub fn nearest_neighbors(rows: &[f64], n: usize, dim: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let xi = &rows[i * dim..(i + 1) * dim];
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let xj = &rows[j * dim..(j + 1) * dim];
                let d: f64 = xi.iter().zip(xj).map(|(p, q)| (p - q) * (p - q)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// `-(1/n) Σ log d_i` over L2-normalized rows, `d_i` the distance to the
/// nearest other row floored at [`KOLEO_DISTANCE_FLOOR`].
pub fn koleo<T: Element>(g: &mut Graph<T>, s: Var) -> Result<Var, ObjectiveError> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(ObjectiveError::TooFewVectors(
            "koleo",
            shape.first().copied().unwrap_or(0),
        ));
    }
    let (n, d) = (shape[0], shape[1]);
    let y = g.l2_normalize(s, 1)?;
    let nn = nearest_neighbors(&g.value(y).to_f64_vec(), n, d);
    let other = g.gather_rows(y, nn)?;
    let diff = g.sub(y, other)?;
    let sq = g.square(diff)?;
    let dist2 = g.sum(sq, 1)?;
    let floor = KOLEO_DISTANCE_FLOOR * KOLEO_DISTANCE_FLOOR;
    let below: Vec<bool> = g.value(dist2).data().iter().map(|v| v.as_f64() < floor).collect();
    let dist2 = g.masked_fill(dist2, below, floor)?;
    let log = g.log(dist2)?;
    let mean = g.mean(log, 0)?;
    // log d = ½ log d²
    Ok(g.scale(mean, -0.5)?)
}

/// Symmetric in-batch InfoNCE over cosine similarities.
pub fn infonce<T: Element>(g: &mut Graph<T>, a: Var, b: Var, temperature: f64) -> Result<Var, ObjectiveError> {
    check_pair(g, a, b, "infonce")?;
    let n = g.shape(a)[0];
    if n < 2 {
        return Err(ObjectiveError::TooFewVectors("infonce", n));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(ObjectiveError::BadTemperature(temperature));
    }
    let na = g.l2_normalize(a, 1)?;
    let nb = g.l2_normalize(b, 1)?;
    let nbt = g.transpose_last(nb)?;
    let sim = g.matmul(na, nbt)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let diagonal: Vec<u32> = (0..n as u32).collect();
    let rows = masked_token_cross_entropy(g, logits, &diagonal)?;
    let logits_t = g.transpose_last(logits)?;
    let cols = masked_token_cross_entropy(g, logits_t, &diagonal)?;
    let sum = g.add(rows, cols)?;
    Ok(g.scale(sum, 0.5)?)
}

/// Encoder outputs for one step.
///
/// Symmetric training fills all four views; the two-view variant uses only
/// `masked_a` and `clean_b`.
#[derive(Clone, Copy, Debug)]
pub struct ViewSet<'a> {
    pub clean_a: Option<&'a EncodedBatch>,
    pub masked_a: MaskedView<'a>,
    pub clean_b: &'a EncodedBatch,
    pub masked_b: Option<MaskedView<'a>>,
}

/// Unweighted loss terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sum of the unmasking directions.
    pub mlm: f64,
    /// `[A from B]` or `[A from B, B from A]`.
    pub mlm_directions: Vec<f64>,
    pub align: Option<f64>,
    pub koleo: Option<f64>,
}

/// `α · align + β · mlm + γ · koleo`, with the breakdown of each term.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    encoder: &EncoderConfig,
    views: ViewSet<'_>,
    weights: &LossWeights,
    flow: &GradFlowConfig,
    head: &UnmaskHeadParams<Var>,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    flow.validate()?;
    weights.validate()?;
    let symmetric = views.clean_a.is_some() && views.masked_b.is_some();
    if flow.symmetric != symmetric {
        return Err(ObjectiveError::InconsistentViews(if flow.symmetric {
            "symmetric training needs clean and masked views of both languages"
        } else {
            "two-view training takes masked A and clean B only"
        }));
    }
    let value = |g: &Graph<T>, v: Var| g.value(v).item().map(Element::as_f64).unwrap_or(f64::NAN);

    let mut mlm = cross_unmask_loss(g, encoder, views.clean_b.sentence, views.masked_a, head, flow)?;
    let mut directions = vec![value(g, mlm)];
    if let (Some(clean_a), Some(masked_b)) = (views.clean_a, views.masked_b) {
        let back = cross_unmask_loss(g, encoder, clean_a.sentence, masked_b, head, flow)?;
        directions.push(value(g, back));
        mlm = g.add(mlm, back)?;
    }

    let align = match flow.alignment_mode {
        AlignmentMode::None => None,
        mode => {
            let a = match mode {
                AlignmentMode::CleanToClean => views.clean_a.expect("checked symmetric").sentence,
                _ => views.masked_a.encoded.sentence,
            };
            let b = views.clean_b.sentence;
            Some(match flow.alignment_family {
                AlignmentFamily::Mse => alignment_mse(g, a, b)?,
                AlignmentFamily::Infonce => infonce(g, a, b, flow.temperature)?,
            })
        }
    };

    let koleo_term = if flow.koleo {
        let mut k = koleo(g, views.clean_b.sentence)?;
        if let Some(clean_a) = views.clean_a {
            let ka = koleo(g, clean_a.sentence)?;
            k = g.add(ka, k)?;
        }
        Some(k)
    } else {
        None
    };

    let mut total = g.scale(mlm, weights.beta)?;
    for (term, w) in [(align, weights.alpha), (koleo_term, weights.gamma)] {
        if let Some(t) = term {
            if w != 0.0 {
                let scaled = g.scale(t, w)?;
                total = g.add(total, scaled)?;
            }
        }
    }
    let breakdown = LossBreakdown {
        total: value(g, total),
        mlm: value(g, mlm),
        mlm_directions: directions,
        align: align.map(|v| value(g, v)),
        koleo: koleo_term.map(|v| value(g, v)),
    };
    Ok((total, breakdown))
}
