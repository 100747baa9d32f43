//! Retrieval and representation analyses over trained encoders.
//!
//! All similarity arithmetic runs in `f64` over L2-normalized rows with a
//! fixed summation order, so results are reproducible bit for bit.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{make_hard_negative, CorpusError, ParallelPair};
use crate::encoder::{encode, pool_mean, EncoderConfig, EncoderError, EncoderParams, SpecialTokens, TokenBatch};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding set has {rows} rows but {ids} ids")]
    IdCount { rows: usize, ids: usize },
    #[error("embedding data length {len} is not rows × dim = {rows} × {dim}")]
    Shape { rows: usize, dim: usize, len: usize },
    #[error("non-finite embedding in row {row}")]
    NonFinite { row: usize },
    #[error("zero vector for id {id}")]
    ZeroVector { id: u64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("k = {k} needs at least {k} candidates, have {have}")]
    TooFewCandidates { k: usize, have: usize },
    #[error("gold alignment is not a bijection: {0}")]
    NotBijective(String),
    #[error("need more than {k} tokens, have {have}")]
    TooFewTokens { k: usize, have: usize },
    #[error("sentence {row} has nothing left to attend after excluding specials")]
    EmptyAttention { row: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected EMB1")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Row-major `count × dim` embeddings with one id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub data: Vec<f32>,
    pub ids: Vec<u64>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<u64>) -> Result<Self, EvalError> {
        let rows = ids.len();
        if dim == 0 || data.len() != rows * dim {
            return Err(EvalError::Shape {
                rows,
                dim,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite { row: pos / dim });
        }
        Ok(Self { dim, data, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn scaled(&self, c: f32) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
            ids: self.ids.clone(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self, EvalError> {
        if self.dim != other.dim {
            return Err(EvalError::DimMismatch(self.dim, other.dim));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        Ok(Self {
            dim: self.dim,
            data,
            ids,
        })
    }
}

fn unit(v: &[f32], id: u64) -> Result<Vec<f64>, EvalError> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EvalError::ZeroVector { id });
    }
    Ok(v.iter().map(|&x| f64::from(x) / norm).collect())
}

fn unit_rows(set: &EmbeddingSet) -> Result<Vec<Vec<f64>>, EvalError> {
    (0..set.len()).map(|i| unit(set.row(i), set.ids[i])).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

/// Mean of the `k` largest values, summed in descending order.
fn top_k_mean(mut values: Vec<f64>, k: usize) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    values[..k].iter().fold(0.0, |s, v| s + v) / k as f64
}

fn ratio(cos: f64, knn_x: f64, knn_y: f64) -> f64 {
    cos / ((knn_x + knn_y) / 2.0)
}

/// Ratio margin between `x` and `y`.
///
/// `cands_y` supplies the neighbourhood of `x` and `cands_x` that of `y`.
pub fn margin_score(
    x: &[f32],
    y: &[f32],
    cands_x: &EmbeddingSet,
    cands_y: &EmbeddingSet,
    k: usize,
) -> Result<f64, EvalError> {
    for (set, v) in [(cands_x, x), (cands_y, y)] {
        if set.dim != v.len() {
            return Err(EvalError::DimMismatch(set.dim, v.len()));
        }
    }
    check_k(k, cands_x.len().min(cands_y.len()))?;
    let (xu, yu) = (unit(x, 0)?, unit(y, 1)?);
    let cx = unit_rows(cands_x)?;
    let cy = unit_rows(cands_y)?;
    let knn_x = top_k_mean(cy.iter().map(|c| dot(&xu, c)).collect(), k);
    let knn_y = top_k_mean(cx.iter().map(|c| dot(&yu, c)).collect(), k);
    Ok(ratio(dot(&xu, &yu), knn_x, knn_y))
}

fn check_k(k: usize, have: usize) -> Result<(), EvalError> {
    if k == 0 || have < k {
        return Err(EvalError::TooFewCandidates { k, have });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub predicted_id: u64,
    pub gold_id: u64,
    /// Margin of the predicted candidate.
    pub margin: f64,
    /// Whether the prediction is one of the added hard negatives.
    pub hard_negative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub error_rate: f64,
    pub k: usize,
    pub pool_size: usize,
    pub queries: Vec<QueryResult>,
    /// Errors whose prediction was a hard negative.
    pub hard_negative_errors: usize,
}

impl MiningReport {
    pub fn errors(&self) -> usize {
        self.queries.iter().filter(|q| q.predicted_id != q.gold_id).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_id,predicted_id,gold_id,margin,correct,hard_negative\n");
        for q in &self.queries {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                q.query_id,
                q.predicted_id,
                q.gold_id,
                q.margin,
                q.predicted_id == q.gold_id,
                q.hard_negative
            ));
        }
        s
    }
}

/// Source-index → target-index map after checking the gold map is a bijection.
fn gold_indices(src: &EmbeddingSet, tgt: &EmbeddingSet, gold: &HashMap<u64, u64>) -> Result<Vec<usize>, EvalError> {
    let tgt_index: HashMap<u64, usize> = tgt.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    if tgt_index.len() != tgt.len() {
        return Err(EvalError::NotBijective("duplicate target ids".into()));
    }
    if src.len() != tgt.len() || gold.len() != src.len() {
        return Err(EvalError::NotBijective(format!(
            "{} sources, {} targets, {} gold entries",
            src.len(),
            tgt.len(),
            gold.len()
        )));
    }
    let mut used = HashSet::new();
    src.ids
        .iter()
        .map(|id| {
            let t = gold
                .get(id)
                .ok_or_else(|| EvalError::NotBijective(format!("source {id} has no gold target")))?;
            let &j = tgt_index
                .get(t)
                .ok_or_else(|| EvalError::NotBijective(format!("gold target {t} not in target set")))?;
            if !used.insert(j) {
                return Err(EvalError::NotBijective(format!("target {t} is gold for two sources")));
            }
            Ok(j)
        })
        .collect()
}

/// Margin-based retrieval over `pool`; rows at index `>= originals` are hard negatives.
fn mine(
    src: &EmbeddingSet,
    pool: &EmbeddingSet,
    originals: usize,
    gold: &[usize],
    k: usize,
) -> Result<MiningReport, EvalError> {
    if src.dim != pool.dim {
        return Err(EvalError::DimMismatch(src.dim, pool.dim));
    }
    check_k(k, src.len().min(pool.len()))?;
    let su = unit_rows(src)?;
    let pu = unit_rows(pool)?;
    let cos: Vec<Vec<f64>> = su.iter().map(|s| pu.iter().map(|p| dot(s, p)).collect()).collect();
    let knn_src: Vec<f64> = cos.iter().map(|row| top_k_mean(row.clone(), k)).collect();
    let knn_pool: Vec<f64> = (0..pool.len())
        .map(|j| top_k_mean(cos.iter().map(|row| row[j]).collect(), k))
        .collect();
    let mut queries = Vec::with_capacity(src.len());
    let mut errors = 0;
    let mut hard_negative_errors = 0;
    for (i, row) in cos.iter().enumerate() {
        // NaN margins (zero denominators on degenerate sets) never win.
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, &c) in row.iter().enumerate() {
            let m = ratio(c, knn_src[i], knn_pool[j]);
            if m > best_score {
                best = j;
                best_score = m;
            }
        }
        let best_score = ratio(row[best], knn_src[i], knn_pool[best]);
        let hard_negative = best >= originals;
        if best != gold[i] {
            errors += 1;
            hard_negative_errors += usize::from(hard_negative);
        }
        queries.push(QueryResult {
            query_id: src.ids[i],
            predicted_id: pool.ids[best],
            gold_id: pool.ids[gold[i]],
            margin: best_score,
            hard_negative,
        });
    }
    Ok(MiningReport {
        error_rate: errors as f64 / src.len() as f64,
        k,
        pool_size: pool.len(),
        queries,
        hard_negative_errors,
    })
}

/// Fraction of source rows whose highest-margin target is not the gold one.
///
/// Ties go to the lowest target index.
pub fn xsim_error(
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    gold: &HashMap<u64, u64>,
    k: usize,
) -> Result<MiningReport, EvalError> {
    let g = gold_indices(src, tgt, gold)?;
    mine(src, tgt, tgt.len(), &g, k)
}

/// [`xsim_error`] with `negatives` appended to the candidate pool.
///
/// Negative ids must not collide with target ids.
pub fn xsimpp_error(
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    negatives: &EmbeddingSet,
    gold: &HashMap<u64, u64>,
    k: usize,
) -> Result<MiningReport, EvalError> {
    let g = gold_indices(src, tgt, gold)?;
    let tgt_ids: HashSet<u64> = tgt.ids.iter().copied().collect();
    if negatives.ids.iter().any(|id| tgt_ids.contains(id)) {
        return Err(EvalError::NotBijective(
            "hard-negative id collides with a target id".into(),
        ));
    }
    let pool = if negatives.is_empty() {
        tgt.clone()
    } else {
        tgt.concat(negatives)?
    };
    mine(src, &pool, tgt.len(), &g, k)
}

/// Identity gold map over pair ids.
pub fn identity_gold(pairs: &[ParallelPair]) -> HashMap<u64, u64> {
    pairs.iter().map(|p| (p.id, p.id)).collect()
}

/// Mean Euclidean distance from each L2-normalized row to its nearest other row.
pub fn mean_nn_distance(set: &EmbeddingSet) -> Result<f64, EvalError> {
    check_k(1, set.len().saturating_sub(1))?;
    let rows = unit_rows(set)?;
    let mut total = 0.0;
    for (i, a) in rows.iter().enumerate() {
        let nearest = rows
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| a.iter().zip(b).fold(0.0, |s, (x, y)| s + (x - y) * (x - y)))
            .fold(f64::INFINITY, f64::min);
        total += nearest.sqrt();
    }
    Ok(total / rows.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

/// Sentence embeddings of `rows`, encoded in chunks of `batch_size`.
pub fn embed_sentences(
    config: &EncoderConfig,
    params: &EncoderParams<Tensor<f32>>,
    rows: &[Vec<u32>],
    ids: Vec<u64>,
    pooling: Pooling,
    batch_size: usize,
) -> Result<EmbeddingSet, EvalError> {
    let mut data = Vec::with_capacity(rows.len() * config.model_dim);
    for chunk in rows.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let vars = params.map(&mut |t| g.constant(t.clone()));
        let batch = TokenBatch::from_rows(chunk, config.specials.pad)?;
        let enc = encode(&mut g, config, &vars, &batch, false)?;
        let pooled = match pooling {
            Pooling::Cls => enc.sentence,
            Pooling::Mean => pool_mean(&mut g, &enc)?,
        };
        data.extend_from_slice(g.value(pooled).data());
    }
    EmbeddingSet::new(config.model_dim, data, ids)
}

/// Target-side embeddings of `pairs` followed by hard-negative rows.
pub struct MiningInputs {
    pub src: EmbeddingSet,
    pub tgt: EmbeddingSet,
    pub gold: HashMap<u64, u64>,
}

pub fn embed_pairs(
    config: &EncoderConfig,
    params: &EncoderParams<Tensor<f32>>,
    pairs: &[ParallelPair],
    pooling: Pooling,
) -> Result<MiningInputs, EvalError> {
    let ids: Vec<u64> = pairs.iter().map(|p| p.id).collect();
    let a: Vec<Vec<u32>> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<Vec<u32>> = pairs.iter().map(|p| p.b.clone()).collect();
    Ok(MiningInputs {
        src: embed_sentences(config, params, &a, ids.clone(), pooling, 64)?,
        tgt: embed_sentences(config, params, &b, ids, pooling, 64)?,
        gold: identity_gold(pairs),
    })
}

/// Perturbed copies of each target sentence, `per_target` apiece, in target order.
///
/// Ids are assigned upward from `first_id`.
pub fn hard_negative_rows<R: Rng + ?Sized>(
    pairs: &[ParallelPair],
    per_target: usize,
    replacement_pool: &[u32],
    specials: &SpecialTokens,
    first_id: u64,
    rng: &mut R,
) -> Result<(Vec<Vec<u32>>, Vec<u64>), EvalError> {
    let mut rows = Vec::with_capacity(pairs.len() * per_target);
    for p in pairs {
        for _ in 0..per_target {
            rows.push(make_hard_negative(&p.b, replacement_pool, specials, rng)?);
        }
    }
    let ids = (0..rows.len() as u64).map(|i| first_id + i).collect();
    Ok((rows, ids))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenCategory {
    Translation,
    SameSentence,
    SameLanguage,
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenNeighbor {
    pub pair_id: u64,
    /// `false` for language A, `true` for language B.
    pub side_b: bool,
    pub position: usize,
    pub token: u32,
    pub cosine: f64,
    pub category: TokenCategory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenQuery {
    pub pair_id: u64,
    pub position: usize,
    pub token: u32,
    pub neighbors: Vec<TokenNeighbor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatchReport {
    /// Percentages for translation, same-sentence, same-language and other.
    pub translation: f64,
    pub same_sentence: f64,
    pub same_language: f64,
    pub other: f64,
    pub queries: Vec<TokenQuery>,
}

impl TokenMatchReport {
    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for n in self.queries.iter().flat_map(|q| &q.neighbors) {
            c[n.category as usize] += 1;
        }
        c
    }
}

struct TokenEntry {
    pair: usize,
    side_b: bool,
    position: usize,
    token: u32,
}

fn categorize(query: &TokenEntry, cand: &TokenEntry, pairs: &[ParallelPair]) -> TokenCategory {
    if cand.pair == query.pair && cand.side_b && pairs[query.pair].aligned_position(query.position) == cand.position {
        TokenCategory::Translation
    } else if cand.pair == query.pair && !cand.side_b {
        TokenCategory::SameSentence
    } else if !cand.side_b && cand.token == query.token {
        TokenCategory::SameLanguage
    } else {
        TokenCategory::Other
    }
}

/// Categorizes nearest-neighbour tokens of sampled language-A tokens.
///
/// Every non-special token of every sentence in `pairs` is a candidate;
/// queries come from the first `query_sentences` A sentences,
/// `queries_per_sentence` positions each (all of them for shorter sentences).
pub fn token_nn_analysis<R: Rng + ?Sized>(
    config: &EncoderConfig,
    params: &EncoderParams<Tensor<f32>>,
    pairs: &[ParallelPair],
    query_sentences: usize,
    queries_per_sentence: usize,
    neighbors_k: usize,
    rng: &mut R,
) -> Result<TokenMatchReport, EvalError> {
    let sp = &config.specials;
    let mut entries = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for side_b in [false, true] {
        let rows: Vec<Vec<u32>> = pairs
            .iter()
            .map(|p| if side_b { p.b.clone() } else { p.a.clone() })
            .collect();
        for (start, chunk) in rows.chunks(64).enumerate().map(|(c, ch)| (c * 64, ch)) {
            let mut g = Graph::new();
            let vars = params.map(&mut |t| g.constant(t.clone()));
            let batch = TokenBatch::from_rows(chunk, sp.pad)?;
            let enc = encode(&mut g, config, &vars, &batch, false)?;
            let hidden = g.value(enc.hidden).data();
            let (l, d) = (batch.seq_len, config.model_dim);
            for (r, row) in chunk.iter().enumerate() {
                for (pos, &tok) in row.iter().enumerate() {
                    if sp.is_special(tok) {
                        continue;
                    }
                    let off = (r * l + pos) * d;
                    vectors.push(unit(&hidden[off..off + d], tok as u64)?);
                    entries.push(TokenEntry {
                        pair: start + r,
                        side_b,
                        position: pos,
                        token: tok,
                    });
                }
            }
        }
    }
    if entries.len() <= neighbors_k {
        return Err(EvalError::TooFewTokens {
            k: neighbors_k,
            have: entries.len(),
        });
    }
    let index: HashMap<(usize, bool, usize), usize> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.pair, e.side_b, e.position), i))
        .collect();

    let mut queries = Vec::new();
    let mut counts = [0usize; 4];
    for (pi, pair) in pairs.iter().enumerate().take(query_sentences) {
        let content: Vec<usize> = (0..pair.a.len()).filter(|&j| !sp.is_special(pair.a[j])).collect();
        let take = queries_per_sentence.min(content.len());
        let mut chosen: Vec<usize> = content.choose_multiple(rng, take).copied().collect();
        chosen.sort_unstable();
        for pos in chosen {
            let qi = index[&(pi, false, pos)];
            let mut scored: Vec<(f64, usize)> = (0..entries.len())
                .filter(|&i| i != qi)
                .map(|i| (dot(&vectors[qi], &vectors[i]), i))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let neighbors = scored[..neighbors_k]
                .iter()
                .map(|&(cosine, i)| {
                    let e = &entries[i];
                    let category = categorize(&entries[qi], e, pairs);
                    counts[category as usize] += 1;
                    TokenNeighbor {
                        pair_id: pairs[e.pair].id,
                        side_b: e.side_b,
                        position: e.position,
                        token: e.token,
                        cosine,
                        category,
                    }
                })
                .collect();
            queries.push(TokenQuery {
                pair_id: pair.id,
                position: pos,
                token: pair.a[pos],
                neighbors,
            });
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    let pct = |c: usize| 100.0 * c as f64 / total;
    Ok(TokenMatchReport {
        translation: pct(counts[0]),
        same_sentence: pct(counts[1]),
        same_language: pct(counts[2]),
        other: pct(counts[3]),
        queries,
    })
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Entropy of `probs` restricted to `keep`, renormalized.
pub fn restricted_entropy(probs: &[f64], keep: &[bool]) -> Option<f64> {
    let kept: Vec<f64> = probs.iter().zip(keep).filter(|(_, &k)| k).map(|(&p, _)| p).collect();
    let total: f64 = kept.iter().sum();
    if kept.is_empty() || total <= 0.0 {
        return None;
    }
    Some(entropy(&kept.iter().map(|p| p / total).collect::<Vec<_>>()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub mean_entropy: f64,
    pub entropies: Vec<f64>,
    /// Number of key positions each entropy was computed over.
    pub attended: Vec<usize>,
    pub exclude_specials: bool,
}

/// Entropy of the last layer's CLS attention row, averaged over heads first.
///
/// With `exclude_specials`, CLS and EOS columns are dropped and the remaining
/// mass renormalized.
pub fn attention_entropy(
    config: &EncoderConfig,
    params: &EncoderParams<Tensor<f32>>,
    sentences: &[Vec<u32>],
    exclude_specials: bool,
) -> Result<AttentionReport, EvalError> {
    let sp = &config.specials;
    let mut entropies = Vec::with_capacity(sentences.len());
    let mut attended = Vec::with_capacity(sentences.len());
    for (start, chunk) in sentences.chunks(64).enumerate().map(|(c, ch)| (c * 64, ch)) {
        let mut g = Graph::new();
        let vars = params.map(&mut |t| g.constant(t.clone()));
        let batch = TokenBatch::from_rows(chunk, sp.pad)?;
        let enc = encode(&mut g, config, &vars, &batch, true)?;
        let last = *enc.attention.last().expect("at least one layer");
        let attn = g.value(last).data();
        let (h, l) = (config.num_heads, batch.seq_len);
        for (r, row) in chunk.iter().enumerate() {
            let len = batch.lengths[r];
            let mut probs = vec![0.0f64; len];
            for head in 0..h {
                let off = ((r * h + head) * l) * l;
                for (j, p) in probs.iter_mut().enumerate() {
                    *p += f64::from(attn[off + j]) / h as f64;
                }
            }
            let keep: Vec<bool> = row[..len]
                .iter()
                .map(|&t| !exclude_specials || (t != sp.cls && t != sp.eos))
                .collect();
            let e = restricted_entropy(&probs, &keep).ok_or(EvalError::EmptyAttention { row: start + r })?;
            entropies.push(e);
            attended.push(keep.iter().filter(|&&k| k).count());
        }
    }
    let mean_entropy = entropies.iter().sum::<f64>() / entropies.len().max(1) as f64;
    Ok(AttentionReport {
        mean_entropy,
        entropies,
        attended,
        exclude_specials,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingAblation {
    pub cls_error: f64,
    pub mean_error: f64,
    /// `(mean − cls) / cls`; 0 when both are 0, +∞ when only cls is 0.
    pub delta: f64,
}

pub fn relative_delta(cls: f64, mean: f64) -> f64 {
    if cls == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (mean - cls) / cls
    }
}

/// xsim error under CLS and mean pooling of the same encoder.
pub fn pooling_ablation(
    config: &EncoderConfig,
    params: &EncoderParams<Tensor<f32>>,
    pairs: &[ParallelPair],
    k: usize,
) -> Result<PoolingAblation, EvalError> {
    let run = |pooling| -> Result<f64, EvalError> {
        let m = embed_pairs(config, params, pairs, pooling)?;
        Ok(xsim_error(&m.src, &m.tgt, &m.gold, k)?.error_rate)
    };
    let cls_error = run(Pooling::Cls)?;
    let mean_error = run(Pooling::Mean)?;
    Ok(PoolingAblation {
        cls_error,
        mean_error,
        delta: relative_delta(cls_error, mean_error),
    })
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

/// Sidecar path holding one id per line.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn export_embeddings(set: &EmbeddingSet, path: &Path) -> Result<(), EvalError> {
    let mut out = Vec::with_capacity(12 + set.data.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for v in &set.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| EvalError::Io { path: p, source }
    };
    fs::write(path, out).map_err(io_err(path))?;
    let ids: String = set.ids.iter().map(|id| format!("{id}\n")).collect();
    let side = ids_path(path);
    fs::write(&side, ids).map_err(io_err(&side))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, EvalError> {
    let bytes = fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let format = |reason: String| EvalError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(format("truncated header".into()));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(EvalError::BadMagic {
            path: path.to_path_buf(),
            found: bytes[..4].to_vec(),
        });
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (rows, dim) = (word(4), word(8));
    if bytes.len() != 12 + rows * dim * 4 {
        return Err(format(format!(
            "expected {} bytes of data for {rows} × {dim}, found {}",
            rows * dim * 4,
            bytes.len() - 12
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let side = ids_path(path);
    let text = fs::read_to_string(&side).map_err(|source| EvalError::Io {
        path: side.clone(),
        source,
    })?;
    let ids = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse::<u64>().map_err(|_| EvalError::Format {
                path: side.clone(),
                reason: format!("line {}: `{l}` is not an id", i + 1),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if ids.len() != rows {
        return Err(EvalError::IdCount { rows, ids: ids.len() });
    }
    EmbeddingSet::new(dim, data, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f32]]) -> EmbeddingSet {
        let dim = rows[0].len();
        EmbeddingSet::new(dim, rows.concat(), (0..rows.len() as u64).collect()).unwrap()
    }

    #[test]
    fn margin_of_isolated_match_is_one() {
        let x = [1.0, 0.0, 0.0];
        let cands_x = set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let cands_y = set(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let m = margin_score(&x, &x, &cands_x, &cands_y, 1).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        let scaled = [3.0, 0.0, 0.0];
        assert!((margin_score(&scaled, &x, &cands_x, &cands_y, 1).unwrap() - m).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_is_rejected() {
        let c = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            margin_score(&[0.0, 0.0], &[1.0, 0.0], &c, &c, 1),
            Err(EvalError::ZeroVector { .. })
        ));
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let s = set(&[&[1.0, 0.2, 0.0], &[0.0, 1.0, 0.3], &[0.5, 0.0, 1.0], &[0.3, 0.3, -1.0]]);
        let gold: HashMap<u64, u64> = (0..4).map(|i| (i, i)).collect();
        let r = xsim_error(&s, &s, &gold, 2).unwrap();
        assert_eq!(r.error_rate, 0.0);
        assert_eq!(r.queries.len(), 4);
    }

    #[test]
    fn gold_must_be_bijective() {
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let gold: HashMap<u64, u64> = [(0, 0), (1, 0)].into_iter().collect();
        assert!(matches!(xsim_error(&s, &s, &gold, 1), Err(EvalError::NotBijective(_))));
    }

    #[test]
    fn empty_negative_pool_matches_xsim() {
        let s = set(&[&[1.0, 0.2], &[0.1, 1.0], &[-1.0, 0.4]]);
        let t = set(&[&[0.9, 0.1], &[0.3, 1.0], &[-1.0, -0.2]]);
        let gold: HashMap<u64, u64> = (0..3).map(|i| (i, i)).collect();
        let empty = EmbeddingSet::new(2, vec![], vec![]).unwrap();
        assert_eq!(
            xsim_error(&s, &t, &gold, 1).unwrap(),
            xsimpp_error(&s, &t, &empty, &gold, 1).unwrap()
        );
    }

    #[test]
    fn entropy_extremes() {
        let l = 7;
        let uniform = vec![1.0 / l as f64; l];
        assert!((entropy(&uniform) - (l as f64).ln()).abs() < 1e-9);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        let keep = [false, true, true, false];
        let e = restricted_entropy(&[0.7, 0.1, 0.1, 0.1], &keep).unwrap();
        assert!((e - 2f64.ln()).abs() < 1e-12);
        assert!(restricted_entropy(&[1.0], &[false]).is_none());
    }

    #[test]
    fn nn_distance_of_orthonormal_rows() {
        let s = set(&[&[2.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 5.0]]);
        assert!((mean_nn_distance(&s).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let dup = set(&[&[1.0, 1.0], &[2.0, 2.0]]);
        assert_eq!(mean_nn_distance(&dup).unwrap(), 0.0);
    }

    #[test]
    fn relative_delta_cases() {
        assert_eq!(relative_delta(0.0, 0.0), 0.0);
        assert_eq!(relative_delta(0.0, 0.1), f64::INFINITY);
        assert!((relative_delta(0.2, 0.3) - 0.5).abs() < 1e-12);
    }
}
