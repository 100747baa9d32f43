//! Parallel corpora: cipher-language generation, TSV ingestion and
//! hard-negative perturbation.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::SpecialTokens;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("could not draw {wanted} distinct sentences (got {got}); widen the length range or vocabulary")]
    Exhausted { wanted: usize, got: usize },
    #[error("sentence has no content tokens to perturb")]
    NoContent,
    #[error("replacement pool needs at least two ids")]
    PoolTooSmall,
    #[error("split sizes {dev}+{test} exceed corpus of {total}")]
    BadSplit { dev: usize, test: usize, total: usize },
    #[error("{path}: line {line}: {reason}")]
    Vocab { path: PathBuf, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const SPECIAL_SURFACES: [&str; 5] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

/// Bijective id ↔ surface table with the specials at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_SURFACES {
            v.insert(s);
        }
        v
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::default()
    }

    /// Id of `surface`, adding it when new.
    pub fn insert(&mut self, surface: &str) -> u32 {
        if let Some(&id) = self.index.get(surface) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(surface.to_string());
        self.index.insert(surface.to_string(), id);
        id
    }

    pub fn id(&self, surface: &str) -> Option<u32> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// CLS + whitespace tokens + EOS; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let sp = self.specials();
        std::iter::once(sp.cls)
            .chain(text.split_whitespace().map(|w| self.id(w).unwrap_or(sp.unk)))
            .chain(std::iter::once(sp.eos))
            .collect()
    }

    /// Surface forms of non-special ids joined by single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let sp = self.specials();
        ids.iter()
            .filter(|&&t| !sp.is_special(t) || t == sp.unk)
            .filter_map(|&t| self.surface(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let before = v.len();
            if v.insert(line) as usize != before {
                return Err(CorpusError::Vocab {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("duplicate token `{line}`"),
                });
            }
        }
        if v.tokens.len() < SPECIAL_SURFACES.len() || v.tokens[..SPECIAL_SURFACES.len()] != SPECIAL_SURFACES {
            return Err(CorpusError::Vocab {
                path: path.to_path_buf(),
                line: 1,
                reason: "special tokens must occupy the first five lines".into(),
            });
        }
        Ok(v)
    }
}

/// A translation pair. Rows start with CLS and end with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub id: u64,
    pub a: Vec<u32>,
    pub b: Vec<u32>,
    /// Position in `b` aligned with each position of `a`; `None` means the
    /// identity alignment.
    pub alignment: Option<Vec<usize>>,
}

impl ParallelPair {
    pub fn aligned_position(&self, pos_a: usize) -> usize {
        match &self.alignment {
            Some(al) => al[pos_a],
            None => pos_a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Reorder {
    None,
    AdjacentSwap { probability: f64 },
}

/// Parameters of a cipher-language corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Content tokens per language.
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    /// Content-token length range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    pub bijection_seed: u64,
    pub reorder: Reorder,
    pub corpus_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            zipf_exponent: 1.0,
            min_len: 4,
            max_len: 10,
            bijection_seed: 17,
            reorder: Reorder::None,
            corpus_seed: 23,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if self.vocab_size < 10 {
            return bad("vocab_size must be at least 10");
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad("need 2 <= min_len <= max_len");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be finite and non-negative");
        }
        if let Reorder::AdjacentSwap { probability } = self.reorder {
            if !(0.0..=1.0).contains(&probability) {
                return bad("swap probability outside [0, 1]");
            }
        }
        Ok(())
    }

    /// Total vocabulary size: specials plus both content blocks.
    pub fn total_vocab(&self) -> usize {
        SPECIAL_SURFACES.len() + 2 * self.vocab_size
    }

    /// The token permutation mapping language-A content indices to language B.
    pub fn bijection(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.vocab_size).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.bijection_seed));
        perm
    }
}

/// Generates `n` distinct cipher pairs. Pair ids are `0..n`.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<(Vec<ParallelPair>, Vocab), CorpusError> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut vocab = Vocab::new();
    let base = vocab.len() as u32;
    for i in 0..v {
        vocab.insert(&format!("a{i}"));
    }
    for j in 0..v {
        vocab.insert(&format!("b{j}"));
    }
    let perm = spec.bijection();
    let weights: Vec<f64> = (1..=v).map(|r| (r as f64).powf(-spec.zipf_exponent)).collect();
    let zipf = WeightedIndex::new(&weights).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.corpus_seed);
    let sp = vocab.specials();

    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(n);
    let max_attempts = n.saturating_mul(50).max(1000);
    let mut attempts = 0;
    while pairs.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(CorpusError::Exhausted {
                wanted: n,
                got: pairs.len(),
            });
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let content: Vec<usize> = (0..len).map(|_| zipf.sample(&mut rng)).collect();
        if !seen.insert(content.clone()) {
            continue;
        }
        let mut b_content: Vec<usize> = content.iter().map(|&i| perm[i]).collect();
        // order[k] = index in `content` of the token at B position k
        let mut order: Vec<usize> = (0..len).collect();
        if let Reorder::AdjacentSwap { probability } = spec.reorder {
            let mut k = 0;
            while k + 1 < len {
                if rng.gen::<f64>() < probability {
                    b_content.swap(k, k + 1);
                    order.swap(k, k + 1);
                    k += 2;
                } else {
                    k += 1;
                }
            }
        }
        let wrap = |ids: Vec<u32>| {
            let mut row = Vec::with_capacity(ids.len() + 2);
            row.push(sp.cls);
            row.extend(ids);
            row.push(sp.eos);
            row
        };
        let a = wrap(content.iter().map(|&i| base + i as u32).collect());
        let b = wrap(b_content.iter().map(|&j| base + (v + j) as u32).collect());
        let alignment = matches!(spec.reorder, Reorder::AdjacentSwap { .. }).then(|| {
            let mut al = vec![0; len + 2];
            for (k, &src) in order.iter().enumerate() {
                al[src + 1] = k + 1;
            }
            al[len + 1] = len + 1;
            al
        });
        pairs.push(ParallelPair {
            id: pairs.len() as u64,
            a,
            b,
            alignment,
        });
    }
    Ok((pairs, vocab))
}

/// Train/dev/test partition, disjoint by pair id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<ParallelPair>,
    pub dev: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
}

/// The last `test` pairs form the test split, the `dev` before them the dev split.
pub fn split_corpus(pairs: Vec<ParallelPair>, dev: usize, test: usize) -> Result<CorpusSplit, CorpusError> {
    let total = pairs.len();
    if dev + test > total {
        return Err(CorpusError::BadSplit { dev, test, total });
    }
    let mut train = pairs;
    let test_part = train.split_off(total - test);
    let dev_part = train.split_off(total - test - dev);
    Ok(CorpusSplit {
        train,
        dev: dev_part,
        test: test_part,
    })
}

/// Distinct non-special ids appearing on the B side, ascending.
pub fn target_pool(pairs: &[ParallelPair], specials: &SpecialTokens) -> Vec<u32> {
    let mut ids: Vec<u32> = pairs
        .iter()
        .flat_map(|p| p.b.iter().copied())
        .filter(|&t| !specials.is_special(t))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MalformedLine {
    pub line: usize,
    pub columns: usize,
}

#[derive(Clone, Debug)]
pub struct IngestReport {
    pub pairs: Vec<ParallelPair>,
    pub vocab: Vocab,
    /// Lines whose tokenized length exceeded the limit.
    pub skipped_overlength: Vec<usize>,
    pub malformed: Vec<MalformedLine>,
}

impl IngestReport {
    pub fn skipped(&self) -> usize {
        self.skipped_overlength.len() + self.malformed.len()
    }
}

/// Reads `<sentence A>\t<sentence B>` lines.
///
/// With `fixed_vocab`, unknown words map to UNK; otherwise the vocabulary is
/// grown in order of first appearance. Pair ids are 0-based line indices.
pub fn ingest_tsv(path: &Path, max_len: usize, fixed_vocab: Option<&Vocab>) -> Result<IngestReport, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut vocab = fixed_vocab.cloned().unwrap_or_default();
    let grow = fixed_vocab.is_none();
    let mut report = IngestReport {
        pairs: Vec::new(),
        vocab: Vocab::new(),
        skipped_overlength: Vec::new(),
        malformed: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            report.malformed.push(MalformedLine {
                line: i + 1,
                columns: cols.len(),
            });
            continue;
        }
        if cols[0]
            .split_whitespace()
            .count()
            .max(cols[1].split_whitespace().count())
            + 2
            > max_len
        {
            report.skipped_overlength.push(i + 1);
            continue;
        }
        if grow {
            for w in cols[0].split_whitespace().chain(cols[1].split_whitespace()) {
                vocab.insert(w);
            }
        }
        report.pairs.push(ParallelPair {
            id: i as u64,
            a: vocab.encode(cols[0]),
            b: vocab.encode(cols[1]),
            alignment: None,
        });
    }
    report.vocab = vocab;
    Ok(report)
}

pub fn write_tsv(path: &Path, pairs: &[ParallelPair], vocab: &Vocab) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}\t{}", vocab.decode(&p.a), vocab.decode(&p.b)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Replaces one content position with a different id drawn from `pool`.
pub fn make_hard_negative<R: Rng + ?Sized>(
    sentence: &[u32],
    pool: &[u32],
    specials: &SpecialTokens,
    rng: &mut R,
) -> Result<Vec<u32>, CorpusError> {
    let content: Vec<usize> = (0..sentence.len())
        .filter(|&i| !specials.is_special(sentence[i]))
        .collect();
    if content.is_empty() {
        return Err(CorpusError::NoContent);
    }
    if pool.len() < 2 {
        return Err(CorpusError::PoolTooSmall);
    }
    let pos = content[rng.gen_range(0..content.len())];
    let original = sentence[pos];
    let alternatives: Vec<u32> = pool.iter().copied().filter(|&t| t != original).collect();
    let mut out = sentence.to_vec();
    out[pos] = alternatives[rng.gen_range(0..alternatives.len())];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cipher_inverse_recovers_source() {
        let spec = SyntheticSpec::default();
        let (pairs, vocab) = generate_synthetic(&spec, 300).unwrap();
        assert_eq!(vocab.len(), spec.total_vocab());
        let perm = spec.bijection();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let base = 5u32;
        let v = spec.vocab_size as u32;
        for p in &pairs {
            let back: Vec<u32> =
                p.b.iter()
                    .map(|&t| {
                        if t >= base + v {
                            base + inverse[(t - base - v) as usize] as u32
                        } else {
                            t
                        }
                    })
                    .collect();
            assert_eq!(back, p.a);
            assert!(p.alignment.is_none());
        }
    }

    #[test]
    fn generation_is_deterministic_and_distinct() {
        let spec = SyntheticSpec::default();
        let (a, _) = generate_synthetic(&spec, 500).unwrap();
        let (b, _) = generate_synthetic(&spec, 500).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<_> = a.iter().map(|p| p.a.clone()).collect();
        assert_eq!(distinct.len(), 500);
    }

    #[test]
    fn zipf_rank_frequency() {
        let spec = SyntheticSpec {
            vocab_size: 200,
            zipf_exponent: 1.0,
            ..SyntheticSpec::default()
        };
        let (pairs, _) = generate_synthetic(&spec, 10_000).unwrap();
        let mut counts = vec![0usize; 200];
        let mut total = 0;
        for p in &pairs {
            for &t in &p.a[1..p.a.len() - 1] {
                counts[(t - 5) as usize] += 1;
                total += 1;
            }
        }
        let harmonic: f64 = (1..=200).map(|r| 1.0 / r as f64).sum();
        for rank in 1..=20 {
            let expected = total as f64 / (rank as f64 * harmonic);
            let got = counts[rank - 1] as f64;
            assert!(
                got > expected / 2.0 && got < expected * 2.0,
                "rank {rank}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn adjacent_swaps_keep_a_consistent_alignment() {
        let spec = SyntheticSpec {
            reorder: Reorder::AdjacentSwap { probability: 0.5 },
            ..SyntheticSpec::default()
        };
        let (pairs, _) = generate_synthetic(&spec, 200).unwrap();
        let perm = spec.bijection();
        let mut swapped = 0;
        for p in &pairs {
            for pos in 1..p.a.len() - 1 {
                let bpos = p.aligned_position(pos);
                let expect = 5 + 200 + perm[(p.a[pos] - 5) as usize] as u32;
                assert_eq!(p.b[bpos], expect);
                swapped += usize::from(bpos != pos);
            }
        }
        assert!(swapped > 0);
    }

    #[test]
    fn spec_validation() {
        let bad = SyntheticSpec {
            vocab_size: 5,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticSpec {
            min_len: 1,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_is_disjoint() {
        let (pairs, _) = generate_synthetic(&SyntheticSpec::default(), 100).unwrap();
        let s = split_corpus(pairs, 10, 20).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (70, 10, 20));
        let ids: HashSet<u64> = s.train.iter().chain(&s.dev).chain(&s.test).map(|p| p.id).collect();
        assert_eq!(ids.len(), 100);
        assert!(split_corpus(s.train, 50, 50).is_err());
    }

    #[test]
    fn hard_negative_changes_one_content_token() {
        let sp = SpecialTokens::default();
        let sentence: Vec<u32> = std::iter::once(1).chain(10..20).chain([2]).collect();
        let pool: Vec<u32> = (10..40).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hit = HashSet::new();
        for _ in 0..1000 {
            let neg = make_hard_negative(&sentence, &pool, &sp, &mut rng).unwrap();
            let diffs: Vec<usize> = (0..sentence.len()).filter(|&i| neg[i] != sentence[i]).collect();
            assert_eq!(diffs.len(), 1);
            assert!(!sp.is_special(neg[diffs[0]]));
            hit.insert(diffs[0]);
        }
        assert_eq!(hit.len(), 10);
        assert!(matches!(
            make_hard_negative(&[1, 2], &pool, &sp, &mut rng),
            Err(CorpusError::NoContent)
        ));
    }
}
