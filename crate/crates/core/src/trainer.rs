//! Four-view batching, the optimization loop, metrics and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::ParallelPair;
use crate::encoder::{encode, init_params, EncoderConfig, EncoderError, EncoderParams, SpecialTokens, TokenBatch};
use crate::objectives::{
    init_head, mask_tokens, total_loss, GradFlowConfig, LossBreakdown, LossWeights, MaskedView, MaskingPolicy,
    ObjectiveError, UnmaskHeadParams, ViewSet,
};
use crate::tensor::{adamw_step, grad_check, AdamWConfig, AdamWState, Element, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("pair {id}: length {len} exceeds max_len {max}")]
    TooLong { id: u64, len: usize, max: usize },
    #[error("training split has {have} pairs, fewer than one batch of {need}")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("step {step}: non-finite loss (total {}, mlm {}, align {:?}, koleo {:?})",
        .breakdown.total, .breakdown.mlm, .breakdown.align, .breakdown.koleo)]
    NonFinite { step: u64, breakdown: LossBreakdown },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?}, not a checkpoint")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported checkpoint version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything that determines a training run. Serialized as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub head_layers: usize,
    #[serde(flatten)]
    pub masking: MaskingPolicy,
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(flatten)]
    pub flow: GradFlowConfig,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let adam = AdamWConfig::default();
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 3e-4,
            warmup_fraction: 0.1,
            seed: 0,
            num_layers: enc.num_layers,
            num_heads: enc.num_heads,
            model_dim: enc.model_dim,
            ff_dim: enc.ff_dim,
            vocab_size: enc.vocab_size,
            max_len: enc.max_len,
            init_std: enc.init_std,
            head_layers: 2,
            masking: MaskingPolicy::default(),
            weights: LossWeights::default(),
            flow: GradFlowConfig::default(),
            checkpoint_every: 0,
            log_every: 1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction outside [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        self.encoder_config().validate()?;
        self.masking.validate()?;
        self.weights.validate()?;
        self.flow.validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            ff_dim: self.ff_dim,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            specials: SpecialTokens::default(),
            seed: self.seed,
            init_std: self.init_std,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).ceil() as usize
    }

    /// Learning rate at 1-based `step`: linear ramp from zero, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps() as f64;
        if warm == 0.0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / warm).min(1.0)
        }
    }

    /// Parses a JSON object; keys not naming a field are rejected.
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let value: Value = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        let Value::Object(obj) = &value else {
            return Err(TrainError::Config("config must be a JSON object".into()));
        };
        let known = Self::default().to_map();
        if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(TrainError::Config(format!("unknown field `{k}`")));
        }
        serde_json::from_value(value).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_map())).expect("config serializes")
    }

    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        }
    }
}

/// Encoder and unmasking-head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: EncoderParams<Tensor<T>>,
    pub head: UnmaskHeadParams<Tensor<T>>,
}

/// Bound graph handles for a [`Model`].
pub struct ModelVars {
    pub encoder: EncoderParams<Var>,
    pub head: UnmaskHeadParams<Var>,
}

impl ModelVars {
    pub fn leaves(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.leaves().into_iter().copied().collect();
        out.extend(self.head.leaves().into_iter().copied());
        out
    }
}

impl<T: Element> Model<T> {
    pub fn init(config: &TrainConfig) -> Result<Self, TrainError> {
        let enc = config.encoder_config();
        Ok(Self {
            encoder: init_params(&enc)?,
            head: init_head(&enc, config.head_layers, config.seed.wrapping_add(0x5eed))?,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.map(&mut |t| g.param(t.clone())),
            head: self.head.map(&mut |t| g.param(t.clone())),
        }
    }

    /// Parameter names and tensors in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder", &mut |n, t| out.push((n, t)));
        self.head.visit("head", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.encoder.leaves();
        out.extend(self.head.leaves());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.leaves_mut();
        out.extend(self.head.leaves_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            encoder: self.encoder.map(&mut |t| t.cast()),
            head: self.head.map(&mut |t| t.cast()),
        }
    }
}

/// Central-difference check of the full training loss with respect to every
/// parameter tensor, in float64. Returns the worst relative error per tensor.
pub fn composed_grad_check(
    config: &TrainConfig,
    batch: &FourViewBatch,
    eps: f64,
) -> Result<Vec<(String, f64)>, TrainError> {
    let model = Model::<f64>::init(config)?;
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let inputs: Vec<Tensor<f64>> = model.tensors().into_iter().cloned().collect();
    let report = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| -> Result<Var, TrainError> {
            let mut next = v.iter().copied();
            let vars = ModelVars {
                encoder: model.encoder.map(&mut |_| next.next().expect("one var per leaf")),
                head: model.head.map(&mut |_| next.next().expect("one var per leaf")),
            };
            Ok(step_loss(g, config, &vars, batch)?.0)
        },
        &inputs,
        eps,
    )?;
    Ok(names.into_iter().zip(report.max_rel_error).collect())
}

/// Clean and masked views of both sides of a batch of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct FourViewBatch {
    pub ids: Vec<u64>,
    pub clean_a: TokenBatch,
    pub masked_a: TokenBatch,
    pub positions_a: Vec<Vec<usize>>,
    pub targets_a: Vec<Vec<u32>>,
    pub clean_b: TokenBatch,
    pub masked_b: TokenBatch,
    pub positions_b: Vec<Vec<usize>>,
    pub targets_b: Vec<Vec<u32>>,
}

/// Masks every A row, then every B row, drawing from `rng` in that order.
pub fn build_views<R: Rng + ?Sized>(
    pairs: &[&ParallelPair],
    policy: &MaskingPolicy,
    encoder: &EncoderConfig,
    rng: &mut R,
) -> Result<FourViewBatch, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    policy.validate()?;
    for p in pairs {
        let len = p.a.len().max(p.b.len());
        if len > encoder.max_len {
            return Err(TrainError::TooLong {
                id: p.id,
                len,
                max: encoder.max_len,
            });
        }
    }
    let sp = &encoder.specials;
    let mut side = |rows: Vec<&Vec<u32>>| -> Result<_, TrainError> {
        let mut masked = Vec::with_capacity(rows.len());
        let mut positions = Vec::with_capacity(rows.len());
        let mut targets = Vec::with_capacity(rows.len());
        for row in &rows {
            let m = mask_tokens(row, policy, sp, encoder.vocab_size, rng);
            masked.push(m.tokens);
            positions.push(m.positions);
            targets.push(m.targets);
        }
        let clean: Vec<Vec<u32>> = rows.into_iter().cloned().collect();
        Ok((
            TokenBatch::from_rows(&clean, sp.pad)?,
            TokenBatch::from_rows(&masked, sp.pad)?,
            positions,
            targets,
        ))
    };
    let (clean_a, masked_a, positions_a, targets_a) = side(pairs.iter().map(|p| &p.a).collect())?;
    let (clean_b, masked_b, positions_b, targets_b) = side(pairs.iter().map(|p| &p.b).collect())?;
    Ok(FourViewBatch {
        ids: pairs.iter().map(|p| p.id).collect(),
        clean_a,
        masked_a,
        positions_a,
        targets_a,
        clean_b,
        masked_b,
        positions_b,
        targets_b,
    })
}

/// Runs the encoder passes and builds the combined loss.
///
/// Symmetric configs run four passes; the two-view variant runs masked A and
/// clean B only.
pub fn step_loss<T: Element>(
    g: &mut Graph<T>,
    config: &TrainConfig,
    vars: &ModelVars,
    batch: &FourViewBatch,
) -> Result<(Var, LossBreakdown), TrainError> {
    let enc = config.encoder_config();
    let masked_a = encode(g, &enc, &vars.encoder, &batch.masked_a, false)?;
    let clean_b = encode(g, &enc, &vars.encoder, &batch.clean_b, false)?;
    let (clean_a, masked_b) = if config.flow.symmetric {
        (
            Some(encode(g, &enc, &vars.encoder, &batch.clean_a, false)?),
            Some(encode(g, &enc, &vars.encoder, &batch.masked_b, false)?),
        )
    } else {
        (None, None)
    };
    let views = ViewSet {
        clean_a: clean_a.as_ref(),
        masked_a: MaskedView {
            encoded: &masked_a,
            positions: &batch.positions_a,
            targets: &batch.targets_a,
        },
        clean_b: &clean_b,
        masked_b: masked_b.as_ref().map(|m| MaskedView {
            encoded: m,
            positions: &batch.positions_b,
            targets: &batch.targets_b,
        }),
    };
    Ok(total_loss(g, &enc, views, &config.weights, &config.flow, &vars.head)?)
}

/// Loss terms and gradient norm of one accepted step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
}

/// Gradients of the combined loss, in [`Model::tensors`] order.
pub fn loss_and_gradients<T: Element>(
    model: &Model<T>,
    config: &TrainConfig,
    batch: &FourViewBatch,
) -> Result<(LossBreakdown, Vec<Tensor<T>>), TrainError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let (loss, breakdown) = step_loss(&mut g, config, &vars, batch)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    let grads = g.backward(loss)?;
    let out = vars
        .leaves()
        .into_iter()
        .map(|v| grads.get_or_zeros(v, g.shape(v)))
        .collect();
    Ok((breakdown, out))
}

/// One forward/backward pass and AdamW update at learning rate `lr`.
///
/// A non-finite loss or gradient leaves `model` and `optimizer` untouched.
pub fn train_step<T: Element>(
    model: &mut Model<T>,
    batch: &FourViewBatch,
    config: &TrainConfig,
    optimizer: &mut AdamWState<T>,
    lr: f64,
) -> Result<StepReport, TrainError> {
    let (breakdown, grads) = loss_and_gradients(model, config, batch)?;
    let non_finite = |breakdown| TrainError::NonFinite {
        step: optimizer.step + 1,
        breakdown,
    };
    if !breakdown.total.is_finite() {
        return Err(non_finite(breakdown));
    }
    let grad_norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(non_finite(breakdown));
    }
    let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
    adamw_step(&mut model.tensors_mut(), &grad_refs, optimizer, lr)?;
    Ok(StepReport { breakdown, grad_norm })
}

/// One row of the metrics log. Absent terms are written as empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub total: f64,
    pub mlm: f64,
    pub align: Option<f64>,
    pub koleo: Option<f64>,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "step,total,mlm,align,koleo,grad_norm,seconds";

impl MetricsRow {
    pub fn to_csv(&self, with_time: bool) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut line = format!(
            "{},{},{},{},{},{}",
            self.step,
            self.total,
            self.mlm,
            opt(self.align),
            opt(self.koleo),
            self.grad_norm
        );
        if with_time {
            let _ = write!(line, ",{:.3}", self.seconds);
        }
        line
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    /// Steps whose update was skipped for a non-finite loss.
    pub skipped: Vec<u64>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv(true));
            s.push('\n');
        }
        s
    }

    /// Every column except wall time.
    pub fn deterministic_csv(&self) -> String {
        self.rows.iter().map(|r| r.to_csv(false) + "\n").collect()
    }

    pub fn rows_after(&self, step: u64) -> Vec<&MetricsRow> {
        self.rows.iter().filter(|r| r.step > step).collect()
    }
}

/// Training state: configuration, parameters, optimizer and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: AdamWState<f32>,
    /// Completed steps.
    pub step: u64,
}

/// Stream id offset separating epoch shuffles from per-step mask draws.
const SHUFFLE_STREAM: u64 = 1 << 63;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::init(&config)?;
        let shapes: Vec<&[usize]> = model.tensors().into_iter().map(Tensor::shape).collect();
        let optimizer = AdamWState::new(shapes, config.adamw());
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            config: ckpt.config,
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }

    /// Mask rng for 1-based `step`; a function of `(seed, step)` only.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        rng
    }

    /// Indices into the training split for 1-based `step`.
    ///
    /// Each epoch is a fresh seeded permutation; the incomplete tail batch is dropped.
    pub fn batch_indices(&self, step: u64, n_train: usize) -> Vec<usize> {
        let bs = self.config.batch_size;
        let per_epoch = (n_train / bs) as u64;
        let epoch = (step - 1) / per_epoch;
        let within = ((step - 1) % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SHUFFLE_STREAM | epoch);
        order.shuffle(&mut rng);
        order[within * bs..(within + 1) * bs].to_vec()
    }

    /// Trains until `config.steps` steps are complete or `until` is reached.
    ///
    /// `on_checkpoint` is called at every checkpoint cadence boundary and once at the end.
    pub fn run(
        &mut self,
        train: &[ParallelPair],
        until: Option<u64>,
        log: &mut MetricsLog,
        on_checkpoint: &mut dyn FnMut(&Trainer) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let need = self.config.batch_size;
        if train.len() < need {
            return Err(TrainError::CorpusTooSmall {
                have: train.len(),
                need,
            });
        }
        let enc = self.config.encoder_config();
        let last = until.unwrap_or(self.config.steps as u64).min(self.config.steps as u64);
        let started = Instant::now();
        while self.step < last {
            let step = self.step + 1;
            let batch_pairs: Vec<&ParallelPair> = self
                .batch_indices(step, train.len())
                .into_iter()
                .map(|i| &train[i])
                .collect();
            let mut rng = self.step_rng(step);
            let batch = build_views(&batch_pairs, &self.config.masking, &enc, &mut rng)?;
            let lr = self.config.lr_at(step);
            let report = match train_step(&mut self.model, &batch, &self.config, &mut self.optimizer, lr) {
                Ok(r) => r,
                Err(TrainError::NonFinite { breakdown, .. }) => {
                    log.skipped.push(step);
                    StepReport {
                        breakdown,
                        grad_norm: f64::NAN,
                    }
                }
                Err(e) => return Err(e),
            };
            self.step = step;
            if step.is_multiple_of(self.config.log_every as u64) || step == self.config.steps as u64 {
                let b = report.breakdown;
                log.rows.push(MetricsRow {
                    step,
                    total: b.total,
                    mlm: b.mlm,
                    align: b.align,
                    koleo: b.koleo,
                    grad_norm: report.grad_norm,
                    seconds: started.elapsed().as_secs_f64(),
                });
            }
            let every = self.config.checkpoint_every as u64;
            if (every > 0 && step.is_multiple_of(every)) || step == self.config.steps as u64 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch on `train`, returning the final state and its metrics.
pub fn train(train: &[ParallelPair], config: &TrainConfig) -> Result<(Trainer, MetricsLog), TrainError> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = MetricsLog::default();
    trainer.run(train, None, &mut log, &mut |_| Ok(()))?;
    Ok((trainer, log))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: AdamWState<f32>,
    pub step: u64,
}

impl Checkpoint {
    fn config_block(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.config.to_map() {
            let _ = writeln!(text, "{k}={v}");
        }
        let _ = writeln!(text, "state.step={}", self.step);
        let _ = writeln!(text, "state.adam_step={}", self.optimizer.step);
        let _ = writeln!(text, "state.rng=chacha8:{}:{}", self.config.seed, self.step);
        text
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let block = self.config_block();
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        out.extend_from_slice(block.as_bytes());
        let named = self.named_tensors();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let params = self.model.named();
        let mut out: Vec<(String, &Tensor<f32>)> = Vec::with_capacity(params.len() * 3);
        for (name, t) in &params {
            out.push((name.clone(), t));
        }
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("adam.m.{name}"), &self.optimizer.first_moment[i]));
        }
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("adam.v.{name}"), &self.optimizer.second_moment[i]));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Parses checkpoint bytes; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(TrainError::BadMagic {
                path: path.to_path_buf(),
                found: magic.to_vec(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let block_len = r.u32("config block length")? as usize;
        let block = std::str::from_utf8(r.take(block_len, "config block")?)
            .map_err(|_| r.malformed("config block is not UTF-8".into()))?;
        let mut obj = Map::new();
        let mut state = Map::new();
        for line in block.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.malformed(format!("config line `{line}` has no `=`")))?;
            if let Some(key) = k.strip_prefix("state.") {
                state.insert(key.to_string(), Value::String(v.to_string()));
            } else {
                let value: Value =
                    serde_json::from_str(v).map_err(|e| r.malformed(format!("config value for `{k}`: {e}")))?;
                obj.insert(k.to_string(), value);
            }
        }
        let config = TrainConfig::from_json(&Value::Object(obj).to_string()).map_err(|e| r.malformed(e.to_string()))?;
        let state_u64 = |key: &str| -> Result<u64, TrainError> {
            state
                .get(key)
                .and_then(Value::as_str)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| r.malformed(format!("missing or invalid state.{key}")))
        };
        let step = state_u64("step")?;
        let adam_step = state_u64("adam_step")?;

        let mut model = Model::<f32>::init(&config)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32("tensor count")? as usize;
        if count != expected.len() * 3 {
            return Err(r.malformed(format!("expected {} tensors, found {count}", expected.len() * 3)));
        }
        let mut tensors = Vec::with_capacity(count);
        for (prefix, part) in [("", 0), ("adam.m.", 1), ("adam.v.", 2)] {
            for (name, shape) in &expected {
                let want = format!("{prefix}{name}");
                let t = r.tensor(&want, shape)?;
                tensors.push((part, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut params = Vec::new();
        for (part, t) in tensors {
            match part {
                0 => params.push(t),
                1 => first.push(t),
                _ => second.push(t),
            }
        }
        for (slot, t) in model.tensors_mut().into_iter().zip(params) {
            *slot = t;
        }
        let optimizer = AdamWState {
            first_moment: first,
            second_moment: second,
            step: adam_step,
            config: config.adamw(),
        };
        Ok(Self {
            config,
            model,
            optimizer,
            step,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainError::Truncated {
                path: self.path.to_path_buf(),
                what: what.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn malformed(&self, reason: String) -> TrainError {
        TrainError::Malformed {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>, TrainError> {
        let what = format!("tensor {name}");
        let name_len = self.u32(&what)? as usize;
        let found = self.take(name_len, &what)?;
        if found != name.as_bytes() {
            return Err(self.malformed(format!(
                "expected tensor `{name}`, found `{}`",
                String::from_utf8_lossy(found)
            )));
        }
        let rank = self.u32(&what)? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(self.u32(&what)? as usize);
        }
        if extents != shape {
            return Err(self.malformed(format!("tensor `{name}` has shape {extents:?}, expected {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
}
