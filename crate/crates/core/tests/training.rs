use std::path::Path;

use crossmask::corpus::{generate_synthetic, ParallelPair, SyntheticSpec};
use crossmask::encoder::{encode, EncodedBatch};
use crossmask::objectives::{cross_unmask_loss, AlignmentMode, GradFlowConfig, LossWeights, MaskedView};
use crossmask::tensor::{Graph, Tensor};
use crossmask::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 20,
        min_len: 3,
        max_len: 6,
        ..SyntheticSpec::default()
    }
}

fn tiny() -> TrainConfig {
    TrainConfig {
        steps: 6,
        batch_size: 4,
        num_layers: 1,
        num_heads: 2,
        model_dim: 16,
        ff_dim: 32,
        vocab_size: spec().total_vocab(),
        max_len: 8,
        head_layers: 1,
        ..TrainConfig::default()
    }
}

fn pairs(n: usize) -> Vec<ParallelPair> {
    generate_synthetic(&spec(), n).unwrap().0
}

fn batch(cfg: &TrainConfig, pairs: &[ParallelPair], seed: u64) -> FourViewBatch {
    let refs: Vec<&ParallelPair> = pairs.iter().collect();
    build_views(
        &refs,
        &cfg.masking,
        &cfg.encoder_config(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn bits(model: &Model<f32>) -> Vec<u32> {
    model
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn repeated_batch_is_overfit() {
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        ..tiny()
    };
    let b = batch(&cfg, &pairs(4), 5);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut totals = Vec::new();
    for _ in 0..50 {
        let r = train_step(&mut trainer.model, &b, &cfg, &mut trainer.optimizer, cfg.learning_rate).unwrap();
        totals.push(r.breakdown.total);
    }
    assert!(totals[49] < totals[0], "{totals:?}");
}

fn swapped(b: &FourViewBatch) -> FourViewBatch {
    FourViewBatch {
        ids: b.ids.clone(),
        clean_a: b.clean_b.clone(),
        masked_a: b.masked_b.clone(),
        positions_a: b.positions_b.clone(),
        targets_a: b.targets_b.clone(),
        clean_b: b.clean_a.clone(),
        masked_b: b.masked_a.clone(),
        positions_b: b.positions_a.clone(),
        targets_b: b.targets_a.clone(),
    }
}

fn loss_f64(cfg: &TrainConfig, model: &Model<f64>, b: &FourViewBatch) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    step_loss(&mut g, cfg, &vars, b).unwrap().1.total
}

#[test]
fn symmetric_loss_is_the_sum_of_both_directions() {
    let weights = LossWeights {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
    };
    let sym = TrainConfig { weights, ..tiny() };
    let mut one_way = sym.clone();
    one_way.flow.symmetric = false;
    one_way.flow.alignment_mode = AlignmentMode::None;
    one_way.flow.koleo = false;
    let model = Model::<f64>::init(&sym).unwrap();
    let b = batch(&sym, &pairs(6), 2);
    let total = loss_f64(&sym, &model, &b);
    let forward = loss_f64(&one_way, &model, &b);
    let backward = loss_f64(&one_way, &model, &swapped(&b));
    assert!(
        (total - (forward + backward)).abs() < 1e-6,
        "{total} vs {forward} + {backward}"
    );
}

/// Gradients of the A-from-B unmasking loss w.r.t. the encoder parameters.
fn mlm_encoder_grads(cfg: &TrainConfig, model: &Model<f64>, b: &FourViewBatch, frozen: bool) -> Vec<Tensor<f64>> {
    let enc = cfg.encoder_config();
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let clean_b = encode(&mut g, &enc, &vars.encoder, &b.clean_b, false).unwrap();
    let masked_a = encode(&mut g, &enc, &vars.encoder, &b.masked_a, false).unwrap();
    let view = MaskedView {
        encoded: &masked_a,
        positions: &b.positions_a,
        targets: &b.targets_a,
    };
    let loss = cross_unmask_loss(&mut g, &enc, clean_b.sentence, view, &vars.head, &cfg_flow(cfg, frozen)).unwrap();
    let grads = g.backward(loss).unwrap();
    model
        .encoder
        .leaves()
        .iter()
        .zip(vars.encoder.leaves())
        .map(|(t, v)| grads.get_or_zeros(*v, t.shape()))
        .collect()
}

fn cfg_flow(cfg: &TrainConfig, frozen: bool) -> GradFlowConfig {
    let mut flow = cfg.flow;
    flow.token_gradients = !frozen;
    flow
}

/// Same loss, with the masked encoder's states substituted by constants of equal value.
fn substituted_grads(cfg: &TrainConfig, model: &Model<f64>, b: &FourViewBatch) -> Vec<Tensor<f64>> {
    let enc = cfg.encoder_config();
    let frozen_hidden = {
        let mut g = Graph::<f64>::new();
        let vars = model.bind(&mut g);
        let m = encode(&mut g, &enc, &vars.encoder, &b.masked_a, false).unwrap();
        g.value(m.hidden).clone()
    };
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let clean_b = encode(&mut g, &enc, &vars.encoder, &b.clean_b, false).unwrap();
    let hidden = g.constant(frozen_hidden);
    let constant = EncodedBatch {
        hidden,
        sentence: hidden,
        attention: Vec::new(),
        lengths: b.masked_a.lengths.clone(),
        seq_len: b.masked_a.seq_len,
    };
    let view = MaskedView {
        encoded: &constant,
        positions: &b.positions_a,
        targets: &b.targets_a,
    };
    let loss = cross_unmask_loss(&mut g, &enc, clean_b.sentence, view, &vars.head, &cfg_flow(cfg, false)).unwrap();
    let grads = g.backward(loss).unwrap();
    model
        .encoder
        .leaves()
        .iter()
        .zip(vars.encoder.leaves())
        .map(|(t, v)| grads.get_or_zeros(*v, t.shape()))
        .collect()
}

fn max_abs_diff(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn frozen_token_states_match_constant_substitution() {
    let cfg = TrainConfig {
        init_std: 0.3,
        ..tiny()
    };
    let model = Model::<f64>::init(&cfg).unwrap();
    let b = batch(&cfg, &pairs(4), 9);
    let oracle = substituted_grads(&cfg, &model, &b);
    let frozen = mlm_encoder_grads(&cfg, &model, &b, true);
    assert!(max_abs_diff(&frozen, &oracle) <= 1e-9);
    let flowing = mlm_encoder_grads(&cfg, &model, &b, false);
    assert!(max_abs_diff(&flowing, &oracle) > 1e-6);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let cfg = tiny();
    let data = pairs(12);
    let (t1, log1) = train(&data, &cfg).unwrap();
    let (t2, log2) = train(&data, &cfg).unwrap();
    assert_eq!(log1.deterministic_csv(), log2.deterministic_csv());
    assert_eq!(bits(&t1.model), bits(&t2.model));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny();
    let data = pairs(12);
    let (full, full_log) = train(&data, &cfg).unwrap();

    let mut first = Trainer::new(cfg).unwrap();
    let mut log = MetricsLog::default();
    first.run(&data, Some(3), &mut log, &mut |_| Ok(())).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes, Path::new("mid")).unwrap());
    assert_eq!(resumed.step, 3);
    let mut tail = MetricsLog::default();
    resumed.run(&data, None, &mut tail, &mut |_| Ok(())).unwrap();

    assert_eq!(bits(&resumed.model), bits(&full.model));
    let expect: Vec<String> = full_log.rows_after(3).iter().map(|r| r.to_csv(false)).collect();
    let got: Vec<String> = tail.rows.iter().map(|r| r.to_csv(false)).collect();
    assert_eq!(got, expect);
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn checkpoint_file_roundtrip_is_byte_identical() {
    let dir = tempfile::TempDir::new().unwrap();
    let (trainer, _) = train(&pairs(12), &tiny()).unwrap();
    let p1 = dir.path().join("a.mxc");
    let p2 = dir.path().join("b.mxc");
    trainer.checkpoint().save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let bad = dir.path().join("bad.mxc");
    std::fs::write(&bad, b"NOPE and then some bytes").unwrap();
    let err = Checkpoint::load(&bad).unwrap_err();
    assert!(err.to_string().contains("bad.mxc"), "{err}");
}
