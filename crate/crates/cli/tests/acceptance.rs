//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Exits 0 after reporting; set `CROSSMASK_ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.
//! Numeric arguments select criteria: `cargo test --test acceptance -- 7 8`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crossmask::corpus::{generate_synthetic, ingest_tsv, target_pool, ParallelPair, SyntheticSpec, Vocab};
use crossmask::encoder::{encode, EncodedBatch, EncoderConfig, EncoderParams};
use crossmask::eval::*;
use crossmask::objectives::{
    alignment_mse, cross_unmask_loss, infonce, koleo, masked_token_cross_entropy, AlignmentFamily, MaskedView,
    KOLEO_DISTANCE_FLOOR,
};
use crossmask::tensor::{primitive_suite, Graph, Tensor, Var, CATALOG};
use crossmask::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const K: usize = 4;
const HARD_NEGATIVES: usize = 2;
const SWEEP_RATIOS: [f64; 8] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const SWEEP_STEPS: usize = 1000;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: usize, name: &'static str, pass: bool, detail: String) {
    eprintln!("[{}] {id}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, name, pass, detail });
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Data {
    dir: PathBuf,
    vocab: Vocab,
    train: Vec<ParallelPair>,
    test: Vec<ParallelPair>,
}

fn cli(args: &[&str]) -> i32 {
    crossmask_cli::run(std::iter::once("crossmask").chain(args.iter().copied()))
}

fn cipher_corpus(root: &Path) -> Data {
    let dir = root.join("data");
    let code = cli(&[
        "--out",
        dir.to_str().unwrap(),
        "gen-data",
        "--pairs",
        "2200",
        "--test",
        "200",
    ]);
    assert_eq!(code, 0, "gen-data failed");
    let vocab = Vocab::load(&dir.join("vocab.txt")).unwrap();
    let max_len = TrainConfig::default().max_len;
    let load = |name: &str| ingest_tsv(&dir.join(name), max_len, Some(&vocab)).unwrap().pairs;
    Data {
        train: load("train.tsv"),
        test: load("test.tsv"),
        vocab,
        dir,
    }
}

fn toy_config(data: &Data, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        vocab_size: data.vocab.len(),
        ..TrainConfig::default()
    }
}

struct Trained {
    xsim: f64,
    xsimpp: f64,
    nn_distance: f64,
    align_first: Option<f64>,
    align_last: Option<f64>,
}

fn evaluate(
    enc: &EncoderConfig,
    params: &EncoderParams<Tensor<f32>>,
    test: &[ParallelPair],
    seed: u64,
) -> (f64, f64, f64) {
    let m = embed_pairs(enc, params, test, Pooling::Cls).unwrap();
    let xsim = xsim_error(&m.src, &m.tgt, &m.gold, K).unwrap().error_rate;
    let pool = target_pool(test, &enc.specials);
    let first_id = test.iter().map(|p| p.id).max().unwrap() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, ids) = hard_negative_rows(test, HARD_NEGATIVES, &pool, &enc.specials, first_id, &mut rng).unwrap();
    let neg = embed_sentences(enc, params, &rows, ids, Pooling::Cls, 64).unwrap();
    let xsimpp = xsimpp_error(&m.src, &m.tgt, &neg, &m.gold, K).unwrap().error_rate;
    (xsim, xsimpp, mean_nn_distance(&m.src).unwrap())
}

fn train_and_eval(data: &Data, cfg: &TrainConfig, label: &str) -> Trained {
    let started = Instant::now();
    let (trainer, log) = train(&data.train, cfg).unwrap();
    let (xsim, xsimpp, nn_distance) = evaluate(&cfg.encoder_config(), &trainer.model.encoder, &data.test, cfg.seed);
    eprintln!(
        "  {label} seed {}: xsim {} xsim++ {} nn {nn_distance:.4} ({:.0}s)",
        cfg.seed,
        pct(xsim),
        pct(xsimpp),
        started.elapsed().as_secs_f64()
    );
    Trained {
        xsim,
        xsimpp,
        nn_distance,
        align_first: log.rows.first().and_then(|r| r.align),
        align_last: log.rows.last().and_then(|r| r.align),
    }
}

fn gradient_correctness(out: &mut Vec<Outcome>, data: &Data) {
    let started = Instant::now();
    let suite = primitive_suite().unwrap();
    let worst_primitive = suite.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let covered = CATALOG.iter().all(|name| suite.iter().any(|e| e.primitive == *name));
    let small = crossmask_cli::grad_check_config(&toy_config(data, 0));
    let spec = SyntheticSpec {
        vocab_size: 10,
        min_len: 3,
        max_len: 6,
        ..SyntheticSpec::default()
    };
    let (pairs, _) = generate_synthetic(&spec, 2).unwrap();
    let refs: Vec<&ParallelPair> = pairs.iter().collect();
    let batch = build_views(
        &refs,
        &small.masking,
        &small.encoder_config(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let composed = composed_grad_check(&small, &batch, 1e-5).unwrap();
    let worst_composed = composed.iter().map(|c| c.1).fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    let pass = covered && worst_primitive < 1e-4 && worst_composed < 1e-4 && secs < 120.0;
    report(
        out,
        1,
        "gradient correctness",
        pass,
        format!(
            "{} primitive cases over {} primitives, worst {worst_primitive:.2e}; composed loss over {} tensors, worst {worst_composed:.2e}; {secs:.1}s",
            suite.len(),
            CATALOG.len(),
            composed.len()
        ),
    );
}

fn encoder_grads(g: &Graph<f64>, model: &Model<f64>, vars: &ModelVars, loss: Var) -> Vec<Tensor<f64>> {
    let grads = g.backward(loss).unwrap();
    model
        .encoder
        .leaves()
        .iter()
        .zip(vars.encoder.leaves())
        .map(|(t, v)| grads.get_or_zeros(*v, t.shape()))
        .collect()
}

fn mlm_grads(cfg: &TrainConfig, model: &Model<f64>, b: &FourViewBatch, token_gradients: bool) -> Vec<Tensor<f64>> {
    let enc = cfg.encoder_config();
    let mut flow = cfg.flow;
    flow.token_gradients = token_gradients;
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let clean_b = encode(&mut g, &enc, &vars.encoder, &b.clean_b, false).unwrap();
    let masked_a = encode(&mut g, &enc, &vars.encoder, &b.masked_a, false).unwrap();
    let view = MaskedView {
        encoded: &masked_a,
        positions: &b.positions_a,
        targets: &b.targets_a,
    };
    let loss = cross_unmask_loss(&mut g, &enc, clean_b.sentence, view, &vars.head, &flow).unwrap();
    encoder_grads(&g, model, &vars, loss)
}

fn substitution_oracle(cfg: &TrainConfig, model: &Model<f64>, b: &FourViewBatch) -> Vec<Tensor<f64>> {
    let enc = cfg.encoder_config();
    let hidden_value = {
        let mut g = Graph::<f64>::new();
        let vars = model.bind(&mut g);
        let m = encode(&mut g, &enc, &vars.encoder, &b.masked_a, false).unwrap();
        g.value(m.hidden).clone()
    };
    let mut flow = cfg.flow;
    flow.token_gradients = true;
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let clean_b = encode(&mut g, &enc, &vars.encoder, &b.clean_b, false).unwrap();
    let hidden = g.constant(hidden_value);
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
    let loss = cross_unmask_loss(&mut g, &enc, clean_b.sentence, view, &vars.head, &flow).unwrap();
    encoder_grads(&g, model, &vars, loss)
}

fn max_abs_diff(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn stop_gradient_fidelity(out: &mut Vec<Outcome>, data: &Data) {
    let started = Instant::now();
    let cfg = toy_config(data, 0);
    let model = Model::<f64>::init(&cfg).unwrap();
    let refs: Vec<&ParallelPair> = data.train.iter().take(8).collect();
    let b = build_views(
        &refs,
        &cfg.masking,
        &cfg.encoder_config(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let oracle = substitution_oracle(&cfg, &model, &b);
    let off = max_abs_diff(&mlm_grads(&cfg, &model, &b, false), &oracle);
    let on = max_abs_diff(&mlm_grads(&cfg, &model, &b, true), &oracle);
    let secs = started.elapsed().as_secs_f64();
    report(
        out,
        2,
        "stop-gradient fidelity",
        off <= 1e-9 && on > 0.0 && secs < 60.0,
        format!("token grads off vs oracle max |diff| {off:.2e}; on vs oracle {on:.2e}; {secs:.1}s"),
    );
}

struct Runs {
    on: Vec<Trained>,
    off: Vec<Trained>,
    no_koleo: Vec<Trained>,
    infonce: Trained,
    untrained_xsim: f64,
}

fn training_runs(data: &Data) -> Runs {
    let base = toy_config(data, 0);
    let untrained = Model::<f32>::init(&base).unwrap();
    let untrained_xsim = evaluate(&base.encoder_config(), &untrained.encoder, &data.test, 0).0;
    eprintln!("  untrained: xsim {}", pct(untrained_xsim));
    let with = |seed: u64, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = toy_config(data, seed);
        f(&mut cfg);
        cfg
    };
    let on = SEEDS
        .iter()
        .map(|&s| train_and_eval(data, &with(s, &|_| ()), "full"))
        .collect();
    let off = SEEDS
        .iter()
        .map(|&s| train_and_eval(data, &with(s, &|c| c.flow.token_gradients = false), "no token grads"))
        .collect();
    let no_koleo = SEEDS
        .iter()
        .map(|&s| train_and_eval(data, &with(s, &|c| c.weights.gamma = 0.0), "gamma 0"))
        .collect();
    let infonce = train_and_eval(
        data,
        &with(0, &|c| c.flow.alignment_family = AlignmentFamily::Infonce),
        "infonce",
    );
    Runs {
        on,
        off,
        no_koleo,
        infonce,
        untrained_xsim,
    }
}

fn end_to_end(out: &mut Vec<Outcome>, runs: &Runs) {
    let r = &runs.on[0];
    let chance = 1.0 - 1.0 / 200.0;
    let (first, last) = (r.align_first.unwrap_or(f64::NAN), r.align_last.unwrap_or(f64::NAN));
    let converged = last < 0.1 * first;
    let monotone = runs.on.iter().all(|t| t.xsimpp >= t.xsim);
    report(
        out,
        3,
        "toy end-to-end alignment",
        r.xsim < 0.05 && r.xsim < runs.untrained_xsim && r.xsim < chance,
        format!(
            "seed 0 xsim {} (untrained {}, chance {}); align term {first:.4} -> {last:.4} ({}); xsim++ >= xsim on trained runs: {monotone}",
            pct(r.xsim),
            pct(runs.untrained_xsim),
            pct(chance),
            if converged { "below 10% of step 1" } else { "NOT below 10% of step 1" }
        ),
    );
}

fn token_gradient_direction(out: &mut Vec<Outcome>, runs: &Runs) {
    let on: Vec<f64> = runs.on.iter().map(|t| t.xsimpp).collect();
    let off: Vec<f64> = runs.off.iter().map(|t| t.xsimpp).collect();
    let (m_on, m_off) = (mean(&on), mean(&off));
    report(
        out,
        4,
        "token-gradient ablation direction",
        m_on <= m_off,
        format!(
            "mean xsim++ on {} vs off {} (per seed on {:?}, off {:?})",
            pct(m_on),
            pct(m_off),
            on.iter().map(|x| pct(*x)).collect::<Vec<_>>(),
            off.iter().map(|x| pct(*x)).collect::<Vec<_>>()
        ),
    );
}

fn masking_sweep(out: &mut Vec<Outcome>, data: &Data, root: &Path) {
    let config = root.join("sweep.json");
    std::fs::write(&config, toy_config(data, 0).to_json()).unwrap();
    let sweep = root.join("sweep");
    let ratios = SWEEP_RATIOS.map(|r| r.to_string()).join(",");
    let code = cli(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        sweep.to_str().unwrap(),
        "ablate",
        "--train",
        data.dir.join("train.tsv").to_str().unwrap(),
        "--eval",
        data.dir.join("test.tsv").to_str().unwrap(),
        "--vocab",
        data.dir.join("vocab.txt").to_str().unwrap(),
        "--ratio-grid",
        &ratios,
        "--seeds",
        "0,1,2",
        "--steps",
        &SWEEP_STEPS.to_string(),
        "--hard-negatives",
        &HARD_NEGATIVES.to_string(),
    ]);
    if code != 0 {
        report(
            out,
            5,
            "masking-ratio sweep shape",
            false,
            format!("ablate exited {code}"),
        );
        return;
    }
    let table = std::fs::read_to_string(sweep.join("ablation.csv")).unwrap();
    let cells: Vec<(f64, f64)> = table
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[2].parse().unwrap(), f[6].parse().unwrap())
        })
        .collect();
    let pick = |lo: f64, hi: f64| -> Vec<f64> {
        cells
            .iter()
            .filter(|c| c.0 >= lo - 1e-9 && c.0 <= hi + 1e-9)
            .map(|c| c.1)
            .collect()
    };
    let worst_high = pick(0.8, 0.9).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let best_mid = pick(0.3, 0.6).into_iter().fold(f64::INFINITY, f64::min);
    report(
        out,
        5,
        "masking-ratio sweep shape",
        cells.len() == SWEEP_RATIOS.len() && worst_high >= best_mid,
        format!(
            "{} cells, {SWEEP_STEPS} steps x 3 seeds; mean xsim++ by ratio [{}]; worst of 0.8/0.9 {} vs best of 0.3-0.6 {}",
            cells.len(),
            cells.iter().map(|c| format!("{}:{}", c.0, pct(c.1))).collect::<Vec<_>>().join(" "),
            pct(worst_high),
            pct(best_mid)
        ),
    );
}

fn brute_koleo(rows: &[Vec<f64>]) -> f64 {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let n = unit.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i != j {
                let d: f64 = unit[i]
                    .iter()
                    .zip(&unit[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        total += best.max(KOLEO_DISTANCE_FLOOR).ln();
    }
    -total / n as f64
}

fn library_koleo(rows: &[Vec<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let t = Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap();
    let s = g.constant(t);
    let k = koleo(&mut g, s).unwrap();
    g.value(k).item().unwrap()
}

fn koleo_spreading(out: &mut Vec<Outcome>, runs: &Runs) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let n = rng.gen_range(2..=64);
        let d = rng.gen_range(1..=8);
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        if trial % 4 == 0 {
            rows[n - 1] = rows[0].clone();
        }
        worst = worst.max((library_koleo(&rows) - brute_koleo(&rows)).abs());
    }
    let with: Vec<f64> = runs.on.iter().map(|t| t.nn_distance).collect();
    let without: Vec<f64> = runs.no_koleo.iter().map(|t| t.nn_distance).collect();
    let (mw, mo) = (mean(&with), mean(&without));
    report(
        out,
        6,
        "koleo spreading effect",
        mw > mo && worst <= 1e-9,
        format!("mean NN distance gamma 0.005 {mw:.4} vs gamma 0 {mo:.4} (per seed {with:.4?} vs {without:.4?}); koleo vs brute force max |diff| {worst:.2e} over 200 sets"),
    );
}

mod oracle {
    use std::cmp::Ordering;

    fn unit(v: &[f32]) -> Vec<f64> {
        let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        v.iter().map(|&x| x as f64 / n).collect()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Mean of the k largest similarities, summed largest first.
    fn knn(x: &[f64], cands: &[Vec<f64>], k: usize) -> f64 {
        let mut s: Vec<f64> = cands.iter().map(|c| cos(x, c)).collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
        s[..k].iter().sum::<f64>() / k as f64
    }

    pub fn margin(x: &[f32], y: &[f32], xs: &[Vec<f32>], ys: &[Vec<f32>], k: usize) -> f64 {
        let (x, y) = (unit(x), unit(y));
        let xs: Vec<Vec<f64>> = xs.iter().map(|v| unit(v)).collect();
        let ys: Vec<Vec<f64>> = ys.iter().map(|v| unit(v)).collect();
        cos(&x, &y) / ((knn(&x, &ys, k) + knn(&y, &xs, k)) / 2.0)
    }

    /// Error count: source i is wrong unless target i is the first maximal margin.
    /// NaN margins never win; an all-NaN row predicts target 0.
    pub fn xsim(src: &[Vec<f32>], tgt: &[Vec<f32>], k: usize) -> usize {
        (0..src.len())
            .filter(|&i| {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..tgt.len() {
                    let m = margin(&src[i], &tgt[j], src, tgt, k);
                    if !m.is_nan() && best.is_none_or(|b| m > b.0) {
                        best = Some((m, j));
                    }
                }
                best.map_or(0, |b| b.1) != i
            })
            .count()
    }
}

fn set(rows: &[Vec<f32>]) -> EmbeddingSet {
    EmbeddingSet::new(rows[0].len(), rows.concat(), (0..rows.len() as u64).collect()).unwrap()
}

fn mining_oracle(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut trials, mut mismatches, mut scale_breaks) = (0, 0, 0);
    for _ in 0..300 {
        let n = rng.gen_range(2..=32);
        let d = rng.gen_range(1..=4);
        let k = rng.gen_range(1..n.min(6));
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| loop {
                    let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-2..=2) as f32).collect();
                    if v.iter().any(|&x| x != 0.0) {
                        break v;
                    }
                })
                .collect()
        };
        let (src, tgt) = (draw(&mut rng), draw(&mut rng));
        let (s, t) = (set(&src), set(&tgt));
        let gold: HashMap<u64, u64> = (0..n as u64).map(|i| (i, i)).collect();
        let lib = xsim_error(&s, &t, &gold, k).unwrap();
        trials += 1;
        if lib.errors() != oracle::xsim(&src, &tgt, k) {
            mismatches += 1;
        }
        for i in 0..n {
            let j = rng.gen_range(0..n);
            let lib = margin_score(&src[i], &tgt[j], &s, &t, k).unwrap();
            let exact = oracle::margin(&src[i], &tgt[j], &src, &tgt, k);
            if lib != exact && !(lib.is_nan() && exact.is_nan()) {
                mismatches += 1;
            }
        }
        let c = [0.5f32, 4.0, 1024.0][trials % 3];
        let scaled = xsim_error(&s.scaled(c), &t.scaled(c), &gold, k).unwrap();
        let preds = |r: &MiningReport| r.queries.iter().map(|q| q.predicted_id).collect::<Vec<_>>();
        if preds(&scaled) != preds(&lib) {
            scale_breaks += 1;
        }
    }
    report(
        out,
        7,
        "mining oracle equivalence",
        mismatches == 0 && scale_breaks == 0,
        format!("{trials} tie-prone sets (n <= 32): {mismatches} mismatches vs exhaustive oracle, {scale_breaks} prediction changes under positive scaling"),
    );
}

fn analytic_identities(out: &mut Vec<Outcome>) {
    let v = 37;
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[3, v]));
    let ce = masked_token_cross_entropy(&mut g, logits, &[0, 5, 36]).unwrap();
    let ce = g.value(ce).item().unwrap();
    let a = g.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.25, -4.0]).unwrap());
    let mse = alignment_mse(&mut g, a, a).unwrap();
    let mse = g.value(mse).item().unwrap();
    let pair = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 3f64.sqrt() / 2.0]).unwrap());
    let ko = koleo(&mut g, pair).unwrap();
    let ko = g.value(ko).item().unwrap();
    let l = 11;
    let h = entropy(&vec![1.0 / l as f64; l]);
    let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let nce = infonce(&mut g, eye, eye, 1.0).unwrap();
    let nce = g.value(nce).item().unwrap();
    let e = std::f64::consts::E;
    let expect_nce = -(e / (e + 1.0)).ln();
    let checks = [
        (ce - (v as f64).ln()).abs() <= 1e-6,
        mse == 0.0,
        ko.abs() <= 1e-12,
        (h - (l as f64).ln()).abs() <= 1e-9,
        (nce - expect_nce).abs() <= 1e-6,
    ];
    report(
        out,
        8,
        "analytic loss identities",
        checks.iter().all(|&c| c),
        format!(
            "uniform CE {ce:.9} vs ln {v} {:.9}; MSE(a,a) {mse:e}; unit-distance koleo {ko:.1e}; uniform entropy {h:.12} vs ln {l}; InfoNCE {nce:.9} vs {expect_nce:.9}",
            (v as f64).ln()
        ),
    );
}

fn contrastive_variant(out: &mut Vec<Outcome>, runs: &Runs) {
    let r = &runs.infonce;
    report(
        out,
        9,
        "contrastive variant",
        r.xsim < 0.10,
        format!("infonce seed 0 xsim {} (xsim++ {})", pct(r.xsim), pct(r.xsimpp)),
    );
}

fn determinism(out: &mut Vec<Outcome>, data: &Data, root: &Path) {
    let cfg = TrainConfig {
        steps: 40,
        ..toy_config(data, 3)
    };
    let (full, log1) = train(&data.train, &cfg).unwrap();
    let (_, log2) = train(&data.train, &cfg).unwrap();
    let identical = log1.deterministic_csv() == log2.deterministic_csv();

    let path = root.join("mid.mxc");
    let mut first = Trainer::new(cfg.clone()).unwrap();
    first
        .run(&data.train, Some(17), &mut MetricsLog::default(), &mut |_| Ok(()))
        .unwrap();
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap());
    let mut tail = MetricsLog::default();
    resumed.run(&data.train, None, &mut tail, &mut |_| Ok(())).unwrap();
    let expect: Vec<String> = log1.rows_after(17).iter().map(|r| r.to_csv(false)).collect();
    let got: Vec<String> = tail.rows.iter().map(|r| r.to_csv(false)).collect();
    let resumes = expect == got && resumed.checkpoint().to_bytes() == full.checkpoint().to_bytes();
    report(
        out,
        10,
        "determinism and persistence",
        identical && resumes,
        format!(
            "two {}-step runs identical metrics: {identical}; resume at step 17 reproduces {} metric rows and final state: {resumes}",
            cfg.steps,
            expect.len()
        ),
    );
}

fn main() {
    crossmask::tune_allocator();
    let started = Instant::now();
    let root = tempfile::TempDir::new().unwrap();
    let data = cipher_corpus(root.path());
    eprintln!(
        "corpus: {} train, {} test, vocabulary {}",
        data.train.len(),
        data.test.len(),
        data.vocab.len()
    );
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut out = Vec::new();
    if want(1) {
        gradient_correctness(&mut out, &data);
    }
    if want(2) {
        stop_gradient_fidelity(&mut out, &data);
    }
    if want(7) {
        mining_oracle(&mut out);
    }
    if want(8) {
        analytic_identities(&mut out);
    }
    if want(10) {
        determinism(&mut out, &data, root.path());
    }
    if [3, 4, 6, 9].into_iter().any(want) {
        let runs = training_runs(&data);
        end_to_end(&mut out, &runs);
        token_gradient_direction(&mut out, &runs);
        koleo_spreading(&mut out, &runs);
        contrastive_variant(&mut out, &runs);
    }
    if want(5) {
        masking_sweep(&mut out, &data, root.path());
    }

    out.sort_by_key(|o| o.id);
    println!();
    for o in &out {
        println!(
            "[{}] {:>2}. {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
    }
    let passed = out.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria pass ({:.0}s)",
        out.len(),
        started.elapsed().as_secs_f64()
    );
    let strict = std::env::var("CROSSMASK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < out.len() {
        std::process::exit(1);
    }
}
