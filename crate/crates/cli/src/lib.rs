//! Command-line front end: data generation, training, ablation sweeps,
//! evaluation and analyses.
//!
//! Exit codes: 0 on success, 1 on usage errors (nothing is written), 2 on
//! runtime failures.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossmask::corpus::{
    generate_synthetic, ingest_tsv, split_corpus, target_pool, ParallelPair, Reorder, SyntheticSpec, Vocab,
};
use crossmask::encoder::{EncoderConfig, EncoderParams};
use crossmask::eval::{
    attention_entropy, embed_pairs, embed_sentences, export_embeddings, hard_negative_rows, load_embeddings,
    mean_nn_distance, token_nn_analysis, xsim_error, xsimpp_error, EmbeddingSet, MiningReport, Pooling,
};
use crossmask::objectives::{AlignmentFamily, AlignmentMode};
use crossmask::tensor::{primitive_suite, Tensor};
use crossmask::trainer::{build_views, composed_grad_check, train, Checkpoint, MetricsLog, TrainConfig, Trainer};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Relative-error threshold for `grad-check`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn usage(m: impl std::fmt::Display) -> CliError {
    CliError::Usage(m.to_string())
}

fn runtime(m: impl std::fmt::Display) -> CliError {
    CliError::Runtime(m.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "crossmask",
    version,
    about = "Cross-lingual sentence encoder training and evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Training configuration: a flat JSON object; omitted keys keep defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config file (corpus seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelInput {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Parallel TSV to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary the checkpoint was trained with.
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Cls,
    Mean,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Cls => Pooling::Cls,
            PoolingArg::Mean => Pooling::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Side {
    A,
    B,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a cipher-language corpus: TSV splits, vocabulary and a spec sidecar.
    GenData {
        /// Total number of pairs before splitting.
        #[arg(long, default_value_t = 2200)]
        pairs: usize,
        /// JSON corpus spec; omitted keys keep defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        dev: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    /// Train an encoder; writes checkpoint.mxc, metrics.csv, config.json and vocab.txt.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Fixed vocabulary; built from the data when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint; its config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Margin-based mining error (xsim), optionally with hard negatives (xsim++).
    EvalMining {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// EMB1 source embeddings, instead of a checkpoint.
        #[arg(long)]
        src_emb: Option<PathBuf>,
        #[arg(long)]
        tgt_emb: Option<PathBuf>,
        /// EMB1 hard-negative embeddings to add to the target pool.
        #[arg(long)]
        neg_emb: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, value_enum, default_value = "cls")]
        pooling: PoolingArg,
        /// Perturbed copies per target added to the pool (checkpoint input only).
        #[arg(long, default_value_t = 0)]
        hard_negatives: usize,
    },
    /// Nearest-neighbour categories of token representations.
    AnalyzeTokens {
        #[command(flatten)]
        model: ModelInput,
        /// Query sentences, taken from the start of the data.
        #[arg(long, default_value_t = 250)]
        sentences: usize,
        #[arg(long, default_value_t = 3)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        neighbors: usize,
    },
    /// Entropy of the last layer's CLS attention.
    AnalyzeAttention {
        #[command(flatten)]
        model: ModelInput,
        #[arg(long, value_enum, default_value = "a")]
        side: Side,
        /// Drop CLS and EOS columns and renormalize.
        #[arg(long)]
        exclude_specials: bool,
    },
    /// Train and evaluate every cell of a variant × masking-ratio grid.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Comma-separated masking ratios; defaults to the config's ratio.
        #[arg(long, value_delimiter = ',')]
        ratio_grid: Vec<f64>,
        /// Comma-separated variants: full, no-token-grad, clean-to-dirty,
        /// non-symmetric, no-alignment, no-mlm, no-koleo, infonce.
        #[arg(long, value_delimiter = ',', default_value = "full")]
        variants: Vec<String>,
        /// Comma-separated seeds; defaults to --seed or the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        hard_negatives: usize,
    },
    /// Finite-difference checks of every primitive and the composed loss.
    GradCheck,
    /// Write EMB1 sentence embeddings for both sides of a TSV.
    ExportEmb {
        #[command(flatten)]
        model: ModelInput,
        #[arg(long, value_enum, default_value = "cls")]
        pooling: PoolingArg,
    },
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData { pairs, spec, dev, test } => gen_data(g, pairs, spec.as_deref(), dev, test),
        Command::Train {
            data,
            vocab,
            steps,
            resume,
        } => train_cmd(g, &data, vocab.as_deref(), steps, resume.as_deref()),
        Command::EvalMining {
            checkpoint,
            data,
            vocab,
            src_emb,
            tgt_emb,
            neg_emb,
            k,
            pooling,
            hard_negatives,
        } => {
            let input = match (checkpoint, data, vocab, src_emb, tgt_emb) {
                (Some(c), Some(d), Some(v), None, None) => MiningInput::Model(ModelInput {
                    checkpoint: c,
                    data: d,
                    vocab: v,
                }),
                (None, None, None, Some(s), Some(t)) => MiningInput::Files(s, t),
                _ => {
                    return Err(usage(
                        "give either --checkpoint, --data and --vocab, or --src-emb and --tgt-emb",
                    ))
                }
            };
            eval_mining(g, input, neg_emb.as_deref(), k, pooling.into(), hard_negatives)
        }
        Command::AnalyzeTokens {
            model,
            sentences,
            queries,
            neighbors,
        } => analyze_tokens(g, &model, sentences, queries, neighbors),
        Command::AnalyzeAttention {
            model,
            side,
            exclude_specials,
        } => analyze_attention(g, &model, side, exclude_specials),
        Command::Ablate {
            train,
            eval,
            vocab,
            ratio_grid,
            variants,
            seeds,
            steps,
            k,
            hard_negatives,
        } => ablate(
            g,
            &AblateArgs {
                train,
                eval,
                vocab,
                ratio_grid,
                variants,
                seeds,
                steps,
                k,
                hard_negatives,
            },
        ),
        Command::GradCheck => grad_check_cmd(g),
        Command::ExportEmb { model, pooling } => export_emb(g, &model, pooling.into()),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    match fs::metadata(path) {
        Ok(m) if m.is_file() => Ok(()),
        Ok(_) => Err(usage(format!("{what} {} is not a file", path.display()))),
        Err(e) => Err(usage(format!("cannot read {what} {}: {e}", path.display()))),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    require_file(path, what)?;
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Config from `--config` (or defaults) with `--seed` applied, plus whether
/// the file set `vocab_size` explicitly.
fn load_config(g: &Global) -> Result<(TrainConfig, bool)> {
    let (mut cfg, explicit_vocab) = match &g.config {
        Some(path) => {
            let text = read_text(path, "config")?;
            let explicit = serde_json::from_str::<Value>(&text)
                .ok()
                .is_some_and(|v| v.get("vocab_size").is_some());
            let cfg = TrainConfig::from_json(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            (cfg, explicit)
        }
        None => (TrainConfig::default(), false),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok((cfg, explicit_vocab))
}

fn validate(cfg: &TrainConfig) -> Result<()> {
    cfg.validate().map_err(usage)
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    require_file(path, "vocabulary")?;
    Vocab::load(path).map_err(|e| usage(format!("vocabulary {}: {e}", path.display())))
}

/// Alignment sidecar written by `gen-data` for reordered corpora.
fn align_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".align");
    PathBuf::from(s)
}

fn load_pairs(data: &Path, vocab: Option<&Vocab>, max_len: usize) -> Result<(Vec<ParallelPair>, Vocab)> {
    require_file(data, "data")?;
    let report = ingest_tsv(data, max_len, vocab).map_err(|e| usage(format!("data {}: {e}", data.display())))?;
    if report.skipped() > 0 {
        eprintln!(
            "{}: skipped {} over-length and {} malformed lines",
            data.display(),
            report.skipped_overlength.len(),
            report.malformed.len()
        );
    }
    let mut pairs = report.pairs;
    let side = align_path(data);
    if side.is_file() {
        let text = read_text(&side, "alignment")?;
        let lines: Vec<&str> = text.lines().collect();
        for p in &mut pairs {
            let line = lines
                .get(p.id as usize)
                .ok_or_else(|| usage(format!("{} has no line for pair {}", side.display(), p.id)))?;
            let al = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| usage(format!("{} line {}: {e}", side.display(), p.id + 1)))?;
            if al.len() != p.a.len() || al.iter().any(|&j| j >= p.b.len()) {
                return Err(usage(format!(
                    "{} line {}: alignment does not fit the pair",
                    side.display(),
                    p.id + 1
                )));
            }
            p.alignment = Some(al);
        }
    }
    if pairs.is_empty() {
        return Err(usage(format!("data {} contains no usable pairs", data.display())));
    }
    Ok((pairs, report.vocab))
}

fn write_alignments(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        let al: Vec<String> = (0..p.a.len()).map(|i| p.aligned_position(i).to_string()).collect();
        s.push_str(&al.join(" "));
        s.push('\n');
    }
    write_out(path, &s)
}

fn gen_data(g: &Global, n: usize, spec_path: Option<&Path>, dev: usize, test: usize) -> Result<()> {
    let mut spec: SyntheticSpec = match spec_path {
        Some(p) => serde_json::from_str(&read_text(p, "corpus spec")?)
            .map_err(|e| usage(format!("corpus spec {}: {e}", p.display())))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = g.seed {
        spec.corpus_seed = s;
    }
    spec.validate().map_err(usage)?;
    if n == 0 {
        return Err(usage("--pairs must be positive"));
    }
    if dev + test > n {
        return Err(usage(format!("--dev {dev} plus --test {test} exceeds --pairs {n}")));
    }
    let (pairs, vocab) = generate_synthetic(&spec, n).map_err(runtime)?;
    let split = split_corpus(pairs, dev, test).map_err(runtime)?;
    create_out(&g.out)?;
    let reordered = spec.reorder != Reorder::None;
    for (name, part) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        if part.is_empty() {
            continue;
        }
        let path = g.out.join(format!("{name}.tsv"));
        crossmask::corpus::write_tsv(&path, part, &vocab).map_err(runtime)?;
        if reordered {
            write_alignments(&align_path(&path), part)?;
        }
    }
    vocab.save(&g.out.join("vocab.txt")).map_err(runtime)?;
    let sidecar = json!({
        "spec": spec,
        "pairs": n,
        "train": split.train.len(),
        "dev": split.dev.len(),
        "test": split.test.len(),
        "vocab_size": vocab.len(),
    });
    write_out(
        &g.out.join("corpus.json"),
        &serde_json::to_string_pretty(&sidecar).expect("json"),
    )?;
    println!(
        "wrote {} train, {} dev, {} test pairs; vocabulary of {} tokens",
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        vocab.len()
    );
    Ok(())
}

fn train_cmd(g: &Global, data: &Path, vocab: Option<&Path>, steps: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let fixed = vocab.map(load_vocab).transpose()?;
    let (mut trainer, vocab) = match resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let ckpt = Checkpoint::load(path).map_err(runtime)?;
            let mut trainer = Trainer::from_checkpoint(ckpt);
            if let Some(s) = steps {
                trainer.config.steps = s;
            }
            validate(&trainer.config)?;
            let fixed = fixed.ok_or_else(|| usage("--resume needs the --vocab the run was started with"))?;
            (trainer, fixed)
        }
        None => {
            let (mut cfg, explicit_vocab) = load_config(g)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let v = match &fixed {
                Some(v) => v.clone(),
                None => load_pairs(data, None, cfg.max_len)?.1,
            };
            if !explicit_vocab {
                cfg.vocab_size = v.len();
            } else if cfg.vocab_size < v.len() {
                return Err(usage(format!(
                    "vocab_size {} is smaller than the vocabulary ({} tokens)",
                    cfg.vocab_size,
                    v.len()
                )));
            }
            validate(&cfg)?;
            (Trainer::new(cfg).map_err(usage)?, v)
        }
    };
    let (pairs, _) = load_pairs(data, Some(&vocab), trainer.config.max_len)?;
    if pairs.len() < trainer.config.batch_size {
        return Err(usage(format!(
            "{} usable pairs but batch_size is {}",
            pairs.len(),
            trainer.config.batch_size
        )));
    }
    if (trainer.step as usize) >= trainer.config.steps {
        return Err(usage(format!(
            "checkpoint is already at step {}; raise --steps",
            trainer.step
        )));
    }
    create_out(&g.out)?;
    let ckpt_path = g.out.join("checkpoint.mxc");
    let mut log = MetricsLog::default();
    trainer
        .run(&pairs, None, &mut log, &mut |t| t.checkpoint().save(&ckpt_path))
        .map_err(runtime)?;
    write_out(&g.out.join("metrics.csv"), &log.to_csv())?;
    write_out(&g.out.join("config.json"), &trainer.config.to_json())?;
    vocab.save(&g.out.join("vocab.txt")).map_err(runtime)?;
    if let Some(last) = log.rows.last() {
        println!(
            "step {}: total {:.4}, mlm {:.4}, align {}, koleo {}",
            last.step,
            last.total,
            last.mlm,
            last.align.map_or("-".into(), |v| format!("{v:.4}")),
            last.koleo.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    if !log.skipped.is_empty() {
        eprintln!("skipped {} non-finite steps: {:?}", log.skipped.len(), log.skipped);
    }
    Ok(())
}

struct LoadedModel {
    config: EncoderConfig,
    params: EncoderParams<Tensor<f32>>,
    pairs: Vec<ParallelPair>,
}

fn load_model(m: &ModelInput) -> Result<LoadedModel> {
    require_file(&m.checkpoint, "checkpoint")?;
    let vocab = load_vocab(&m.vocab)?;
    let ckpt = Checkpoint::load(&m.checkpoint).map_err(runtime)?;
    if vocab.len() > ckpt.config.vocab_size {
        return Err(usage(format!(
            "vocabulary has {} tokens but the checkpoint only {}",
            vocab.len(),
            ckpt.config.vocab_size
        )));
    }
    let (pairs, _) = load_pairs(&m.data, Some(&vocab), ckpt.config.max_len)?;
    Ok(LoadedModel {
        config: ckpt.config.encoder_config(),
        params: ckpt.model.encoder,
        pairs,
    })
}

enum MiningInput {
    Model(ModelInput),
    Files(PathBuf, PathBuf),
}

fn summary_row(name: &str, r: &MiningReport) -> String {
    format!(
        "{name},{},{},{},{},{},{}\n",
        r.error_rate,
        r.errors(),
        r.queries.len(),
        r.pool_size,
        r.hard_negative_errors,
        r.k
    )
}

const MINING_HEADER: &str = "metric,error_rate,errors,queries,pool_size,hard_negative_errors,k\n";

/// Embeds `per_target` perturbed copies of each target sentence.
fn hard_negatives(
    config: &EncoderConfig,
    params: &EncoderParams<Tensor<f32>>,
    pairs: &[ParallelPair],
    per_target: usize,
    pooling: Pooling,
    seed: u64,
) -> Result<EmbeddingSet> {
    let pool = target_pool(pairs, &config.specials);
    let first_id = pairs.iter().map(|p| p.id).max().unwrap_or(0) + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, ids) =
        hard_negative_rows(pairs, per_target, &pool, &config.specials, first_id, &mut rng).map_err(runtime)?;
    embed_sentences(config, params, &rows, ids, pooling, 64).map_err(runtime)
}

fn eval_mining(
    g: &Global,
    input: MiningInput,
    neg_emb: Option<&Path>,
    k: usize,
    pooling: Pooling,
    per_target: usize,
) -> Result<()> {
    if k == 0 {
        return Err(usage("--k must be positive"));
    }
    let (src, tgt, neg) = match input {
        MiningInput::Model(m) => {
            if neg_emb.is_some() {
                return Err(usage(
                    "--neg-emb goes with --src-emb/--tgt-emb; use --hard-negatives with a checkpoint",
                ));
            }
            let lm = load_model(&m)?;
            let inputs = embed_pairs(&lm.config, &lm.params, &lm.pairs, pooling).map_err(runtime)?;
            let neg = if per_target > 0 {
                let seed = g.seed.unwrap_or(0);
                Some(hard_negatives(
                    &lm.config, &lm.params, &lm.pairs, per_target, pooling, seed,
                )?)
            } else {
                None
            };
            (inputs.src, inputs.tgt, neg)
        }
        MiningInput::Files(s, t) => {
            if per_target > 0 {
                return Err(usage(
                    "--hard-negatives needs a checkpoint; pass --neg-emb with embedding files",
                ));
            }
            let load = |p: &Path, what: &str| -> Result<EmbeddingSet> {
                require_file(p, what)?;
                load_embeddings(p).map_err(|e| usage(format!("{what}: {e}")))
            };
            let neg = neg_emb.map(|p| load(p, "--neg-emb")).transpose()?;
            (load(&s, "--src-emb")?, load(&t, "--tgt-emb")?, neg)
        }
    };
    let gold: HashMap<u64, u64> = src.ids.iter().map(|&id| (id, id)).collect();
    let xsim = xsim_error(&src, &tgt, &gold, k).map_err(runtime)?;
    let xsimpp = neg
        .map(|n| xsimpp_error(&src, &tgt, &n, &gold, k))
        .transpose()
        .map_err(runtime)?;
    create_out(&g.out)?;
    write_out(&g.out.join("xsim.csv"), &xsim.to_csv())?;
    let mut summary = String::from(MINING_HEADER);
    summary.push_str(&summary_row("xsim", &xsim));
    println!(
        "xsim error: {:.2}% ({} / {})",
        100.0 * xsim.error_rate,
        xsim.errors(),
        xsim.queries.len()
    );
    if let Some(pp) = &xsimpp {
        write_out(&g.out.join("xsimpp.csv"), &pp.to_csv())?;
        summary.push_str(&summary_row("xsim++", pp));
        println!(
            "xsim++ error: {:.2}% ({} / {}, {} caused by hard negatives)",
            100.0 * pp.error_rate,
            pp.errors(),
            pp.queries.len(),
            pp.hard_negative_errors
        );
    }
    write_out(&g.out.join("mining_summary.csv"), &summary)
}

fn analyze_tokens(g: &Global, m: &ModelInput, sentences: usize, queries: usize, neighbors: usize) -> Result<()> {
    if neighbors == 0 || queries == 0 {
        return Err(usage("--queries and --neighbors must be positive"));
    }
    let lm = load_model(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed.unwrap_or(0));
    let report = token_nn_analysis(
        &lm.config, &lm.params, &lm.pairs, sentences, queries, neighbors, &mut rng,
    )
    .map_err(runtime)?;
    let mut detail = String::from(
        "query_pair,query_position,query_token,rank,neighbor_pair,neighbor_side,neighbor_position,neighbor_token,cosine,category\n",
    );
    for q in &report.queries {
        for (rank, n) in q.neighbors.iter().enumerate() {
            let _ = writeln!(
                detail,
                "{},{},{},{},{},{},{},{},{},{}",
                q.pair_id,
                q.position,
                q.token,
                rank + 1,
                n.pair_id,
                if n.side_b { "b" } else { "a" },
                n.position,
                n.token,
                n.cosine,
                serde_json::to_value(n.category).expect("json").as_str().unwrap_or("")
            );
        }
    }
    let counts = report.counts();
    let mut summary = String::from("category,percent,count\n");
    for (i, (name, pct)) in [
        ("translation", report.translation),
        ("same-sentence", report.same_sentence),
        ("same-language", report.same_language),
        ("other", report.other),
    ]
    .into_iter()
    .enumerate()
    {
        let _ = writeln!(summary, "{name},{pct},{}", counts[i]);
        println!("{name:>14}: {pct:6.2}%");
    }
    create_out(&g.out)?;
    write_out(&g.out.join("token_neighbors.csv"), &detail)?;
    write_out(&g.out.join("token_summary.csv"), &summary)
}

fn analyze_attention(g: &Global, m: &ModelInput, side: Side, exclude_specials: bool) -> Result<()> {
    let lm = load_model(m)?;
    let rows: Vec<Vec<u32>> = lm
        .pairs
        .iter()
        .map(|p| match side {
            Side::A => p.a.clone(),
            Side::B => p.b.clone(),
        })
        .collect();
    let report = attention_entropy(&lm.config, &lm.params, &rows, exclude_specials).map_err(runtime)?;
    let mut csv = String::from("pair_id,entropy,attended\n");
    for ((p, e), n) in lm.pairs.iter().zip(&report.entropies).zip(&report.attended) {
        let _ = writeln!(csv, "{},{e},{n}", p.id);
    }
    create_out(&g.out)?;
    write_out(&g.out.join("attention.csv"), &csv)?;
    write_out(
        &g.out.join("attention_summary.csv"),
        &format!(
            "sentences,exclude_specials,mean_entropy\n{},{},{}\n",
            report.entropies.len(),
            exclude_specials,
            report.mean_entropy
        ),
    )?;
    println!(
        "mean CLS attention entropy over {} sentences: {:.4} nats",
        report.entropies.len(),
        report.mean_entropy
    );
    Ok(())
}

fn export_emb(g: &Global, m: &ModelInput, pooling: Pooling) -> Result<()> {
    let lm = load_model(m)?;
    let inputs = embed_pairs(&lm.config, &lm.params, &lm.pairs, pooling).map_err(runtime)?;
    create_out(&g.out)?;
    export_embeddings(&inputs.src, &g.out.join("a.emb")).map_err(runtime)?;
    export_embeddings(&inputs.tgt, &g.out.join("b.emb")).map_err(runtime)?;
    println!("wrote {} × {} embeddings per side", inputs.src.len(), inputs.src.dim);
    Ok(())
}

/// Named modifications of the full objective.
pub const VARIANTS: &[&str] = &[
    "full",
    "no-token-grad",
    "clean-to-dirty",
    "non-symmetric",
    "no-alignment",
    "no-mlm",
    "no-koleo",
    "infonce",
];

/// Applies a named variant to `cfg`.
pub fn apply_variant(cfg: &mut TrainConfig, name: &str) -> std::result::Result<(), String> {
    match name {
        "full" => {}
        "no-token-grad" => cfg.flow.token_gradients = false,
        "clean-to-dirty" => cfg.flow.alignment_mode = AlignmentMode::CleanToDirty,
        "non-symmetric" => {
            cfg.flow.symmetric = false;
            cfg.flow.alignment_mode = AlignmentMode::CleanToDirty;
        }
        "no-alignment" => cfg.flow.alignment_mode = AlignmentMode::None,
        "no-mlm" => cfg.weights.beta = 0.0,
        "no-koleo" => cfg.weights.gamma = 0.0,
        "infonce" => cfg.flow.alignment_family = AlignmentFamily::Infonce,
        other => {
            return Err(format!(
                "unknown variant `{other}`; expected one of {}",
                VARIANTS.join(", ")
            ))
        }
    }
    Ok(())
}

struct AblateArgs {
    train: PathBuf,
    eval: PathBuf,
    vocab: Option<PathBuf>,
    ratio_grid: Vec<f64>,
    variants: Vec<String>,
    seeds: Vec<u64>,
    steps: Option<usize>,
    k: usize,
    hard_negatives: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn joined(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn ablate(g: &Global, a: &AblateArgs) -> Result<()> {
    let (base, explicit_vocab) = load_config(g)?;
    let seeds = if a.seeds.is_empty() {
        vec![base.seed]
    } else {
        a.seeds.clone()
    };
    let ratios = if a.ratio_grid.is_empty() {
        vec![base.masking.mask_ratio]
    } else {
        a.ratio_grid.clone()
    };
    if a.k == 0 {
        return Err(usage("--k must be positive"));
    }
    let vocab = match &a.vocab {
        Some(p) => load_vocab(p)?,
        None => load_pairs(&a.train, None, base.max_len)?.1,
    };
    let mut cells = Vec::new();
    for variant in &a.variants {
        for &ratio in &ratios {
            let mut cfg = base.clone();
            apply_variant(&mut cfg, variant).map_err(usage)?;
            cfg.masking.mask_ratio = ratio;
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            cfg.log_every = cfg.steps;
            if !explicit_vocab {
                cfg.vocab_size = vocab.len();
            }
            validate(&cfg).map_err(|e| usage(format!("cell {variant} @ {ratio}: {e}")))?;
            cells.push((variant.clone(), ratio, cfg));
        }
    }
    let (train_pairs, _) = load_pairs(&a.train, Some(&vocab), base.max_len)?;
    let (eval_pairs, _) = load_pairs(&a.eval, Some(&vocab), base.max_len)?;
    if train_pairs.len() < base.batch_size {
        return Err(usage(format!(
            "{} training pairs but batch_size is {}",
            train_pairs.len(),
            base.batch_size
        )));
    }
    if eval_pairs.len() <= a.k {
        return Err(usage(format!(
            "--k {} needs more than {} evaluation pairs",
            a.k,
            eval_pairs.len()
        )));
    }
    create_out(&g.out)?;
    let mut runs = String::from("cell,variant,mask_ratio,seed,steps,final_total,xsim,xsimpp,nn_distance\n");
    let mut summary = String::from(
        "cell,variant,mask_ratio,seeds,steps,xsim_mean,xsimpp_mean,nn_distance_mean,xsim_runs,xsimpp_runs\n",
    );
    for (cell, (variant, ratio, cfg)) in cells.iter().enumerate() {
        let (mut xs, mut xpp, mut nn) = (Vec::new(), Vec::new(), Vec::new());
        for &seed in &seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let (trainer, log) = train(&train_pairs, &cfg).map_err(runtime)?;
            let ec = cfg.encoder_config();
            let enc = &trainer.model.encoder;
            let inputs = embed_pairs(&ec, enc, &eval_pairs, Pooling::Cls).map_err(runtime)?;
            let x = xsim_error(&inputs.src, &inputs.tgt, &inputs.gold, a.k)
                .map_err(runtime)?
                .error_rate;
            let pp = if a.hard_negatives > 0 {
                let neg = hard_negatives(&ec, enc, &eval_pairs, a.hard_negatives, Pooling::Cls, seed)?;
                xsimpp_error(&inputs.src, &inputs.tgt, &neg, &inputs.gold, a.k)
                    .map_err(runtime)?
                    .error_rate
            } else {
                x
            };
            let d = mean_nn_distance(&inputs.src).map_err(runtime)?;
            let total = log.rows.last().map_or(f64::NAN, |r| r.total);
            let _ = writeln!(
                runs,
                "{cell},{variant},{ratio},{seed},{},{total},{x},{pp},{d}",
                cfg.steps
            );
            eprintln!("cell {cell} {variant} ratio {ratio} seed {seed}: xsim {x:.4} xsim++ {pp:.4}");
            xs.push(x);
            xpp.push(pp);
            nn.push(d);
        }
        let _ = writeln!(
            summary,
            "{cell},{variant},{ratio},{},{},{},{},{},{},{}",
            seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
            cfg.steps,
            mean(&xs),
            mean(&xpp),
            mean(&nn),
            joined(&xs),
            joined(&xpp)
        );
        write_out(&g.out.join("ablation_runs.csv"), &runs)?;
        write_out(&g.out.join("ablation.csv"), &summary)?;
        println!(
            "{variant:>15} ratio {ratio:.2}: xsim {:.2}%  xsim++ {:.2}%",
            100.0 * mean(&xs),
            100.0 * mean(&xpp)
        );
    }
    Ok(())
}

/// Small model used for the composed-loss check; loss settings come from `cfg`.
pub fn grad_check_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 8,
        ff_dim: 16,
        head_layers: 1,
        max_len: 8,
        vocab_size: SyntheticSpec {
            vocab_size: 10,
            ..SyntheticSpec::default()
        }
        .total_vocab(),
        init_std: 0.5,
        batch_size: 2,
        ..cfg.clone()
    }
}

fn grad_check_cmd(g: &Global) -> Result<()> {
    let (cfg, _) = load_config(g)?;
    let small = grad_check_config(&cfg);
    validate(&small)?;
    let suite = primitive_suite().map_err(runtime)?;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for e in &suite {
        match worst.iter_mut().find(|w| w.0 == e.primitive) {
            Some(w) => w.1 = w.1.max(e.max_rel_error),
            None => worst.push((e.primitive, e.max_rel_error)),
        }
    }
    let spec = SyntheticSpec {
        vocab_size: 10,
        min_len: 3,
        max_len: 6,
        ..SyntheticSpec::default()
    };
    let (pairs, _) = generate_synthetic(&spec, 2).map_err(runtime)?;
    let refs: Vec<&ParallelPair> = pairs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed.unwrap_or(cfg.seed));
    let batch = build_views(&refs, &small.masking, &small.encoder_config(), &mut rng).map_err(runtime)?;
    let composed = composed_grad_check(&small, &batch, 1e-5).map_err(runtime)?;
    let (worst_name, worst_composed) =
        composed.iter().fold(
            ("", 0.0f64),
            |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc },
        );

    let mut csv = String::from("check,max_rel_error\n");
    for (name, e) in &worst {
        println!("{name:>14}: {e:.3e}");
        let _ = writeln!(csv, "{name},{e}");
    }
    println!(
        "{:>14}: {worst_composed:.3e} (worst tensor {worst_name})",
        "composed loss"
    );
    let _ = writeln!(csv, "composed-loss,{worst_composed}");
    create_out(&g.out)?;
    write_out(&g.out.join("grad_check.csv"), &csv)?;
    let all = worst.iter().map(|w| w.1).fold(worst_composed, f64::max);
    if all < GRAD_CHECK_TOLERANCE {
        println!("all checks below {GRAD_CHECK_TOLERANCE:e}");
        Ok(())
    } else {
        Err(runtime(format!(
            "max relative error {all:.3e} exceeds {GRAD_CHECK_TOLERANCE:e}"
        )))
    }
}
